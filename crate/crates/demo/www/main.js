import init, { remap_curves, projection_demo, ost_roundtrip } from "./pkg/tomovam_demo.js";

const $ = (id) => document.getElementById(id);

function bindLabel(input) {
  const span = input.parentElement.querySelector("span");
  const show = () => { if (span) span.textContent = input.value; };
  input.addEventListener("input", show);
  show();
}

function drawImage(canvas, img) {
  const w = img.width, h = img.height, px = img.pixels();
  let lo = Infinity, hi = -Infinity;
  for (const v of px) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const span = hi > lo ? hi - lo : 1;
  const off = new OffscreenCanvas(w, h);
  const ctx = off.getContext("2d");
  const data = ctx.createImageData(w, h);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      // row 0 is the lowest y; flip so +y points up
      const v = Math.round(255 * (px[(h - 1 - y) * w + x] - lo) / span);
      const i = 4 * (y * w + x);
      data.data[i] = v; data.data[i + 1] = v; data.data[i + 2] = v; data.data[i + 3] = 255;
    }
  }
  ctx.putImageData(data, 0, 0);
  const c = canvas.getContext("2d");
  c.imageSmoothingEnabled = false;
  c.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function drawCurves() {
  const cam = $("rc-camera").checked;
  const rows = remap_curves(cam, +$("rc-nb").value, +$("rc-nr").value, +$("rc-tr").value, 150, 241);
  const c = $("curves").getContext("2d");
  const W = c.canvas.width, H = c.canvas.height;
  c.clearRect(0, 0, W, H);
  const n = rows.length / 5;
  const xmax = Math.abs(rows[0]) || 1;
  let dmax = 1e-9;
  for (let k = 0; k < n; k++) dmax = Math.max(dmax, Math.abs(rows[5 * k + 2]));
  const sx = (x) => W / 2 + (x / xmax) * (W / 2 - 10);
  const sy = (y, m) => H / 2 - (y / m) * (H / 2 - 10);
  const line = (col, m, color, dash) => {
    c.beginPath(); c.strokeStyle = color; c.setLineDash(dash);
    for (let k = 0; k < n; k++) {
      const X = sx(rows[5 * k]), Y = sy(rows[5 * k + col], m);
      k ? c.lineTo(X, Y) : c.moveTo(X, Y);
    }
    c.stroke();
  };
  c.strokeStyle = "#ccc"; c.setLineDash([]);
  c.beginPath(); c.moveTo(0, H / 2); c.lineTo(W, H / 2); c.moveTo(W / 2, 0); c.lineTo(W / 2, H); c.stroke();
  line(1, xmax, "#1565c0", []);
  line(3, xmax, "#90caf9", [4, 4]);
  line(2, dmax, "#c62828", []);
  line(4, dmax, "#ef9a9a", [4, 4]);
  let worst = 0;
  for (let k = 0; k < n; k++) worst = Math.max(worst, Math.abs(rows[5 * k + 1] - rows[5 * k + 3]));
  $("rc-note").textContent =
    `blue: virtual offset (dashed: ray trace); red: angular shift, peak ${dmax.toFixed(2)} deg; ` +
    `closed form vs trace max ${worst.toExponential(2)} mm`;
}

function drawDose() {
  try {
    const img = projection_demo($("pd-shape").value, +$("pd-stage").value, +$("pd-b").value, 96);
    drawImage($("dose"), img);
    $("pd-note").textContent = img.note;
  } catch (e) {
    $("pd-note").textContent = String(e);
  }
}

function runOst() {
  $("ost-note").textContent = "rendering...";
  setTimeout(() => {
    try {
      const img = ost_roundtrip(+$("ost-r").value, +$("ost-o").value, 1.53, +$("ost-s").value);
      drawImage($("ost"), img);
      $("ost-note").textContent = img.note;
    } catch (e) {
      $("ost-note").textContent = String(e);
    }
  }, 10);
}

await init();
$("status").textContent = "";
document.querySelectorAll("input[type=range]").forEach(bindLabel);
["rc-camera", "rc-nb", "rc-nr", "rc-tr"].forEach((id) => $(id).addEventListener("input", drawCurves));
["pd-shape", "pd-stage", "pd-b"].forEach((id) => $(id).addEventListener("change", drawDose));
$("ost-run").addEventListener("click", runOst);
drawCurves();
drawDose();
runOst();
