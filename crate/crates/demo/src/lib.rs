//! Browser bindings for three small views of the pipeline: refraction remap
//! curves, projection-stage dose maps and an OST frame round trip.

use wasm_bindgen::prelude::*;

use tomovam::grid::{SliceGrid, VoxelGrid};
use tomovam::optics::{self, OpticalConfig, Side};
use tomovam::ostrecon;
use tomovam::phantoms;
use tomovam::printsim::{self, CameraSetup, RaySource};
use tomovam::projgen::{self, ClipMode, SliceProjection, Stage};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Row-major image plus a few scalar readouts.
#[wasm_bindgen]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    note: String,
}

#[wasm_bindgen]
impl Image {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> Vec<f64> {
        self.pixels.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn note(&self) -> String {
        self.note.clone()
    }
}

fn image(a: &ndarray::Array2<f64>, note: String) -> Image {
    Image {
        width: a.ncols(),
        height: a.nrows(),
        pixels: a.iter().copied().collect(),
        note,
    }
}

fn config(n_blue: f64, n_red: f64, throw_ratio: f64, camera_distance_mm: f64) -> Result<OpticalConfig, JsValue> {
    let cfg = OpticalConfig {
        n_resin_blue: n_blue,
        n_resin_red: n_red,
        throw_ratio,
        camera_distance_mm,
        ..OpticalConfig::bpagda()
    };
    cfg.validate().map_err(js_err)?;
    Ok(cfg)
}

/// Columns `[x, x_v closed form, delta closed form, x_v traced, delta traced]`
/// for `samples` detector coordinates across 0.95 of the vial radius, flattened row by row.
#[wasm_bindgen]
pub fn remap_curves(
    camera: bool,
    n_blue: f64,
    n_red: f64,
    throw_ratio: f64,
    camera_distance_mm: f64,
    samples: usize,
) -> Result<Vec<f64>, JsValue> {
    let cfg = config(n_blue, n_red, throw_ratio, camera_distance_mm)?;
    let (side, source) = if camera {
        (Side::Camera, RaySource::Camera)
    } else {
        (Side::Projector, RaySource::Projector)
    };
    let samples = samples.clamp(2, 4000);
    let span = 0.95 * cfg.vial_radius_mm;
    let mut out = Vec::with_capacity(5 * samples);
    for k in 0..samples {
        let x = span * (-1.0 + 2.0 * k as f64 / (samples - 1) as f64);
        let m = optics::map_detector(x, side, &cfg).map_err(js_err)?;
        let c = printsim::trace_ray(x, source, &cfg).map_err(js_err)?;
        out.extend([x, m.x_virtual_mm, m.delta_deg, c.offset_mm, c.angle_deg]);
    }
    Ok(out)
}

/// Simulated single-slice dose of a test shape at a projection stage.
///
/// `shape`: `disk`, `boat` or `annulus`; `stage`: 0 raw, 1 background, 2 normalized.
#[wasm_bindgen]
pub fn projection_demo(shape: &str, stage: u8, background: f64, pixels: usize) -> Result<Image, JsValue> {
    let n = pixels.clamp(16, 160);
    let cfg = OpticalConfig::bpagda();
    let reach = cfg.addressable_radius(Side::Projector);
    let grid = SliceGrid::square(n, 2.0 * reach / n as f64);
    let binary = match shape {
        "disk" => phantoms::binary_slice(&grid, |x, y| x.hypot(y) <= 4.0),
        "boat" => phantoms::binary_slice(&grid, |x, y| phantoms::in_boat(x, y, 12.0)),
        "annulus" => phantoms::binary_slice(&grid, |x, y| phantoms::in_annulus(x, y, 2.0, 5.0)),
        other => return Err(js_err(format!("unknown shape {other:?}"))),
    };
    let stage = match stage {
        0 => Stage::Raw,
        1 => Stage::Background,
        _ => Stage::Normalized,
    };
    let proj = SliceProjection::new(grid, reach, 2.0, ClipMode::Literal);
    let dose = projgen::stage_dose(&binary, background, stage, &proj).map_err(js_err)?;
    let part = binary.mapv(|v| v > 0.5);
    let region = ndarray::Array2::from_shape_fn((n, n), |(iy, ix)| grid.x(ix).hypot(grid.y(iy)) <= reach);
    let sep = projgen::separation(&dose, &part, &region);
    Ok(image(&dose, format!("separation (min in - max out) / mean in = {sep:.3}")))
}

/// Renders darkfield frames of a scattering disk pair through the refracting vial,
/// then reconstructs the mid-plane slice.
#[wasm_bindgen]
pub fn ost_roundtrip(radius_mm: f64, offset_mm: f64, n_red: f64, angle_step_deg: f64) -> Result<Image, JsValue> {
    let cfg = OpticalConfig {
        n_resin_red: n_red,
        ..OpticalConfig::bpagda()
    };
    cfg.validate().map_err(js_err)?;
    let h = 0.2;
    let mut g = VoxelGrid::centered([100, 100, 3], [h; 3]);
    let geom = g.clone();
    for ((k, iy, ix), v) in g.values.indexed_iter_mut() {
        let p = geom.position(ix, iy, k);
        let a = (p[0] - offset_mm).hypot(p[1]) <= radius_mm;
        let b = (p[0] + offset_mm).hypot(p[1] - 2.0) <= 0.5 * radius_mm;
        *v = f32::from(u8::from(a || b));
    }
    let step = angle_step_deg.clamp(0.5, 20.0);
    let count = (360.0 / step).round() as usize;
    let step = 360.0 / count as f64;
    let angles: Vec<f64> = (0..count).map(|j| j as f64 * step).collect();
    let frames = printsim::render_frames(&g, &cfg, &angles, &CameraSetup::default()).map_err(js_err)?;
    let vol = ostrecon::reconstruct_volume(&frames, &cfg).map_err(js_err)?;
    let mid = (0..vol.grid.dims()[2])
        .min_by(|&a, &b| vol.grid.z(a).abs().total_cmp(&vol.grid.z(b).abs()))
        .unwrap_or(0);
    Ok(image(
        &vol.grid.slice_f64(mid),
        format!("{} frames, {:.3} mm voxels", frames.len(), vol.voxel_size_mm),
    ))
}
