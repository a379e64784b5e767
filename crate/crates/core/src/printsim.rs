//! Virtual printer and scatter camera built on a numeric Snell trace.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::grid::{ImageStack, VoxelGrid};
use crate::mesh::TriMesh;
use crate::optics::OpticalConfig;
use crate::projgen::{self, PatternOptions, PatternStack};

/// Which device launches a traced ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaySource {
    Projector,
    Camera,
}

/// Straight in-vial chord of one refracted ray, in the frame of rotation angle 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chord {
    /// Signed impact parameter `p . n` with `n = (cos a, sin a)`.
    pub offset_mm: f64,
    /// Chord orientation `a`; the ray travels along `(-sin a, cos a)`.
    pub angle_deg: f64,
    pub entry_point: [f64; 2],
    pub exit_point: [f64; 2],
    pub in_resin_length_mm: f64,
}

/// Traces the ray through detector coordinate `x_mm` across the vial circle.
///
/// The incoming ray passes through `(x_mm, 0)` travelling mostly along `+y`, tilted by
/// `atan(x / (T_r W pixel))` for the projector or `x / D` for the camera.
pub fn trace_ray(x_mm: f64, source: RaySource, cfg: &OpticalConfig) -> Result<Chord> {
    cfg.validate()?;
    let r = cfg.vial_radius_mm;
    let (psi, n2) = match source {
        RaySource::Projector => (
            (x_mm / (cfg.throw_ratio * cfg.projector_width_px * cfg.projector_pixel_mm)).atan(),
            cfg.n_resin_blue,
        ),
        RaySource::Camera => (x_mm / cfg.camera_distance_mm, cfg.n_resin_red),
    };
    let d = [psi.sin(), psi.cos()];
    let o = [x_mm, 0.0];
    // |o + t d|^2 = r^2, nearer root
    let b = o[0] * d[0] + o[1] * d[1];
    let c = o[0] * o[0] + o[1] * o[1] - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return Err(Error::RayMissesVial { coord_mm: x_mm });
    }
    let t = -b - disc.sqrt();
    let p = [o[0] + t * d[0], o[1] + t * d[1]];
    let normal = [p[0] / r, p[1] / r];
    let eta = cfg.n_outside / n2;
    let cos_i = -(normal[0] * d[0] + normal[1] * d[1]);
    let k = 1.0 - eta * eta * (1.0 - cos_i * cos_i);
    assert!(k >= 0.0, "total internal reflection entering a denser medium");
    let f = eta * cos_i - k.sqrt();
    let mut dir = [eta * d[0] + f * normal[0], eta * d[1] + f * normal[1]];
    let len = dir[0].hypot(dir[1]);
    dir = [dir[0] / len, dir[1] / len];
    let a = (-dir[0]).atan2(dir[1]);
    let offset = p[0] * a.cos() + p[1] * a.sin();
    let chord = 2.0 * (r * r - offset * offset).max(0.0).sqrt();
    Ok(Chord {
        offset_mm: offset,
        angle_deg: a.to_degrees(),
        entry_point: p,
        exit_point: [p[0] + chord * dir[0], p[1] + chord * dir[1]],
        in_resin_length_mm: chord,
    })
}

/// Height inside the vial, on the axis plane, reached by a ray launched at height
/// `h_mm` in the axis plane of a pupil `throw_mm` away (paraxial vertical trace).
pub fn vertical_trace(h_mm: f64, throw_mm: f64, r_mm: f64, n_ratio: f64) -> f64 {
    if !throw_mm.is_finite() {
        return h_mm;
    }
    let phi1 = (h_mm / throw_mm).atan();
    let phi2 = (n_ratio * phi1.sin()).asin();
    (throw_mm - r_mm) * phi1.tan() + r_mm * phi2.tan()
}

/// Inverse of [`vertical_trace`] by bisection.
pub fn vertical_trace_inverse(z_mm: f64, throw_mm: f64, r_mm: f64, n_ratio: f64) -> f64 {
    if !throw_mm.is_finite() || z_mm == 0.0 {
        return z_mm;
    }
    let f = |h: f64| vertical_trace(h, throw_mm, r_mm, n_ratio) - z_mm;
    let (mut lo, mut hi) = (-2.0 * z_mm.abs(), 2.0 * z_mm.abs());
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    while f(lo) > 0.0 {
        lo *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Projector and camera timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub rotation_speed_deg_s: f64,
    pub projector_fps: f64,
    pub camera_fps: f64,
    pub rotations: usize,
    /// Projector switched off after this many rotations.
    pub stop_rotation: Option<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            rotation_speed_deg_s: 20.0,
            projector_fps: 32.0,
            camera_fps: 10.0,
            rotations: 20,
            stop_rotation: Some(17),
        }
    }
}

fn whole(x: f64, what: &str) -> Result<usize> {
    let n = x.round();
    if n < 1.0 || (x - n).abs() > 1e-9 * x.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "{what} per rotation must be a whole number, got {x}"
        )));
    }
    Ok(n as usize)
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.rotation_speed_deg_s, "rotation speed"),
            (self.projector_fps, "projector frame rate"),
            (self.camera_fps, "camera frame rate"),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if self.rotations == 0 {
            return Err(Error::InvalidInput("need at least one rotation".into()));
        }
        self.projector_events()?;
        self.camera_frames()?;
        Ok(())
    }

    /// Projector refreshes per rotation.
    pub fn projector_events(&self) -> Result<usize> {
        whole(360.0 * self.projector_fps / self.rotation_speed_deg_s, "projector frames")
    }

    /// Camera exposures per rotation.
    pub fn camera_frames(&self) -> Result<usize> {
        whole(360.0 * self.camera_fps / self.rotation_speed_deg_s, "camera frames")
    }

    pub fn camera_step_deg(&self) -> f64 {
        self.rotation_speed_deg_s / self.camera_fps
    }

    pub fn rotation_seconds(&self) -> f64 {
        360.0 / self.rotation_speed_deg_s
    }

    /// Rotations of exposure delivered after `r` rotations.
    pub fn exposed_rotations(&self, r: usize) -> usize {
        self.stop_rotation.map_or(r, |s| r.min(s))
    }

    /// Pattern shown when the stage reads `angle_deg`.
    pub fn pattern_index(angle_deg: f64, pattern_step_deg: f64, count: usize) -> usize {
        ((angle_deg / pattern_step_deg + 1e-9).floor() as i64).rem_euclid(count as i64) as usize
    }
}

/// In-plane pixel layout of a voxel grid with square pixels.
#[derive(Clone, Copy, Debug)]
struct Plane {
    nx: usize,
    ny: usize,
    h: f64,
    lo: [f64; 2],
}

impl Plane {
    fn of(grid: &VoxelGrid) -> Result<Self> {
        let [nx, ny, _] = grid.dims();
        let [sx, sy, _] = grid.spacing_mm;
        if (sx - sy).abs() > 1e-9 * sx {
            return Err(Error::InvalidInput("in-plane voxels must be square".into()));
        }
        Ok(Self {
            nx,
            ny,
            h: sx,
            lo: [grid.origin_mm[0] - 0.5 * sx, grid.origin_mm[1] - 0.5 * sx],
        })
    }

    fn area(&self) -> f64 {
        self.h * self.h
    }

    /// Visits the pixels crossed by `p + t d`, `t` in `[0, len]`, with their `t` interval.
    fn traverse(&self, p: [f64; 2], d: [f64; 2], len: f64, mut f: impl FnMut(usize, f64, f64)) {
        let n = [self.nx, self.ny];
        let (mut t0, mut t1) = (0.0f64, len);
        for a in 0..2 {
            let lo = self.lo[a];
            let hi = lo + n[a] as f64 * self.h;
            if d[a].abs() < 1e-15 {
                if p[a] < lo || p[a] >= hi {
                    return;
                }
            } else {
                let ta = (lo - p[a]) / d[a];
                let tb = (hi - p[a]) / d[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 >= t1 {
            return;
        }
        let tm = 0.5 * (t0 + t1.min(t0 + 0.5 * self.h));
        let mut cell = [0isize; 2];
        let mut step = [0isize; 2];
        let mut t_next = [f64::INFINITY; 2];
        let mut t_delta = [f64::INFINITY; 2];
        for a in 0..2 {
            let c = ((p[a] + d[a] * tm - self.lo[a]) / self.h).floor() as isize;
            cell[a] = c.clamp(0, n[a] as isize - 1);
            if d[a] > 1e-15 {
                step[a] = 1;
                t_next[a] = (self.lo[a] + (cell[a] + 1) as f64 * self.h - p[a]) / d[a];
                t_delta[a] = self.h / d[a];
            } else if d[a] < -1e-15 {
                step[a] = -1;
                t_next[a] = (self.lo[a] + cell[a] as f64 * self.h - p[a]) / d[a];
                t_delta[a] = -self.h / d[a];
            }
        }
        let mut t = t0;
        loop {
            let a = if t_next[0] < t_next[1] { 0 } else { 1 };
            let tn = t_next[a].min(t1);
            if tn > t {
                f(cell[1] as usize * self.nx + cell[0] as usize, t, tn);
            }
            if tn >= t1 {
                break;
            }
            t = tn;
            cell[a] += step[a];
            t_next[a] += t_delta[a];
            if cell[a] < 0 || cell[a] >= n[a] as isize {
                break;
            }
        }
    }
}

/// `integral_a^b exp(-mu t) dt`.
#[inline]
fn beer_lambert(mu: f64, a: f64, b: f64) -> f64 {
    if mu == 0.0 {
        b - a
    } else {
        (-mu * a).exp() * -(-mu * (b - a)).exp_m1() / mu
    }
}

/// A traced ray: lab-frame chord plus the relative power it carries.
#[derive(Clone, Copy, Debug)]
struct Tube {
    column: usize,
    entry: [f64; 2],
    dir: [f64; 2],
    length: f64,
    weight: f64,
}

/// Sub-rays across each detector column, `per_column` of them at equal spacing.
fn trace_columns(
    cfg: &OpticalConfig,
    source: RaySource,
    n_cols: usize,
    col_pitch: f64,
    col_center: f64,
    per_column: usize,
) -> Vec<Tube> {
    let per_column = per_column.max(1);
    let mut out = Vec::new();
    for j in 0..n_cols {
        let xc = (j as f64 - col_center) * col_pitch;
        for s in 0..per_column {
            let x = xc + ((s as f64 + 0.5) / per_column as f64 - 0.5) * col_pitch;
            if let Ok(c) = trace_ray(x, source, cfg) {
                if c.in_resin_length_mm <= 0.0 {
                    continue;
                }
                let len = c.in_resin_length_mm;
                out.push(Tube {
                    column: j,
                    entry: c.entry_point,
                    dir: [
                        (c.exit_point[0] - c.entry_point[0]) / len,
                        (c.exit_point[1] - c.entry_point[1]) / len,
                    ],
                    length: len,
                    weight: col_pitch / per_column as f64,
                });
            }
        }
    }
    out
}

#[inline]
fn rotate(p: [f64; 2], deg: f64) -> [f64; 2] {
    let (s, c) = deg.to_radians().sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Maps each voxel layer to a fractional image row through the vertical trace.
fn layer_rows(
    grid: &VoxelGrid,
    rows: usize,
    row_pitch: f64,
    row_center: f64,
    throw_mm: f64,
    cfg: &OpticalConfig,
    n_resin: f64,
) -> Vec<Option<(usize, f32)>> {
    let nz = grid.dims()[2];
    (0..nz)
        .map(|k| {
            let h = vertical_trace_inverse(grid.z(k), throw_mm, cfg.vial_radius_mm, cfg.n_outside / n_resin);
            let f = h / row_pitch + row_center;
            if f < 0.0 || f > (rows - 1) as f64 {
                return None;
            }
            let r0 = (f.floor() as usize).min(rows.saturating_sub(2));
            Some((r0, (f - r0 as f64) as f32))
        })
        .collect()
}

fn check_patterns(p: &PatternStack) -> Result<()> {
    p.frames.validate()?;
    let n = p.frames.len();
    if n == 0 || !(p.angle_step_deg > 0.0) {
        return Err(Error::InvalidInput("empty pattern stack".into()));
    }
    if (n as f64 * p.angle_step_deg - 360.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "{n} patterns at {}° do not cover one rotation",
            p.angle_step_deg
        )));
    }
    let misplaced = p
        .frames
        .angles_deg
        .iter()
        .enumerate()
        .any(|(k, a)| (a - p.frames.angles_deg[0] - k as f64 * p.angle_step_deg).abs() > 1e-6);
    if misplaced {
        return Err(Error::InvalidInput("pattern angles do not match the angle step".into()));
    }
    Ok(())
}

/// Dose deposited during one full rotation, attenuated along each traced projector ray.
pub fn rotation_dose(
    patterns: &PatternStack,
    cfg: &OpticalConfig,
    schedule: &Schedule,
    template: &VoxelGrid,
) -> Result<VoxelGrid> {
    cfg.validate()?;
    schedule.validate()?;
    check_patterns(patterns)?;
    let plane = Plane::of(template)?;
    let [nx, ny, nz] = template.dims();
    let frames = &patterns.frames;
    let (rows, cols) = frames.frame_dims();
    let per_column = (frames.col_pitch_mm / cfg.projector_pixel_mm).round().max(1.0) as usize;
    let tubes = trace_columns(cfg, RaySource::Projector, cols, frames.col_pitch_mm, frames.col_center, per_column);
    let layers = layer_rows(
        template,
        rows,
        frames.row_pitch_mm,
        frames.row_center,
        cfg.throw_distance_mm(),
        cfg,
        cfg.n_resin_blue,
    );
    let n_events = schedule.projector_events()?;
    let dt = 1.0 / schedule.projector_fps;
    let scale = dt / plane.area();
    let mu = cfg.attenuation_mu_a;
    let event_step = 360.0 / n_events as f64;
    let first = frames.angles_deg[0];

    let chunks = rayon::current_num_threads().max(1);
    let per_chunk = n_events.div_ceil(chunks);
    let buf = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut buf = vec![0.0f32; nx * ny * nz];
            let mut column = vec![0.0f32; cols * nz];
            let mut live = vec![false; cols];
            for j in c * per_chunk..((c + 1) * per_chunk).min(n_events) {
                let theta = j as f64 * event_step;
                let idx = Schedule::pattern_index(theta - first, patterns.angle_step_deg, frames.len());
                let frame = &frames.frames[idx];
                for (col, alive) in live.iter_mut().enumerate() {
                    let dst = &mut column[col * nz..(col + 1) * nz];
                    *alive = false;
                    for (v, layer) in dst.iter_mut().zip(&layers) {
                        *v = match *layer {
                            Some((r0, w)) => {
                                let a = frame[[r0, col]];
                                let b = frame[[(r0 + 1).min(rows - 1), col]];
                                a + w * (b - a)
                            }
                            None => 0.0,
                        };
                        *alive |= *v != 0.0;
                    }
                }
                for tube in &tubes {
                    if !live[tube.column] {
                        continue;
                    }
                    let src = &column[tube.column * nz..(tube.column + 1) * nz];
                    let p = rotate(tube.entry, theta);
                    let d = rotate(tube.dir, theta);
                    plane.traverse(p, d, tube.length, |pix, ta, tb| {
                        let w = (tube.weight * scale * beer_lambert(mu, ta, tb)) as f32;
                        let dst = &mut buf[pix * nz..(pix + 1) * nz];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += w * v;
                        }
                    });
                }
            }
            buf
        })
        .reduce(
            || vec![0.0f32; nx * ny * nz],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let mut out = VoxelGrid::zeros(template.dims(), template.spacing_mm, template.origin_mm);
    for ((k, iy, ix), v) in out.values.indexed_iter_mut() {
        *v = buf[(iy * nx + ix) * nz + k];
    }
    Ok(out)
}

/// Cumulative dose after each rotation `1..=rotations`.
pub fn accumulate_dose(
    patterns: &PatternStack,
    cfg: &OpticalConfig,
    schedule: &Schedule,
    template: &VoxelGrid,
) -> Result<Vec<VoxelGrid>> {
    let d1 = rotation_dose(patterns, cfg, schedule, template)?;
    Ok((1..=schedule.rotations)
        .map(|r| scaled_grid(&d1, schedule.exposed_rotations(r) as f32))
        .collect())
}

fn scaled_grid(g: &VoxelGrid, k: f32) -> VoxelGrid {
    let mut out = g.clone();
    out.values.mapv_inplace(|v| v * k);
    out
}

/// Scatter density from dose: 0 below `D_gel (1 - w)`, 1 above `D_gel (1 + w)`, linear between.
pub fn gel_field(dose: &VoxelGrid, d_gel: f64, ramp_width_frac: f64) -> Result<VoxelGrid> {
    if !(d_gel > 0.0 && d_gel.is_finite()) {
        return Err(Error::InvalidInput(format!("gel threshold must be positive, got {d_gel}")));
    }
    if !(ramp_width_frac >= 0.0) {
        return Err(Error::InvalidInput("ramp width must be non-negative".into()));
    }
    let lo = d_gel * (1.0 - ramp_width_frac);
    let hi = d_gel * (1.0 + ramp_width_frac);
    let mut out = dose.clone();
    out.values.mapv_inplace(|v| {
        let v = f64::from(v);
        if ramp_width_frac == 0.0 {
            f32::from(u8::from(v >= d_gel))
        } else {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0) as f32
        }
    });
    Ok(out)
}

/// Scaled-Poisson frame noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameNoise {
    /// Expected photon count per unit frame value.
    pub counts_per_unit: f64,
    pub seed: u64,
}

/// Camera readout options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSetup {
    /// Native pixels summed per output pixel along each axis.
    pub binning: usize,
    pub noise: Option<FrameNoise>,
}

impl Default for CameraSetup {
    fn default() -> Self {
        Self {
            binning: 4,
            noise: None,
        }
    }
}

/// Darkfield frames: scatter density integrated along traced camera rays.
///
/// Frames cover the vial width and the grid's height seen through the vial wall.
pub fn render_frames(
    scatter: &VoxelGrid,
    cfg: &OpticalConfig,
    angles_deg: &[f64],
    camera: &CameraSetup,
) -> Result<ImageStack> {
    cfg.validate()?;
    scatter.validate()?;
    if angles_deg.len() < 2 {
        return Err(Error::InsufficientCoverage { span_deg: 0.0 });
    }
    let step = angles_deg[1] - angles_deg[0];
    let span = angles_deg[angles_deg.len() - 1] - angles_deg[0] + step;
    if span < 360.0 - 1e-6 {
        return Err(Error::InsufficientCoverage { span_deg: span });
    }
    let plane = Plane::of(scatter)?;
    let [nx, ny, nz] = scatter.dims();
    let b = camera.binning.max(1);
    let pitch = cfg.camera_pixel_mm * b as f64;
    let r = cfg.vial_radius_mm;
    let throw = cfg.camera_distance_mm;
    let n_ratio = cfg.n_outside / cfg.n_resin_red;
    let half_w = r * 1.02;
    let cols = 2 * (half_w / pitch).ceil() as usize + 1;
    let (zlo, zhi) = (scatter.z(0), scatter.z(nz - 1));
    let y_max = vertical_trace_inverse(zlo.abs().max(zhi.abs()), throw, r, n_ratio);
    let rows = 2 * (y_max / pitch).ceil() as usize + 1;
    let mut stack = ImageStack::new(rows, cols, angles_deg.to_vec(), pitch, pitch);
    let tubes = trace_columns(cfg, RaySource::Camera, cols, pitch, stack.col_center, b);

    // sub-row heights mapped into fractional layers
    let dz = scatter.spacing_mm[2];
    let sub_rows: Vec<Vec<(usize, f32)>> = (0..rows)
        .map(|row| {
            (0..b)
                .filter_map(|s| {
                    let y = stack.row_y(row) + ((s as f64 + 0.5) / b as f64 - 0.5) * pitch;
                    let z = vertical_trace(y, throw, r, n_ratio);
                    let f = (z - zlo) / dz;
                    if f < -0.5 || f > nz as f64 - 0.5 {
                        return None;
                    }
                    let f = f.clamp(0.0, (nz - 1) as f64);
                    let k0 = (f.floor() as usize).min(nz.saturating_sub(2));
                    Some((k0, (f - k0 as f64) as f32))
                })
                .collect()
        })
        .collect();

    let mut layered = vec![0.0f32; nx * ny * nz];
    for ((k, iy, ix), &v) in scatter.values.indexed_iter() {
        layered[(iy * nx + ix) * nz + k] = v;
    }
    let frames: Vec<Array2<f32>> = angles_deg
        .par_iter()
        .enumerate()
        .map(|(fi, &phi)| {
            let mut profile = vec![0.0f32; cols * nz];
            for tube in &tubes {
                let dst = &mut profile[tube.column * nz..(tube.column + 1) * nz];
                let p = rotate(tube.entry, phi);
                let d = rotate(tube.dir, phi);
                let w = (tube.weight / pitch) as f32;
                plane.traverse(p, d, tube.length, |pix, ta, tb| {
                    let src = &layered[pix * nz..(pix + 1) * nz];
                    let l = w * (tb - ta) as f32;
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += l * v;
                    }
                });
            }
            let mut frame = Array2::<f32>::zeros((rows, cols));
            for ((row, col), v) in frame.indexed_iter_mut() {
                let prof = &profile[col * nz..(col + 1) * nz];
                let acc: f32 = sub_rows[row]
                    .iter()
                    .map(|&(k0, w)| {
                        let a = prof[k0];
                        let b = prof[(k0 + 1).min(nz - 1)];
                        a + w * (b - a)
                    })
                    .sum();
                *v = acc / b as f32;
            }
            if let Some(noise) = camera.noise {
                let mut rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_add((fi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
                frame.mapv_inplace(|v| {
                    let lambda = f64::from(v) * noise.counts_per_unit;
                    if lambda <= 0.0 {
                        return 0.0;
                    }
                    let count: f64 = Poisson::new(lambda).map(|p| p.sample(&mut rng)).unwrap_or(lambda);
                    (count / noise.counts_per_unit) as f32
                });
            }
            frame
        })
        .collect();
    stack.frames = frames;
    Ok(stack)
}

/// How the gelation dose is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GelThreshold {
    /// Fixed dose.
    Absolute(f64),
    /// Dose at which the least exposed part voxel gels after this many rotations.
    AtRotation(f64),
}

/// Resolves a [`GelThreshold`] against one rotation's dose and the design mask.
pub fn resolve_gel_threshold(
    threshold: GelThreshold,
    rotation_dose: &VoxelGrid,
    part: &VoxelGrid,
) -> Result<f64> {
    match threshold {
        GelThreshold::Absolute(d) => Ok(d),
        GelThreshold::AtRotation(k) => {
            let least = rotation_dose
                .values
                .iter()
                .zip(part.values.iter())
                .filter(|(_, &p)| p > 0.5)
                .map(|(&d, _)| d as f64)
                .fold(f64::INFINITY, f64::min);
            if !least.is_finite() {
                return Err(Error::Degenerate("part mask is empty".into()));
            }
            if !(least > 0.0) {
                return Err(Error::Degenerate("part voxels receive no dose".into()));
            }
            Ok(k * least)
        }
    }
}

/// Which rotations get camera frames.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderRotations {
    #[default]
    All,
    Last,
    List(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionOptions {
    pub schedule: Schedule,
    /// Pattern generation; its grid also sets the dose grid.
    pub patterns: PatternOptions,
    pub gel_threshold: GelThreshold,
    pub ramp_width_frac: f64,
    pub camera: CameraSetup,
    pub render: RenderRotations,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            patterns: PatternOptions::default(),
            gel_threshold: GelThreshold::AtRotation(17.0),
            ramp_width_frac: 0.05,
            camera: CameraSetup::default(),
            render: RenderRotations::All,
        }
    }
}

/// A simulated print with its ground truth.
#[derive(Clone, Debug)]
pub struct PrintSession {
    pub cfg: OpticalConfig,
    pub schedule: Schedule,
    pub patterns: PatternStack,
    /// Design geometry in vial coordinates.
    pub part: VoxelGrid,
    /// Dose from one rotation; snapshot `r` is `min(r, stop) x` this.
    pub rotation_dose: VoxelGrid,
    pub d_gel: f64,
    pub ramp_width_frac: f64,
    /// Frames of every rendered rotation; rotation `r` spans `[360 (r-1), 360 r)`.
    pub frames: ImageStack,
    pub rendered_rotations: Vec<usize>,
}

impl PrintSession {
    /// Cumulative dose after `r` rotations.
    pub fn dose_snapshot(&self, r: usize) -> VoxelGrid {
        scaled_grid(&self.rotation_dose, self.schedule.exposed_rotations(r) as f32)
    }

    pub fn dose_snapshots(&self) -> Vec<VoxelGrid> {
        (1..=self.schedule.rotations).map(|r| self.dose_snapshot(r)).collect()
    }

    pub fn scatter(&self, r: usize) -> VoxelGrid {
        gel_field(&self.dose_snapshot(r), self.d_gel, self.ramp_width_frac)
            .expect("validated when the session was built")
    }

    /// Binary gel (scatter at least one half) after `r` rotations.
    pub fn truth_gel(&self, r: usize) -> VoxelGrid {
        let mut g = self.scatter(r);
        g.values.mapv_inplace(|v| f32::from(u8::from(v >= 0.5)));
        g
    }

    pub fn truth_gels(&self) -> Vec<VoxelGrid> {
        (1..=self.schedule.rotations).map(|r| self.truth_gel(r)).collect()
    }

    /// Frames captured during rotation `r`.
    pub fn frames_for_rotation(&self, r: usize) -> ImageStack {
        let lo = 360.0 * (r as f64 - 1.0);
        self.frames.window(lo, lo + 360.0)
    }

    pub fn final_rotation(&self) -> usize {
        self.schedule.rotations
    }
}

/// Prints precomputed patterns and records the camera view.
pub fn run_session_with_patterns(
    patterns: PatternStack,
    part: VoxelGrid,
    cfg: &OpticalConfig,
    opts: &SessionOptions,
) -> Result<PrintSession> {
    opts.schedule.validate().stage("schedule")?;
    let rotation_dose = rotation_dose(&patterns, cfg, &opts.schedule, &part).stage("dose")?;
    let d_gel = resolve_gel_threshold(opts.gel_threshold, &rotation_dose, &part).stage("gel")?;
    gel_field(&rotation_dose, d_gel, opts.ramp_width_frac).stage("gel")?;
    let mut session = PrintSession {
        cfg: cfg.clone(),
        schedule: opts.schedule.clone(),
        patterns,
        part,
        rotation_dose,
        d_gel,
        ramp_width_frac: opts.ramp_width_frac,
        frames: ImageStack::new(0, 0, Vec::new(), 1.0, 1.0),
        rendered_rotations: Vec::new(),
    };
    let n = opts.schedule.rotations;
    let mut wanted: Vec<usize> = match &opts.render {
        RenderRotations::All => (1..=n).collect(),
        RenderRotations::Last => vec![n],
        RenderRotations::List(v) => v.iter().copied().filter(|&r| (1..=n).contains(&r)).collect(),
    };
    wanted.sort_unstable();
    wanted.dedup();
    let step = opts.schedule.camera_step_deg();
    let per_turn = opts.schedule.camera_frames().stage("schedule")?;
    let mut frames: Option<ImageStack> = None;
    let mut last: Option<(usize, ImageStack)> = None;
    for &r in &wanted {
        let angles: Vec<f64> = (0..per_turn).map(|j| 360.0 * (r - 1) as f64 + j as f64 * step).collect();
        let exposed = opts.schedule.exposed_rotations(r);
        let turn = match &last {
            Some((e, prev)) if *e == exposed => ImageStack {
                angles_deg: angles,
                ..prev.clone()
            },
            _ => render_frames(&session.scatter(r), cfg, &angles, &opts.camera).stage("render")?,
        };
        last = Some((exposed, turn.clone()));
        frames = Some(match frames {
            None => turn,
            Some(mut all) => {
                all.frames.extend(turn.frames);
                all.angles_deg.extend(turn.angles_deg);
                all
            }
        });
    }
    if let Some(f) = frames {
        session.frames = f;
    }
    session.rendered_rotations = wanted;
    Ok(session)
}

/// Full virtual print: patterns, dose, gelation and camera frames.
pub fn run_session(mesh: &TriMesh, cfg: &OpticalConfig, opts: &SessionOptions) -> Result<PrintSession> {
    let patterns = projgen::compute_patterns(mesh, cfg, &opts.patterns)?;
    let part = projgen::slice_mesh(mesh, &opts.patterns.template(), 1.0).stage("truth")?;
    run_session_with_patterns(patterns, part, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axial_chord_passes_centre() {
        let c = trace_ray(0.0, RaySource::Projector, &OpticalConfig::bpagda()).unwrap();
        assert_eq!(c.offset_mm, 0.0);
        assert_eq!(c.angle_deg, 0.0);
        assert!((c.in_resin_length_mm - 24.8).abs() < 1e-12);
        assert!((c.entry_point[1] + 12.4).abs() < 1e-12);
    }

    #[test]
    fn matched_index_does_not_bend() {
        let cfg = OpticalConfig {
            n_resin_blue: 1.0,
            n_resin_red: 1.0,
            ..OpticalConfig::bpagda()
        };
        for src in [RaySource::Projector, RaySource::Camera] {
            let c = trace_ray(5.0, src, &cfg).unwrap();
            let psi = match src {
                RaySource::Projector => (5.0 / cfg.throw_distance_mm()).atan(),
                RaySource::Camera => 5.0 / cfg.camera_distance_mm,
            };
            assert!((c.angle_deg.to_radians() + psi).abs() < 1e-12);
            // impact parameter of the straight line through (5, 0)
            assert!((c.offset_mm - 5.0 * psi.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn chord_endpoints_on_circle() {
        let cfg = OpticalConfig::dudma();
        let c = trace_ray(-9.0, RaySource::Camera, &cfg).unwrap();
        for p in [c.entry_point, c.exit_point] {
            assert!((p[0].hypot(p[1]) - cfg.vial_radius_mm).abs() < 1e-9);
        }
        assert!(trace_ray(20.0, RaySource::Camera, &cfg).is_err());
    }

    fn uniform_patterns(cfg: &OpticalConfig, rows: usize, row_pitch: f64, step: f64, value: f32) -> PatternStack {
        let cols = crate::optics::ProjectorColumns::covering_vial(cfg, 2);
        let n = (360.0 / step).round() as usize;
        let angles = (0..n).map(|k| k as f64 * step).collect();
        let mut frames = ImageStack::new(rows, cols.n, angles, cols.pitch_mm, row_pitch);
        for f in &mut frames.frames {
            f.fill(value);
        }
        PatternStack {
            frames,
            angle_step_deg: step,
            vertical_prestretch: 1.0,
        }
    }

    fn small_grid() -> VoxelGrid {
        VoxelGrid::centered([40, 40, 3], [0.35; 3])
    }

    #[test]
    fn schedule_defaults() {
        let s = Schedule::default();
        assert_eq!(s.camera_step_deg(), 2.0);
        assert_eq!(s.projector_events().unwrap(), 576);
        assert_eq!(s.camera_frames().unwrap(), 180);
        assert_eq!(Schedule::pattern_index(0.625 * 3.0, 1.0, 360), 1);
        assert_eq!(Schedule::pattern_index(359.9, 1.0, 360), 359);
        assert_eq!(Schedule::pattern_index(360.0, 1.0, 360), 0);
        let bad = Schedule {
            projector_fps: 31.0,
            rotation_speed_deg_s: 23.0,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn vertical_trace_slope_and_inverse() {
        let cfg = OpticalConfig::bpagda();
        let l = cfg.throw_distance_mm();
        let ratio = 1.0 / 1.55;
        let slope = vertical_trace(1e-4, l, 12.4, ratio) / 1e-4;
        let paraxial = 1.0 - 12.4 / l * (1.0 - ratio);
        assert!((slope - paraxial).abs() < 1e-6, "{slope}");
        for z in [-6.0, -0.3, 0.0, 2.0, 7.5] {
            let h = vertical_trace_inverse(z, l, 12.4, ratio);
            assert!((vertical_trace(h, l, 12.4, ratio) - z).abs() < 1e-9);
        }
    }

    #[test]
    fn traversal_covers_the_clipped_chord() {
        let g = VoxelGrid::centered([10, 8, 1], [0.5; 3]);
        let plane = Plane::of(&g).unwrap();
        for (p, d) in [
            ([-10.0, 0.3], [1.0, 0.0]),
            ([-4.0, -4.0], [0.6, 0.8]),
            ([3.0, 5.0], [-0.28, -0.96]),
        ] {
            let mut total = 0.0;
            let mut seen = std::collections::HashSet::new();
            plane.traverse(p, d, 30.0, |pix, a, b| {
                assert!(b > a);
                assert!(seen.insert(pix));
                total += b - a;
            });
            // analytic length of the line inside [-2.5, 2.5] x [-2, 2]
            let (mut t0, mut t1) = (0.0f64, 30.0f64);
            for (a, half) in [(0usize, 2.5), (1, 2.0)] {
                if d[a] != 0.0 {
                    let (ta, tb) = ((-half - p[a]) / d[a], (half - p[a]) / d[a]);
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
            }
            assert!((total - (t1 - t0).max(0.0)).abs() < 1e-9, "{total}");
        }
    }

    #[test]
    fn zero_patterns_give_zero_dose() {
        let cfg = OpticalConfig::bpagda();
        let p = uniform_patterns(&cfg, 5, 0.35, 1.0, 0.0);
        let d = rotation_dose(&p, &cfg, &Schedule::default(), &small_grid()).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_patterns_give_uniform_dose() {
        let mut cfg = OpticalConfig::bpagda();
        cfg.attenuation_mu_a = 0.0;
        let p = uniform_patterns(&cfg, 5, 0.35, 1.0, 1.0);
        let g = small_grid();
        let d = rotation_dose(&p, &cfg, &Schedule::default(), &g).unwrap();
        let mut vals = Vec::new();
        for ((k, iy, ix), &v) in d.values.indexed_iter() {
            let q = g.position(ix, iy, k);
            if q[0].hypot(q[1]) < 6.5 {
                vals.push(f64::from(v));
            }
        }
        let (lo, hi) = vals.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((hi - lo) / lo < 0.02, "{lo} {hi}");
    }

    #[test]
    fn dose_is_linear_in_rotations_and_stops() {
        let cfg = OpticalConfig::bpagda();
        let p = uniform_patterns(&cfg, 5, 0.35, 1.0, 0.7);
        let schedule = Schedule {
            rotations: 6,
            stop_rotation: Some(4),
            ..Schedule::default()
        };
        let snaps = accumulate_dose(&p, &cfg, &schedule, &small_grid()).unwrap();
        let centre = |g: &VoxelGrid| f64::from(g.values[[1, 20, 20]]);
        let d1 = centre(&snaps[0]);
        assert!(d1 > 0.0);
        for (r, g) in snaps.iter().enumerate() {
            let want = (r + 1).min(4) as f64;
            assert!((centre(g) / d1 - want).abs() < 1e-6 * want);
        }
        assert_eq!(snaps[4], snaps[5]);
    }

    #[test]
    fn attenuation_darkens_the_centre() {
        let mut cfg = OpticalConfig::bpagda();
        let p = uniform_patterns(&cfg, 5, 0.35, 1.0, 1.0);
        let g = small_grid();
        cfg.attenuation_mu_a = 0.0;
        let flat = rotation_dose(&p, &cfg, &Schedule::default(), &g).unwrap();
        cfg.attenuation_mu_a = 1.0 / 12.4;
        let att = rotation_dose(&p, &cfg, &Schedule::default(), &g).unwrap();
        let ratio = |d: &VoxelGrid| d.values[[1, 20, 20]] / d.values[[1, 20, 2]];
        assert!(ratio(&flat) > 0.98);
        assert!(ratio(&att) < ratio(&flat) * 0.95);
    }

    #[test]
    fn rejects_mismatched_patterns() {
        let cfg = OpticalConfig::bpagda();
        let mut p = uniform_patterns(&cfg, 5, 0.35, 1.0, 1.0);
        p.angle_step_deg = 2.0;
        assert!(rotation_dose(&p, &cfg, &Schedule::default(), &small_grid()).is_err());
    }

    #[test]
    fn gel_levels() {
        let mut g = small_grid();
        assert!(gel_field(&g, 1.0, 0.05).unwrap().values.iter().all(|&v| v == 0.0));
        g.values.fill(2.0);
        assert!(gel_field(&g, 1.0, 0.05).unwrap().values.iter().all(|&v| v == 1.0));
        g.values.fill(1.0);
        assert!(gel_field(&g, 1.0, 0.05).unwrap().values.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(gel_field(&g, 1.0, 0.0).unwrap().values.iter().all(|&v| v == 1.0));
        assert!(gel_field(&g, 0.0, 0.05).is_err());
    }

    #[test]
    fn radial_dose_gels_to_predicted_disk() {
        let mut g = VoxelGrid::centered([64, 64, 1], [0.1; 3]);
        let r0 = 2.1;
        for ((k, iy, ix), v) in g.values.indexed_iter_mut() {
            let p = VoxelGrid::centered([64, 64, 1], [0.1; 3]).position(ix, iy, k);
            *v = (2.0 * (-p[0].hypot(p[1]) / r0 * std::f64::consts::LN_2).exp()) as f32;
        }
        let gel = gel_field(&g, 1.0, 0.0).unwrap();
        let area = gel.values.iter().filter(|&&v| v > 0.5).count() as f64 * 0.01;
        let radius = (area / std::f64::consts::PI).sqrt();
        assert!((radius - r0).abs() < 0.1, "{radius}");
    }

    fn camera_angles() -> Vec<f64> {
        (0..36).map(|k| k as f64 * 10.0).collect()
    }

    #[test]
    fn empty_field_renders_black() {
        let cfg = OpticalConfig::bpagda();
        let f = render_frames(&small_grid(), &cfg, &camera_angles(), &CameraSetup::default()).unwrap();
        assert!(f.frames.iter().all(|fr| fr.iter().all(|&v| v == 0.0)));
        assert!(render_frames(&small_grid(), &cfg, &[0.0, 2.0, 4.0], &CameraSetup::default()).is_err());
    }

    #[test]
    fn axial_voxel_is_seen_at_centre_column_and_magnified_height() {
        let cfg = OpticalConfig::bpagda();
        let mut g = VoxelGrid::centered([41, 41, 41], [0.155; 3]);
        let kz = 30;
        g.values[[kz, 20, 20]] = 1.0;
        let cam = CameraSetup {
            binning: 1,
            noise: None,
        };
        let f = render_frames(&g, &cfg, &camera_angles(), &cam).unwrap();
        let m_vi = 1.0 / (1.0 - 12.4 * (1.0 - 1.0 / 1.53) / 150.0);
        for fr in &f.frames {
            let total: f64 = fr.iter().map(|&v| f64::from(v)).sum();
            let (mut cx, mut cy) = (0.0, 0.0);
            for ((row, col), &v) in fr.indexed_iter() {
                cx += f.col_x(col) * f64::from(v) / total;
                cy += f.row_y(row) * f64::from(v) / total;
            }
            assert!(cx.abs() < 1e-3, "{cx}");
            let want = g.z(kz) * m_vi;
            assert!((cy - want).abs() < 0.01, "{cy} vs {want}");
        }
    }

    #[test]
    fn gelled_cylinder_frames_agree() {
        let cfg = OpticalConfig::bpagda();
        let mut g = VoxelGrid::centered([64, 64, 4], [0.155; 3]);
        let geom = g.clone();
        for ((k, iy, ix), v) in g.values.indexed_iter_mut() {
            let p = geom.position(ix, iy, k);
            *v = (3.0 - p[0].hypot(p[1])).clamp(0.0, 0.155) as f32 / 0.155;
        }
        let f = render_frames(&g, &cfg, &camera_angles(), &CameraSetup::default()).unwrap();
        let mid = f.frame_dims().0 / 2;
        let sum = |fr: &Array2<f32>| fr.row(mid).iter().map(|&v| f64::from(v)).sum::<f64>();
        let s0 = sum(&f.frames[0]);
        assert!(s0 > 0.0);
        for fr in &f.frames {
            assert!((sum(fr) - s0).abs() < 0.01 * s0);
        }
    }

    #[test]
    fn noise_is_seeded() {
        let cfg = OpticalConfig::bpagda();
        let mut g = small_grid();
        g.values.fill(0.5);
        let cam = CameraSetup {
            binning: 4,
            noise: Some(FrameNoise {
                counts_per_unit: 50.0,
                seed: 7,
            }),
        };
        let a = render_frames(&g, &cfg, &camera_angles(), &cam).unwrap();
        let b = render_frames(&g, &cfg, &camera_angles(), &cam).unwrap();
        assert_eq!(a.frames, b.frames);
        let clean = render_frames(&g, &cfg, &camera_angles(), &CameraSetup::default()).unwrap();
        assert_ne!(a.frames, clean.frames);
    }

    #[test]
    fn session_stops_growing_after_stop() {
        let cyl = crate::phantoms::cylinder_mesh(3.0, 1.2, 64);
        let cfg = OpticalConfig::bpagda();
        let opts = SessionOptions {
            schedule: Schedule {
                rotations: 5,
                stop_rotation: Some(3),
                ..Schedule::default()
            },
            patterns: PatternOptions {
                dims: [48, 48, 6],
                spacing_mm: 0.3,
                angle_step_deg: 2.0,
                ..PatternOptions::default()
            },
            gel_threshold: GelThreshold::AtRotation(3.0),
            render: RenderRotations::List(vec![2, 4, 5]),
            ..SessionOptions::default()
        };
        let s = run_session(&cyl, &cfg, &opts).unwrap();
        let gels = s.truth_gels();
        for w in gels.windows(2) {
            assert!(w[0].values.iter().zip(w[1].values.iter()).all(|(a, b)| a <= b));
        }
        assert_eq!(gels[2], gels[3]);
        assert_eq!(gels[3], gels[4]);
        assert!(gels[4].values.sum() > 0.0);
        assert_eq!(s.frames.len(), 3 * 180);
        assert_eq!(s.frames_for_rotation(4).frames, s.frames_for_rotation(5).frames);
        assert!(s.frames_for_rotation(1).is_empty());
    }
}
