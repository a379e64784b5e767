//! Closed-form coordinate maps between the refracted physical projector or
//! camera and an ideal parallel-beam (virtual) device, plus the sinogram
//! resampling built on them.
//!
//! A ray leaving physical column `x` (mm, measured in the plane through the
//! vial axis) is tilted by the field angle `psi`; it enters the vial circle at
//! `x*`, refracts once and becomes a straight chord. The chord has Radon
//! coordinates `(x_virtual, theta + delta)`, where `delta` depends only on `x`.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::ImageStack;
use crate::tomo::{interp_row, Sinogram, Space};

/// Geometric and optical constants of the printer and the OST camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    pub vial_radius_mm: f64,
    pub n_outside: f64,
    /// Resin index at the curing (projection) wavelength.
    pub n_resin_blue: f64,
    /// Resin index at the imaging wavelength.
    pub n_resin_red: f64,
    pub throw_ratio: f64,
    pub projector_width_px: f64,
    /// Projected pixel size at the vial plane.
    pub projector_pixel_mm: f64,
    /// Camera (entrance pupil) to vial axis distance.
    pub camera_distance_mm: f64,
    /// Object-space camera pixel pitch at the vial mid-plane, before binning.
    pub camera_pixel_mm: f64,
    pub attenuation_mu_a: f64,
    pub gel_dose_threshold: f64,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self::bpagda()
    }
}

impl OpticalConfig {
    /// BPAGDA resin in a 24.8 mm vial.
    pub fn bpagda() -> Self {
        Self {
            vial_radius_mm: 12.4,
            n_outside: 1.0,
            n_resin_blue: 1.55,
            n_resin_red: 1.53,
            throw_ratio: 1.8,
            projector_width_px: 1024.0,
            projector_pixel_mm: 0.065,
            camera_distance_mm: 150.0,
            // 4x4 binning of this pitch gives 0.155 mm voxels in virtual space
            camera_pixel_mm: 0.155 * 1.53 / 4.0,
            attenuation_mu_a: 1.0 / 12.4,
            gel_dose_threshold: 1.0,
        }
    }

    /// DUDMA resin, same optics.
    pub fn dudma() -> Self {
        Self {
            n_resin_blue: 1.49,
            n_resin_red: 1.48,
            ..Self::bpagda()
        }
    }

    /// No refraction, telecentric projector and camera.
    pub fn identity_limit() -> Self {
        Self {
            n_resin_blue: 1.0,
            n_resin_red: 1.0,
            throw_ratio: f64::INFINITY,
            camera_distance_mm: f64::INFINITY,
            ..Self::bpagda()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let all = [
            self.vial_radius_mm,
            self.n_outside,
            self.n_resin_blue,
            self.n_resin_red,
            self.throw_ratio,
            self.projector_width_px,
            self.projector_pixel_mm,
            self.camera_distance_mm,
            self.camera_pixel_mm,
            self.attenuation_mu_a,
            self.gel_dose_threshold,
        ];
        if all.iter().any(|v| v.is_nan()) {
            return bad("NaN field".into());
        }
        if !(self.vial_radius_mm > 0.0 && self.vial_radius_mm.is_finite()) {
            return bad(format!("vial_radius_mm must be > 0, got {}", self.vial_radius_mm));
        }
        if self.n_outside < 1.0 {
            return bad(format!("n_outside must be >= 1, got {}", self.n_outside));
        }
        if self.n_resin_blue < self.n_outside || self.n_resin_red < self.n_outside {
            return bad("resin indices must be >= n_outside".into());
        }
        if !(self.throw_ratio > 0.0) {
            return bad(format!("throw_ratio must be > 0, got {}", self.throw_ratio));
        }
        if !(self.projector_width_px >= 1.0) {
            return bad("projector_width_px must be >= 1".into());
        }
        if !(self.camera_distance_mm > self.vial_radius_mm) {
            return bad("camera_distance_mm must exceed the vial radius".into());
        }
        if !(self.projector_pixel_mm > 0.0 && self.camera_pixel_mm > 0.0) {
            return bad("pixel pitches must be > 0".into());
        }
        if !(self.attenuation_mu_a >= 0.0) {
            return bad("attenuation_mu_a must be >= 0".into());
        }
        if !(self.gel_dose_threshold > 0.0) {
            return bad("gel_dose_threshold must be > 0".into());
        }
        Ok(())
    }

    /// Projector lens to vial axis distance in mm (`T_r * W * pixel`).
    pub fn throw_distance_mm(&self) -> f64 {
        self.throw_ratio * self.projector_width_px * self.projector_pixel_mm
    }

    pub fn resin_index(&self, side: Side) -> f64 {
        match side {
            Side::Projector => self.n_resin_blue,
            Side::Camera => self.n_resin_red,
        }
    }

    /// Largest virtual offset a refracted ray can reach, `R_v n_1 / n_2`.
    pub fn addressable_radius(&self, side: Side) -> f64 {
        self.vial_radius_mm * self.n_outside / self.resin_index(side)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Which device a detector coordinate belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Projector,
    Camera,
}

/// One physical detector coordinate mapped into virtual space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayMapSample {
    /// Where the ray meets the vial, as an x coordinate (`x_p*` or `x_c*`).
    pub x_star_mm: f64,
    /// Angle of incidence (projector) or transmission (camera) at the vial wall.
    pub incidence_deg: f64,
    /// Angular shift `theta_v - theta`; independent of `theta`.
    pub delta_deg: f64,
    /// Virtual rotation angle `theta + delta`.
    pub theta_v_deg: f64,
    pub x_virtual_mm: f64,
}

/// Field angle (radians) of the ray through physical coordinate `x_mm`.
///
/// Projector: `tan psi = x / (T_r W)` with `x` in projector pixels.
/// Camera: `psi = x / D`, the small-angle field angle used for `x_c*`.
#[inline]
pub fn field_angle(x_mm: f64, side: Side, cfg: &OpticalConfig) -> f64 {
    match side {
        Side::Projector => (x_mm / cfg.throw_distance_mm()).atan(),
        Side::Camera => x_mm / cfg.camera_distance_mm,
    }
}

/// Entry coordinate on the vial for a ray through `(x, 0)` tilted by `psi`.
///
/// Equal to `x (1 - sqrt(1 - a (1 - (R tan(psi)/x)^2))) / a` with
/// `a = 1 + tan(psi)^2`, rearranged so it stays exact at `x = 0` and as
/// `psi -> 0`.
#[inline]
fn entry_coordinate(x: f64, psi: f64, r: f64) -> Option<f64> {
    let (sp, cp) = psi.sin_cos();
    let disc = r * r - x * x * cp * cp;
    if disc < 0.0 {
        return None;
    }
    Some(x * cp * cp - sp * disc.sqrt())
}

/// Literal form of the entry coordinate with `x` and `throw` in the same units.
pub fn entry_coordinate_literal(x: f64, throw: f64, r: f64) -> f64 {
    let alpha = 1.0 + (x / throw).powi(2);
    x * (1.0 - (1.0 - alpha * (1.0 - (r / throw).powi(2))).sqrt()) / alpha
}

fn map_side(x_mm: f64, theta_deg: f64, side: Side, cfg: &OpticalConfig) -> Result<RayMapSample> {
    let r = cfg.vial_radius_mm;
    let psi = field_angle(x_mm, side, cfg);
    let x_star = entry_coordinate(x_mm, psi, r).ok_or(Error::RayMissesVial { coord_mm: x_mm })?;
    let x_star = x_star.clamp(-r, r);
    let beta = (x_star / r).asin();
    let incidence = beta + psi;
    let sin_refracted = cfg.n_outside / cfg.resin_index(side) * incidence.sin();
    assert!(
        sin_refracted.abs() <= 1.0 + 1e-12,
        "total internal reflection is impossible for n_resin >= n_outside"
    );
    let delta = beta - sin_refracted.clamp(-1.0, 1.0).asin();
    let x_virtual = x_star * delta.cos() - (r * r - x_star * x_star).max(0.0).sqrt() * delta.sin();
    Ok(RayMapSample {
        x_star_mm: x_star,
        incidence_deg: incidence.to_degrees(),
        delta_deg: delta.to_degrees(),
        theta_v_deg: theta_deg + delta.to_degrees(),
        x_virtual_mm: x_virtual,
    })
}

/// Maps a physical projector column (mm at the vial plane) to virtual coordinates.
pub fn map_projector(x_p_mm: f64, theta_deg: f64, cfg: &OpticalConfig) -> Result<RayMapSample> {
    map_side(x_p_mm, theta_deg, Side::Projector, cfg)
}

/// Maps a physical camera column (object-space mm at the mid-plane) to virtual coordinates.
pub fn map_camera(x_c_mm: f64, theta_deg: f64, cfg: &OpticalConfig) -> Result<RayMapSample> {
    map_side(x_c_mm, theta_deg, Side::Camera, cfg)
}

pub fn map_detector(x_mm: f64, side: Side, cfg: &OpticalConfig) -> Result<RayMapSample> {
    map_side(x_mm, 0.0, side, cfg)
}

/// Largest physical coordinate whose ray still touches the vial (grazing incidence).
pub fn max_physical_coordinate(side: Side, cfg: &OpticalConfig) -> f64 {
    let r = cfg.vial_radius_mm;
    let reach = |x: f64| x * field_angle(x, side, cfg).cos() - r;
    let (mut lo, mut hi) = (0.0, r);
    while reach(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if reach(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * r {
            break;
        }
    }
    lo
}

/// Result of a detector-map inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inversion {
    pub x_physical_mm: f64,
    pub iterations: usize,
    pub residual_mm: f64,
}

/// Physical coordinate whose ray lands at virtual offset `x_virtual_mm`, by bisection.
pub fn invert_detector_map(x_virtual_mm: f64, side: Side, cfg: &OpticalConfig) -> Result<f64> {
    invert_detector_map_counted(x_virtual_mm, side, cfg).map(|inv| inv.x_physical_mm)
}

pub fn invert_detector_map_counted(
    x_virtual_mm: f64,
    side: Side,
    cfg: &OpticalConfig,
) -> Result<Inversion> {
    let x_max = max_physical_coordinate(side, cfg);
    let v_max = map_side(x_max, 0.0, side, cfg)?.x_virtual_mm;
    let target = x_virtual_mm.abs();
    if !target.is_finite() || target > v_max {
        return Err(Error::OutOfRange {
            target_mm: x_virtual_mm,
            max_mm: v_max,
        });
    }
    let sign = x_virtual_mm.signum();
    let forward = |x: f64| map_side(x, 0.0, side, cfg).map(|s| s.x_virtual_mm).unwrap_or(v_max);
    let (mut lo, mut hi) = (0.0, x_max);
    let mut iterations = 0;
    let mut best = (0.0, target);
    while iterations < 200 {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let v = forward(mid);
        let residual = (v - target).abs();
        if residual < best.1 {
            best = (mid, residual);
        }
        if residual < 1e-11 || hi - lo < 1e-13 {
            break;
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if target == 0.0 {
        best = (0.0, 0.0);
    }
    Ok(Inversion {
        x_physical_mm: sign * best.0,
        iterations,
        residual_mm: best.1,
    })
}

/// Vertical magnification of the projector (`M_vp`) and imaging (`M_vi`) optics.
pub fn vertical_magnifications(cfg: &OpticalConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let r = cfg.vial_radius_mm;
    let r_px = r / cfg.projector_pixel_mm;
    let m_vp = 1.0
        - r_px * (1.0 - cfg.n_outside / cfg.n_resin_blue)
            / (cfg.throw_ratio * cfg.projector_width_px);
    let m_vi = 1.0 / (1.0 - r * (1.0 - cfg.n_outside / cfg.n_resin_red) / cfg.camera_distance_mm);
    Ok((m_vp, m_vi))
}

/// Uniform angles treated as periodic over 360° (or 180° using `p(s, a+180) = p(-s, a)`).
#[derive(Clone, Copy, Debug)]
struct AngleAxis {
    start: f64,
    step: f64,
    n: usize,
    half_turn: bool,
}

impl AngleAxis {
    fn from_angles(angles: &[f64]) -> Result<Self> {
        let n = angles.len();
        if n < 2 {
            return Err(Error::InvalidInput("need at least two angles".into()));
        }
        let step = (angles[n - 1] - angles[0]) / (n - 1) as f64;
        let uniform = angles
            .iter()
            .enumerate()
            .all(|(k, a)| (a - (angles[0] + k as f64 * step)).abs() < 1e-6 * step.max(1e-9));
        if !uniform {
            return Err(Error::InvalidInput("angles must be uniformly spaced".into()));
        }
        let span = step * n as f64;
        let half_turn = if (span - 360.0).abs() < 1e-6 * 360.0 {
            false
        } else if (span - 180.0).abs() < 1e-6 * 180.0 {
            true
        } else {
            return Err(Error::InsufficientCoverage { span_deg: span });
        };
        Ok(Self {
            start: angles[0],
            step,
            n,
            half_turn,
        })
    }

    /// Two bracketing rows, their weights, and whether the detector axis flips.
    #[inline]
    fn locate(&self, angle: f64) -> [(usize, f64, bool); 2] {
        let f = (angle - self.start) / self.step;
        let n = self.n as f64;
        let period = if self.half_turn { 2.0 * n } else { n };
        let f = f.rem_euclid(period);
        let i0 = f.floor();
        let w = f - i0;
        let i0 = i0 as usize;
        let i1 = (i0 + 1) % period as usize;
        let fold = |i: usize| -> (usize, bool) {
            if self.half_turn && i >= self.n {
                (i - self.n, true)
            } else {
                (i, false)
            }
        };
        let (a, fa) = fold(i0);
        let (b, fb) = fold(i1);
        [(a, 1.0 - w, fa), (b, w, fb)]
    }
}

/// Bilinear sample of a virtual sinogram at `(s, angle)` with angular wrap.
fn sample_periodic(sino: &Sinogram, axis: &AngleAxis, s: f64, angle: f64) -> f64 {
    axis.locate(angle)
        .iter()
        .map(|&(k, w, flip)| {
            if w == 0.0 {
                0.0
            } else {
                w * sino.sample_row(k, if flip { -s } else { s })
            }
        })
        .sum()
}

/// Physical projector columns: `n` columns of `pitch_mm`, centred on the vial axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorColumns {
    pub n: usize,
    pub pitch_mm: f64,
}

impl ProjectorColumns {
    /// Columns of `binning` native projector pixels covering every ray that meets the vial.
    pub fn covering_vial(cfg: &OpticalConfig, binning: usize) -> Self {
        let pitch = cfg.projector_pixel_mm * binning.max(1) as f64;
        let x_max = max_physical_coordinate(Side::Projector, cfg);
        let n = 2 * (x_max / pitch).ceil() as usize + 1;
        Self { n, pitch_mm: pitch }
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        (j as f64 - (self.n as f64 - 1.0) * 0.5) * self.pitch_mm
    }
}

/// Resamples a virtual sinogram onto physical projector columns.
///
/// Rows keep the input's frame angles. Columns whose rays miss the vial are zero.
pub fn resample_projection(
    sino_virtual: &Sinogram,
    cfg: &OpticalConfig,
    columns: &ProjectorColumns,
) -> Result<Sinogram> {
    cfg.validate()?;
    sino_virtual.validate()?;
    if sino_virtual.space != Space::Virtual {
        return Err(Error::WrongSpace {
            expected: "virtual",
            found: sino_virtual.space.name(),
        });
    }
    let axis = AngleAxis::from_angles(&sino_virtual.angles_deg)?;
    let maps: Vec<Option<RayMapSample>> = (0..columns.n)
        .map(|j| map_projector(columns.x(j), 0.0, cfg).ok())
        .collect();
    let mut out = Sinogram::zeros(
        columns.n,
        sino_virtual.angles_deg.clone(),
        columns.pitch_mm,
        Space::Physical,
    );
    out.values
        .axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .zip(sino_virtual.angles_deg.par_iter())
        .for_each(|(mut row, &theta)| {
            for (v, m) in row.iter_mut().zip(&maps) {
                if let Some(m) = m {
                    *v = sample_periodic(sino_virtual, &axis, m.x_virtual_mm, theta + m.delta_deg);
                }
            }
        });
    Ok(out)
}

/// Precomputed camera-side remap from distorted frame columns to a virtual detector.
#[derive(Clone, Debug)]
pub struct CameraRemap {
    pub virtual_pitch_mm: f64,
    pub n_virtual: usize,
    /// Physical camera coordinate and angular shift for each virtual detector.
    nodes: Vec<Option<(f64, f64)>>,
}

impl CameraRemap {
    /// Virtual detector of `n_virtual` bins at `virtual_pitch_mm`, centred on the axis.
    pub fn new(cfg: &OpticalConfig, virtual_pitch_mm: f64, n_virtual: usize) -> Result<Self> {
        cfg.validate()?;
        let center = (n_virtual as f64 - 1.0) * 0.5;
        let nodes = (0..n_virtual)
            .map(|j| {
                let s = (j as f64 - center) * virtual_pitch_mm;
                invert_detector_map(s, Side::Camera, cfg).ok().map(|x_c| {
                    let delta = map_camera(x_c, 0.0, cfg).map(|m| m.delta_deg).unwrap_or(0.0);
                    (x_c, delta)
                })
            })
            .collect();
        Ok(Self {
            virtual_pitch_mm,
            n_virtual,
            nodes,
        })
    }

    /// Virtual detector matching a camera column pitch: `pitch * n_1 / n_2`,
    /// spanning the addressable circle.
    pub fn for_frames(cfg: &OpticalConfig, col_pitch_mm: f64) -> Result<Self> {
        let pitch = col_pitch_mm * cfg.n_outside / cfg.n_resin_red;
        let reach = cfg.addressable_radius(Side::Camera);
        let n = 2 * (reach / pitch).floor() as usize + 1;
        Self::new(cfg, pitch, n)
    }

    /// Builds the undistorted sinogram of frame row `row` from one full turn of frames.
    pub fn apply(&self, frames: &ImageStack, row: usize) -> Result<Sinogram> {
        let turn = frames.latest_turn()?;
        let (rows, cols) = turn.frame_dims();
        if row >= rows {
            return Err(Error::InvalidInput(format!(
                "row {row} outside frame height {rows}"
            )));
        }
        let axis = AngleAxis::from_angles(&turn.angles_deg)?;
        if axis.half_turn {
            return Err(Error::InsufficientCoverage { span_deg: 180.0 });
        }
        let distorted: Vec<Vec<f64>> = turn
            .frames
            .iter()
            .map(|f| f.row(row).iter().map(|&v| f64::from(v)).collect())
            .collect();
        let mut values = Array2::<f64>::zeros((turn.len(), self.n_virtual));
        for (k, &phi) in turn.angles_deg.iter().enumerate() {
            for (j, node) in self.nodes.iter().enumerate() {
                let Some((x_c, delta)) = *node else { continue };
                let fcol = x_c / turn.col_pitch_mm + turn.col_center;
                if fcol < -1.0 || fcol > cols as f64 {
                    continue;
                }
                values[[k, j]] = axis
                    .locate(phi - delta)
                    .iter()
                    .map(|&(i, w, _)| if w == 0.0 { 0.0 } else { w * interp_row(&distorted[i], fcol) })
                    .sum();
            }
        }
        Sinogram::new(values, turn.angles_deg.clone(), self.virtual_pitch_mm, Space::Virtual)
    }
}

/// Resamples frame row `slice_row` from distorted camera space into a Radon sinogram.
pub fn resample_images_to_radon(
    frames: &ImageStack,
    slice_row: usize,
    cfg: &OpticalConfig,
) -> Result<Sinogram> {
    frames.validate()?;
    CameraRemap::for_frames(cfg, frames.col_pitch_mm)?.apply(frames, slice_row)
}

/// Spatial sampling step at the edge of the printable area for a camera angle step.
pub fn edge_sampling_step_mm(cfg: &OpticalConfig, angle_step_deg: f64) -> f64 {
    2.0 * std::f64::consts::PI * cfg.addressable_radius(Side::Camera) * angle_step_deg / 360.0
}
