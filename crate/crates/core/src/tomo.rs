//! Parallel-beam Radon transform, ramp filtering and back-projection.
//!
//! Conventions shared by the whole crate: for a projection angle `phi` the
//! detector axis is `n = (cos phi, sin phi)` and rays travel along
//! `d = (-sin phi, cos phi)`. A point `p` is seen at detector coordinate
//! `s = p . n` and lies a distance `t = p . d` along its ray. Angles are
//! degrees at the API and radians inside.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SliceGrid;

/// Which detector space a sinogram lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// Refracted, non-telecentric projector or camera columns.
    Physical,
    /// Ideal parallel-beam (Radon) coordinates.
    Virtual,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Physical => "physical",
            Space::Virtual => "virtual",
        }
    }
}

/// Per-slice projection data: `values[[angle, detector]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub values: Array2<f64>,
    pub angles_deg: Vec<f64>,
    pub det_pitch_mm: f64,
    /// Fractional detector index of `s = 0`.
    pub det_center: f64,
    pub space: Space,
}

impl Sinogram {
    pub fn new(
        values: Array2<f64>,
        angles_deg: Vec<f64>,
        det_pitch_mm: f64,
        space: Space,
    ) -> Result<Self> {
        let det_center = (values.ncols() as f64 - 1.0) * 0.5;
        let sino = Self {
            values,
            angles_deg,
            det_pitch_mm,
            det_center,
            space,
        };
        sino.validate()?;
        Ok(sino)
    }

    pub fn zeros(n_det: usize, angles_deg: Vec<f64>, det_pitch_mm: f64, space: Space) -> Self {
        Self {
            values: Array2::zeros((angles_deg.len(), n_det)),
            det_center: (n_det as f64 - 1.0) * 0.5,
            angles_deg,
            det_pitch_mm,
            space,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (na, nd) = self.values.dim();
        if na == 0 || na != self.angles_deg.len() {
            return Err(Error::InvalidInput(format!(
                "sinogram has {na} rows for {} angles",
                self.angles_deg.len()
            )));
        }
        if nd < 2 {
            return Err(Error::InvalidInput(format!(
                "sinogram needs at least 2 detectors, got {nd}"
            )));
        }
        if self.angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("angles must be strictly increasing".into()));
        }
        if !(self.det_pitch_mm.is_finite() && self.det_pitch_mm > 0.0) {
            return Err(Error::InvalidInput(format!(
                "detector pitch must be positive, got {}",
                self.det_pitch_mm
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sinogram"));
        }
        Ok(())
    }

    pub fn n_angles(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_det(&self) -> usize {
        self.values.ncols()
    }

    #[inline]
    pub fn s(&self, j: usize) -> f64 {
        (j as f64 - self.det_center) * self.det_pitch_mm
    }

    /// Linear interpolation of row `k` at detector coordinate `s_mm`; zero outside the span.
    #[inline]
    pub fn sample_row(&self, k: usize, s_mm: f64) -> f64 {
        let f = s_mm / self.det_pitch_mm + self.det_center;
        let row = self.values.row(k);
        match row.as_slice() {
            Some(r) => interp_row(r, f),
            None => interp_row(&row.to_vec(), f),
        }
    }
}

/// Linear interpolation at fractional index `f`; samples beyond the ends read as zero.
#[inline]
pub(crate) fn interp_row(row: &[f64], f: f64) -> f64 {
    let i0 = f.floor();
    let w = f - i0;
    let i0 = i0 as isize;
    let n = row.len() as isize;
    let mut v = 0.0;
    if (0..n).contains(&i0) {
        v += (1.0 - w) * row[i0 as usize];
    }
    if (0..n).contains(&(i0 + 1)) {
        v += w * row[(i0 + 1) as usize];
    }
    v
}

fn check_slice(slice: &ArrayView2<f64>) -> Result<()> {
    if slice.is_empty() {
        return Err(Error::InvalidInput("zero-size slice".into()));
    }
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("slice"));
    }
    Ok(())
}

/// Line integrals of `slice` (`[y][x]`, square pixels of `spacing_mm`) along
/// parallel rays, using Joseph's interpolating projector. Units are value·mm.
pub fn radon(
    slice: ArrayView2<f64>,
    spacing_mm: f64,
    angles_deg: &[f64],
    n_det: usize,
    det_pitch_mm: f64,
) -> Result<Sinogram> {
    check_slice(&slice)?;
    if angles_deg.is_empty() {
        return Err(Error::InvalidInput("no projection angles".into()));
    }
    let (ny, nx) = slice.dim();
    let grid = SliceGrid {
        nx,
        ny,
        spacing_mm,
    };
    grid.validate()?;
    let mut sino = Sinogram::zeros(n_det, angles_deg.to_vec(), det_pitch_mm, Space::Virtual);
    sino.validate()?;
    let data = slice.as_standard_layout().to_owned();
    let h = spacing_mm;
    let center = sino.det_center;

    sino.values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(angles_deg.par_iter())
        .for_each(|(mut row, &deg)| {
            let phi = deg.to_radians();
            let (sn, c) = phi.sin_cos();
            for (j, out) in row.iter_mut().enumerate() {
                let s = (j as f64 - center) * det_pitch_mm;
                *out = if c.abs() >= sn.abs() {
                    // step along y; x(y) = s / c - y tan(phi)
                    let tan = sn / c;
                    let mut acc = 0.0;
                    for iy in 0..ny {
                        let x = s / c - grid.y(iy) * tan;
                        let r = data.row(iy);
                        acc += interp_row(r.as_slice().unwrap(), grid.fx(x));
                    }
                    acc * h / c.abs()
                } else {
                    // step along x; y(x) = s / sin - x cot(phi)
                    let cot = c / sn;
                    let mut acc = 0.0;
                    for ix in 0..nx {
                        let y = s / sn - grid.x(ix) * cot;
                        let fy = grid.fy(y);
                        let i0 = fy.floor();
                        let w = fy - i0;
                        let i0 = i0 as isize;
                        if (0..ny as isize).contains(&i0) {
                            acc += (1.0 - w) * data[[i0 as usize, ix]];
                        }
                        if (0..ny as isize).contains(&(i0 + 1)) {
                            acc += w * data[[(i0 + 1) as usize, ix]];
                        }
                    }
                    acc * h / sn.abs()
                };
            }
        });
    Ok(sino)
}

/// Length of the zero-padded filter buffer for `n_det` detectors.
pub fn padded_len(n_det: usize) -> usize {
    (2 * n_det).next_power_of_two()
}

/// Band-limited ramp kernel `2|nu|` sampled in space on the padded circular grid.
///
/// `h[0] = 1/(4 t^2)`, `h[n odd] = -1/(pi n t)^2`, zero for even `n`, scaled by 2.
pub fn ramp_kernel(padded: usize, pitch_mm: f64) -> Vec<f64> {
    (0..padded)
        .map(|k| {
            let n = if k <= padded / 2 { k as f64 } else { k as f64 - padded as f64 };
            let v = if k == 0 {
                0.25 / (pitch_mm * pitch_mm)
            } else if n.abs() as usize % 2 == 1 {
                -1.0 / (PI * n * pitch_mm).powi(2)
            } else {
                0.0
            };
            2.0 * v
        })
        .collect()
}

/// Frequency response of [`ramp_kernel`] on the padded FFT grid, with the DC bin zeroed.
///
/// The factor 2 pairs with the `pi / (2 N)` back-projection scale.
pub fn ramp_response(padded: usize, pitch_mm: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = ramp_kernel(padded, pitch_mm)
        .into_iter()
        .map(|v| Complex::new(v * pitch_mm, 0.0))
        .collect();
    FftPlanner::<f64>::new()
        .plan_fft_forward(padded)
        .process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

/// Ramp-filters one row and returns the whole padded output buffer.
pub fn ramp_filter_row_padded(row: &[f64], pitch_mm: f64) -> Vec<f64> {
    let padded = padded_len(row.len());
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    let response = ramp_response(padded, pitch_mm);
    let mut buf: Vec<Complex<f64>> = row
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(padded)
        .collect();
    fwd.process(&mut buf);
    for (b, h) in buf.iter_mut().zip(&response) {
        *b *= *h;
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re / padded as f64).collect()
}

/// Convolves every row with the ramp filter, zero-padded to the next power of two ≥ 2·n_det.
pub fn ramp_filter(sino: &Sinogram) -> Result<Sinogram> {
    sino.validate()?;
    let n = sino.n_det();
    let padded = padded_len(n);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    let response = ramp_response(padded, sino.det_pitch_mm);
    let mut out = sino.clone();
    out.values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each(|mut row| {
            let mut buf = vec![Complex::new(0.0, 0.0); padded];
            for (b, v) in buf.iter_mut().zip(row.iter()) {
                b.re = *v;
            }
            fwd.process(&mut buf);
            for (b, h) in buf.iter_mut().zip(&response) {
                *b *= *h;
            }
            inv.process(&mut buf);
            for (o, b) in row.iter_mut().zip(&buf) {
                *o = b.re / padded as f64;
            }
        });
    Ok(out)
}

fn require_virtual(sino: &Sinogram) -> Result<()> {
    if sino.space != Space::Virtual {
        return Err(Error::WrongSpace {
            expected: Space::Virtual.name(),
            found: sino.space.name(),
        });
    }
    Ok(())
}

/// Smears each row back along its rays and sums over angles, scaled by `pi / (2 N)`.
pub fn backproject(sino: &Sinogram, grid: &SliceGrid) -> Result<Array2<f64>> {
    backproject_weighted(sino, grid, None)
}

/// As [`backproject`], but a ray's contribution at depth `L` inside the vial
/// (measured from where it enters the circle of `vial_radius_mm`) is weighted
/// by `exp(-mu_a L)`.
pub fn attenuated_backproject(
    sino: &Sinogram,
    grid: &SliceGrid,
    mu_a: f64,
    vial_radius_mm: f64,
) -> Result<Array2<f64>> {
    if !(mu_a >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "attenuation must be non-negative, got {mu_a}"
        )));
    }
    if mu_a == 0.0 {
        return backproject(sino, grid);
    }
    if !(vial_radius_mm > 0.0) {
        return Err(Error::InvalidInput("vial radius must be positive".into()));
    }
    backproject_weighted(sino, grid, Some((mu_a, vial_radius_mm)))
}

fn backproject_weighted(
    sino: &Sinogram,
    grid: &SliceGrid,
    attenuation: Option<(f64, f64)>,
) -> Result<Array2<f64>> {
    sino.validate()?;
    require_virtual(sino)?;
    grid.validate()?;
    let scale = PI / (2.0 * sino.n_angles() as f64);
    let trig: Vec<(f64, f64)> = sino
        .angles_deg
        .iter()
        .map(|d| d.to_radians().sin_cos())
        .collect();
    let values = sino.values.as_standard_layout().to_owned();
    let inv_pitch = 1.0 / sino.det_pitch_mm;
    let center = sino.det_center;
    let mut out = grid.zeros();
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(iy, mut orow)| {
            let y = grid.y(iy);
            for (k, &(sn, c)) in trig.iter().enumerate() {
                let row = values.row(k);
                let row = row.as_slice().unwrap();
                for (ix, o) in orow.iter_mut().enumerate() {
                    let x = grid.x(ix);
                    let s = x * c + y * sn;
                    let v = interp_row(row, s * inv_pitch + center);
                    if v == 0.0 {
                        continue;
                    }
                    let w = match attenuation {
                        None => 1.0,
                        Some((mu, r)) => {
                            let half = (r * r - s * s).max(0.0).sqrt();
                            let t = -x * sn + y * c;
                            let depth = (t + half).clamp(0.0, 2.0 * half);
                            (-mu * depth).exp()
                        }
                    };
                    *o += w * v;
                }
            }
            orow.mapv_inplace(|v| v * scale);
        });
    Ok(out)
}

/// Ramp filter followed by back-projection.
pub fn fbp(sino: &Sinogram, grid: &SliceGrid) -> Result<Array2<f64>> {
    backproject(&ramp_filter(sino)?, grid)
}

/// `n` angles evenly covering `[start, start + span)` degrees.
pub fn uniform_angles(n: usize, span_deg: f64) -> Vec<f64> {
    (0..n).map(|k| k as f64 * span_deg / n as f64).collect()
}
