//! Print fidelity measurements: circle fits, threshold calibration, surface
//! distance statistics and line profiles.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::mesh::{Bvh, InsideTest, TriMesh, Vec3};
use crate::ostrecon::{self, OstVolume, ProjectionAxis, ProjectionMode};
use crate::printsim::PrintSession;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Algebraic least-squares circle: minimizes `sum (|p - c|^2 - r^2)^2`.
pub fn fit_circle(points: &[[f64; 2]]) -> Result<Circle> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!("need 3 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let scale = points
        .iter()
        .map(|p| (p[0] - mx).hypot(p[1] - my))
        .fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate("points coincide".into()));
    }
    // u^2 + v^2 + a u + b v + c = 0 on centred, scaled coordinates
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for p in points {
        let (u, v) = ((p[0] - mx) / scale, (p[1] - my) / scale);
        let row = Vector3::new(u, v, 1.0);
        ata += row * row.transpose();
        atb -= row * (u * u + v * v);
    }
    let svd = ata.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-12 * smax {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let sol = svd
        .solve(&atb, 1e-14 * smax)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let (cu, cv) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cu * cu + cv * cv - sol[2];
    if !(r2 > 0.0) {
        return Err(Error::Degenerate("no real circle fits the points".into()));
    }
    Ok(Circle {
        center: [mx + cu * scale, my + cv * scale],
        radius: r2.sqrt() * scale,
    })
}

/// `I_p` from a printed standard cylinder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpCalibration {
    pub ip_value: f64,
    pub fit_circle_center_mm: [f64; 2],
    pub fit_circle_diameter_mm: f64,
    pub boundary_intensity_samples: Vec<f64>,
}

/// Boundary points of a binary slice: midpoints between 4-neighbour pixels of different value.
pub fn mask_boundary(grid: &VoxelGrid, k: usize) -> Vec<[f64; 2]> {
    let s = grid.slice(k);
    let (ny, nx) = s.dim();
    let mut out = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            let a = s[[iy, ix]] > 0.5;
            let p = grid.position(ix, iy, k);
            if ix + 1 < nx && a != (s[[iy, ix + 1]] > 0.5) {
                out.push([p[0] + 0.5 * grid.spacing_mm[0], p[1]]);
            }
            if iy + 1 < ny && a != (s[[iy + 1, ix]] > 0.5) {
                out.push([p[0], p[1] + 0.5 * grid.spacing_mm[1]]);
            }
        }
    }
    out
}

/// Layers of `grid` holding any voxel above one half.
fn occupied_layers(grid: &VoxelGrid) -> Option<(usize, usize)> {
    let nz = grid.dims()[2];
    let occupied: Vec<usize> = (0..nz)
        .filter(|&k| grid.slice(k).iter().any(|&v| v > 0.5))
        .collect();
    Some((*occupied.first()?, *occupied.last()?))
}

/// Fits the truth gel boundary at mid-height, then averages the overhead mean
/// projection over every pixel the fitted circle passes through.
///
/// The projection uses reconstructed layers inside the middle 80% of the gel's height.
pub fn calibrate_ip(session: &PrintSession, recon: &OstVolume) -> Result<IpCalibration> {
    let rotation = recon.rotation.unwrap_or(session.final_rotation());
    calibrate_ip_against(&session.truth_gel(rotation), recon)
}

/// [`calibrate_ip`] against an explicit binary gel volume.
pub fn calibrate_ip_against(gel: &VoxelGrid, recon: &OstVolume) -> Result<IpCalibration> {
    let (k0, k1) = occupied_layers(gel).ok_or_else(|| Error::Degenerate("no gelled voxels".into()))?;
    let boundary = mask_boundary(gel, (k0 + k1) / 2);
    let circle = fit_circle(&boundary)?;

    let (z0, z1) = (gel.z(k0), gel.z(k1));
    let (zl, zh) = (z0 + 0.1 * (z1 - z0), z1 - 0.1 * (z1 - z0));
    let rg = &recon.grid;
    let layers: Vec<usize> = (0..rg.dims()[2]).filter(|&k| (zl..=zh).contains(&rg.z(k))).collect();
    let range = match (layers.first(), layers.last()) {
        (Some(&a), Some(&b)) => (a, b + 1),
        _ => return Err(Error::Degenerate("reconstruction does not overlap the gel height".into())),
    };
    let mean = ostrecon::overhead_projection(recon, ProjectionMode::Mean, None, ProjectionAxis::Z, Some(range))?;
    let samples = circle_pixels(&mean, rg, &circle);
    if samples.is_empty() {
        return Err(Error::Degenerate("fitted circle lies outside the reconstruction".into()));
    }
    let ip = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(IpCalibration {
        ip_value: ip,
        fit_circle_center_mm: circle.center,
        fit_circle_diameter_mm: 2.0 * circle.radius,
        boundary_intensity_samples: samples,
    })
}

/// Values of the `[y][x]` image pixels crossed by `circle`, each pixel once.
fn circle_pixels(img: &Array2<f64>, grid: &VoxelGrid, circle: &Circle) -> Vec<f64> {
    let (ny, nx) = img.dim();
    let h = grid.spacing_mm[0].min(grid.spacing_mm[1]);
    let steps = ((2.0 * std::f64::consts::PI * circle.radius / h) * 16.0).ceil().max(64.0) as usize;
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..steps {
        let a = 2.0 * std::f64::consts::PI * i as f64 / steps as f64;
        let x = circle.center[0] + circle.radius * a.cos();
        let y = circle.center[1] + circle.radius * a.sin();
        let ix = ((x - grid.origin_mm[0]) / grid.spacing_mm[0]).round();
        let iy = ((y - grid.origin_mm[1]) / grid.spacing_mm[1]).round();
        if ix >= 0.0 && iy >= 0.0 && (ix as usize) < nx && (iy as usize) < ny {
            seen.insert((iy as usize, ix as usize));
        }
    }
    seen.into_iter().map(|(iy, ix)| img[[iy, ix]]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` equal bins spanning the data (a unit-width bin around constant data).
    pub fn of(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo <= 0.0 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        let w = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * w).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let i = (((v - lo) / w).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { edges, counts }
    }
}

/// Signed surface distances from a test mesh to a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdfReport {
    /// One per test vertex; negative inside the reference.
    pub distances_mm: Vec<f64>,
    pub rmse_mm: f64,
    pub rmse_pct_of_max_dim: f64,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub histogram: Histogram,
    pub max_dimension_mm: f64,
}

impl SdfReport {
    /// Summary without the per-vertex list.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "vertices": self.distances_mm.len(),
            "rmse_mm": self.rmse_mm,
            "rmse_pct_of_max_dim": self.rmse_pct_of_max_dim,
            "mean_mm": self.mean_mm,
            "std_mm": self.std_mm,
            "max_dimension_mm": self.max_dimension_mm,
        })
    }

    pub fn distances_csv(&self) -> String {
        let mut s = String::from("vertex,signed_distance_mm\n");
        for (i, d) in self.distances_mm.iter().enumerate() {
            s.push_str(&format!("{i},{d}\n"));
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_lo_mm,bin_hi_mm,count\n");
        for (i, c) in self.histogram.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.histogram.edges[i], self.histogram.edges[i + 1], c));
        }
        s
    }
}

/// Exact point-to-triangle distance from each test vertex to the reference
/// surface, negative where the vertex lies inside the reference.
pub fn sdf_compare(test: &TriMesh, reference: &TriMesh, bins: usize) -> Result<SdfReport> {
    if test.is_empty() || reference.is_empty() {
        return Err(Error::InvalidInput("empty mesh".into()));
    }
    let bvh = Bvh::new(reference)?;
    let inside = InsideTest::new(reference)?;
    let distances: Vec<f64> = test
        .vertices
        .par_iter()
        .map(|&p| {
            let d = bvh.distance(p);
            if d > 0.0 && inside.contains(p) {
                -d
            } else {
                d
            }
        })
        .collect();
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let rmse = (distances.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let std = (distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    let max_dim = reference.max_dimension();
    Ok(SdfReport {
        histogram: Histogram::of(&distances, bins),
        rmse_mm: rmse,
        rmse_pct_of_max_dim: 100.0 * rmse / max_dim,
        mean_mm: mean,
        std_mm: std,
        max_dimension_mm: max_dim,
        distances_mm: distances,
    })
}

/// `n_samples` trilinear samples from `p0` to `p1` inclusive.
pub fn line_profile(vol: &OstVolume, p0: Vec3, p1: Vec3, n_samples: usize) -> Result<Vec<f64>> {
    if n_samples < 2 {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    (0..n_samples)
        .map(|i| {
            let t = i as f64 / (n_samples - 1) as f64;
            let p = [0, 1, 2].map(|a| p0[a] + t * (p1[a] - p0[a]));
            vol.grid
                .sample(p)
                .ok_or_else(|| Error::InvalidInput(format!("profile point {p:?} is outside the volume")))
        })
        .collect()
}

/// Peak-to-dip contrast of a two-peak profile: `(min peak - dip) / min peak`,
/// with peaks taken as the maxima of each half and the dip as the minimum between.
pub fn two_peak_contrast(profile: &[f64]) -> Option<f64> {
    let n = profile.len();
    if n < 3 {
        return None;
    }
    let argmax = |lo: usize, hi: usize| (lo..hi).max_by(|&a, &b| profile[a].total_cmp(&profile[b]));
    let a = argmax(0, n / 2)?;
    let b = argmax(n / 2, n)?;
    let dip = profile[a..=b].iter().cloned().fold(f64::INFINITY, f64::min);
    let peak = profile[a].min(profile[b]);
    (peak > 0.0).then(|| (peak - dip) / peak)
}
