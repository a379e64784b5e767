//! Scattering tomography: darkfield frames back to a scatter-density volume.

use ndarray::{Array2, Axis as NdAxis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::grid::{ImageStack, SliceGrid, VoxelGrid};
use crate::isosurface;
use crate::mesh::TriMesh;
use crate::optics::{self, CameraRemap, OpticalConfig, Side};
use crate::tomo;

/// Reconstructed scatter density.
#[derive(Clone, Debug, PartialEq)]
pub struct OstVolume {
    pub grid: VoxelGrid,
    /// Gelation threshold in reconstructed intensity units, once known.
    pub ip_threshold: Option<f64>,
    /// Rotation whose frames produced this volume.
    pub rotation: Option<usize>,
    /// In-plane voxel size.
    pub voxel_size_mm: f64,
}

/// Slice geometry override for [`reconstruct_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconOptions {
    /// Pixels per side; default covers the addressable circle.
    pub slice_pixels: Option<usize>,
}

/// Reconstructs the latest full turn of `frames`.
pub fn reconstruct_volume(frames: &ImageStack, cfg: &OpticalConfig) -> Result<OstVolume> {
    reconstruct_with(frames, cfg, &ReconOptions::default())
}

/// Per row: remap to a Radon sinogram, ramp filter, back-project, mask to the
/// addressable circle. Rows are placed at their vial heights (`row / M_vi`).
pub fn reconstruct_with(frames: &ImageStack, cfg: &OpticalConfig, opts: &ReconOptions) -> Result<OstVolume> {
    cfg.validate().stage("config")?;
    frames.validate().stage("frames")?;
    let turn = frames.latest_turn().stage("frames")?;
    let remap = CameraRemap::for_frames(cfg, turn.col_pitch_mm).stage("remap")?;
    let (_, m_vi) = optics::vertical_magnifications(cfg).stage("config")?;
    let pitch = remap.virtual_pitch_mm;
    let reach = cfg.addressable_radius(Side::Camera);
    let n = opts
        .slice_pixels
        .unwrap_or(2 * (reach / pitch).floor() as usize + 1);
    let slice = SliceGrid::square(n, pitch);
    let (rows, _) = turn.frame_dims();

    let slices: Vec<Array2<f64>> = (0..rows)
        .into_par_iter()
        .map(|row| -> Result<Array2<f64>> {
            let sino = remap.apply(&turn, row)?;
            let filtered = tomo::ramp_filter(&sino)?;
            let mut img = tomo::backproject(&filtered, &slice)?;
            for ((iy, ix), v) in img.indexed_iter_mut() {
                if slice.x(ix).hypot(slice.y(iy)) > reach {
                    *v = 0.0;
                }
            }
            Ok(img)
        })
        .collect::<Result<_>>()
        .stage("reconstruct")?;

    let dz = turn.row_pitch_mm / m_vi;
    let origin = [slice.x(0), slice.y(0), turn.row_y(0) / m_vi];
    let mut grid = VoxelGrid::zeros([n, n, rows], [pitch, pitch, dz], origin);
    for (k, img) in slices.iter().enumerate() {
        grid.set_slice(k, img);
    }
    Ok(OstVolume {
        grid,
        ip_threshold: None,
        rotation: None,
        voxel_size_mm: pitch,
    })
}

/// Binary mask of voxels above `ip`; records `ip` on the volume.
pub fn threshold_volume(vol: &mut OstVolume, ip: f64) -> Result<VoxelGrid> {
    if !ip.is_finite() {
        return Err(Error::NonFinite("threshold"));
    }
    vol.ip_threshold = Some(ip);
    let mut mask = vol.grid.clone();
    let t = ip as f32;
    mask.values.mapv_inplace(|v| f32::from(u8::from(v > t)));
    Ok(mask)
}

/// Voxels strictly above `ip`.
pub fn count_above(vol: &OstVolume, ip: f64) -> usize {
    vol.grid.values.iter().filter(|&&v| f64::from(v) > ip).count()
}

/// Level-set surface at `ip`; empty when nothing exceeds it.
pub fn extract_isosurface(vol: &OstVolume, ip: f64) -> TriMesh {
    isosurface::extract(&vol.grid, ip)
}

/// Projection reduction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    #[default]
    Sum,
    /// Sum of the `> ip` mask.
    ThresholdedSum,
    Mean,
}

/// Axis summed over; `Z` gives the overhead (XY) view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionAxis {
    X,
    Y,
    #[default]
    Z,
}

/// Axis-aligned projection of the volume.
///
/// Output indices: `Z` gives `[y][x]`, `Y` gives `[z][x]`, `X` gives `[z][y]`.
/// `z_range` restricts the layers used (inclusive-exclusive layer indices).
pub fn overhead_projection(
    vol: &OstVolume,
    mode: ProjectionMode,
    ip: Option<f64>,
    axis: ProjectionAxis,
    z_range: Option<(usize, usize)>,
) -> Result<Array2<f64>> {
    let nz = vol.grid.dims()[2];
    let (z0, z1) = z_range.unwrap_or((0, nz));
    if z0 >= z1 || z1 > nz {
        return Err(Error::InvalidInput(format!("layer range {z0}..{z1} outside 0..{nz}")));
    }
    let data = vol.grid.values.slice(ndarray::s![z0..z1, .., ..]);
    let values = match mode {
        ProjectionMode::ThresholdedSum => {
            let ip = ip.ok_or_else(|| Error::InvalidInput("thresholded projection needs ip".into()))?;
            if !ip.is_finite() {
                return Err(Error::NonFinite("threshold"));
            }
            data.mapv(|v| if f64::from(v) > ip { 1.0 } else { 0.0 })
        }
        _ => data.mapv(f64::from),
    };
    let ax = match axis {
        ProjectionAxis::Z => NdAxis(0),
        ProjectionAxis::Y => NdAxis(1),
        ProjectionAxis::X => NdAxis(2),
    };
    let summed = values.sum_axis(ax);
    Ok(match mode {
        ProjectionMode::Mean => {
            let n = values.len_of(ax) as f64;
            summed / n
        }
        _ => summed,
    })
}
