//! Mesh to projector patterns: slicing, background level, dose normalization,
//! absorption correction, filtering and refraction resampling.

use log::warn;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::grid::{ImageStack, SliceGrid, VoxelGrid};
use crate::mesh::{InsideTest, LineCrossings, TriMesh};
use crate::optics::{self, OpticalConfig, ProjectorColumns, Side};
use crate::tomo::{self, Sinogram};

/// How filtered sinogram samples are made non-negative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Every sample below the background level `B` becomes `B`.
    #[default]
    Literal,
    /// Negative samples become 0.
    Zero,
}

/// Target doses with the background level applied.
#[derive(Clone, Debug)]
pub struct TargetStack {
    pub grid: VoxelGrid,
    pub background: f64,
    pub iterations: usize,
}

/// Physical projector frames, one per angle, rows along z.
#[derive(Clone, Debug)]
pub struct PatternStack {
    pub frames: ImageStack,
    pub angle_step_deg: f64,
    /// `M_vp` used to pre-stretch the target vertically.
    pub vertical_prestretch: f64,
}

/// Virtual-space sampling used for every slice.
#[derive(Clone, Debug)]
pub struct SliceProjection {
    pub grid: SliceGrid,
    pub angles_deg: Vec<f64>,
    pub n_det: usize,
    pub det_pitch_mm: f64,
    /// Samples with `|s|` beyond this are zeroed; target pixels outside it are ignored.
    pub reach_mm: f64,
    pub clip: ClipMode,
}

impl SliceProjection {
    /// Detectors at the pixel pitch covering `±reach_mm`, angles at `step_deg` over 360°.
    pub fn new(grid: SliceGrid, reach_mm: f64, step_deg: f64, clip: ClipMode) -> Self {
        let n_angles = (360.0 / step_deg).round() as usize;
        let pitch = grid.spacing_mm;
        Self {
            grid,
            angles_deg: tomo::uniform_angles(n_angles, 360.0),
            n_det: 2 * (reach_mm / pitch).ceil() as usize + 1,
            det_pitch_mm: pitch,
            reach_mm,
            clip,
        }
    }

    fn in_reach(&self, ix: usize, iy: usize) -> bool {
        self.grid.x(ix).hypot(self.grid.y(iy)) <= self.reach_mm
    }

    /// Copy of `slice` with pixels outside the reach set to zero.
    pub fn mask(&self, slice: ArrayView2<f64>) -> Array2<f64> {
        let mut out = slice.to_owned();
        for ((iy, ix), v) in out.indexed_iter_mut() {
            if !self.in_reach(ix, iy) {
                *v = 0.0;
            }
        }
        out
    }
}

/// Rasterizes a closed mesh: a voxel is set when `(x, y, z * stretch)` is inside.
///
/// `template` supplies the geometry only. Rows whose crossing count is odd (open or
/// self-intersecting meshes) fall back to a three-axis majority vote.
pub fn slice_mesh(mesh: &TriMesh, template: &VoxelGrid, vertical_stretch: f64) -> Result<VoxelGrid> {
    if !(vertical_stretch > 0.0 && vertical_stretch.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "vertical stretch must be > 0, got {vertical_stretch}"
        )));
    }
    if mesh.is_empty() {
        return Err(Error::InvalidInput("empty mesh".into()));
    }
    let mut out = VoxelGrid::zeros(template.dims(), template.spacing_mm, template.origin_mm);
    let [nx, ny, nz] = out.dims();
    let lines = LineCrossings::new(mesh, 0)?;
    let fallback = std::sync::OnceLock::new();
    let geometry = out.clone();
    let rows: Vec<(usize, usize, Vec<f32>)> = (0..nz * ny)
        .into_par_iter()
        .map(|r| {
            let (iz, iy) = (r / ny, r % ny);
            let p0 = geometry.position(0, iy, iz);
            let (y, z) = (p0[1], p0[2] * vertical_stretch);
            let cross = lines.crossings(y, z);
            let mut row = vec![0.0f32; nx];
            if cross.len() % 2 == 0 {
                for pair in cross.chunks(2) {
                    for (ix, v) in row.iter_mut().enumerate() {
                        let x = geometry.position(ix, iy, iz)[0];
                        if x >= pair[0] && x < pair[1] {
                            *v = 1.0;
                        }
                    }
                }
            } else {
                let test: &Option<InsideTest> =
                    fallback.get_or_init(|| InsideTest::new(mesh).ok());
                if let Some(test) = test {
                    for (ix, v) in row.iter_mut().enumerate() {
                        let x = geometry.position(ix, iy, iz)[0];
                        *v = f32::from(u8::from(test.contains([x, y, z])));
                    }
                }
            }
            (iz, iy, row)
        })
        .collect();
    if fallback.get().is_some() {
        warn!("mesh has rows with odd crossing counts; used majority-vote fill");
    }
    for (iz, iy, row) in rows {
        for (ix, v) in row.into_iter().enumerate() {
            out.values[[iz, iy, ix]] = v;
        }
    }
    Ok(out)
}

/// Zeros become `B`, ones stay 1.
pub fn build_target(binary: &VoxelGrid, background: f64) -> Result<TargetStack> {
    if !(background > 0.0 && background < 1.0) {
        return Err(Error::InvalidInput(format!(
            "background level must be in (0, 1), got {background}"
        )));
    }
    if binary.values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("target must be binary".into()));
    }
    let mut grid = binary.clone();
    let b = background as f32;
    grid.values.mapv_inplace(|v| if v == 0.0 { b } else { 1.0 });
    Ok(TargetStack {
        grid,
        background,
        iterations: 0,
    })
}

/// Pattern values are in dose units: a constant value `v` shown at every angle delivers dose `v`.
pub const DOSE_UNITS: f64 = std::f64::consts::FRAC_PI_2;

/// Radon transform, ramp filter, clip, and zeroing beyond the reach.
pub fn filtered_nonneg_sinogram(
    target_slice: ArrayView2<f64>,
    background: f64,
    proj: &SliceProjection,
) -> Result<Sinogram> {
    let masked = proj.mask(target_slice);
    let sino = tomo::radon(
        masked.view(),
        proj.grid.spacing_mm,
        &proj.angles_deg,
        proj.n_det,
        proj.det_pitch_mm,
    )?;
    let mut sino = tomo::ramp_filter(&sino)?;
    sino.values *= DOSE_UNITS;
    clip_sinogram(&mut sino, background, proj.clip, proj.reach_mm);
    Ok(sino)
}

/// Applies the non-negativity rule and the reach mask in place.
pub fn clip_sinogram(sino: &mut Sinogram, background: f64, clip: ClipMode, reach_mm: f64) {
    let floor = match clip {
        ClipMode::Literal => background,
        ClipMode::Zero => 0.0,
    };
    let s: Vec<f64> = (0..sino.n_det()).map(|j| sino.s(j)).collect();
    for mut row in sino.values.rows_mut() {
        for (v, &sj) in row.iter_mut().zip(&s) {
            *v = if sj.abs() > reach_mm { 0.0 } else { v.max(floor) };
        }
    }
}

/// Dose of one slice delivered by its filtered non-negative sinogram.
pub fn slice_dose(target_slice: ArrayView2<f64>, background: f64, proj: &SliceProjection) -> Result<Array2<f64>> {
    let sino = filtered_nonneg_sinogram(target_slice, background, proj)?;
    dose_from_patterns(&sino, &proj.grid)
}

/// Angular mean of the patterns along each ray.
pub fn dose_from_patterns(sino: &Sinogram, grid: &SliceGrid) -> Result<Array2<f64>> {
    let mut d = tomo::backproject(sino, grid)?;
    d /= DOSE_UNITS;
    Ok(d)
}

/// Per-slice normalization report.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NormalizationReport {
    /// Voxels whose normalization coefficient hit the floor.
    pub floored_voxels: usize,
}

pub const NORMALIZATION_FLOOR: f64 = 1e-9;

/// One slice: `N = D / I_0` (floored), `I = I_0 / N`, repeated `n_iters` times.
pub fn normalize_slice(
    target0: ArrayView2<f64>,
    background: f64,
    n_iters: usize,
    proj: &SliceProjection,
) -> Result<(Array2<f64>, usize)> {
    let mut current = target0.to_owned();
    let mut floored = 0;
    for _ in 0..n_iters {
        let dose = slice_dose(current.view(), background, proj)?;
        floored = 0;
        let mut next = target0.to_owned();
        for ((iy, ix), v) in next.indexed_iter_mut() {
            if !proj.in_reach(ix, iy) || target0[[iy, ix]] == 0.0 {
                continue;
            }
            let mut n = dose[[iy, ix]] / target0[[iy, ix]];
            if n < NORMALIZATION_FLOOR {
                n = NORMALIZATION_FLOOR;
                floored += 1;
            }
            *v = target0[[iy, ix]] / n;
        }
        current = next;
    }
    Ok((current, floored))
}

/// Applies [`normalize_slice`] to every slice.
pub fn normalize_iteration(
    target: &TargetStack,
    n_iters: usize,
    proj: &SliceProjection,
) -> Result<(TargetStack, NormalizationReport)> {
    let nz = target.grid.dims()[2];
    let results = for_each_slice(&target.grid, |slice| {
        normalize_slice(slice.view(), target.background, n_iters, proj)
    })?;
    let mut grid = target.grid.clone();
    let mut report = NormalizationReport::default();
    for (iz, (slice, floored)) in results.into_iter().enumerate().take(nz) {
        grid.set_slice(iz, &slice);
        report.floored_voxels += floored;
    }
    if report.floored_voxels > 0 {
        warn!("{} voxels hit the normalization floor", report.floored_voxels);
    }
    Ok((
        TargetStack {
            grid,
            background: target.background,
            iterations: target.iterations + n_iters,
        },
        report,
    ))
}

/// Runs `f` on each z slice in parallel, computing repeated slices only once.
fn for_each_slice<T: Clone + Send>(
    grid: &VoxelGrid,
    f: impl Fn(&Array2<f64>) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let nz = grid.dims()[2];
    let slices: Vec<Array2<f64>> = (0..nz).map(|iz| grid.slice_f64(iz)).collect();
    // identical slices (typically the empty ones above and below the part) share work
    let mut first_of = vec![0usize; nz];
    for iz in 0..nz {
        first_of[iz] = (0..iz).find(|&j| first_of[j] == j && slices[j] == slices[iz]).unwrap_or(iz);
    }
    let unique: Vec<usize> = (0..nz).filter(|&iz| first_of[iz] == iz).collect();
    let computed: Vec<(usize, T)> = unique
        .par_iter()
        .map(|&iz| f(&slices[iz]).map(|r| (iz, r)))
        .collect::<Result<_>>()?;
    let mut out: Vec<Option<T>> = vec![None; nz];
    for (iz, r) in computed {
        out[iz] = Some(r);
    }
    Ok((0..nz).map(|iz| out[first_of[iz]].clone().unwrap()).collect())
}

/// Dose delivered when printing a uniform disk filling the addressable area,
/// with attenuation, normalized to mean 1 inside the disk.
pub fn disk_absorption_map(cfg: &OpticalConfig, proj: &SliceProjection) -> Result<Array2<f64>> {
    cfg.validate()?;
    let reach = proj.reach_mm;
    let grid = proj.grid;
    let disk = crate::phantoms::disk_slice(&grid, reach);
    let zero_clip = SliceProjection {
        clip: ClipMode::Zero,
        ..proj.clone()
    };
    let sino = filtered_nonneg_sinogram(disk.view(), 0.0, &zero_clip)?;
    let mut dd = tomo::attenuated_backproject(&sino, &grid, cfg.attenuation_mu_a, cfg.vial_radius_mm)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((iy, ix), v) in dd.indexed_iter() {
        if disk[[iy, ix]] >= 1.0 {
            sum += v;
            n += 1;
        }
    }
    if n == 0 || sum <= 0.0 {
        return Err(Error::Degenerate("addressable disk covers no pixels".into()));
    }
    let mean = sum / n as f64;
    dd.mapv_inplace(|v| v / mean);
    Ok(dd)
}

/// Divides by the disk absorption map where it exceeds `eps * max`.
pub fn apply_absorption_correction(slice: &mut Array2<f64>, dd: &Array2<f64>, eps: f64) {
    let max = dd.iter().cloned().fold(0.0, f64::max);
    for (v, &d) in slice.iter_mut().zip(dd.iter()) {
        if d > eps * max {
            *v /= d;
        }
    }
}

/// Options for [`compute_patterns`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternOptions {
    /// Target grid `(nx, ny, nz)`, centred on the vial axis and optical mid-plane.
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub background: f64,
    pub iterations: usize,
    pub angle_step_deg: f64,
    pub clip: ClipMode,
    /// Native projector pixels per pattern column.
    pub projector_binning: usize,
    pub absorption_correction: bool,
    /// Use `M_vp` pre-stretch (off for a 1.0 stretch).
    pub vertical_prestretch: bool,
}

impl Default for PatternOptions {
    fn default() -> Self {
        Self {
            dims: [128, 128, 96],
            spacing_mm: 0.155,
            background: 0.5,
            iterations: 1,
            angle_step_deg: 1.0,
            clip: ClipMode::Literal,
            projector_binning: 2,
            absorption_correction: true,
            vertical_prestretch: true,
        }
    }
}

impl PatternOptions {
    pub fn template(&self) -> VoxelGrid {
        VoxelGrid::centered(self.dims, [self.spacing_mm; 3])
    }
}

/// Full pipeline from mesh to physical projector frames.
pub fn compute_patterns(mesh: &TriMesh, cfg: &OpticalConfig, opts: &PatternOptions) -> Result<PatternStack> {
    cfg.validate().stage("config")?;
    let (m_vp, _) = optics::vertical_magnifications(cfg).stage("config")?;
    let stretch = if opts.vertical_prestretch { m_vp } else { 1.0 };
    let binary = slice_mesh(mesh, &opts.template(), stretch).stage("slice")?;
    let grid = binary.slice_grid().stage("slice")?;
    let reach = cfg.addressable_radius(Side::Projector);
    let proj = SliceProjection::new(grid, reach, opts.angle_step_deg, opts.clip);
    let outside = binary
        .values
        .indexed_iter()
        .any(|((_, iy, ix), &v)| v > 0.0 && !proj.in_reach(ix, iy));
    if outside {
        return Err(Error::OutOfRange {
            target_mm: binary_extent(&binary),
            max_mm: reach,
        }
        .in_stage("slice"));
    }
    let target = if opts.background > 0.0 {
        build_target(&binary, opts.background).stage("target")?
    } else {
        TargetStack {
            grid: binary.clone(),
            background: 0.0,
            iterations: 0,
        }
    };
    let (normalized, _) = normalize_iteration(&target, opts.iterations, &proj).stage("normalize")?;
    let dd = if opts.absorption_correction && cfg.attenuation_mu_a > 0.0 {
        Some(disk_absorption_map(cfg, &proj).stage("absorption")?)
    } else {
        None
    };
    let columns = ProjectorColumns::covering_vial(cfg, opts.projector_binning);
    let physical = for_each_slice(&normalized.grid, |slice| {
        let mut slice = slice.clone();
        if let Some(dd) = &dd {
            apply_absorption_correction(&mut slice, dd, 1e-6);
        }
        let sino = filtered_nonneg_sinogram(slice.view(), target.background, &proj)?;
        optics::resample_projection(&sino, cfg, &columns)
    })
    .stage("resample")?;
    let nz = physical.len();
    let mut frames = ImageStack::new(
        nz,
        columns.n,
        proj.angles_deg.clone(),
        columns.pitch_mm,
        opts.spacing_mm,
    );
    for (iz, sino) in physical.iter().enumerate() {
        for (k, frame) in frames.frames.iter_mut().enumerate() {
            for (j, v) in frame.row_mut(iz).iter_mut().enumerate() {
                *v = sino.values[[k, j]].max(0.0) as f32;
            }
        }
    }
    Ok(PatternStack {
        frames,
        angle_step_deg: opts.angle_step_deg,
        vertical_prestretch: stretch,
    })
}

fn binary_extent(binary: &VoxelGrid) -> f64 {
    let mut r: f64 = 0.0;
    for ((iz, iy, ix), &v) in binary.values.indexed_iter() {
        if v > 0.0 {
            let p = binary.position(ix, iy, iz);
            r = r.max(p[0].hypot(p[1]));
        }
    }
    r
}

/// Dose separation after scaling to unit mean in-part dose: `min(in) - max(out)`.
///
/// `part` selects in-part pixels; `region` restricts the out-of-part set.
pub fn separation(dose: &Array2<f64>, part: &Array2<bool>, region: &Array2<bool>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    let mut min_in = f64::INFINITY;
    let mut max_out = f64::NEG_INFINITY;
    for (&d, (&p, &r)) in dose.iter().zip(part.iter().zip(region.iter())) {
        if p {
            sum += d;
            n += 1;
            min_in = min_in.min(d);
        } else if r {
            max_out = max_out.max(d);
        }
    }
    let mean = if n > 0 { sum / n as f64 } else { 1.0 };
    (min_in - max_out) / mean
}

/// The three projection stages compared for dose separation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Binary target, negatives clipped to 0.
    Raw,
    /// Background level `B`, clip below `B`.
    Background,
    /// Background plus one normalization iteration.
    Normalized,
}

/// Simulated dose of one binary slice at the given stage.
pub fn stage_dose(binary: &Array2<f64>, background: f64, stage: Stage, proj: &SliceProjection) -> Result<Array2<f64>> {
    match stage {
        Stage::Raw => {
            let p = SliceProjection {
                clip: ClipMode::Zero,
                ..proj.clone()
            };
            slice_dose(binary.view(), 0.0, &p)
        }
        Stage::Background | Stage::Normalized => {
            let target = binary.mapv(|v| if v > 0.5 { 1.0 } else { background });
            let iters = usize::from(stage == Stage::Normalized);
            let (t, _) = normalize_slice(target.view(), background, iters, proj)?;
            slice_dose(t.view(), background, proj)
        }
    }
}
