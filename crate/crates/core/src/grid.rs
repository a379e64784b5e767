//! Sampled fields: voxel volumes, in-plane slice geometry and angle-tagged image stacks.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a square-pixel 2D slice centred on the vial axis.
///
/// Pixel `(iy, ix)` has its centre at
/// `((ix - (nx-1)/2) * spacing, (iy - (ny-1)/2) * spacing)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    pub nx: usize,
    pub ny: usize,
    pub spacing_mm: f64,
}

impl SliceGrid {
    pub fn square(n: usize, spacing_mm: f64) -> Self {
        Self {
            nx: n,
            ny: n,
            spacing_mm,
        }
    }

    /// Smallest square grid whose inscribed circle has at least `radius_mm`.
    pub fn covering_radius(radius_mm: f64, spacing_mm: f64) -> Self {
        let n = (2.0 * radius_mm / spacing_mm).ceil() as usize + 1;
        Self::square(n, spacing_mm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidInput("zero-size slice grid".into()));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::InvalidInput(format!(
                "slice spacing must be positive, got {}",
                self.spacing_mm
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 - (self.nx as f64 - 1.0) * 0.5) * self.spacing_mm
    }

    #[inline]
    pub fn y(&self, iy: usize) -> f64 {
        (iy as f64 - (self.ny as f64 - 1.0) * 0.5) * self.spacing_mm
    }

    /// Fractional pixel index of a physical coordinate.
    #[inline]
    pub fn fx(&self, x: f64) -> f64 {
        x / self.spacing_mm + (self.nx as f64 - 1.0) * 0.5
    }

    #[inline]
    pub fn fy(&self, y: f64) -> f64 {
        y / self.spacing_mm + (self.ny as f64 - 1.0) * 0.5
    }

    /// Half-diagonal of the grid, the largest |s| a ray through any pixel centre can have.
    pub fn half_diagonal(&self) -> f64 {
        let hx = (self.nx as f64) * 0.5 * self.spacing_mm;
        let hy = (self.ny as f64) * 0.5 * self.spacing_mm;
        hx.hypot(hy)
    }

    pub fn zeros(&self) -> Array2<f64> {
        Array2::zeros((self.ny, self.nx))
    }
}

/// 3D scalar field with physical spacing. Values are stored `[z][y][x]`.
///
/// `origin_mm` is the centre of voxel `(0, 0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub values: Array3<f32>,
}

impl VoxelGrid {
    pub fn zeros(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Self {
        Self {
            spacing_mm,
            origin_mm,
            values: Array3::zeros((dims[2], dims[1], dims[0])),
        }
    }

    /// A grid centred on the vial axis and the optical mid-plane.
    pub fn centered(dims: [usize; 3], spacing_mm: [f64; 3]) -> Self {
        let origin = [0, 1, 2].map(|d| -(dims[d] as f64 - 1.0) * 0.5 * spacing_mm[d]);
        Self::zeros(dims, spacing_mm, origin)
    }

    pub fn from_values(
        values: Array3<f32>,
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
    ) -> Result<Self> {
        let grid = Self {
            spacing_mm,
            origin_mm,
            values,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// `(nx, ny, nz)`.
    pub fn dims(&self) -> [usize; 3] {
        let (nz, ny, nx) = self.values.dim();
        [nx, ny, nz]
    }

    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.dims();
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidInput("voxel grid has a zero dimension".into()));
        }
        if self.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "voxel spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self.origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("voxel grid origin"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("voxel grid values"));
        }
        Ok(())
    }

    /// Slice-wise tomography needs square in-plane voxels centred on the axis.
    pub fn slice_grid(&self) -> Result<SliceGrid> {
        let [nx, ny, _] = self.dims();
        let [sx, sy, _] = self.spacing_mm;
        if (sx - sy).abs() > 1e-9 * sx.max(sy) {
            return Err(Error::InvalidInput(format!(
                "in-plane spacing must be isotropic, got {sx} x {sy}"
            )));
        }
        let grid = SliceGrid {
            nx,
            ny,
            spacing_mm: sx,
        };
        let ox = grid.x(0);
        let oy = grid.y(0);
        if (ox - self.origin_mm[0]).abs() > 1e-6 * sx || (oy - self.origin_mm[1]).abs() > 1e-6 * sx
        {
            return Err(Error::InvalidInput(
                "voxel grid is not centred on the vial axis".into(),
            ));
        }
        Ok(grid)
    }

    #[inline]
    pub fn position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + ix as f64 * self.spacing_mm[0],
            self.origin_mm[1] + iy as f64 * self.spacing_mm[1],
            self.origin_mm[2] + iz as f64 * self.spacing_mm[2],
        ]
    }

    #[inline]
    pub fn z(&self, iz: usize) -> f64 {
        self.origin_mm[2] + iz as f64 * self.spacing_mm[2]
    }

    /// Physical extent `[min, max]` of voxel centres along each axis.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let d = self.dims();
        let mut hi = [0.0; 3];
        for a in 0..3 {
            hi[a] = self.origin_mm[a] + (d[a] as f64 - 1.0) * self.spacing_mm[a];
        }
        (self.origin_mm, hi)
    }

    pub fn slice(&self, iz: usize) -> ArrayView2<'_, f32> {
        self.values.index_axis(Axis(0), iz)
    }

    pub fn slice_mut(&mut self, iz: usize) -> ArrayViewMut2<'_, f32> {
        self.values.index_axis_mut(Axis(0), iz)
    }

    /// Copies slice `iz` out as `f64`.
    pub fn slice_f64(&self, iz: usize) -> Array2<f64> {
        self.slice(iz).mapv(f64::from)
    }

    pub fn set_slice(&mut self, iz: usize, data: &Array2<f64>) {
        self.slice_mut(iz)
            .zip_mut_with(data, |dst, &src| *dst = src as f32);
    }

    /// Trilinear interpolation at a physical point; `None` outside the voxel-centre hull.
    pub fn sample(&self, p: [f64; 3]) -> Option<f64> {
        let d = self.dims();
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin_mm[a]) / self.spacing_mm[a];
            let max = d[a] as f64 - 1.0;
            if !(-1e-9..=max + 1e-9).contains(&f) {
                return None;
            }
            let f = f.clamp(0.0, max);
            let i = (f.floor() as usize).min(d[a].saturating_sub(2));
            idx[a] = i;
            frac[a] = if d[a] == 1 { 0.0 } else { f - i as f64 };
        }
        let get = |dx: usize, dy: usize, dz: usize| -> f64 {
            let x = (idx[0] + dx).min(d[0] - 1);
            let y = (idx[1] + dy).min(d[1] - 1);
            let z = (idx[2] + dz).min(d[2] - 1);
            f64::from(self.values[[z, y, x]])
        };
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - frac[2]), (1, frac[2])] {
            for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                for (dx, wx) in [(0, 1.0 - frac[0]), (1, frac[0])] {
                    let w = wx * wy * wz;
                    if w != 0.0 {
                        acc += w * get(dx, dy, dz);
                    }
                }
            }
        }
        Some(acc)
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn count_above(&self, threshold: f32) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }
}

/// Sequence of 2D frames, each tagged with a vial rotation angle.
///
/// Frame arrays are `[row][col]`; row index increases with height.
/// Column `j` sits at `(j - col_center) * col_pitch_mm` and row `r` at
/// `(r - row_center) * row_pitch_mm`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    pub frames: Vec<Array2<f32>>,
    pub angles_deg: Vec<f64>,
    pub col_pitch_mm: f64,
    pub row_pitch_mm: f64,
    pub col_center: f64,
    pub row_center: f64,
}

impl ImageStack {
    pub fn new(
        rows: usize,
        cols: usize,
        angles_deg: Vec<f64>,
        col_pitch_mm: f64,
        row_pitch_mm: f64,
    ) -> Self {
        let frames = angles_deg.iter().map(|_| Array2::zeros((rows, cols))).collect();
        Self {
            frames,
            angles_deg,
            col_pitch_mm,
            row_pitch_mm,
            col_center: (cols as f64 - 1.0) * 0.5,
            row_center: (rows as f64 - 1.0) * 0.5,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(rows, cols)` of every frame.
    pub fn frame_dims(&self) -> (usize, usize) {
        self.frames.first().map(|f| f.dim()).unwrap_or((0, 0))
    }

    #[inline]
    pub fn col_x(&self, j: usize) -> f64 {
        (j as f64 - self.col_center) * self.col_pitch_mm
    }

    #[inline]
    pub fn row_y(&self, r: usize) -> f64 {
        (r as f64 - self.row_center) * self.row_pitch_mm
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.angles_deg.len() {
            return Err(Error::InvalidInput(format!(
                "{} frames but {} angles",
                self.frames.len(),
                self.angles_deg.len()
            )));
        }
        let dims = self.frame_dims();
        if self.frames.iter().any(|f| f.dim() != dims) {
            return Err(Error::InvalidInput("frames differ in size".into()));
        }
        if self.angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("frame angles must be strictly increasing".into()));
        }
        if !(self.col_pitch_mm > 0.0 && self.row_pitch_mm > 0.0) {
            return Err(Error::InvalidInput("pixel pitch must be positive".into()));
        }
        Ok(())
    }

    /// Multiplies every frame by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.mapv_inplace(|v| v * factor);
        }
        out
    }

    /// Sums `factor x factor` pixel blocks, emulating stream-level camera binning.
    pub fn binned(&self, factor: usize) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let (rows, cols) = self.frame_dims();
        let (br, bc) = (rows / factor, cols / factor);
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let mut out = Array2::<f32>::zeros((br, bc));
                for ((r, c), v) in out.indexed_iter_mut() {
                    let mut acc = 0.0f32;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            acc += f[[r * factor + dr, c * factor + dc]];
                        }
                    }
                    *v = acc / (factor * factor) as f32;
                }
                out
            })
            .collect();
        let f = factor as f64;
        Self {
            frames,
            angles_deg: self.angles_deg.clone(),
            col_pitch_mm: self.col_pitch_mm * f,
            row_pitch_mm: self.row_pitch_mm * f,
            col_center: (self.col_center - (f - 1.0) * 0.5) / f,
            row_center: (self.row_center - (f - 1.0) * 0.5) / f,
        }
    }

    /// The frames in the latest window spanning one full turn.
    pub fn latest_turn(&self) -> Result<ImageStack> {
        let n = self.angles_deg.len();
        if n < 2 {
            return Err(Error::InsufficientCoverage { span_deg: 0.0 });
        }
        let step = self.angles_deg[n - 1] - self.angles_deg[n - 2];
        let last = self.angles_deg[n - 1];
        let start = self
            .angles_deg
            .iter()
            .position(|&a| a > last - 360.0 + 0.5 * step)
            .unwrap_or(0);
        let span = last - self.angles_deg[start] + step;
        if span < 360.0 - 1e-6 {
            return Err(Error::InsufficientCoverage {
                span_deg: last - self.angles_deg[0] + step,
            });
        }
        Ok(ImageStack {
            frames: self.frames[start..].to_vec(),
            angles_deg: self.angles_deg[start..].to_vec(),
            ..self.clone_meta()
        })
    }

    /// Frames whose angle falls in `[lo, hi)`.
    pub fn window(&self, lo_deg: f64, hi_deg: f64) -> ImageStack {
        let (frames, angles_deg) = self
            .frames
            .iter()
            .zip(&self.angles_deg)
            .filter(|(_, &a)| a >= lo_deg - 1e-9 && a < hi_deg - 1e-9)
            .map(|(f, &a)| (f.clone(), a))
            .unzip();
        ImageStack {
            frames,
            angles_deg,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> ImageStack {
        ImageStack {
            frames: Vec::new(),
            angles_deg: Vec::new(),
            col_pitch_mm: self.col_pitch_mm,
            row_pitch_mm: self.row_pitch_mm,
            col_center: self.col_center,
            row_center: self.row_center,
        }
    }
}
