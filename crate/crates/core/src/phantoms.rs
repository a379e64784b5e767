//! Test objects: anti-aliased 2D slices and closed meshes.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::grid::SliceGrid;
use crate::isosurface::implicit_mesh;
use crate::mesh::{TriMesh, Vec3};

const SUPERSAMPLE: usize = 4;

/// Rasterizes `inside(x, y)` with per-pixel coverage from a 4x4 supersample.
pub fn coverage_slice(grid: &SliceGrid, inside: impl Fn(f64, f64) -> bool) -> Array2<f64> {
    let h = grid.spacing_mm / SUPERSAMPLE as f64;
    let off = (SUPERSAMPLE as f64 - 1.0) * 0.5;
    let mut out = grid.zeros();
    for ((iy, ix), v) in out.indexed_iter_mut() {
        let mut hits = 0;
        for a in 0..SUPERSAMPLE {
            for b in 0..SUPERSAMPLE {
                let x = grid.x(ix) + (a as f64 - off) * h;
                let y = grid.y(iy) + (b as f64 - off) * h;
                hits += usize::from(inside(x, y));
            }
        }
        *v = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    }
    out
}

/// Binary rasterization at pixel centres.
pub fn binary_slice(grid: &SliceGrid, inside: impl Fn(f64, f64) -> bool) -> Array2<f64> {
    let mut out = grid.zeros();
    for ((iy, ix), v) in out.indexed_iter_mut() {
        *v = f64::from(u8::from(inside(grid.x(ix), grid.y(iy))));
    }
    out
}

pub fn disk_slice(grid: &SliceGrid, radius_mm: f64) -> Array2<f64> {
    coverage_slice(grid, |x, y| x * x + y * y <= radius_mm * radius_mm)
}

pub fn in_annulus(x: f64, y: f64, r_in: f64, r_out: f64) -> bool {
    let r2 = x * x + y * y;
    r2 >= r_in * r_in && r2 <= r_out * r_out
}

/// Boat-like cross-section scaled to `length_mm`: a hull with a pointed bow, a
/// hollow deck well with thin walls, and a round chimney boss.
pub fn in_boat(x: f64, y: f64, length_mm: f64) -> bool {
    let s = length_mm / 10.0;
    let (x, y) = (x / s, y / s);
    let hull = |x: f64, y: f64, shrink: f64| -> bool {
        let (stern, bow) = (-5.0 + shrink, 5.0 - 1.6 * shrink);
        if x < stern || x > bow {
            return false;
        }
        let half = 2.6 - shrink;
        // straight aft body, parabolic taper toward the bow
        let w = if x < 1.0 {
            half
        } else {
            half * (1.0 - ((x - 1.0) / (bow - 1.0)).powi(2)).max(0.0)
        };
        y.abs() <= w
    };
    let wall = hull(x, y, 0.0) && !hull(x, y, 0.45);
    let chimney = (x + 1.2).hypot(y) <= 0.9;
    let bulkhead = (x - 0.2).abs() <= 0.2 && hull(x, y, 0.0);
    wall || chimney || bulkhead
}

/// Closed cylinder along z, centred at the origin.
pub fn cylinder_mesh(radius: f64, height: f64, segments: usize) -> TriMesh {
    let n = segments.max(3);
    let (zb, zt) = (-0.5 * height, 0.5 * height);
    let mut vertices = vec![[0.0, 0.0, zb], [0.0, 0.0, zt]];
    for i in 0..n {
        let a = 2.0 * PI * i as f64 / n as f64;
        let (x, y) = (radius * a.cos(), radius * a.sin());
        vertices.push([x, y, zb]);
        vertices.push([x, y, zt]);
    }
    let b = |i: usize| (2 + 2 * (i % n)) as u32;
    let t = |i: usize| (3 + 2 * (i % n)) as u32;
    let mut triangles = Vec::with_capacity(4 * n);
    for i in 0..n {
        triangles.push([b(i), b(i + 1), t(i + 1)]);
        triangles.push([b(i), t(i + 1), t(i)]);
        triangles.push([1, t(i), t(i + 1)]);
        triangles.push([0, b(i + 1), b(i)]);
    }
    TriMesh {
        vertices,
        triangles,
    }
}

pub fn sphere_mesh(radius: f64, step: f64) -> TriMesh {
    let e = radius + 2.0 * step;
    implicit_mesh([-e; 3], [e; 3], step, |p| radius - norm(p))
}

#[inline]
fn norm(p: Vec3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Gyroid sheet lattice clipped to a cylinder.
#[derive(Clone, Copy, Debug)]
pub struct Lattice {
    pub radius_mm: f64,
    pub height_mm: f64,
    pub period_mm: f64,
    /// Sheet half-thickness in units of the gyroid function.
    pub level: f64,
}

impl Default for Lattice {
    fn default() -> Self {
        Self {
            radius_mm: 5.5,
            height_mm: 8.0,
            period_mm: 4.0,
            level: 0.6,
        }
    }
}

impl Lattice {
    /// Positive inside, roughly in mm near the surface.
    pub fn field(&self, p: Vec3) -> f64 {
        let k = 2.0 * PI / self.period_mm;
        let (x, y, z) = (k * p[0], k * p[1], k * p[2]);
        let g = x.sin() * y.cos() + y.sin() * z.cos() + z.sin() * x.cos();
        let sheet = (self.level - g.abs()) / (1.3 * k);
        let can = (self.radius_mm - p[0].hypot(p[1])).min(0.5 * self.height_mm - p[2].abs());
        sheet.min(can)
    }

    pub fn mesh(&self, step: f64) -> TriMesh {
        let e = [self.radius_mm + 2.0 * step, self.radius_mm + 2.0 * step, 0.5 * self.height_mm + 2.0 * step];
        implicit_mesh([-e[0], -e[1], -e[2]], e, step, |p| self.field(p))
    }
}

fn smooth_union(a: f64, b: f64, k: f64) -> f64 {
    // on "positive inside" fields
    let h = (0.5 + 0.5 * (a - b) / k).clamp(0.0, 1.0);
    b + (a - b) * h + k * h * (1.0 - h)
}

fn ellipsoid(p: Vec3, c: Vec3, r: Vec3) -> f64 {
    let q = [(p[0] - c[0]) / r[0], (p[1] - c[1]) / r[1], (p[2] - c[2]) / r[2]];
    (1.0 - norm(q)) * r[0].min(r[1]).min(r[2])
}

/// Rabbit-like blob: body, head, two ears and a tail, `scale` = 1 spans about 10 mm.
pub fn bunny_field(p: Vec3, scale: f64) -> f64 {
    let p = p.map(|c| c / scale);
    let body = ellipsoid(p, [-0.6, 0.0, -1.6], [3.6, 2.7, 2.6]);
    let head = ellipsoid(p, [2.4, 0.0, 1.4], [1.7, 1.5, 1.5]);
    let ear = |side: f64| {
        // lean the ears back by rotating about y
        let (c, s) = (0.35f64.cos(), 0.35f64.sin());
        let d = [p[0] - 1.9, p[1] - side * 0.75, p[2] - 3.6];
        let q = [c * d[0] - s * d[2], d[1], s * d[0] + c * d[2]];
        ellipsoid(q, [0.0; 3], [0.55, 0.4, 1.7])
    };
    let tail = ellipsoid(p, [-4.1, 0.0, -1.0], [0.8, 0.8, 0.8]);
    let f = smooth_union(body, head, 0.6);
    let f = smooth_union(f, ear(1.0), 0.3);
    let f = smooth_union(f, ear(-1.0), 0.3);
    smooth_union(f, tail, 0.3) * scale
}

pub fn bunny_mesh(scale: f64, step: f64) -> TriMesh {
    let e = 6.5 * scale;
    implicit_mesh([-e, -e, -e], [e, e, e], step, |p| bunny_field(p, scale))
}

/// Two parallel square struts along y, centre-to-centre `separation` apart in x.
pub fn strut_pair_field(p: Vec3, separation: f64, width: f64, length: f64) -> f64 {
    let strut = |cx: f64| {
        (0.5 * width - (p[0] - cx).abs())
            .min(0.5 * width - p[2].abs())
            .min(0.5 * length - p[1].abs())
    };
    strut(-0.5 * separation).max(strut(0.5 * separation))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_coverage_area() {
        let grid = SliceGrid::square(100, 0.1);
        let area = disk_slice(&grid, 3.0).sum() * 0.01;
        assert!((area - PI * 9.0).abs() < 0.01 * PI * 9.0);
    }

    #[test]
    fn boat_has_thin_and_coarse_parts() {
        let grid = SliceGrid::square(128, 0.1);
        let boat = binary_slice(&grid, |x, y| in_boat(x, y, 10.0));
        let filled = boat.sum();
        assert!(filled > 500.0 && filled < 0.5 * 128.0 * 128.0);
        assert!(in_boat(-1.2, 0.0, 10.0));
        assert!(!in_boat(2.0, 0.0, 10.0));
        assert!(in_boat(-4.9, 0.0, 10.0));
    }

    #[test]
    fn cylinder_is_closed_with_right_volume() {
        let m = cylinder_mesh(6.0, 10.0, 256);
        assert!(m.is_watertight());
        let want = PI * 36.0 * 10.0;
        assert!((m.volume() - want).abs() < 1e-3 * want);
    }

    #[test]
    fn implicit_phantoms_are_closed() {
        let s = sphere_mesh(3.0, 0.2);
        assert!(s.is_watertight());
        assert!((s.volume() - 4.0 / 3.0 * PI * 27.0).abs() < 0.03 * 113.1);
        let b = bunny_mesh(0.8, 0.2);
        assert!(b.is_watertight() && b.volume() > 0.0);
        let (lo, hi) = b.bounds().unwrap();
        assert!(hi[0] - lo[0] > 5.0 && hi[2] - lo[2] > 5.0);
        let l = Lattice::default().mesh(0.2);
        assert!(l.is_watertight() && l.volume() > 0.0);
        assert!(l.volume() < 0.6 * PI * 5.5 * 5.5 * 8.0);
    }
}
