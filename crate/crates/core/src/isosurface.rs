//! Level-set triangulation by marching tetrahedra.
//!
//! Each cube of samples is split into six tetrahedra around its main diagonal, so
//! neighbouring cubes share faces exactly and the output is watertight. Samples
//! outside the grid count as "outside", closing surfaces at the boundary; edges
//! to those virtual samples are cut halfway.

use std::collections::HashMap;

use crate::grid::VoxelGrid;
use crate::mesh::{TriMesh, Vec3};

/// Six tetrahedra of the unit cube, corners indexed by `x | y << 1 | z << 2`.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Triangulates `{p : f(p) = iso}` of a sampled field; the inside is `f > iso`.
pub fn marching_tetrahedra(
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    iso: f64,
    sample: impl Fn(usize, usize, usize) -> f64,
) -> TriMesh {
    let [nx, ny, nz] = dims;
    // padded lattice indices run from -1 to n
    let value = |i: isize, j: isize, k: isize| -> Option<f64> {
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            None
        } else {
            Some(sample(i as usize, j as usize, k as usize))
        }
    };
    let pos = |i: isize, j: isize, k: isize| -> Vec3 {
        [
            origin[0] + i as f64 * spacing[0],
            origin[1] + j as f64 * spacing[1],
            origin[2] + k as f64 * spacing[2],
        ]
    };
    let (px, py) = (nx as i64 + 2, ny as i64 + 2);
    let lin = |i: isize, j: isize, k: isize| -> i64 {
        (i as i64 + 1) + px * ((j as i64 + 1) + py * (k as i64 + 1))
    };

    let mut mesh = TriMesh::default();
    let mut cache: HashMap<(i64, i64), u32> = HashMap::new();
    let mut vertex = |a: (isize, isize, isize, Option<f64>), b: (isize, isize, isize, Option<f64>), mesh: &mut TriMesh| -> u32 {
        let (ka, kb) = (lin(a.0, a.1, a.2), lin(b.0, b.1, b.2));
        let key = (ka.min(kb), ka.max(kb));
        *cache.entry(key).or_insert_with(|| {
            let t = match (a.3, b.3) {
                (Some(va), Some(vb)) => ((iso - va) / (vb - va)).clamp(0.0, 1.0),
                _ => 0.5,
            };
            let (pa, pb) = (pos(a.0, a.1, a.2), pos(b.0, b.1, b.2));
            mesh.vertices
                .push([0, 1, 2].map(|d| pa[d] + t * (pb[d] - pa[d])));
            (mesh.vertices.len() - 1) as u32
        })
    };

    for k in -1..nz as isize {
        for j in -1..ny as isize {
            for i in -1..nx as isize {
                let corners: [(isize, isize, isize, Option<f64>); 8] = std::array::from_fn(|c| {
                    let (ci, cj, ck) = (
                        i + (c & 1) as isize,
                        j + ((c >> 1) & 1) as isize,
                        k + ((c >> 2) & 1) as isize,
                    );
                    (ci, cj, ck, value(ci, cj, ck))
                });
                let inside = corners.map(|c| c.3.is_some_and(|v| v > iso));
                let n_in = inside.iter().filter(|&&b| b).count();
                if n_in == 0 || n_in == 8 {
                    continue;
                }
                for tet in TETS {
                    let tin: Vec<usize> = tet.iter().copied().filter(|&c| inside[c]).collect();
                    let tout: Vec<usize> = tet.iter().copied().filter(|&c| !inside[c]).collect();
                    let polygon: Vec<u32> = match tin.len() {
                        1 => tout.iter().map(|&o| vertex(corners[tin[0]], corners[o], &mut mesh)).collect(),
                        3 => tin.iter().map(|&c| vertex(corners[c], corners[tout[0]], &mut mesh)).collect(),
                        2 => vec![
                            vertex(corners[tin[0]], corners[tout[0]], &mut mesh),
                            vertex(corners[tin[0]], corners[tout[1]], &mut mesh),
                            vertex(corners[tin[1]], corners[tout[1]], &mut mesh),
                            vertex(corners[tin[1]], corners[tout[0]], &mut mesh),
                        ],
                        _ => continue,
                    };
                    let centre = |cs: &[usize]| -> Vec3 {
                        let mut s = [0.0; 3];
                        for &c in cs {
                            let p = pos(corners[c].0, corners[c].1, corners[c].2);
                            for d in 0..3 {
                                s[d] += p[d] / cs.len() as f64;
                            }
                        }
                        s
                    };
                    let outward = {
                        let (ci, co) = (centre(&tin), centre(&tout));
                        [co[0] - ci[0], co[1] - ci[1], co[2] - ci[2]]
                    };
                    let mut emit = |a: u32, b: u32, c: u32| {
                        let (pa, pb, pc) = (
                            mesh.vertices[a as usize],
                            mesh.vertices[b as usize],
                            mesh.vertices[c as usize],
                        );
                        let u = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
                        let v = [pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]];
                        let n = [
                            u[1] * v[2] - u[2] * v[1],
                            u[2] * v[0] - u[0] * v[2],
                            u[0] * v[1] - u[1] * v[0],
                        ];
                        let s = n[0] * outward[0] + n[1] * outward[1] + n[2] * outward[2];
                        if s >= 0.0 {
                            mesh.triangles.push([a, b, c]);
                        } else {
                            mesh.triangles.push([a, c, b]);
                        }
                    };
                    emit(polygon[0], polygon[1], polygon[2]);
                    if polygon.len() == 4 {
                        emit(polygon[0], polygon[2], polygon[3]);
                    }
                }
            }
        }
    }
    mesh
}

/// Isosurface of a voxel grid at `iso` in physical coordinates.
pub fn extract(grid: &VoxelGrid, iso: f64) -> TriMesh {
    let v = &grid.values;
    marching_tetrahedra(grid.dims(), grid.spacing_mm, grid.origin_mm, iso, |i, j, k| {
        f64::from(v[[k, j, i]])
    })
}

/// Samples `f` on a regular lattice covering `[lo, hi]` and triangulates `f > 0`.
pub fn implicit_mesh(lo: Vec3, hi: Vec3, step: f64, f: impl Fn(Vec3) -> f64 + Sync) -> TriMesh {
    let dims = [0, 1, 2].map(|d| ((hi[d] - lo[d]) / step).ceil() as usize + 1);
    let at = |i: usize, j: usize, k: usize| -> Vec3 {
        [
            lo[0] + i as f64 * step,
            lo[1] + j as f64 * step,
            lo[2] + k as f64 * step,
        ]
    };
    let n = dims[0] * dims[1] * dims[2];
    use rayon::prelude::*;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let i = idx % dims[0];
            let j = (idx / dims[0]) % dims[1];
            let k = idx / (dims[0] * dims[1]);
            f(at(i, j, k))
        })
        .collect();
    marching_tetrahedra(dims, [step; 3], lo, 0.0, |i, j, k| {
        values[i + dims[0] * (j + dims[1] * k)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_grid(n: usize, h: f64, r: f64) -> VoxelGrid {
        let mut g = VoxelGrid::centered([n, n, n], [h; 3]);
        for ((k, j, i), v) in g.values.indexed_iter_mut() {
            let c = (n as f64 - 1.0) * 0.5;
            let p = [(i as f64 - c) * h, (j as f64 - c) * h, (k as f64 - c) * h];
            *v = (r - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()) as f32;
        }
        g
    }

    #[test]
    fn sphere_level_set() {
        let (h, r) = (0.2, 2.5);
        let g = sphere_grid(32, h, r);
        let m = extract(&g, 0.0);
        assert!(m.is_watertight());
        for v in &m.vertices {
            let rad = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((rad - r).abs() < 0.5 * h, "{rad}");
        }
        let vol = m.volume();
        let want = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!((vol - want).abs() < 0.03 * want, "{vol} vs {want}");
    }

    #[test]
    fn empty_when_below_iso() {
        let g = VoxelGrid::zeros([5, 5, 5], [1.0; 3], [0.0; 3]);
        assert!(extract(&g, 0.5).is_empty());
    }

    #[test]
    fn closes_at_grid_boundary() {
        let mut g = VoxelGrid::zeros([4, 4, 4], [1.0; 3], [0.0; 3]);
        g.values.fill(1.0);
        let m = extract(&g, 0.5);
        assert!(m.is_watertight());
        // boundary cut halfway to the virtual outside layer
        let vol = m.volume();
        assert!(vol > 27.0 && vol < 64.0, "{vol}");
    }

    #[test]
    fn level_sets_nest() {
        let g = sphere_grid(24, 0.25, 2.0);
        let outer = extract(&g, -0.3);
        let inner = extract(&g, 0.4);
        let test = crate::mesh::InsideTest::new(&outer).unwrap();
        assert!(inner.vertices.iter().all(|&v| test.contains(v)));
        assert!(outer.volume() > inner.volume());
    }

    #[test]
    fn implicit_box() {
        let m = implicit_mesh([-1.5; 3], [1.5; 3], 0.1, |p| {
            1.0 - p[0].abs().max(p[1].abs()).max(p[2].abs())
        });
        assert!(m.is_watertight());
        assert!((m.volume() - 8.0).abs() < 0.05 * 8.0);
    }
}
