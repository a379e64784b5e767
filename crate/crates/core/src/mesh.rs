//! Triangle meshes, nearest-surface queries and axis-aligned line crossings.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
#[inline]
fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
#[inline]
fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
#[inline]
fn axpy(a: Vec3, t: f64, d: Vec3) -> Vec3 {
    [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]]
}

/// Indexed triangle mesh. Winding is counter-clockwise seen from outside.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if triangles.iter().flatten().any(|&i| i as usize >= n) {
            return Err(Error::InvalidInput("triangle index out of range".into()));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mesh vertices"));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    /// Builds an indexed mesh from a triangle soup, merging vertices closer than `tol`.
    pub fn from_soup(soup: &[[Vec3; 3]], tol: f64) -> Result<Self> {
        let mut lookup: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut vertices: Vec<Vec3> = Vec::new();
        let key = |p: Vec3| {
            if tol > 0.0 {
                p.map(|c| (c / tol).floor() as i64)
            } else {
                p.map(|c| c.to_bits() as i64)
            }
        };
        let mut index_of = |p: Vec3| -> u32 {
            let k = key(p);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if let Some(ids) = lookup.get(&[k[0].saturating_add(dx), k[1].saturating_add(dy), k[2].saturating_add(dz)]) {
                            for &id in ids {
                                let q = vertices[id as usize];
                                let d = sub(p, q);
                                if dot(d, d) <= tol * tol {
                                    return id;
                                }
                            }
                        }
                    }
                }
            }
            let id = vertices.len() as u32;
            vertices.push(p);
            lookup.entry(k).or_default().push(id);
            id
        };
        let mut triangles = Vec::with_capacity(soup.len());
        for tri in soup {
            let t = [index_of(tri[0]), index_of(tri[1]), index_of(tri[2])];
            triangles.push(t);
        }
        Self::new(vertices, triangles)
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn soup(&self) -> Vec<[Vec3; 3]> {
        (0..self.triangles.len()).map(|t| self.triangle(t)).collect()
    }

    /// Every undirected edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        edges.values().all(|&c| c == 2)
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let mut it = self.vertices.iter();
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| {
            (
                [lo[0].min(v[0]), lo[1].min(v[1]), lo[2].min(v[2])],
                [hi[0].max(v[0]), hi[1].max(v[1]), hi[2].max(v[2])],
            )
        }))
    }

    /// Largest bounding-box extent.
    pub fn max_dimension(&self) -> f64 {
        self.bounds()
            .map(|(lo, hi)| (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max))
            .unwrap_or(0.0)
    }

    /// Signed enclosed volume (positive for outward winding).
    pub fn volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                let n = cross(sub(b, a), sub(c, a));
                0.5 * dot(n, n).sqrt()
            })
            .sum()
    }

    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.map_vertices(|v| v.map(|c| c * k))
    }

    pub fn translated(&self, d: Vec3) -> Self {
        self.map_vertices(|v| [v[0] + d[0], v[1] + d[1], v[2] + d[2]])
    }

    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|t| [t[0], t[2], t[1]]).collect(),
        }
    }

    /// Appends another mesh (no welding).
    pub fn append(&mut self, other: &TriMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + off)));
    }
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return axpy(a, d1 / (d1 - d3), ab);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return axpy(a, d2 / (d2 - d6), ac);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return axpy(b, (d4 - d3) / ((d4 - d3) + (d5 - d6)), sub(c, b));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    axpy(axpy(a, v, ab), w, ac)
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }
    fn grow(&mut self, p: Vec3) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }
    fn dist2(&self, p: Vec3) -> f64 {
        (0..3)
            .map(|k| {
                let d = (self.lo[k] - p[k]).max(p[k] - self.hi[k]).max(0.0);
                d * d
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
struct BvhNode {
    bbox: Aabb,
    /// Leaf: range into `order`; inner: children indices.
    start: u32,
    count: u32,
    left: u32,
    right: u32,
}

/// Bounding-volume hierarchy for exact nearest-surface distance.
#[derive(Clone, Debug)]
pub struct Bvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<u32>,
    nodes: Vec<BvhNode>,
}

const LEAF: usize = 4;

impl Bvh {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::InvalidInput("empty mesh".into()));
        }
        let tris = mesh.soup();
        let centroids: Vec<Vec3> = tris
            .iter()
            .map(|t| [0, 1, 2].map(|k| (t[0][k] + t[1][k] + t[2][k]) / 3.0))
            .collect();
        let mut bvh = Self {
            order: (0..tris.len() as u32).collect(),
            tris,
            nodes: Vec::new(),
        };
        let n = bvh.order.len();
        bvh.build(0, n, &centroids);
        Ok(bvh)
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Vec3]) -> u32 {
        let mut bbox = Aabb::empty();
        let mut cbox = Aabb::empty();
        for &t in &self.order[start..end] {
            for v in self.tris[t as usize] {
                bbox.grow(v);
            }
            cbox.grow(centroids[t as usize]);
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(BvhNode {
            bbox,
            start: start as u32,
            count: (end - start) as u32,
            left: 0,
            right: 0,
        });
        if end - start <= LEAF {
            return id;
        }
        let axis = (0..3)
            .max_by(|&a, &b| {
                (cbox.hi[a] - cbox.lo[a])
                    .partial_cmp(&(cbox.hi[b] - cbox.lo[b]))
                    .unwrap()
            })
            .unwrap();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a as usize][axis]
                .partial_cmp(&centroids[b as usize][axis])
                .unwrap()
        });
        let left = self.build(start, mid, centroids);
        let right = self.build(mid, end, centroids);
        let node = &mut self.nodes[id as usize];
        node.count = 0;
        node.left = left;
        node.right = right;
        id
    }

    /// Closest surface point and its distance.
    pub fn nearest(&self, p: Vec3) -> (Vec3, f64) {
        let mut best = (p, f64::INFINITY);
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            if node.bbox.dist2(p) >= best.1 {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let [a, b, c] = self.tris[t as usize];
                    let q = closest_point_on_triangle(p, a, b, c);
                    let d = sub(p, q);
                    let d2 = dot(d, d);
                    if d2 < best.1 {
                        best = (q, d2);
                    }
                }
            } else {
                let (l, r) = (node.left, node.right);
                let dl = self.nodes[l as usize].bbox.dist2(p);
                let dr = self.nodes[r as usize].bbox.dist2(p);
                if dl < dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        (best.0, best.1.sqrt())
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        self.nearest(p).1
    }
}

/// Crossings of axis-parallel lines with a mesh, bucketed in the two transverse axes.
///
/// Ties on shared edges follow a top-left rule on projected, counter-clockwise
/// normalized triangles, so every line crosses a watertight mesh an even number of times.
#[derive(Clone, Debug)]
pub struct LineCrossings {
    axis: usize,
    /// Projected triangles (u, v) with the along-axis plane for intersection.
    tris: Vec<ProjectedTri>,
    lo: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<u32>>,
}

#[derive(Clone, Copy, Debug)]
struct ProjectedTri {
    p: [[f64; 2]; 3],
    w: [f64; 3],
}

impl LineCrossings {
    /// Index for lines parallel to `axis` (0 = x, 1 = y, 2 = z).
    pub fn new(mesh: &TriMesh, axis: usize) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::InvalidInput("empty mesh".into()));
        }
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut tris = Vec::with_capacity(mesh.triangles.len());
        for t in 0..mesh.triangles.len() {
            let tri = mesh.triangle(t);
            let mut p = tri.map(|q| [q[u], q[v]]);
            let mut w = tri.map(|q| q[axis]);
            let area = orient(p[0], p[1], p[2]);
            if area == 0.0 {
                continue;
            }
            if area < 0.0 {
                p.swap(1, 2);
                w.swap(1, 2);
            }
            tris.push(ProjectedTri { p, w });
        }
        let (lo3, hi3) = mesh.bounds().unwrap();
        let lo = [lo3[u], lo3[v]];
        let ext = [hi3[u] - lo3[u], hi3[v] - lo3[v]];
        let target = (tris.len() as f64).sqrt().max(1.0);
        let cell = (ext[0].max(ext[1]) / target).max(1e-9);
        let dims = [
            (ext[0] / cell).floor() as usize + 1,
            (ext[1] / cell).floor() as usize + 1,
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        for (i, t) in tris.iter().enumerate() {
            let (mut a, mut b) = ([usize::MAX; 2], [0usize; 2]);
            for q in t.p {
                for k in 0..2 {
                    let c = (((q[k] - lo[k]) / cell).floor().max(0.0) as usize).min(dims[k] - 1);
                    a[k] = a[k].min(c);
                    b[k] = b[k].max(c);
                }
            }
            for cu in a[0]..=b[0] {
                for cv in a[1]..=b[1] {
                    buckets[cu * dims[1] + cv].push(i as u32);
                }
            }
        }
        Ok(Self {
            axis,
            tris,
            lo,
            cell,
            dims,
            buckets,
        })
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    /// Sorted along-axis coordinates where the line at transverse `(u, v)` crosses the surface.
    pub fn crossings(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let cu = ((u - self.lo[0]) / self.cell).floor();
        let cv = ((v - self.lo[1]) / self.cell).floor();
        if cu < 0.0 || cv < 0.0 || cu as usize >= self.dims[0] || cv as usize >= self.dims[1] {
            return out;
        }
        let q = [u, v];
        for &i in &self.buckets[cu as usize * self.dims[1] + cv as usize] {
            let t = &self.tris[i as usize];
            let mut bary = [0.0; 3];
            let mut inside = true;
            for k in 0..3 {
                let (a, b) = (t.p[(k + 1) % 3], t.p[(k + 2) % 3]);
                let e = orient(a, b, q);
                if e < 0.0 || (e == 0.0 && !top_left(a, b)) {
                    inside = false;
                    break;
                }
                bary[k] = e;
            }
            if inside {
                let s = bary[0] + bary[1] + bary[2];
                out.push((bary[0] * t.w[0] + bary[1] * t.w[1] + bary[2] * t.w[2]) / s);
            }
        }
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    /// Parity test: odd number of crossings beyond `p` along the axis.
    pub fn inside(&self, p: Vec3) -> bool {
        let (u, v) = ((self.axis + 1) % 3, (self.axis + 2) % 3);
        let c = self.crossings(p[u], p[v]);
        c.iter().filter(|&&w| w > p[self.axis]).count() % 2 == 1
    }
}

#[inline]
fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Top or left edge of a counter-clockwise triangle.
#[inline]
fn top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let d = [b[0] - a[0], b[1] - a[1]];
    (d[1] == 0.0 && d[0] < 0.0) || d[1] > 0.0
}

/// Inside test by majority over the three axis directions.
#[derive(Clone, Debug)]
pub struct InsideTest {
    lines: [LineCrossings; 3],
}

impl InsideTest {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        Ok(Self {
            lines: [
                LineCrossings::new(mesh, 0)?,
                LineCrossings::new(mesh, 1)?,
                LineCrossings::new(mesh, 2)?,
            ],
        })
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.lines.iter().filter(|l| l.inside(p)).count() >= 2
    }
}

/// Closed axis-aligned box.
pub fn box_mesh(lo: Vec3, hi: Vec3) -> TriMesh {
    let v = |i: usize| {
        [
            if i & 1 == 0 { lo[0] } else { hi[0] },
            if i & 2 == 0 { lo[1] } else { hi[1] },
            if i & 4 == 0 { lo[2] } else { hi[2] },
        ]
    };
    let vertices = (0..8).map(v).collect();
    let triangles = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    TriMesh {
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_cube() -> TriMesh {
        box_mesh([0.0; 3], [1.0; 3])
    }

    #[test]
    fn cube_is_closed_with_unit_volume() {
        let m = unit_cube();
        assert!(m.is_watertight());
        assert!((m.volume() - 1.0).abs() < 1e-12);
        assert!((m.area() - 6.0).abs() < 1e-12);
        assert_eq!(m.max_dimension(), 1.0);
        let mut open = m.clone();
        open.triangles.pop();
        assert!(!open.is_watertight());
    }

    #[test]
    fn soup_merge_recovers_shared_vertices() {
        let m = unit_cube();
        let jittered: Vec<[Vec3; 3]> = m
            .soup()
            .iter()
            .map(|t| t.map(|p| p.map(|c| c + 1e-9)))
            .collect();
        let merged = TriMesh::from_soup(&jittered, 1e-6).unwrap();
        assert_eq!(merged.vertices.len(), 8);
        assert!(merged.is_watertight());
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert_eq!(closest_point_on_triangle([-1.0, -1.0, 0.0], a, b, c), a);
        let q = closest_point_on_triangle([0.2, 0.2, 5.0], a, b, c);
        assert!((q[0] - 0.2).abs() < 1e-12 && (q[1] - 0.2).abs() < 1e-12 && q[2] == 0.0);
        let q = closest_point_on_triangle([1.0, 1.0, 0.0], a, b, c);
        assert!((q[0] - 0.5).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12);
        assert_eq!(closest_point_on_triangle([0.5, -2.0, 1.0], a, b, c), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mut m = unit_cube();
        m.append(&box_mesh([2.0, 0.0, 0.0], [2.5, 3.0, 0.5]));
        let bvh = Bvh::new(&m).unwrap();
        for p in [[0.5, 0.5, 0.5], [1.5, 0.2, 0.1], [3.0, 4.0, -1.0], [-0.3, 0.9, 2.0]] {
            let brute = (0..m.triangles.len())
                .map(|t| {
                    let [a, b, c] = m.triangle(t);
                    let q = closest_point_on_triangle(p, a, b, c);
                    dot(sub(p, q), sub(p, q)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((bvh.distance(p) - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn crossings_through_shared_edges_are_counted_once() {
        let m = unit_cube();
        let lines = LineCrossings::new(&m, 0).unwrap();
        // the cube faces are split along diagonals; (0.5, 0.5) lies on them
        assert_eq!(lines.crossings(0.5, 0.5), vec![0.0, 1.0]);
        assert_eq!(lines.crossings(0.25, 0.25).len(), 2);
        assert!(lines.crossings(1.5, 0.5).is_empty());
    }

    proptest! {
        #[test]
        fn parity_matches_box(x in -0.5f64..1.5, y in -0.5f64..1.5, z in -0.5f64..1.5) {
            let m = unit_cube();
            let test = InsideTest::new(&m).unwrap();
            let inside = (0.0..1.0).contains(&x) && (0.0..1.0).contains(&y) && (0.0..1.0).contains(&z);
            let on_face = [x, y, z].iter().any(|c| c.abs() < 1e-12 || (c - 1.0).abs() < 1e-12);
            prop_assume!(!on_face);
            prop_assert_eq!(test.contains([x, y, z]), inside);
            for axis in 0..3 {
                let l = LineCrossings::new(&m, axis).unwrap();
                let (u, v) = ([x, y, z][(axis + 1) % 3], [x, y, z][(axis + 2) % 3]);
                prop_assert_eq!(l.crossings(u, v).len() % 2, 0);
            }
        }
    }
}
