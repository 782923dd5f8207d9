use std::collections::HashMap;

use super::{LabelMask, SegmentError, SurfaceMesh};
use crate::geometry::Vec3;
use crate::usrecon::GridGeometry;

/// Jacobi smoothing passes applied to the raw isosurface.
pub const SMOOTHING_ITERATIONS: usize = 10;
/// Vertices stay within this fraction of either end of their grid edge.
const EDGE_CLAMP: f64 = 0.2;

const CUBE: [[i64; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Six tetrahedra sharing the 0–6 diagonal; the split is the same in every
/// cell so neighbouring cells agree on shared faces.
const TETS: [[usize; 4]; 6] = [[0, 1, 2, 6], [0, 1, 5, 6], [0, 3, 2, 6], [0, 3, 7, 6], [0, 4, 5, 6], [0, 4, 7, 6]];

struct Builder<'a> {
    mask: &'a LabelMask,
    /// (inside lattice point, outside lattice point) per mesh vertex
    edges: Vec<([i64; 3], [i64; 3])>,
    lookup: HashMap<([i64; 3], [i64; 3]), u32>,
    triangles: Vec<[u32; 3]>,
}

impl Builder<'_> {
    fn inside(&self, p: [i64; 3]) -> bool {
        let g = &self.mask.geometry;
        g.contains_index(p) && self.mask.contains(g.index(p[0] as usize, p[1] as usize, p[2] as usize))
    }

    fn point(&self, p: [i64; 3]) -> Vec3 {
        let g = &self.mask.geometry;
        Vec3::new(
            g.origin[0] + g.spacing * p[0] as f64,
            g.origin[1] + g.spacing * p[1] as f64,
            g.origin[2] + g.spacing * p[2] as f64,
        )
    }

    fn vertex(&mut self, inside: [i64; 3], outside: [i64; 3]) -> u32 {
        let next = self.edges.len() as u32;
        *self.lookup.entry((inside, outside)).or_insert_with(|| {
            self.edges.push((inside, outside));
            next
        })
    }

    fn midpoint(&self, v: u32) -> Vec3 {
        let (a, b) = self.edges[v as usize];
        (self.point(a) + self.point(b)) * 0.5
    }

    fn emit(&mut self, mut tri: [u32; 3], outward: Vec3) {
        let [a, b, c] = tri.map(|v| self.midpoint(v));
        if (b - a).cross(&(c - a)).dot(&outward) < 0.0 {
            tri.swap(1, 2);
        }
        self.triangles.push(tri);
    }

    fn tetrahedron(&mut self, pts: [[i64; 3]; 4]) {
        let (ins, outs): (Vec<[i64; 3]>, Vec<[i64; 3]>) = pts.iter().partition(|p| self.inside(**p));
        if ins.is_empty() || outs.is_empty() {
            return;
        }
        let centroid = |s: &[[i64; 3]]| s.iter().map(|p| self.point(*p)).sum::<Vec3>() / s.len() as f64;
        let outward = centroid(&outs) - centroid(&ins);
        match (ins.len(), outs.len()) {
            (1, 3) => {
                let t = [0, 1, 2].map(|k| self.vertex(ins[0], outs[k]));
                self.emit(t, outward);
            }
            (3, 1) => {
                let t = [0, 1, 2].map(|k| self.vertex(ins[k], outs[0]));
                self.emit(t, outward);
            }
            _ => {
                // quad with corners in cyclic order a0, a1, b1, b0
                let a0 = self.vertex(ins[0], outs[0]);
                let a1 = self.vertex(ins[0], outs[1]);
                let b1 = self.vertex(ins[1], outs[1]);
                let b0 = self.vertex(ins[1], outs[0]);
                self.emit([a0, a1, b1], outward);
                self.emit([a0, b1, b0], outward);
            }
        }
    }
}

/// Closed triangulated boundary of a binary mask.
///
/// The mask is treated as a piecewise-linear field on a Kuhn tetrahedral
/// subdivision of the voxel-center lattice, padded with one layer of
/// outside voxels, and its 0.5 level set is extracted. Each vertex then
/// slides along its own lattice edge towards the mean of its neighbours,
/// which removes the staircase bias of the raw level set without changing
/// the topology.
pub fn extract_surface(m: &LabelMask) -> Result<SurfaceMesh, SegmentError> {
    if m.is_empty() {
        return Err(SegmentError::EmptySegment);
    }
    let mut b = Builder { mask: m, edges: Vec::new(), lookup: HashMap::new(), triangles: Vec::new() };
    let d = m.geometry.dims.map(|x| x as i64);
    for k in -1..d[2] {
        for j in -1..d[1] {
            for i in -1..d[0] {
                let corners = CUBE.map(|o| [i + o[0], j + o[1], k + o[2]]);
                let flags = corners.map(|c| b.inside(c));
                if flags.iter().all(|&f| f) || !flags.iter().any(|&f| f) {
                    continue;
                }
                for tet in TETS {
                    b.tetrahedron(tet.map(|t| corners[t]));
                }
            }
        }
    }
    let vertices = smooth(&b);
    Ok(SurfaceMesh::new(vertices, b.triangles, m.kind))
}

fn smooth(b: &Builder) -> Vec<Vec3> {
    let n = b.edges.len();
    let mut neighbours: Vec<Vec<u32>> = vec![Vec::new(); n];
    for t in &b.triangles {
        for e in 0..3 {
            neighbours[t[e] as usize].push(t[(e + 1) % 3]);
            neighbours[t[e] as usize].push(t[(e + 2) % 3]);
        }
    }
    for list in &mut neighbours {
        list.sort_unstable();
        list.dedup();
    }
    let ends: Vec<(Vec3, Vec3)> = b.edges.iter().map(|&(i, o)| (b.point(i), b.point(o))).collect();
    let mut t = vec![0.5f64; n];
    let position = |t: &[f64], v: usize| ends[v].0 + (ends[v].1 - ends[v].0) * t[v];
    for _ in 0..SMOOTHING_ITERATIONS {
        let next: Vec<f64> = (0..n)
            .map(|v| {
                let nb = &neighbours[v];
                let mean = nb.iter().map(|&w| position(&t, w as usize)).sum::<Vec3>() / nb.len() as f64;
                let (a, e) = (ends[v].0, ends[v].1 - ends[v].0);
                ((mean - a).dot(&e) / e.norm_squared()).clamp(EDGE_CLAMP, 1.0 - EDGE_CLAMP)
            })
            .collect();
        t = next;
    }
    (0..n).map(|v| position(&t, v)).collect()
}

/// Surface of `m` point-sampled onto a grid no finer than `min_spacing`,
/// for display. Falls back to the full-resolution surface when sampling
/// would lose the whole mask.
pub fn display_surface(m: &LabelMask, min_spacing: f64) -> Result<SurfaceMesh, SegmentError> {
    let g = m.geometry;
    let k = (min_spacing / g.spacing - 1e-9).ceil().max(1.0) as usize;
    if k == 1 {
        return extract_surface(m);
    }
    let dims = g.dims.map(|n| (n - 1) / k + 1);
    let coarse_g = GridGeometry::new(g.origin, g.spacing * k as f64, dims);
    let mut coarse = LabelMask::empty(coarse_g, m.kind);
    for idx in 0..coarse_g.len() {
        let [i, j, l] = coarse_g.coords(idx);
        coarse.data[idx] = m.data[g.index(i * k, j * k, l * k)];
    }
    if coarse.is_empty() {
        return extract_surface(m);
    }
    extract_surface(&coarse)
}
