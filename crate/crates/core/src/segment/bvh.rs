use super::SurfaceMesh;
use crate::geometry::Vec3;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// leaf: range into `order`; inner: children at `start` and `start + 1`
    start: usize,
    count: usize,
}

/// Axis-aligned bounding-volume hierarchy over the triangles of a mesh,
/// answering exact closest-point queries.
#[derive(Debug, Clone)]
pub struct MeshBvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub point: Vec3,
    pub distance: f64,
    pub triangle: usize,
    pub feature: TriFeature,
}

/// Part of a triangle a closest point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriFeature {
    /// Corner 0, 1 or 2.
    Vertex(u8),
    /// Edge between corners `(i, j)`, `i < j`.
    Edge(u8, u8),
    Face,
}

/// Closest point on triangle `abc` to `p`, by Voronoi-region classification.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    closest_feature_on_triangle(p, a, b, c).0
}

pub fn closest_feature_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, TriFeature) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, TriFeature::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, TriFeature::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return (a + ab * (d1 / (d1 - d3)), TriFeature::Edge(0, 1));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, TriFeature::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return (a + ac * (d2 / (d2 - d6)), TriFeature::Edge(0, 2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return (b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6))), TriFeature::Edge(1, 2));
    }
    let denom = 1.0 / (va + vb + vc);
    (a + ab * (vb * denom) + ac * (vc * denom), TriFeature::Face)
}

fn box_distance2(p: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    (0..3)
        .map(|a| {
            let d = (lo[a] - p[a]).max(0.0).max(p[a] - hi[a]);
            d * d
        })
        .sum()
}

impl MeshBvh {
    pub fn new(mesh: &SurfaceMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
        let mut bvh = MeshBvh { order: (0..tris.len()).collect(), tris, nodes: Vec::new() };
        if !bvh.tris.is_empty() {
            bvh.nodes.push(Node { lo: Vec3::zeros(), hi: Vec3::zeros(), start: 0, count: 0 });
            bvh.build(0, 0, bvh.tris.len());
        }
        bvh
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    fn bounds(&self, range: &[usize]) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &t in range {
            for v in &self.tris[t] {
                lo = lo.inf(v);
                hi = hi.sup(v);
            }
        }
        (lo, hi)
    }

    fn build(&mut self, node: usize, start: usize, end: usize) {
        let (lo, hi) = self.bounds(&self.order[start..end]);
        let count = end - start;
        if count <= LEAF_SIZE {
            self.nodes[node] = Node { lo, hi, start, count };
            return;
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z { 0 } else if ext.y >= ext.z { 1 } else { 2 };
        let mid = start + count / 2;
        let tris = &self.tris;
        let key = |t: &usize| tris[*t][0][axis] + tris[*t][1][axis] + tris[*t][2][axis];
        self.order[start..end].select_nth_unstable_by(count / 2, |a, b| key(a).total_cmp(&key(b)).then(a.cmp(b)));
        let left = self.nodes.len();
        let dummy = Node { lo, hi, start: 0, count: 0 };
        self.nodes.push(dummy.clone());
        self.nodes.push(dummy);
        self.nodes[node] = Node { lo, hi, start: left, count: 0 };
        self.build(left, start, mid);
        self.build(left + 1, mid, end);
    }

    /// Exact closest point on the mesh surface; `None` for an empty mesh.
    pub fn closest(&self, p: &Vec3) -> Option<ClosestPoint> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = ClosestPoint { point: *p, distance: f64::INFINITY, triangle: usize::MAX, feature: TriFeature::Face };
        let mut best2 = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if box_distance2(p, &node.lo, &node.hi) >= best2 {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start..node.start + node.count] {
                    let [a, b, c] = &self.tris[t];
                    let (q, feature) = closest_feature_on_triangle(p, a, b, c);
                    let d2 = (q - p).norm_squared();
                    if d2 < best2 || (d2 == best2 && t < best.triangle) {
                        best2 = d2;
                        best = ClosestPoint { point: q, distance: 0.0, triangle: t, feature };
                    }
                }
            } else {
                let (l, r) = (node.start, node.start + 1);
                let dl = box_distance2(p, &self.nodes[l].lo, &self.nodes[l].hi);
                let dr = box_distance2(p, &self.nodes[r].lo, &self.nodes[r].hi);
                // visit the nearer child first
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best.distance = best2.sqrt();
        Some(best)
    }

    pub fn distance(&self, p: &Vec3) -> Option<f64> {
        self.closest(p).map(|c| c.distance)
    }
}
