use std::collections::HashMap;

use super::{MeshBvh, SurfaceMesh, TriFeature};
use crate::geometry::Vec3;

/// Signed point-to-surface distance for a closed, outward-wound mesh:
/// positive outside, negative inside. The sign comes from the
/// angle-weighted pseudonormal of the closest feature.
#[derive(Debug, Clone)]
pub struct SignedDistance {
    bvh: MeshBvh,
    triangles: Vec<[u32; 3]>,
    face_normals: Vec<Vec3>,
    vertex_normals: Vec<Vec3>,
    edge_normals: HashMap<(u32, u32), Vec3>,
}

impl SignedDistance {
    pub fn new(mesh: &SurfaceMesh) -> Self {
        let mut vertex_normals = vec![Vec3::zeros(); mesh.vertices.len()];
        let mut edge_normals: HashMap<(u32, u32), Vec3> = HashMap::new();
        let mut face_normals = Vec::with_capacity(mesh.triangles.len());
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let p = mesh.triangle(t);
            let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let n = if n.norm() > 0.0 { n.normalize() } else { Vec3::zeros() };
            face_normals.push(n);
            for k in 0..3 {
                let e1 = p[(k + 1) % 3] - p[k];
                let e2 = p[(k + 2) % 3] - p[k];
                let angle = if e1.norm() > 0.0 && e2.norm() > 0.0 { e1.angle(&e2) } else { 0.0 };
                vertex_normals[tri[k] as usize] += n * angle;
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edge_normals.entry((a.min(b), a.max(b))).or_default() += n;
            }
        }
        SignedDistance { bvh: MeshBvh::new(mesh), triangles: mesh.triangles.clone(), face_normals, vertex_normals, edge_normals }
    }

    pub fn unsigned(&self, p: &Vec3) -> Option<f64> {
        self.bvh.distance(p)
    }

    pub fn signed(&self, p: &Vec3) -> Option<f64> {
        let c = self.bvh.closest(p)?;
        let tri = self.triangles[c.triangle];
        let normal = match c.feature {
            TriFeature::Face => self.face_normals[c.triangle],
            TriFeature::Vertex(k) => self.vertex_normals[tri[k as usize] as usize],
            TriFeature::Edge(i, j) => {
                let (a, b) = (tri[i as usize], tri[j as usize]);
                self.edge_normals[&(a.min(b), a.max(b))]
            }
        };
        Some(if (p - c.point).dot(&normal) < 0.0 { -c.distance } else { c.distance })
    }
}
