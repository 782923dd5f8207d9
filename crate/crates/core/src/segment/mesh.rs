use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::LabelKind;
use crate::geometry::{FrameId, Vec3};

const MAGIC: &str = "# usnav-mesh 1";

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Triangle mesh with counter-clockwise (outward) winding.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub kind: LabelKind,
    pub frame: FrameId,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>, kind: LabelKind) -> Self {
        SurfaceMesh { vertices, triangles, kind, frame: FrameId::Reference }
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Enclosed volume by the divergence theorem; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    fn edge_uses(&self) -> HashMap<(u32, u32), (u32, u32)> {
        // undirected edge -> (uses as a->b with a<b, uses as b->a)
        let mut uses: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                let entry = uses.entry((a.min(b), a.max(b))).or_default();
                if a < b {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
        }
        uses
    }

    pub fn edge_count(&self) -> usize {
        self.edge_uses().len()
    }

    /// V − E + F, counting only vertices referenced by a triangle.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_count() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles that traverse it in
    /// opposite directions.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_uses().values().all(|&u| u == (1, 1))
    }

    pub fn translated(&self, t: &Vec3) -> SurfaceMesh {
        SurfaceMesh { vertices: self.vertices.iter().map(|v| v + t).collect(), ..self.clone() }
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    /// Wavefront-compatible text with shortest round-trip number formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "# kind {}", self.kind.as_str());
        let _ = writeln!(s, "# frame {}", serde_json::to_string(&self.frame).unwrap().trim_matches('"'));
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut kind = LabelKind::Tumor;
        let mut frame = FrameId::Reference;
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| MeshError::Parse { line: i + 1, msg };
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# kind ") {
                kind = LabelKind::parse(rest.trim()).ok_or_else(|| err(format!("unknown kind '{rest}'")))?;
                continue;
            }
            if let Some(rest) = line.strip_prefix("# frame ") {
                frame = serde_json::from_str(&format!("\"{}\"", rest.trim()))
                    .map_err(|_| err(format!("unknown frame '{rest}'")))?;
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_ascii_whitespace();
            match parts.next() {
                Some("v") => {
                    let mut c = [0.0f64; 3];
                    for x in c.iter_mut() {
                        let tok = parts.next().ok_or_else(|| err("vertex needs three coordinates".into()))?;
                        *x = tok.parse().map_err(|_| err(format!("bad coordinate '{tok}'")))?;
                    }
                    vertices.push(Vec3::from(c));
                }
                Some("f") => {
                    let mut t = [0u32; 3];
                    for x in t.iter_mut() {
                        let tok = parts.next().ok_or_else(|| err("face needs three indices".into()))?;
                        // accept "a/b/c" style references, keep the vertex index
                        let idx: u32 = tok.split('/').next().unwrap_or("").parse().map_err(|_| err(format!("bad index '{tok}'")))?;
                        if idx == 0 {
                            return Err(err("face indices are 1-based".into()));
                        }
                        *x = idx - 1;
                    }
                    triangles.push(t);
                }
                Some(other) => return Err(err(format!("unknown record '{other}'"))),
                None => {}
            }
            if parts.next().is_some() {
                return Err(err("trailing fields".into()));
            }
        }
        let n = vertices.len() as u32;
        if let Some(pos) = triangles.iter().position(|t| t.iter().any(|&v| v >= n)) {
            return Err(MeshError::Parse { line: 0, msg: format!("face {} references a missing vertex", pos + 1) });
        }
        Ok(SurfaceMesh { vertices, triangles, kind, frame })
    }

    pub fn save(&self, path: &Path) -> Result<(), MeshError> {
        fs::write(path, self.to_text()).map_err(|source| MeshError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, MeshError> {
        let text = fs::read_to_string(path).map_err(|source| MeshError::Io { path: path.display().to_string(), source })?;
        SurfaceMesh::from_text(&text)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Unit-edge tetrahedron with outward winding.
    pub fn tetrahedron() -> SurfaceMesh {
        SurfaceMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
            LabelKind::Tumor,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::testing::tetrahedron;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tetrahedron_metrics() {
        let t = tetrahedron();
        assert!((t.signed_volume() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(t.euler_characteristic(), 2);
        assert!(t.is_watertight());
        let area = 1.5 + 3f64.sqrt() / 2.0;
        assert!((t.area() - area).abs() < 1e-12);
        let mut open = t.clone();
        open.triangles.pop();
        assert!(!open.is_watertight());
        let mut flipped = t.clone();
        flipped.triangles[0] = [0, 1, 2];
        assert!(!flipped.is_watertight());
    }

    #[test]
    fn text_parse_errors() {
        assert!(matches!(SurfaceMesh::from_text("v 1 2\n"), Err(MeshError::Parse { line: 1, .. })));
        assert!(matches!(SurfaceMesh::from_text("v 0 0 0\nf 1 2 x\n"), Err(MeshError::Parse { line: 2, .. })));
        assert!(SurfaceMesh::from_text("v 0 0 0\nf 1 1 2\n").is_err());
        let m = SurfaceMesh::from_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2/2 3/3\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
    }

    proptest! {
        #[test]
        fn text_roundtrip_is_bit_exact(
            verts in prop::collection::vec(prop::array::uniform3(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL), 3..40),
            tris in prop::collection::vec(prop::array::uniform3(0u32..3), 0..40),
        ) {
            let m = SurfaceMesh {
                vertices: verts.into_iter().map(Vec3::from).collect(),
                triangles: tris,
                kind: LabelKind::Vessel,
                frame: FrameId::PreopModel,
            };
            let back = SurfaceMesh::from_text(&m.to_text()).unwrap();
            prop_assert_eq!(back.triangles, m.triangles);
            prop_assert_eq!(back.kind, m.kind);
            prop_assert_eq!(back.frame, m.frame);
            for (a, b) in back.vertices.iter().zip(&m.vertices) {
                for k in 0..3 {
                    prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
                }
            }
        }
    }
}
