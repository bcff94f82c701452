//! Triangle meshes: ingestion cleanup, normalization, and OBJ loading.

use crate::math::{Aabb, Vec3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("triangle {tri} references vertex {index} out of range (vertex count {count})")]
    IndexOutOfRange { tri: usize, index: usize, count: usize },
    #[error("failed to read OBJ file {path}: {source}")]
    ObjIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("OBJ parse error at {path}:{line}: {message}")]
    ObjParse { path: String, line: usize, message: String },
}

/// Triangle mesh in meters. Watertightness is not required; collision uses
/// the convex hull downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Self {
        TriMesh { vertices, triangles }
    }

    pub fn vertex(&self, i: usize) -> Vec3 {
        let v = self.vertices[i];
        Vec3::new(v[0], v[1], v[2])
    }

    pub fn vertex_iter(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.vertices.iter().map(|v| Vec3::new(v[0], v[1], v[2]))
    }

    /// Mean of the vertex positions.
    pub fn vertex_centroid(&self) -> Vec3 {
        let mut sum = Vec3::zeros();
        for v in self.vertex_iter() {
            sum += v;
        }
        sum / self.vertices.len().max(1) as f64
    }

    pub fn aabb(&self) -> Option<Aabb> {
        let pts: Vec<Vec3> = self.vertex_iter().collect();
        Aabb::from_points(pts.iter())
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let a = self.vertex(t[0]);
        let b = self.vertex(t[1]);
        let c = self.vertex(t[2]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Ingestion cleanup: merge duplicate vertices (1e-9 grid) and drop
    /// zero-area triangles, keeping index validity.
    pub fn cleaned(&self) -> Result<TriMesh, MeshError> {
        let count = self.vertices.len();
        for (ti, t) in self.triangles.iter().enumerate() {
            for &i in t {
                if i >= count {
                    return Err(MeshError::IndexOutOfRange { tri: ti, index: i, count });
                }
            }
        }

        use std::collections::HashMap;
        let quantize = |v: &[f64; 3]| {
            (
                (v[0] * 1e9).round() as i64,
                (v[1] * 1e9).round() as i64,
                (v[2] * 1e9).round() as i64,
            )
        };
        let mut remap = vec![usize::MAX; count];
        let mut seen: HashMap<(i64, i64, i64), usize> = HashMap::new();
        let mut vertices = Vec::new();
        for (i, v) in self.vertices.iter().enumerate() {
            let key = quantize(v);
            let idx = *seen.entry(key).or_insert_with(|| {
                vertices.push(*v);
                vertices.len() - 1
            });
            remap[i] = idx;
        }

        let mut triangles = Vec::new();
        for t in &self.triangles {
            let mapped = [remap[t[0]], remap[t[1]], remap[t[2]]];
            if mapped[0] == mapped[1] || mapped[1] == mapped[2] || mapped[0] == mapped[2] {
                continue;
            }
            let probe = TriMesh {
                vertices: vertices.clone(),
                triangles: vec![mapped],
            };
            if probe.triangle_area(&mapped) < 1e-14 {
                continue;
            }
            triangles.push(mapped);
        }

        if vertices.is_empty() {
            return Err(MeshError::DegenerateMesh("no vertices after cleanup".into()));
        }
        Ok(TriMesh { vertices, triangles })
    }
}

/// Recenter on the vertex centroid and uniformly scale so the bounding-box
/// diagonal equals `target_bbox_diag`. Connectivity is untouched.
pub fn normalize_mesh(raw: &TriMesh, target_bbox_diag: f64) -> Result<TriMesh, MeshError> {
    if raw.vertices.len() < 4 {
        return Err(MeshError::DegenerateMesh(format!(
            "need at least 4 vertices, got {}",
            raw.vertices.len()
        )));
    }
    assert!(target_bbox_diag > 0.0, "target_bbox_diag must be positive");
    let bbox = raw
        .aabb()
        .ok_or_else(|| MeshError::DegenerateMesh("empty mesh".into()))?;
    let diag = bbox.diagonal();
    if diag < 1e-12 {
        return Err(MeshError::DegenerateMesh("zero-extent mesh".into()));
    }
    let scale = target_bbox_diag / diag;
    let centroid = raw.vertex_centroid();
    let vertices = raw
        .vertex_iter()
        .map(|v| {
            let p = (v - centroid) * scale;
            [p.x, p.y, p.z]
        })
        .collect();
    Ok(TriMesh {
        vertices,
        triangles: raw.triangles.clone(),
    })
}

/// Axis-aligned box mesh with the given half extents, centered at the origin.
pub fn box_mesh(half_extents: Vec3) -> TriMesh {
    let h = half_extents;
    let signs = [-1.0, 1.0];
    let mut vertices = Vec::with_capacity(8);
    for &sz in &signs {
        for &sy in &signs {
            for &sx in &signs {
                vertices.push([sx * h.x, sy * h.y, sz * h.z]);
            }
        }
    }
    // Outward-facing winding per face.
    let triangles = vec![
        [0, 2, 1], [1, 2, 3], // z-
        [4, 5, 6], [5, 7, 6], // z+
        [0, 1, 4], [1, 5, 4], // y-
        [2, 6, 3], [3, 6, 7], // y+
        [0, 4, 2], [2, 4, 6], // x-
        [1, 3, 5], [3, 7, 5], // x+
    ];
    TriMesh { vertices, triangles }
}

/// Load a Wavefront OBJ (positions and triangular faces only). Faces with
/// more than three vertices are fan-triangulated.
pub fn load_obj(path: &Path) -> Result<TriMesh, MeshError> {
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::ObjIo {
        path: path.display().to_string(),
        source,
    })?;
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| MeshError::ObjParse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        message: format!("bad vertex coordinate: {e}"),
                    })?;
                if coords.len() != 3 {
                    return Err(MeshError::ObjParse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        message: "vertex needs 3 coordinates".into(),
                    });
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        first.parse::<i64>().map_err(|e| MeshError::ObjParse {
                            path: path.display().to_string(),
                            line: lineno + 1,
                            message: format!("bad face index: {e}"),
                        })
                    })
                    .collect::<Result<Vec<i64>, _>>()?
                    .iter()
                    .map(|&i| {
                        if i > 0 {
                            (i - 1) as usize
                        } else {
                            (vertices.len() as i64 + i) as usize
                        }
                    })
                    .collect();
                if idx.len() < 3 {
                    return Err(MeshError::ObjParse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        message: "face needs at least 3 vertices".into(),
                    });
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh { vertices, triangles }.cleaned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_recenters_unit_cube() {
        let mut cube = box_mesh(Vec3::repeat(0.5));
        for v in &mut cube.vertices {
            v[0] += 5.0;
            v[1] += 5.0;
            v[2] += 5.0;
        }
        let out = normalize_mesh(&cube, 3.0_f64.sqrt()).unwrap();
        let bbox = out.aabb().unwrap();
        assert!((bbox.diagonal() - 3.0_f64.sqrt()).abs() < 1e-9);
        assert!(out.vertex_centroid().norm() < 1e-9);
        // Identity scale: edge length still 1.
        assert!((bbox.max_v() - bbox.min_v() - Vec3::repeat(1.0)).norm() < 1e-9);
    }

    #[test]
    fn normalize_scales_cube_to_double() {
        let cube = box_mesh(Vec3::repeat(0.5));
        let out = normalize_mesh(&cube, 2.0 * 3.0_f64.sqrt()).unwrap();
        let bbox = out.aabb().unwrap();
        assert!((bbox.max_v() - bbox.min_v() - Vec3::repeat(2.0)).norm() < 1e-9);
    }

    #[test]
    fn normalize_random_cloud_hits_target_diag() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vertices: Vec<[f64; 3]> = (0..100)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(0.0..9.0), rng.gen_range(1.0..2.0)])
            .collect();
        let mesh = TriMesh::new(vertices, vec![[0, 1, 2]]);
        let out = normalize_mesh(&mesh, 0.3).unwrap();
        // Independent recompute of bbox diag and centroid on the output.
        let bbox = out.aabb().unwrap();
        assert!((bbox.diagonal() - 0.3).abs() / 0.3 < 1e-6);
        assert!(out.vertex_centroid().norm() < 1e-9);
    }

    #[test]
    fn normalize_is_idempotent() {
        let cube = box_mesh(Vec3::new(0.3, 0.2, 0.1));
        let once = normalize_mesh(&cube, 0.4).unwrap();
        let twice = normalize_mesh(&once, 0.4).unwrap();
        for (a, b) in once.vertices.iter().zip(twice.vertices.iter()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_rejects_zero_extent() {
        let mesh = TriMesh::new(vec![[1.0, 1.0, 1.0]; 5], vec![]);
        assert!(matches!(
            normalize_mesh(&mesh, 1.0),
            Err(MeshError::DegenerateMesh(_))
        ));
    }

    #[test]
    fn cleanup_drops_degenerate_triangles_and_duplicates() {
        let mesh = TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
            vec![[0, 1, 2], [0, 1, 3], [0, 0, 1]],
        );
        let clean = mesh.cleaned().unwrap();
        assert_eq!(clean.vertices.len(), 3);
        assert_eq!(clean.triangles.len(), 1);
    }

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\nf 1 2 4 3\n").unwrap();
        let mesh = load_obj(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        // One triangle face plus a fan-triangulated quad.
        assert_eq!(mesh.triangles.len(), 3);
    }
}
