//! Convex hulls: quickhull construction, coplanar face merging, support
//! queries, and volume integrals for inertia.

use crate::math::{Aabb, Mat3, Vec3};
use crate::mesh::{MeshError, TriMesh};

/// Polygonal face of a convex hull. `indices` wind counter-clockwise seen
/// from outside; the plane is `normal . x = offset`.
#[derive(Debug, Clone)]
pub struct HullFace {
    pub normal: Vec3,
    pub offset: f64,
    pub indices: Vec<usize>,
}

/// Convex polytope with merged coplanar faces, in the body frame.
#[derive(Debug, Clone)]
pub struct ConvexHull {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<HullFace>,
    pub edges: Vec<(usize, usize)>,
}

impl ConvexHull {
    pub fn from_mesh(mesh: &TriMesh) -> Result<ConvexHull, MeshError> {
        let points: Vec<Vec3> = mesh.vertex_iter().collect();
        ConvexHull::from_points(&points)
    }

    pub fn from_points(points: &[Vec3]) -> Result<ConvexHull, MeshError> {
        quickhull(points)
    }

    /// Index of the vertex with maximal projection onto `dir`.
    pub fn support_index(&self, dir: &Vec3) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, v) in self.vertices.iter().enumerate() {
            let d = v.dot(dir);
            if d > best_dot {
                best_dot = d;
                best = i;
            }
        }
        best
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter()).expect("hull has vertices")
    }

    /// Volume, centroid, and inertia tensor about the centroid for unit
    /// density, via signed-tetrahedron integrals over the faces.
    pub fn volume_integrals(&self) -> (f64, Vec3, Mat3) {
        let mut volume = 0.0;
        let mut centroid_acc = Vec3::zeros();
        // Second moments about the origin: m[i][j] = integral of x_i x_j.
        let mut second = Mat3::zeros();

        for face in &self.faces {
            let v0 = self.vertices[face.indices[0]];
            for k in 1..face.indices.len() - 1 {
                let a = v0;
                let b = self.vertices[face.indices[k]];
                let c = self.vertices[face.indices[k + 1]];
                let vol = a.dot(&b.cross(&c)) / 6.0;
                volume += vol;
                centroid_acc += vol * (a + b + c) / 4.0;
                let s = a + b + c;
                for i in 0..3 {
                    for j in 0..3 {
                        second[(i, j)] +=
                            vol / 20.0 * (a[i] * a[j] + b[i] * b[j] + c[i] * c[j] + s[i] * s[j]);
                    }
                }
            }
        }

        let centroid = centroid_acc / volume;
        // Inertia about the origin, then parallel-axis shift to the centroid.
        let trace = second[(0, 0)] + second[(1, 1)] + second[(2, 2)];
        let mut inertia_origin = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                inertia_origin[(i, j)] = if i == j {
                    trace - second[(i, i)]
                } else {
                    -second[(i, j)]
                };
            }
        }
        let d = centroid;
        let d2 = d.dot(&d);
        let mut shift = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                shift[(i, j)] = volume * (if i == j { d2 } else { 0.0 } - d[i] * d[j]);
            }
        }
        (volume, centroid, inertia_origin - shift)
    }
}

struct QhFace {
    verts: [usize; 3],
    normal: Vec3,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

fn plane_of(points: &[Vec3], a: usize, b: usize, c: usize) -> (Vec3, f64) {
    let n = (points[b] - points[a]).cross(&(points[c] - points[a]));
    let n = n / n.norm().max(1e-300);
    (n, n.dot(&points[a]))
}

fn quickhull(points: &[Vec3]) -> Result<ConvexHull, MeshError> {
    if points.len() < 4 {
        return Err(MeshError::DegenerateMesh(format!(
            "hull needs at least 4 points, got {}",
            points.len()
        )));
    }
    let bbox = Aabb::from_points(points.iter()).unwrap();
    let diag = bbox.diagonal();
    if diag < 1e-12 {
        return Err(MeshError::DegenerateMesh("zero-extent point set".into()));
    }
    let eps = 1e-10 + 1e-9 * diag;

    // Initial simplex: extreme pair, then farthest from the line, then from
    // the plane.
    let (mut i0, mut i1) = (0, 0);
    let mut best = -1.0;
    for axis in 0..3 {
        let lo = (0..points.len())
            .min_by(|&a, &b| points[a][axis].partial_cmp(&points[b][axis]).unwrap())
            .unwrap();
        let hi = (0..points.len())
            .max_by(|&a, &b| points[a][axis].partial_cmp(&points[b][axis]).unwrap())
            .unwrap();
        let d = (points[hi] - points[lo]).norm();
        if d > best {
            best = d;
            i0 = lo;
            i1 = hi;
        }
    }
    if best < eps {
        return Err(MeshError::DegenerateMesh("all points coincident".into()));
    }
    let dir = (points[i1] - points[i0]).normalize();
    let i2 = (0..points.len())
        .max_by(|&a, &b| {
            let da = (points[a] - points[i0]).cross(&dir).norm();
            let db = (points[b] - points[i0]).cross(&dir).norm();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    if (points[i2] - points[i0]).cross(&dir).norm() < eps {
        return Err(MeshError::DegenerateMesh("points are collinear".into()));
    }
    let (n, off) = plane_of(points, i0, i1, i2);
    let i3 = (0..points.len())
        .max_by(|&a, &b| {
            let da = (n.dot(&points[a]) - off).abs();
            let db = (n.dot(&points[b]) - off).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    if (n.dot(&points[i3]) - off).abs() < eps {
        return Err(MeshError::DegenerateMesh("points are coplanar".into()));
    }

    let mut faces: Vec<QhFace> = Vec::new();
    let make_face = |points: &[Vec3], a: usize, b: usize, c: usize, interior: &Vec3| -> QhFace {
        let (mut n, mut off) = plane_of(points, a, b, c);
        let mut verts = [a, b, c];
        if n.dot(interior) - off > 0.0 {
            verts = [a, c, b];
            n = -n;
            off = -off;
        }
        QhFace {
            verts,
            normal: n,
            offset: off,
            outside: Vec::new(),
            alive: true,
        }
    };
    let interior = (points[i0] + points[i1] + points[i2] + points[i3]) / 4.0;
    faces.push(make_face(points, i0, i1, i2, &interior));
    faces.push(make_face(points, i0, i1, i3, &interior));
    faces.push(make_face(points, i0, i2, i3, &interior));
    faces.push(make_face(points, i1, i2, i3, &interior));

    // Assign points to the first face they are outside of.
    let simplex = [i0, i1, i2, i3];
    for (pi, p) in points.iter().enumerate() {
        if simplex.contains(&pi) {
            continue;
        }
        for f in faces.iter_mut() {
            if f.normal.dot(p) - f.offset > eps {
                f.outside.push(pi);
                break;
            }
        }
    }

    loop {
        // Face with the farthest outside point.
        let mut pick: Option<(usize, usize, f64)> = None;
        for (fi, f) in faces.iter().enumerate() {
            if !f.alive {
                continue;
            }
            for &pi in &f.outside {
                let d = f.normal.dot(&points[pi]) - f.offset;
                if pick.map_or(true, |(_, _, pd)| d > pd) {
                    pick = Some((fi, pi, d));
                }
            }
        }
        let Some((_, apex, _)) = pick else { break };
        let apex_p = points[apex];

        // Visible set and horizon.
        let visible: Vec<usize> = faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.alive && f.normal.dot(&apex_p) - f.offset > eps)
            .map(|(i, _)| i)
            .collect();

        use std::collections::HashMap;
        let mut edge_owner: HashMap<(usize, usize), usize> = HashMap::new();
        for &fi in &visible {
            let v = faces[fi].verts;
            for e in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
                edge_owner.insert(e, fi);
            }
        }
        // Horizon: directed edges of visible faces whose reversed edge is not
        // owned by a visible face.
        let mut horizon: Vec<(usize, usize)> = Vec::new();
        for (&(a, b), _) in edge_owner.iter() {
            if !edge_owner.contains_key(&(b, a)) {
                horizon.push((a, b));
            }
        }
        horizon.sort();

        let mut orphan_points: Vec<usize> = Vec::new();
        for &fi in &visible {
            faces[fi].alive = false;
            orphan_points.append(&mut faces[fi].outside);
        }
        orphan_points.sort_unstable();
        orphan_points.dedup();

        let mut new_face_ids = Vec::new();
        for (a, b) in horizon {
            let mut f = make_face(points, a, b, apex, &interior);
            // Orientation safety: an interior-point check can fail for thin
            // hulls, so re-check against the hull interior estimate.
            if f.normal.dot(&interior) - f.offset > eps {
                f.verts.swap(1, 2);
                f.normal = -f.normal;
                f.offset = -f.offset;
            }
            faces.push(f);
            new_face_ids.push(faces.len() - 1);
        }
        for pi in orphan_points {
            if pi == apex {
                continue;
            }
            for &fi in &new_face_ids {
                if faces[fi].normal.dot(&points[pi]) - faces[fi].offset > eps {
                    faces[fi].outside.push(pi);
                    break;
                }
            }
        }
    }

    let tri_faces: Vec<&QhFace> = faces.iter().filter(|f| f.alive).collect();
    merge_faces(points, &tri_faces)
}

/// Merge coplanar hull triangles into polygon faces and reindex vertices.
fn merge_faces(points: &[Vec3], tris: &[&QhFace]) -> Result<ConvexHull, MeshError> {
    let mut groups: Vec<(Vec3, f64, Vec<usize>)> = Vec::new(); // (normal, offset, tri ids)
    let bbox = Aabb::from_points(points.iter()).unwrap();
    let tol_n = 1e-7;
    let tol_d = 1e-9 + 1e-7 * bbox.diagonal();
    for (ti, t) in tris.iter().enumerate() {
        let mut found = false;
        for g in groups.iter_mut() {
            if g.0.dot(&t.normal) > 1.0 - tol_n && (g.1 - t.offset).abs() < tol_d {
                g.2.push(ti);
                found = true;
                break;
            }
        }
        if !found {
            groups.push((t.normal, t.offset, vec![ti]));
        }
    }

    let mut raw_faces: Vec<(Vec3, f64, Vec<usize>)> = Vec::new(); // polygon loops in old indices
    for (normal, offset, tri_ids) in &groups {
        use std::collections::HashMap;
        let mut next: HashMap<usize, usize> = HashMap::new();
        let mut boundary: Vec<(usize, usize)> = Vec::new();
        let mut dir_edges: std::collections::HashSet<(usize, usize)> = Default::default();
        for &ti in tri_ids {
            let v = tris[ti].verts;
            for e in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
                dir_edges.insert(e);
            }
        }
        for &(a, b) in dir_edges.iter() {
            if !dir_edges.contains(&(b, a)) {
                boundary.push((a, b));
            }
        }
        if boundary.is_empty() {
            return Err(MeshError::DegenerateMesh("hull face merge produced no boundary".into()));
        }
        boundary.sort();
        for &(a, b) in &boundary {
            next.insert(a, b);
        }
        let start = boundary[0].0;
        let mut loop_idx = vec![start];
        let mut cur = next[&start];
        let mut guard = 0;
        while cur != start {
            loop_idx.push(cur);
            cur = *next
                .get(&cur)
                .ok_or_else(|| MeshError::DegenerateMesh("open hull face loop".into()))?;
            guard += 1;
            if guard > boundary.len() + 1 {
                return Err(MeshError::DegenerateMesh("hull face loop did not close".into()));
            }
        }
        raw_faces.push((*normal, *offset, loop_idx));
    }

    // Reindex to used vertices only.
    let mut remap: std::collections::BTreeMap<usize, usize> = Default::default();
    for (_, _, loop_idx) in &raw_faces {
        for &i in loop_idx {
            let n = remap.len();
            remap.entry(i).or_insert(n);
        }
    }
    let mut vertices = vec![Vec3::zeros(); remap.len()];
    for (&old, &new) in &remap {
        vertices[new] = points[old];
    }
    let mut hull_faces = Vec::new();
    let mut edge_set: std::collections::BTreeSet<(usize, usize)> = Default::default();
    for (normal, offset, loop_idx) in raw_faces {
        let indices: Vec<usize> = loop_idx.iter().map(|i| remap[i]).collect();
        for k in 0..indices.len() {
            let a = indices[k];
            let b = indices[(k + 1) % indices.len()];
            edge_set.insert((a.min(b), a.max(b)));
        }
        hull_faces.push(HullFace { normal, offset, indices });
    }

    Ok(ConvexHull {
        vertices,
        faces: hull_faces,
        edges: edge_set.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::box_mesh;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cube_hull_has_box_topology() {
        let hull = ConvexHull::from_mesh(&box_mesh(Vec3::repeat(0.5))).unwrap();
        assert_eq!(hull.vertices.len(), 8);
        assert_eq!(hull.faces.len(), 6);
        assert_eq!(hull.edges.len(), 12);
        for f in &hull.faces {
            assert_eq!(f.indices.len(), 4);
        }
        let (vol, centroid, _) = hull.volume_integrals();
        assert!((vol - 1.0).abs() < 1e-9);
        assert!(centroid.norm() < 1e-9);
    }

    #[test]
    fn hull_of_random_cloud_contains_all_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let hull = ConvexHull::from_points(&pts).unwrap();
        for p in &pts {
            for f in &hull.faces {
                assert!(f.normal.dot(p) - f.offset < 1e-6, "point outside hull face");
            }
        }
        // Euler characteristic of a convex polytope.
        assert_eq!(
            hull.vertices.len() + hull.faces.len(),
            hull.edges.len() + 2
        );
    }

    #[test]
    fn interior_points_do_not_change_hull_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<Vec3> = box_mesh(Vec3::repeat(0.5)).vertex_iter().collect();
        for _ in 0..50 {
            pts.push(Vec3::new(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            ));
        }
        let hull = ConvexHull::from_points(&pts).unwrap();
        let (vol, _, _) = hull.volume_integrals();
        assert!((vol - 1.0).abs() < 1e-9);
        assert_eq!(hull.vertices.len(), 8);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let flat: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, (i * i) as f64, 0.0)).collect();
        assert!(ConvexHull::from_points(&flat).is_err());
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(ConvexHull::from_points(&line).is_err());
    }
}
