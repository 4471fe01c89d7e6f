use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::{CollisionMesh, FaceClass, Plane};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanarizeStats {
    /// Vertices moved onto at least one plane.
    pub snapped_vertices: usize,
    /// Vertices within reach of a plane that could not be moved without
    /// exceeding the snap distance or folding an incident face.
    pub unsnappable_vertices: usize,
    pub max_displacement: f64,
    /// Faces whose three corners lie on a plane and carry its class.
    pub plane_faces: usize,
}

/// Closest point to `p` on the intersection of `planes`, or `None` when the
/// planes are (nearly) parallel.
fn project_onto(p: &Vector3<f64>, planes: &[&Plane]) -> Option<Vector3<f64>> {
    let k = planes.len();
    let gram = DMatrix::from_fn(k, k, |a, b| planes[a].normal.dot(&planes[b].normal));
    if gram.clone().symmetric_eigen().eigenvalues.min() < 1e-6 {
        return None;
    }
    let rhs = DVector::from_fn(k, |a, _| -planes[a].signed_distance(p));
    let lambda = gram.cholesky()?.solve(&rhs);
    Some(planes.iter().zip(lambda.iter()).fold(*p, |x, (pl, l)| x + pl.normal * *l))
}

/// Move vertices near detected planes onto them and tag coplanar faces.
///
/// A vertex near several planes (an edge or corner of the room) goes to
/// their common intersection when that is within `snap_distance` of where it
/// started; otherwise the farthest planes are dropped one at a time. Moves
/// that would fold an incident face are refused and the vertex is counted as
/// unsnappable. Connectivity is never changed.
pub fn planarize(
    mesh: &CollisionMesh,
    planes: &[(Plane, FaceClass)],
    snap_distance: f64,
) -> Result<(CollisionMesh, PlanarizeStats)> {
    if !(snap_distance >= 0.0 && snap_distance.is_finite()) {
        return Err(Error::Argument(format!("invalid snap distance {snap_distance}")));
    }
    let mut out = mesh.clone();
    out.planes = planes.to_vec();
    let n = mesh.vertices.len();
    let mut vertex_faces: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (f, face) in mesh.faces.iter().enumerate() {
        for &v in face {
            vertex_faces[v as usize].push(f);
        }
    }

    // Candidate positions per vertex, most planes first.
    let targets: Vec<Vec<Vector3<f64>>> = mesh
        .vertices
        .iter()
        .map(|p| {
            let mut near: Vec<(f64, &Plane)> = planes
                .iter()
                .map(|(pl, _)| (pl.signed_distance(p).abs(), pl))
                .filter(|(d, _)| *d <= snap_distance)
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0));
            near.truncate(3);
            (1..=near.len())
                .rev()
                .filter_map(|k| {
                    let subset: Vec<&Plane> = near[..k].iter().map(|(_, pl)| *pl).collect();
                    project_onto(p, &subset)
                })
                .filter(|x| (x - p).norm() <= snap_distance * (1.0 + 1e-12))
                .collect()
        })
        .collect();

    let folds = |verts: &[Vector3<f64>], v: usize, to: &Vector3<f64>| {
        vertex_faces[v].iter().any(|&f| {
            let c = mesh.faces[f].map(|i| verts[i as usize]);
            let before = (c[1] - c[0]).cross(&(c[2] - c[0]));
            let c2 = mesh.faces[f].map(|i| if i as usize == v { *to } else { verts[i as usize] });
            let after = (c2[1] - c2[0]).cross(&(c2[2] - c2[0]));
            after.dot(&before) <= 0.0
        })
    };

    // A vertex refused because of an unsnapped neighbour may succeed once the
    // neighbour has moved, so sweep until nothing changes.
    let mut placed: Vec<Option<usize>> = vec![None; n];
    for _ in 0..8 {
        let mut changed = false;
        for v in 0..n {
            let best_so_far = placed[v].unwrap_or(usize::MAX);
            for (rank, x) in targets[v].iter().enumerate().take(best_so_far.min(targets[v].len())) {
                if !folds(&out.vertices, v, x) {
                    out.vertices[v] = *x;
                    placed[v] = Some(rank);
                    changed = true;
                    break;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut stats = PlanarizeStats::default();
    for v in 0..n {
        if targets[v].is_empty() {
            continue;
        }
        match placed[v] {
            Some(_) => {
                stats.snapped_vertices += 1;
                stats.max_displacement = stats.max_displacement.max((out.vertices[v] - mesh.vertices[v]).norm());
            }
            None => stats.unsnappable_vertices += 1,
        }
    }

    let tol = 1e-9 * mesh.bbox().diagonal().max(1.0);
    for f in 0..out.faces.len() {
        let corners = out.corners(f);
        let normal = out.face_normal_raw(f);
        let on = planes
            .iter()
            .enumerate()
            .filter(|(_, (pl, _))| corners.iter().all(|c| pl.signed_distance(c).abs() <= tol))
            .max_by(|a, b| {
                let ca = a.1 .0.normal.dot(&normal).abs();
                let cb = b.1 .0.normal.dot(&normal).abs();
                ca.total_cmp(&cb).then(b.0.cmp(&a.0))
            });
        match on {
            Some((j, (_, class))) => {
                out.face_class[f] = *class;
                out.face_plane[f] = Some(j as u32);
                stats.plane_faces += 1;
            }
            None => {
                out.face_class[f] = FaceClass::Free;
                out.face_plane[f] = None;
            }
        }
    }
    Ok((out, stats))
}
