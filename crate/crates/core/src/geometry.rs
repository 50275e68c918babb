//! Convex primitives and rigid-body poses.
//!
//! Bodies are described in their own body frame and placed in the inertial
//! frame by a [`Pose`]. Scaling a primitive by a factor `alpha` is always
//! understood as scaling about the body-frame origin.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance used by membership tests.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// A convex collision primitive expressed in its body frame.
///
/// The body-frame origin must lie strictly inside the shape so that uniform
/// scaling about the origin is well-posed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConvexPrimitive {
    /// Ball of the given radius centered on the body origin.
    Sphere { radius: f64 },
    /// Bounded intersection of halfspaces `{ y : A y <= b }` with unit-norm
    /// rows. `vertices` caches the vertex enumeration used by support-function
    /// queries.
    Polytope {
        normals: Vec<Vector3<f64>>,
        offsets: Vec<f64>,
        vertices: Vec<Vector3<f64>>,
    },
    /// Capsule: segment of half-length `half_length` along the body z axis,
    /// inflated by `radius`.
    Capsule { half_length: f64, radius: f64 },
}

impl ConvexPrimitive {
    pub fn sphere(radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sphere radius must be positive and finite, got {radius}"
            )));
        }
        Ok(Self::Sphere { radius })
    }

    pub fn capsule(half_length: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "capsule radius must be positive and finite, got {radius}"
            )));
        }
        if !(half_length >= 0.0) || !half_length.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "capsule half-length must be nonnegative and finite, got {half_length}"
            )));
        }
        Ok(Self::Capsule {
            half_length,
            radius,
        })
    }

    /// Builds a polytope from halfspace rows `a_i . y <= b_i`.
    ///
    /// Rows are normalized to unit normals. The polytope must be bounded and
    /// contain the body origin strictly in its interior.
    pub fn polytope(rows: &[(Vector3<f64>, f64)]) -> Result<Self> {
        if rows.len() < 4 {
            return Err(Error::InvalidParameter(format!(
                "a bounded 3-D polytope needs at least 4 halfspaces, got {}",
                rows.len()
            )));
        }
        let mut normals = Vec::with_capacity(rows.len());
        let mut offsets = Vec::with_capacity(rows.len());
        for (a, b) in rows {
            let norm = a.norm();
            if norm < 1e-12 || !norm.is_finite() || !b.is_finite() {
                return Err(Error::InvalidParameter(
                    "polytope row with zero or non-finite normal".into(),
                ));
            }
            let bn = b / norm;
            if bn <= 1e-12 {
                return Err(Error::InvalidParameter(
                    "polytope must contain the body origin strictly in its interior".into(),
                ));
            }
            normals.push(a / norm);
            offsets.push(bn);
        }
        if let Some(dir) = recession_direction(&normals) {
            return Err(Error::InvalidParameter(format!(
                "polytope is unbounded along direction {:?}",
                dir
            )));
        }
        let vertices = enumerate_vertices(&normals, &offsets);
        if vertices.is_empty() {
            return Err(Error::InvalidParameter(
                "polytope has no vertices; rows are degenerate".into(),
            ));
        }
        Ok(Self::Polytope {
            normals,
            offsets,
            vertices,
        })
    }

    /// Axis-aligned box `|y_i| <= half_extents_i` as a 6-row polytope.
    pub fn cuboid(half_extents: Vector3<f64>) -> Result<Self> {
        let rows = [
            (Vector3::x(), half_extents.x),
            (-Vector3::x(), half_extents.x),
            (Vector3::y(), half_extents.y),
            (-Vector3::y(), half_extents.y),
            (Vector3::z(), half_extents.z),
            (-Vector3::z(), half_extents.z),
        ];
        Self::polytope(&rows)
    }

    /// Radius of the smallest origin-centered ball containing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Self::Sphere { radius } => *radius,
            Self::Polytope { vertices, .. } => vertices
                .iter()
                .map(|v| v.norm())
                .fold(0.0, f64::max),
            Self::Capsule {
                half_length,
                radius,
            } => half_length + radius,
        }
    }

    /// Radius of the largest origin-centered ball inside the primitive.
    pub fn inner_radius(&self) -> f64 {
        match self {
            Self::Sphere { radius } => *radius,
            Self::Polytope { offsets, .. } => offsets.iter().copied().fold(f64::INFINITY, f64::min),
            Self::Capsule { radius, .. } => *radius,
        }
    }
}

/// Position and orientation of a body in the inertial frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_position(position: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn identity() -> Self {
        Self::from_position(Vector3::zeros())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix().into_inner()
    }

    /// Body point expressed in the inertial frame.
    pub fn transform_point(&self, body_point: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.orientation * body_point
    }

    /// Inertial point expressed in the body frame.
    pub fn inverse_transform_point(&self, world_point: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * (world_point - self.position)
    }

    /// Pose displaced by `dp` in position and by the body-frame tangent `dtheta`
    /// in orientation (`R <- R exp([dtheta]_x)`). Used by finite differencing.
    pub fn perturbed(&self, dp: &Vector3<f64>, dtheta: &Vector3<f64>) -> Self {
        Self {
            position: self.position + dp,
            orientation: self.orientation * UnitQuaternion::from_scaled_axis(*dtheta),
        }
    }
}

/// Membership test for the alpha-scaled primitive in the inertial frame.
///
/// * Sphere: `|p - r| <= alpha * radius`.
/// * Polytope: `A R^T (p - r) <= alpha * b` rowwise.
/// * Capsule: distance from `p` to the axis segment `<= alpha * radius`, the
///   segment itself is not scaled (the conic encoding keeps the auxiliary
///   axis coordinate in `[-L/2, L/2]`).
///
/// All comparisons carry the `MEMBERSHIP_TOL` slack.
pub fn scaled_set_contains(
    prim: &ConvexPrimitive,
    pose: &Pose,
    alpha: f64,
    p: &Vector3<f64>,
) -> Result<bool> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "scaling factor must be positive and finite, got {alpha}"
        )));
    }
    let ok = match prim {
        ConvexPrimitive::Sphere { radius } => {
            (p - pose.position).norm() <= alpha * radius + MEMBERSHIP_TOL
        }
        ConvexPrimitive::Polytope {
            normals, offsets, ..
        } => {
            let local = pose.orientation.inverse() * (p - pose.position);
            normals
                .iter()
                .zip(offsets)
                .all(|(a, b)| a.dot(&local) <= alpha * b + MEMBERSHIP_TOL)
        }
        ConvexPrimitive::Capsule {
            half_length,
            radius,
        } => {
            let axis = pose.orientation * Vector3::z();
            let rel = p - pose.position;
            let s = rel.dot(&axis).clamp(-half_length, *half_length);
            (rel - s * axis).norm() <= alpha * radius + MEMBERSHIP_TOL
        }
    };
    Ok(ok)
}

/// Farthest point of the posed primitive in the world direction `dir`.
///
/// `dir` need not be normalized but must be nonzero.
pub fn support_point(prim: &ConvexPrimitive, pose: &Pose, dir: &Vector3<f64>) -> Vector3<f64> {
    let d = dir.normalize();
    match prim {
        ConvexPrimitive::Sphere { radius } => pose.position + *radius * d,
        ConvexPrimitive::Polytope { vertices, .. } => {
            let local_dir = pose.orientation.inverse() * d;
            let best = vertices
                .iter()
                .max_by(|u, v| {
                    u.dot(&local_dir)
                        .partial_cmp(&v.dot(&local_dir))
                        .unwrap()
                })
                .expect("polytope has vertices");
            pose.transform_point(best)
        }
        ConvexPrimitive::Capsule {
            half_length,
            radius,
        } => {
            let axis = pose.orientation * Vector3::z();
            let end = if d.dot(&axis) >= 0.0 {
                *half_length
            } else {
                -half_length
            };
            pose.position + end * axis + *radius * d
        }
    }
}

/// Searches for a nonzero direction `d` with `a_i . d <= 0` for every row.
///
/// The recession cone of `{ A y <= b }` is polyhedral, so if it is nontrivial
/// it contains either a ray along some `+-(a_i x a_j)` (edge of two active
/// rows) or a halfspace-interior direction along some `-a_i`. Checking those
/// finitely many candidates decides boundedness exactly.
fn recession_direction(normals: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    let tol = 1e-9;
    let in_cone =
        |d: &Vector3<f64>| normals.iter().all(|a| a.dot(d) <= tol);
    for a in normals {
        let d = -a;
        if in_cone(&d) {
            return Some(d);
        }
    }
    for (i, a) in normals.iter().enumerate() {
        for b in normals.iter().skip(i + 1) {
            let cross = a.cross(b);
            if cross.norm() < 1e-12 {
                continue;
            }
            let d = cross.normalize();
            if in_cone(&d) {
                return Some(d);
            }
            if in_cone(&(-d)) {
                return Some(-d);
            }
        }
    }
    None
}

/// All vertices of the (bounded) polytope by intersecting row triples.
fn enumerate_vertices(normals: &[Vector3<f64>], offsets: &[f64]) -> Vec<Vector3<f64>> {
    let m = normals.len();
    let feas_tol = 1e-9;
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            for k in (j + 1)..m {
                let mat = Matrix3::from_rows(&[
                    normals[i].transpose(),
                    normals[j].transpose(),
                    normals[k].transpose(),
                ]);
                let rhs = Vector3::new(offsets[i], offsets[j], offsets[k]);
                let Some(inv) = mat.try_inverse() else {
                    continue;
                };
                let v = inv * rhs;
                if !v.iter().all(|x| x.is_finite()) {
                    continue;
                }
                let feasible = normals
                    .iter()
                    .zip(offsets)
                    .all(|(a, b)| a.dot(&v) <= b + feas_tol);
                if feasible && !vertices.iter().any(|u| (u - v).norm() < 1e-9) {
                    vertices.push(v);
                }
            }
        }
    }
    vertices
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sphere_rejects_bad_radius() {
        assert!(ConvexPrimitive::sphere(0.0).is_err());
        assert!(ConvexPrimitive::sphere(-1.0).is_err());
        assert!(ConvexPrimitive::sphere(f64::NAN).is_err());
        assert!(ConvexPrimitive::sphere(1.5).is_ok());
    }

    #[test]
    fn cuboid_has_eight_vertices() {
        let prim = ConvexPrimitive::cuboid(Vector3::new(0.5, 0.5, 0.5)).unwrap();
        match &prim {
            ConvexPrimitive::Polytope { vertices, .. } => {
                assert_eq!(vertices.len(), 8);
                for v in vertices {
                    assert_relative_eq!(v.abs().max(), 0.5, epsilon = 1e-12);
                }
            }
            _ => panic!("expected polytope"),
        }
    }

    #[test]
    fn polytope_rejects_origin_outside() {
        // Shifted box that excludes the origin.
        let rows = [
            (Vector3::x(), 2.0),
            (-Vector3::x(), -1.0),
            (Vector3::y(), 1.0),
            (-Vector3::y(), 1.0),
            (Vector3::z(), 1.0),
            (-Vector3::z(), 1.0),
        ];
        assert!(ConvexPrimitive::polytope(&rows).is_err());
    }

    #[test]
    fn polytope_rejects_unbounded_slab() {
        let rows = [
            (Vector3::x(), 1.0),
            (-Vector3::x(), 1.0),
            (Vector3::y(), 1.0),
            (-Vector3::y(), 1.0),
        ];
        assert!(ConvexPrimitive::polytope(&rows).is_err());

        // Missing only one side still unbounded.
        let rows = [
            (Vector3::x(), 1.0),
            (-Vector3::x(), 1.0),
            (Vector3::y(), 1.0),
            (-Vector3::y(), 1.0),
            (Vector3::z(), 1.0),
        ];
        assert!(ConvexPrimitive::polytope(&rows).is_err());
    }

    #[test]
    fn polytope_normalizes_rows() {
        let rows = [
            (Vector3::new(2.0, 0.0, 0.0), 1.0),
            (Vector3::new(-2.0, 0.0, 0.0), 1.0),
            (Vector3::new(0.0, 3.0, 0.0), 3.0),
            (Vector3::new(0.0, -3.0, 0.0), 3.0),
            (Vector3::new(0.0, 0.0, 1.0), 1.0),
            (Vector3::new(0.0, 0.0, -1.0), 1.0),
        ];
        let prim = ConvexPrimitive::polytope(&rows).unwrap();
        match &prim {
            ConvexPrimitive::Polytope {
                normals, offsets, ..
            } => {
                for a in normals {
                    assert_relative_eq!(a.norm(), 1.0, epsilon = 1e-12);
                }
                assert_relative_eq!(offsets[0], 0.5, epsilon = 1e-12);
                assert_relative_eq!(offsets[2], 1.0, epsilon = 1e-12);
            }
            _ => panic!("expected polytope"),
        }
    }

    #[test]
    fn sphere_membership_boundary() {
        let prim = ConvexPrimitive::sphere(1.5).unwrap();
        let pose = Pose::identity();
        // Boundary point counts as inside.
        assert!(scaled_set_contains(&prim, &pose, 1.0, &Vector3::new(1.5, 0.0, 0.0)).unwrap());
        // 3.01 > 2 * 1.5.
        assert!(!scaled_set_contains(&prim, &pose, 2.0, &Vector3::new(0.0, 3.01, 0.0)).unwrap());
    }

    #[test]
    fn cube_membership_scaled() {
        let prim = ConvexPrimitive::cuboid(Vector3::new(0.5, 0.5, 0.5)).unwrap();
        let pose = Pose::identity();
        // Direct evaluation of A R^T (p - r) <= alpha b at alpha = 2.
        assert!(scaled_set_contains(&prim, &pose, 2.0, &Vector3::new(0.9, 0.0, 0.0)).unwrap());
        assert!(!scaled_set_contains(&prim, &pose, 2.0, &Vector3::new(1.1, 0.0, 0.0)).unwrap());
    }

    #[test]
    fn membership_rejects_nonpositive_alpha() {
        let prim = ConvexPrimitive::sphere(1.0).unwrap();
        let pose = Pose::identity();
        assert!(scaled_set_contains(&prim, &pose, 0.0, &Vector3::zeros()).is_err());
        assert!(scaled_set_contains(&prim, &pose, -1.0, &Vector3::zeros()).is_err());
    }

    #[test]
    fn capsule_membership_uses_axis_segment() {
        let prim = ConvexPrimitive::capsule(0.5, 0.2).unwrap();
        let pose = Pose::identity();
        // On the axis, inside.
        assert!(scaled_set_contains(&prim, &pose, 1.0, &Vector3::new(0.0, 0.0, 0.4)).unwrap());
        // Just beyond the cap.
        assert!(!scaled_set_contains(&prim, &pose, 1.0, &Vector3::new(0.0, 0.0, 0.71)).unwrap());
        // Radius scales with alpha, the segment does not.
        assert!(scaled_set_contains(&prim, &pose, 2.0, &Vector3::new(0.39, 0.0, 0.5)).unwrap());
        assert!(!scaled_set_contains(&prim, &pose, 2.0, &Vector3::new(0.0, 0.0, 0.95)).unwrap());
    }

    #[test]
    fn support_points_match_geometry() {
        let sphere = ConvexPrimitive::sphere(2.0).unwrap();
        let pose = Pose::from_position(Vector3::new(1.0, 0.0, 0.0));
        let s = support_point(&sphere, &pose, &Vector3::new(0.0, 3.0, 0.0));
        assert_relative_eq!(s, Vector3::new(1.0, 2.0, 0.0), epsilon = 1e-12);

        let cube = ConvexPrimitive::cuboid(Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let s = support_point(&cube, &Pose::identity(), &Vector3::new(1.0, 1.0, 1.0));
        assert_relative_eq!(s, Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-12);

        let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2);
        let capsule = ConvexPrimitive::capsule(0.5, 0.1).unwrap();
        let pose = Pose::new(Vector3::zeros(), rot);
        // Body z maps to world x.
        let s = support_point(&capsule, &pose, &Vector3::x());
        assert_relative_eq!(s, Vector3::new(0.6, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn pose_perturbation_is_right_multiplicative() {
        let pose = Pose::new(
            Vector3::new(1.0, 2.0, 3.0),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.3),
        );
        let dtheta = Vector3::new(0.0, 0.0, 0.1);
        let p = pose.perturbed(&Vector3::zeros(), &dtheta);
        let expected =
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.4);
        assert!(p.orientation.angle_to(&expected) < 1e-12);
    }
}
