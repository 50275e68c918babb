//! Planar revolute-chain kinematics for the multi-segment robot scenario.
//!
//! Links live in the xy-plane. Each link is covered by a capsule whose body
//! axis is z, so the link pose rotates body-z onto the link direction via
//! `R = Rz(phi) Ry(pi/2)`; with that choice the world angular velocity of
//! link `i` is exactly `z_hat * sum_{j<=i} qdot_j`, which keeps the segment
//! Jacobians exact.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{ConvexPrimitive, Pose};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSegment {
    /// Link length (m).
    pub length: f64,
    /// Capsule radius covering the link (m).
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarArm {
    pub base: Vector3<f64>,
    pub segments: Vec<ArmSegment>,
    /// Initial joint angles (rad).
    pub initial_angles: Vec<f64>,
}

impl PlanarArm {
    pub fn dof(&self) -> usize {
        self.segments.len()
    }

    /// Capsules covering each link (half-length = link length / 2).
    pub fn primitives(&self) -> Result<Vec<ConvexPrimitive>> {
        self.segments
            .iter()
            .map(|s| ConvexPrimitive::capsule(s.length / 2.0, s.radius))
            .collect()
    }

    /// Joint positions `0..=dof` (base first, tip last).
    pub fn joint_positions(&self, q: &DVector<f64>) -> Vec<Vector3<f64>> {
        let mut joints = vec![self.base];
        let mut angle = 0.0;
        let mut p = self.base;
        for (i, seg) in self.segments.iter().enumerate() {
            angle += q[i];
            p += seg.length * Vector3::new(angle.cos(), angle.sin(), 0.0);
            joints.push(p);
        }
        joints
    }

    /// Pose of each link's capsule (midpoint position, z-axis along the link).
    pub fn segment_poses(&self, q: &DVector<f64>) -> Vec<Pose> {
        let joints = self.joint_positions(q);
        let mut poses = Vec::with_capacity(self.dof());
        let mut angle = 0.0;
        for i in 0..self.dof() {
            angle += q[i];
            let mid = 0.5 * (joints[i] + joints[i + 1]);
            let orientation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
                * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2);
            poses.push(Pose::new(mid, orientation));
        }
        poses
    }

    /// `d (midpoint_i) / d q`: column `j` is `z x (m_i - joint_j)` for
    /// `j <= i`, zero otherwise.
    pub fn position_jacobian(&self, q: &DVector<f64>, segment: usize) -> DMatrix<f64> {
        let joints = self.joint_positions(q);
        let poses = self.segment_poses(q);
        let mid = poses[segment].position;
        let mut jac = DMatrix::zeros(3, self.dof());
        for j in 0..=segment {
            let arm = mid - joints[j];
            let col = Vector3::z().cross(&arm);
            for r in 0..3 {
                jac[(r, j)] = col[r];
            }
        }
        jac
    }

    /// `d (orientation tangent) / d q` in the link body frame: column `j` is
    /// `R^T z_hat` for `j <= i`.
    pub fn orientation_jacobian(&self, q: &DVector<f64>, segment: usize) -> DMatrix<f64> {
        let poses = self.segment_poses(q);
        let rz = poses[segment].orientation.inverse() * Vector3::z();
        let mut jac = DMatrix::zeros(3, self.dof());
        for j in 0..=segment {
            for r in 0..3 {
                jac[(r, j)] = rz[r];
            }
        }
        jac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn arm() -> PlanarArm {
        PlanarArm {
            base: Vector3::zeros(),
            segments: vec![
                ArmSegment {
                    length: 0.4,
                    radius: 0.05,
                };
                3
            ],
            initial_angles: vec![0.6, -0.4, -0.3],
        }
    }

    #[test]
    fn straight_arm_geometry() {
        let a = arm();
        let q = DVector::zeros(3);
        let joints = a.joint_positions(&q);
        assert_relative_eq!(joints[3], Vector3::new(1.2, 0.0, 0.0), epsilon = 1e-12);
        let poses = a.segment_poses(&q);
        assert_relative_eq!(poses[0].position, Vector3::new(0.2, 0.0, 0.0), epsilon = 1e-12);
        // Capsule axis (body z) maps onto +x.
        let axis = poses[0].orientation * Vector3::z();
        assert_relative_eq!(axis, Vector3::x(), epsilon = 1e-12);
    }

    #[test]
    fn position_jacobian_matches_finite_differences() {
        let a = arm();
        let q = DVector::from_vec(vec![0.6, -0.4, -0.3]);
        let h = 1e-7;
        for seg in 0..3 {
            let jac = a.position_jacobian(&q, seg);
            for j in 0..3 {
                let mut qp = q.clone();
                qp[j] += h;
                let mut qm = q.clone();
                qm[j] -= h;
                let fd = (a.segment_poses(&qp)[seg].position
                    - a.segment_poses(&qm)[seg].position)
                    / (2.0 * h);
                for r in 0..3 {
                    assert_relative_eq!(jac[(r, j)], fd[r], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn orientation_jacobian_matches_quaternion_rates() {
        let a = arm();
        let q = DVector::from_vec(vec![0.6, -0.4, -0.3]);
        let h = 1e-7;
        for seg in 0..3 {
            let jac = a.orientation_jacobian(&q, seg);
            let r0 = a.segment_poses(&q)[seg].orientation;
            for j in 0..3 {
                let mut qp = q.clone();
                qp[j] += h;
                let r1 = a.segment_poses(&qp)[seg].orientation;
                // Body tangent of the step: log(R0^{-1} R1).
                let tangent = (r0.inverse() * r1).scaled_axis() / h;
                for r in 0..3 {
                    assert_relative_eq!(jac[(r, j)], tangent[r], epsilon = 1e-6);
                }
            }
        }
    }
}
