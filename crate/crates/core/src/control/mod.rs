//! Per-tick controllers: the TVCBFQP safety filter, reference controllers,
//! and the sphere-based linear-MPC comparison baseline.

mod mpc;
mod qp;

pub use mpc::{mpc_baseline, MpcConfig, MpcPlan};
pub use qp::{fallback_control, tvcbf_qp, ConstraintId, QpResult, QpStatus};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Elementwise control bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ControlBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidParameter(
                "control box bounds differ in length".into(),
            ));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidParameter(
                "control box lower bound exceeds upper bound".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[-limit, limit]^dim`.
    pub fn symmetric(dim: usize, limit: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(dim, -limit),
            DVector::from_element(dim, limit),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| u[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        (0..self.dim()).all(|i| u[i] >= self.lower[i] - tol && u[i] <= self.upper[i] + tol)
    }

    pub fn midpoint(&self) -> DVector<f64> {
        0.5 * (&self.lower + &self.upper)
    }
}

/// `u_ref = kp (target - position)`.
pub fn proportional_reference(
    position: &DVector<f64>,
    target: &DVector<f64>,
    kp: f64,
) -> DVector<f64> {
    kp * (target - position)
}

/// `u_ref = Kp (q_bar - q) - Kd dq` with diagonal gains.
pub fn pd_reference(
    q: &DVector<f64>,
    q_bar: &DVector<f64>,
    dq: &DVector<f64>,
    kp: &DVector<f64>,
    kd: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(q.len(), |i, _| kp[i] * (q_bar[i] - q[i]) - kd[i] * dq[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn box_validation() {
        assert!(ControlBox::symmetric(2, 1.0).is_ok());
        assert!(ControlBox::new(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![-1.0])
        )
        .is_err());
    }

    #[test]
    fn proportional_examples() {
        let p = DVector::from_vec(vec![-5.0, -0.5]);
        let t = DVector::from_vec(vec![20.0, -0.5]);
        let u = proportional_reference(&p, &t, 2.0);
        assert_relative_eq!(u[0], 50.0, epsilon = 1e-12);
        assert_relative_eq!(u[1], 0.0, epsilon = 1e-12);
        let zero = proportional_reference(&t, &t, 2.0);
        assert_relative_eq!(zero.norm(), 0.0, epsilon = 1e-12);
        let zero = proportional_reference(&p, &t, 0.0);
        assert_relative_eq!(zero.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pd_examples() {
        let q = DVector::from_vec(vec![0.0]);
        let qb = DVector::from_vec(vec![2.0]);
        let dq = DVector::from_vec(vec![1.0]);
        let ones = DVector::from_vec(vec![1.0]);
        let u = pd_reference(&q, &qb, &dq, &ones, &ones);
        assert_relative_eq!(u[0], 1.0, epsilon = 1e-12);
        // At rest on target: zero.
        let u = pd_reference(&qb, &qb, &DVector::zeros(1), &ones, &ones);
        assert_relative_eq!(u[0], 0.0, epsilon = 1e-12);
        // Kd = 0 reduces to the proportional law.
        let u = pd_reference(&q, &qb, &dq, &ones, &DVector::zeros(1));
        let p = proportional_reference(&q, &qb, 1.0);
        assert_relative_eq!(u[0], p[0], epsilon = 1e-12);
    }
}
