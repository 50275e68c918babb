//! Obstacle state estimation: quaternion EKF with a constant-velocity model,
//! plus Mahalanobis-distance machinery for the noise-robust CBF.
//!
//! The belief state is `(position, velocity, orientation, angular velocity)`
//! with a 12x12 covariance over the tangent-space parameterization
//! `(position, velocity, orientation tangent, angular velocity)`. Orientation
//! errors use a world-frame 3-vector tangent with small-angle quaternion
//! retraction; quaternion signs are fixed to a nonnegative scalar part.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::{Error, Result};

pub type StateCov = SMatrix<f64, 12, 12>;
pub type MeasCov = SMatrix<f64, 6, 6>;

/// Gaussian belief over an obstacle's kinematic state.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub angular_velocity: Vector3<f64>,
    pub covariance: StateCov,
}

/// A noisy pose observation.
#[derive(Debug, Clone)]
pub struct PoseMeasurement {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    /// 6x6 noise covariance over (position, orientation tangent).
    pub noise: MeasCov,
}

/// White-noise spectral densities of the constant-velocity process model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    /// Acceleration PSD (m^2/s^3).
    pub accel: f64,
    /// Angular acceleration PSD (rad^2/s^3).
    pub ang_accel: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            accel: 1.0,
            ang_accel: 0.1,
        }
    }
}

impl ProcessNoise {
    /// Discrete-time process covariance of the constant-velocity model.
    pub fn matrix(&self, dt: f64) -> StateCov {
        let mut q = StateCov::zeros();
        let blocks = [(0, 3, self.accel), (6, 9, self.ang_accel)];
        for (pi, vi, psd) in blocks {
            for k in 0..3 {
                q[(pi + k, pi + k)] = psd * dt.powi(3) / 3.0;
                q[(pi + k, vi + k)] = psd * dt.powi(2) / 2.0;
                q[(vi + k, pi + k)] = psd * dt.powi(2) / 2.0;
                q[(vi + k, vi + k)] = psd * dt;
            }
        }
        q
    }
}

impl GaussianBelief {
    /// Seeds a belief from the first measurement: position and orientation
    /// from the observation, zero velocity with large variance.
    pub fn from_first_measurement(z: &PoseMeasurement) -> Self {
        let mut cov = StateCov::zeros();
        cov.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&z.noise.fixed_view::<3, 3>(0, 0).into_owned());
        cov.fixed_view_mut::<3, 3>(6, 6)
            .copy_from(&z.noise.fixed_view::<3, 3>(3, 3).into_owned());
        for k in 0..3 {
            cov[(3 + k, 3 + k)] = 100.0; // (10 m/s)^2
            cov[(9 + k, 9 + k)] = 100.0;
        }
        Self {
            position: z.position,
            velocity: Vector3::zeros(),
            orientation: positive_scalar(z.orientation),
            angular_velocity: Vector3::zeros(),
            covariance: cov,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.position, self.orientation)
    }

    /// Marginal 3x3 position covariance.
    pub fn position_cov(&self) -> Matrix3<f64> {
        self.covariance.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Asserts symmetry and (near) positive semidefiniteness.
    pub fn check_invariants(&self) -> Result<()> {
        let c = &self.covariance;
        for i in 0..12 {
            for j in 0..12 {
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-10 {
                    return Err(Error::Numerical("covariance not symmetric".into()));
                }
            }
        }
        let eig = c.symmetric_eigenvalues();
        if eig.iter().any(|&l| l < -1e-12) {
            return Err(Error::Numerical(format!(
                "covariance has negative eigenvalue {}",
                eig.min()
            )));
        }
        Ok(())
    }
}

fn positive_scalar(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

fn symmetrize(m: &mut StateCov) {
    let t = m.transpose();
    *m = 0.5 * (*m + t);
}

/// Propagates the belief by `dt` seconds under the constant-velocity model.
///
/// `process_noise` is the additive discrete-time covariance for this step
/// (see [`ProcessNoise::matrix`]).
pub fn ekf_predict(belief: &GaussianBelief, dt: f64, process_noise: &StateCov) -> GaussianBelief {
    let position = belief.position + belief.velocity * dt;
    let orientation = positive_scalar(
        UnitQuaternion::from_scaled_axis(belief.angular_velocity * dt) * belief.orientation,
    );

    // Linearized transition: position couples to velocity, orientation tangent
    // to angular velocity (small-angle, slow-rotation regime).
    let mut phi = StateCov::identity();
    for k in 0..3 {
        phi[(k, 3 + k)] = dt;
        phi[(6 + k, 9 + k)] = dt;
    }
    let mut covariance = phi * belief.covariance * phi.transpose() + process_noise;
    symmetrize(&mut covariance);

    GaussianBelief {
        position,
        velocity: belief.velocity,
        orientation,
        angular_velocity: belief.angular_velocity,
        covariance,
    }
}

/// Standard EKF measurement update on position and orientation tangent.
pub fn ekf_update(belief: &GaussianBelief, z: &PoseMeasurement) -> Result<GaussianBelief> {
    // H selects (position, orientation tangent) out of the 12-state.
    let mut h = SMatrix::<f64, 6, 12>::zeros();
    for k in 0..3 {
        h[(k, k)] = 1.0;
        h[(3 + k, 6 + k)] = 1.0;
    }
    let s_mat = h * belief.covariance * h.transpose() + z.noise;
    let chol = s_mat
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular innovation covariance".into()))?;
    let gain = belief.covariance * h.transpose() * chol.inverse();

    // Innovation: position difference and world-frame rotation error, with the
    // measured quaternion flipped onto the predicted hemisphere first.
    let mut zq = z.orientation;
    if zq.coords.dot(&belief.orientation.coords) < 0.0 {
        zq = UnitQuaternion::new_unchecked(-zq.into_inner());
    }
    let theta = (zq * belief.orientation.inverse()).scaled_axis();
    let mut innovation = SVector::<f64, 6>::zeros();
    for k in 0..3 {
        innovation[k] = z.position[k] - belief.position[k];
        innovation[3 + k] = theta[k];
    }

    let delta = gain * innovation;
    let position = belief.position + Vector3::new(delta[0], delta[1], delta[2]);
    let velocity = belief.velocity + Vector3::new(delta[3], delta[4], delta[5]);
    let dtheta = Vector3::new(delta[6], delta[7], delta[8]);
    let orientation = positive_scalar(UnitQuaternion::from_scaled_axis(dtheta) * belief.orientation);
    let angular_velocity = belief.angular_velocity + Vector3::new(delta[9], delta[10], delta[11]);

    // Joseph form keeps the posterior covariance PSD.
    let ikh = StateCov::identity() - gain * h;
    let mut covariance = ikh * belief.covariance * ikh.transpose()
        + gain * z.noise * gain.transpose();
    symmetrize(&mut covariance);

    Ok(GaussianBelief {
        position,
        velocity,
        orientation,
        angular_velocity,
        covariance,
    })
}

/// Mahalanobis distance `sqrt((y - mean)' cov^{-1} (y - mean))`.
pub fn mahalanobis(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if y.len() != mean.len() || cov.nrows() != y.len() || cov.ncols() != y.len() {
        return Err(Error::InvalidParameter(
            "mahalanobis dimension mismatch".into(),
        ));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance not positive-definite".into()))?;
    let diff = y - mean;
    let solved = chol.solve(&diff);
    Ok(diff.dot(&solved).max(0.0).sqrt())
}

/// Convenience for 3-vector position distances.
pub fn mahalanobis3(y: &Vector3<f64>, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> Result<f64> {
    let yd = DVector::from_column_slice(y.as_slice());
    let md = DVector::from_column_slice(mean.as_slice());
    let cd = DMatrix::from_fn(3, 3, |i, j| cov[(i, j)]);
    mahalanobis(&yd, &md, &cd)
}

/// Belief propagated to `horizon` seconds ahead: predicted pose mean and the
/// marginal position covariance used by the noise-robust CBF.
#[derive(Debug, Clone)]
pub struct PredictedConfiguration {
    pub pose: Pose,
    pub position_cov: Matrix3<f64>,
}

pub fn predicted_configuration(
    belief: &GaussianBelief,
    horizon: f64,
    noise: &ProcessNoise,
) -> PredictedConfiguration {
    if horizon <= 0.0 {
        return PredictedConfiguration {
            pose: belief.pose(),
            position_cov: belief.position_cov(),
        };
    }
    let predicted = ekf_predict(belief, horizon, &noise.matrix(horizon));
    PredictedConfiguration {
        pose: predicted.pose(),
        position_cov: predicted.position_cov(),
    }
}

/// Stateful per-obstacle filter: seed on the first measurement, then
/// predict-update per tick.
#[derive(Debug, Clone)]
pub struct ObstacleFilter {
    pub noise: ProcessNoise,
    belief: Option<GaussianBelief>,
}

impl ObstacleFilter {
    pub fn new(noise: ProcessNoise) -> Self {
        Self {
            noise,
            belief: None,
        }
    }

    pub fn step(&mut self, z: &PoseMeasurement, dt: f64) -> Result<&GaussianBelief> {
        let next = match &self.belief {
            None => GaussianBelief::from_first_measurement(z),
            Some(belief) => {
                let predicted = ekf_predict(belief, dt, &self.noise.matrix(dt));
                ekf_update(&predicted, z)?
            }
        };
        self.belief = Some(next);
        Ok(self.belief.as_ref().unwrap())
    }

    pub fn belief(&self) -> Option<&GaussianBelief> {
        self.belief.as_ref()
    }
}
