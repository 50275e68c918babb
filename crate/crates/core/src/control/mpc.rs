//! Sphere-based linear MPC baseline for the moving-obstacle comparison.
//!
//! Robot and obstacle are modeled as bounding spheres. Over an `N`-step
//! horizon with integrator dynamics, the planner minimizes tracking and
//! effort costs plus a slack penalty; whenever the predicted centers come
//! within the risk distance, a half-space row (the tangent plane of the
//! obstacle sphere inflated by the robot radius, softened by a nonnegative
//! slack) is added for that step. The first control of the plan is applied.
//!
//! The quadratic program is solved through the conic solver via the standard
//! second-order-cone epigraph of the objective; an anchor pass without
//! avoidance rows supplies the linearization points for the tangent planes.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::conic::{self, ConeSpec, ConicProblem, ConicSettings, ConicStatus};
use crate::control::ControlBox;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Horizon length (s).
    pub horizon: f64,
    /// Discretization step (s).
    pub sample_time: f64,
    /// Surface distance below which avoidance planning engages (m).
    pub d_risk: f64,
    /// Surface distance below which per-step half-space rows activate (m).
    pub d_obs: f64,
    pub w_target: f64,
    pub w_effort: f64,
    pub w_avoid: f64,
    /// Bounding-sphere radius of the robot (m).
    pub robot_radius: f64,
    /// Bounding-sphere radius of the obstacle (m).
    pub obstacle_radius: f64,
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !(self.sample_time > 0.0) {
            return Err(Error::InvalidParameter(
                "mpc horizon and sample time must be positive".into(),
            ));
        }
        let steps = self.horizon / self.sample_time;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "horizon {} is not an integer multiple of sample time {}",
                self.horizon, self.sample_time
            )));
        }
        if self.w_target < 0.0 || self.w_effort < 0.0 || self.w_avoid < 0.0 {
            return Err(Error::InvalidParameter("mpc weights must be >= 0".into()));
        }
        if !(self.robot_radius > 0.0) || !(self.obstacle_radius > 0.0) {
            return Err(Error::InvalidParameter("mpc radii must be positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.sample_time).round() as usize
    }
}

/// Plan returned by one MPC solve.
#[derive(Debug, Clone)]
pub struct MpcPlan {
    /// First control of the plan (applied).
    pub control: DVector<f64>,
    /// Predicted positions over the horizon (steps 1..=N).
    pub predicted_positions: Vec<Vector3<f64>>,
    pub solve_time: f64,
    /// Number of active half-space rows in the final pass.
    pub avoidance_rows: usize,
}

/// One receding-horizon step.
///
/// `obstacle_path` holds the predicted obstacle centers at sample times
/// `1..=N` ahead (length at least `N`).
pub fn mpc_baseline(
    position: &Vector3<f64>,
    target: &Vector3<f64>,
    obstacle_path: &[Vector3<f64>],
    cfg: &MpcConfig,
    bounds: &ControlBox,
) -> Result<MpcPlan> {
    let start = Instant::now();
    cfg.validate()?;
    let n_steps = cfg.steps();
    if obstacle_path.len() < n_steps {
        return Err(Error::InvalidParameter(format!(
            "obstacle path holds {} predictions, horizon needs {}",
            obstacle_path.len(),
            n_steps
        )));
    }
    let mu = bounds.dim();

    // Pass 1: plan without avoidance rows to anchor the tangent planes.
    let anchor = solve_pass(position, target, &[], cfg, bounds, n_steps, mu)?;

    // Engage avoidance only when the anchored plan ever enters the risk
    // region; then activate per-step rows inside the d_obs band.
    let margin = cfg.robot_radius + cfg.obstacle_radius;
    let engaged = anchor
        .positions
        .iter()
        .zip(obstacle_path)
        .any(|(x, o)| (x - o).norm() - margin < cfg.d_risk);
    let mut halfspaces: Vec<(usize, Vector3<f64>)> = Vec::new();
    if engaged {
        for (k, (x, o)) in anchor.positions.iter().zip(obstacle_path).enumerate() {
            let gap = x - o;
            if gap.norm() - margin < cfg.d_obs && gap.norm() > 1e-9 {
                halfspaces.push((k, gap.normalize()));
            }
        }
    }
    let final_pass = if halfspaces.is_empty() {
        anchor
    } else {
        let rows: Vec<(usize, Vector3<f64>, Vector3<f64>)> = halfspaces
            .iter()
            .map(|(k, n)| (*k, *n, obstacle_path[*k]))
            .collect();
        solve_pass(position, target, &rows, cfg, bounds, n_steps, mu)?
    };

    Ok(MpcPlan {
        control: final_pass.first_control,
        predicted_positions: final_pass.positions,
        solve_time: start.elapsed().as_secs_f64(),
        avoidance_rows: final_pass.avoidance_rows,
    })
}

struct PassResult {
    first_control: DVector<f64>,
    positions: Vec<Vector3<f64>>,
    avoidance_rows: usize,
}

/// Builds and solves one QP pass. `halfspaces` holds `(step, normal, center)`
/// rows demanding `normal . (x_k - center) >= margin - slack`.
fn solve_pass(
    position: &Vector3<f64>,
    target: &Vector3<f64>,
    halfspaces: &[(usize, Vector3<f64>, Vector3<f64>)],
    cfg: &MpcConfig,
    bounds: &ControlBox,
    n_steps: usize,
    mu: usize,
) -> Result<PassResult> {
    let dt = cfg.sample_time;
    let n_u = n_steps * mu;
    let n_s = halfspaces.len();
    let ny = n_u + n_s;

    // Hessian and linear term of the tracking + effort + slack objective in
    // the stacked control/slack variables. Controls map into 3-D motion
    // through the first `mu` axes.
    let mut hess = DMatrix::zeros(ny, ny);
    let mut lin = DVector::zeros(ny);
    let err0 = position - target;
    for j in 0..n_steps {
        for l in 0..n_steps {
            let count = (n_steps - j.max(l)) as f64;
            let w = 2.0 * cfg.w_target * dt * dt * count;
            for d in 0..mu.min(3) {
                hess[(j * mu + d, l * mu + d)] += w;
            }
        }
        for d in 0..mu {
            hess[(j * mu + d, j * mu + d)] += 2.0 * cfg.w_effort;
        }
        let reach = (n_steps - j) as f64;
        for d in 0..mu.min(3) {
            lin[j * mu + d] = 2.0 * cfg.w_target * dt * reach * err0[d];
        }
    }
    for s in 0..n_s {
        hess[(n_u + s, n_u + s)] = 2.0 * cfg.w_avoid;
    }
    // Small ridge keeps the epigraph factor well-defined when w_effort = 0.
    for d in 0..ny {
        hess[(d, d)] += 1e-9;
    }

    let chol = hess
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("mpc objective not positive-definite".into()))?;
    let l_factor = chol.l();
    let w_vec = chol
        .l()
        .solve_lower_triangular(&lin)
        .ok_or_else(|| Error::Numerical("mpc objective factor is singular".into()))?;

    // Conic variables: (y, t) with SOC |L' y + w| <= t.
    // Linear rows: box bounds per step, slack nonnegativity, half-spaces.
    let margin = cfg.robot_radius + cfg.obstacle_radius;
    let n_lin = 2 * n_u + n_s + n_s;
    let mut rows = DMatrix::zeros(n_lin + 1 + ny, ny + 1);
    let mut rhs = DVector::zeros(n_lin + 1 + ny);
    let mut r = 0;
    for j in 0..n_u {
        let (step_dim, bound_idx) = (j, j % mu);
        rows[(r, step_dim)] = 1.0;
        rhs[r] = bounds.upper[bound_idx];
        r += 1;
        rows[(r, step_dim)] = -1.0;
        rhs[r] = -bounds.lower[bound_idx];
        r += 1;
    }
    for s in 0..n_s {
        rows[(r, n_u + s)] = -1.0;
        rhs[r] = 0.0;
        r += 1;
    }
    for (s, (k, normal, center)) in halfspaces.iter().enumerate() {
        // normal . (x0 + dt sum_{j<=k} u_j - center) + slack >= margin
        for j in 0..=*k {
            for d in 0..mu.min(3) {
                rows[(r, j * mu + d)] = -dt * normal[d];
            }
        }
        rows[(r, n_u + s)] = -1.0;
        rhs[r] = normal.dot(&(position - center)) - margin;
        r += 1;
    }
    debug_assert_eq!(r, n_lin);
    // SOC block: u0 = t, u_rest = L' y + w.
    rows[(r, ny)] = -1.0;
    rhs[r] = 0.0;
    r += 1;
    for i in 0..ny {
        for j in 0..ny {
            rows[(r + i, j)] = -l_factor[(j, i)];
        }
        rhs[r + i] = w_vec[i];
    }

    let mut objective = DVector::zeros(ny + 1);
    objective[ny] = 1.0;
    let prob = ConicProblem {
        objective,
        rows,
        rhs,
        cones: ConeSpec {
            nonneg: n_lin,
            soc: vec![ny + 1],
        },
    };

    // Strictly feasible start: mid-box controls, generous slacks, loose t.
    let mut x0 = DVector::zeros(ny + 1);
    let mid = bounds.midpoint();
    for j in 0..n_steps {
        for d in 0..mu {
            x0[j * mu + d] = mid[d];
        }
    }
    for (s, (k, normal, center)) in halfspaces.iter().enumerate() {
        let mut x_k = *position;
        for j in 0..=*k {
            for d in 0..mu.min(3) {
                x_k[d] += dt * x0[j * mu + d];
            }
        }
        let viol = margin - normal.dot(&(x_k - center));
        x0[n_u + s] = viol.max(0.0) + 1.0;
    }
    let y0 = x0.rows(0, ny).into_owned();
    x0[ny] = (l_factor.transpose() * &y0 + &w_vec).norm() + 1.0;

    let sol = conic::solve(&prob, Some(&x0), &ConicSettings::default());
    if sol.status != ConicStatus::Optimal {
        return Err(Error::Numerical(format!(
            "mpc conic solve ended with {:?}",
            sol.status
        )));
    }

    let first_control = DVector::from_fn(mu, |d, _| sol.x[d]);
    let mut positions = Vec::with_capacity(n_steps);
    let mut x = *position;
    for j in 0..n_steps {
        for d in 0..mu.min(3) {
            x[d] += dt * sol.x[j * mu + d];
        }
        positions.push(x);
    }
    Ok(PassResult {
        first_control,
        positions,
        avoidance_rows: n_s,
    })
}
