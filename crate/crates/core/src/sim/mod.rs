//! Discrete-time scenario engine: scripted obstacles, optional measurement
//! noise with EKF tracking, per-tick safety filtering, and trace recording.

pub mod arm;
mod scenarios;
pub mod trace;

pub use arm::{ArmSegment, PlanarArm};
pub use scenarios::{builtin, builtin_names, builtin_scenarios};
pub use trace::{TickRecord, TickStatus, Trace};

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cbf::{constraint_row, BodyPairState, CbfConfig, PairDynamics};
use crate::control::{
    fallback_control, mpc_baseline, pd_reference, proportional_reference, tvcbf_qp, ConstraintId,
    ControlBox, MpcConfig, QpStatus,
};
use crate::distance;
use crate::estimation::{MeasCov, ObstacleFilter, PoseMeasurement, ProcessNoise};
use crate::geometry::{ConvexPrimitive, Pose};
use crate::scaling::{min_scaling, ScalingStatus};
use crate::{Error, Result};

/// Robot embodiment and dynamics class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RobotModel {
    /// Single convex body with velocity-controlled planar motion
    /// (`x_dot = [u; 0]`, state is the 3-D position).
    PlanarIntegrator {
        primitive: ConvexPrimitive,
        start: Vector3<f64>,
    },
    /// Revolute planar chain with velocity-controlled joints.
    PlanarArm(PlanarArm),
}

impl RobotModel {
    pub fn state_dim(&self) -> usize {
        match self {
            RobotModel::PlanarIntegrator { .. } => 3,
            RobotModel::PlanarArm(a) => a.dof(),
        }
    }

    pub fn body_count(&self) -> usize {
        match self {
            RobotModel::PlanarIntegrator { .. } => 1,
            RobotModel::PlanarArm(a) => a.dof(),
        }
    }

    fn primitives(&self) -> Result<Vec<ConvexPrimitive>> {
        match self {
            RobotModel::PlanarIntegrator { primitive, .. } => Ok(vec![primitive.clone()]),
            RobotModel::PlanarArm(a) => a.primitives(),
        }
    }

    fn initial_state(&self) -> DVector<f64> {
        match self {
            RobotModel::PlanarIntegrator { start, .. } => {
                DVector::from_column_slice(start.as_slice())
            }
            RobotModel::PlanarArm(a) => DVector::from_column_slice(&a.initial_angles),
        }
    }

    fn segment_poses(&self, state: &DVector<f64>) -> Vec<Pose> {
        match self {
            RobotModel::PlanarIntegrator { .. } => {
                vec![Pose::from_position(Vector3::new(state[0], state[1], state[2]))]
            }
            RobotModel::PlanarArm(a) => a.segment_poses(state),
        }
    }

    fn pair_dynamics(&self, state: &DVector<f64>, segment: usize, control_dim: usize) -> PairDynamics {
        match self {
            RobotModel::PlanarIntegrator { .. } => PairDynamics::planar_integrator(control_dim),
            RobotModel::PlanarArm(a) => PairDynamics {
                drift: DVector::zeros(a.dof()),
                input: DMatrix::identity(a.dof(), a.dof()),
                position_jacobian: a.position_jacobian(state, segment),
                orientation_jacobian: a.orientation_jacobian(state, segment),
            },
        }
    }

    fn segment_velocity(
        &self,
        state: &DVector<f64>,
        last_u: &DVector<f64>,
        segment: usize,
    ) -> Vector3<f64> {
        match self {
            RobotModel::PlanarIntegrator { .. } => {
                let mut v = Vector3::zeros();
                for d in 0..last_u.len().min(3) {
                    v[d] = last_u[d];
                }
                v
            }
            RobotModel::PlanarArm(a) => {
                let jac = a.position_jacobian(state, segment);
                let v = jac * last_u;
                Vector3::new(v[0], v[1], v[2])
            }
        }
    }

    fn integrate(&self, state: &mut DVector<f64>, u: &DVector<f64>, dt: f64) {
        match self {
            RobotModel::PlanarIntegrator { .. } => {
                for d in 0..u.len().min(3) {
                    state[d] += u[d] * dt;
                }
            }
            RobotModel::PlanarArm(_) => {
                *state += u * dt;
            }
        }
    }
}

/// Constant-twist scripted obstacle motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedMotion {
    pub initial_pose: Pose,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl ScriptedMotion {
    pub fn pose_at(&self, t: f64) -> Pose {
        Pose::new(
            self.initial_pose.position + self.linear_velocity * t,
            UnitQuaternion::from_scaled_axis(self.angular_velocity * t)
                * self.initial_pose.orientation,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub primitive: ConvexPrimitive,
    pub motion: ScriptedMotion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReferenceController {
    Constant { control: Vec<f64> },
    Proportional { kp: f64 },
    JointPd { q_bar: Vec<f64>, kp: Vec<f64>, kd: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SafetyController {
    TvcbfQp(CbfConfig),
    Mpc(MpcConfig),
    None,
}

/// How the controller turns noisy measurements into obstacle configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EstimatorMode {
    /// Quaternion EKF with the constant-velocity model.
    #[default]
    Ekf,
    /// Raw measurements taken at face value (a controller that does not
    /// consider sensor noise). Velocity still comes from the filter, since
    /// differencing raw positions is useless at high rates.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-axis variance of the position measurement (m^2).
    pub position_variance: [f64; 3],
    /// Standard deviation of the orientation measurement tangent (rad).
    pub orientation_std: f64,
    /// Process-noise spectral densities of the tracking filter.
    pub process: ProcessNoise,
    #[serde(default)]
    pub estimator: EstimatorMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub robot: RobotModel,
    pub obstacles: Vec<ObstacleSpec>,
    pub reference: ReferenceController,
    pub safety: SafetyController,
    pub noise: Option<NoiseSpec>,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
    /// When set, the safety filter solves with effectively unbounded controls
    /// while the plant still clamps to the box at integration time. Models a
    /// controller that does not consider its actuation limits.
    #[serde(default)]
    pub unlimited_filter: bool,
    pub dt: f64,
    pub duration: f64,
    pub target: Option<Vector3<f64>>,
    pub seed: u64,
}

impl Scenario {
    pub fn control_dim(&self) -> usize {
        self.control_lower.len()
    }

    pub fn control_box(&self) -> Result<ControlBox> {
        ControlBox::new(
            DVector::from_column_slice(&self.control_lower),
            DVector::from_column_slice(&self.control_upper),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidScenario("dt must be positive".into()));
        }
        if self.duration < 0.0 {
            return Err(Error::InvalidScenario("duration must be nonnegative".into()));
        }
        self.control_box()?;
        if self.obstacles.is_empty() {
            return Err(Error::InvalidScenario("no obstacles".into()));
        }
        match &self.safety {
            SafetyController::TvcbfQp(cfg) => {
                cfg.validate()?;
                if (cfg.dt - self.dt).abs() > 1e-12 {
                    return Err(Error::InvalidScenario(
                        "barrier dt must equal the control tick".into(),
                    ));
                }
                if cfg.noise_robust && cfg.k > 0.0 {
                    match &self.noise {
                        Some(n) if n.estimator == EstimatorMode::Ekf => {}
                        _ => {
                            return Err(Error::InvalidScenario(
                                "noise-robust barrier needs an EKF noise spec".into(),
                            ))
                        }
                    }
                }
            }
            SafetyController::Mpc(cfg) => {
                cfg.validate()?;
                if self.target.is_none() {
                    return Err(Error::InvalidScenario("mpc needs a target".into()));
                }
                if self.obstacles.len() != 1 {
                    return Err(Error::InvalidScenario(
                        "the mpc baseline supports exactly one obstacle".into(),
                    ));
                }
                if !matches!(self.robot, RobotModel::PlanarIntegrator { .. }) {
                    return Err(Error::InvalidScenario(
                        "the mpc baseline drives integrator robots only".into(),
                    ));
                }
            }
            SafetyController::None => {}
        }
        match &self.reference {
            ReferenceController::Constant { control } => {
                if control.len() != self.control_dim() {
                    return Err(Error::InvalidScenario(
                        "constant reference dimension mismatch".into(),
                    ));
                }
            }
            ReferenceController::Proportional { .. } => {
                if self.target.is_none() {
                    return Err(Error::InvalidScenario(
                        "proportional reference needs a target".into(),
                    ));
                }
            }
            ReferenceController::JointPd { q_bar, kp, kd } => {
                let n = self.robot.state_dim();
                if q_bar.len() != n || kp.len() != n || kd.len() != n {
                    return Err(Error::InvalidScenario(
                        "joint PD gain dimensions mismatch".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Safety threshold on the true scaling factor at `t = 0`.
    fn initial_alpha_threshold(&self) -> f64 {
        match &self.safety {
            SafetyController::TvcbfQp(cfg) => cfg.beta,
            _ => 1.0,
        }
    }
}

struct ObstacleEstimate {
    pose: Pose,
    velocity: Vector3<f64>,
    pose_predicted: Pose,
    position_cov: Option<Matrix3<f64>>,
}

/// Stepable simulation state.
pub struct Simulation {
    scenario: Scenario,
    robot_prims: Vec<ConvexPrimitive>,
    /// Bounds the controller solves with.
    filter_bounds: ControlBox,
    /// Bounds the plant enforces at integration time.
    plant_bounds: ControlBox,
    state: DVector<f64>,
    last_u: DVector<f64>,
    filters: Vec<ObstacleFilter>,
    rng: ChaCha8Rng,
    warm: Vec<ConstraintId>,
    tick_index: usize,
    steps: usize,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let robot_prims = scenario.robot.primitives()?;
        let plant_bounds = scenario.control_box()?;
        let filter_bounds = if scenario.unlimited_filter {
            ControlBox::symmetric(scenario.control_dim(), 1e3)?
        } else {
            plant_bounds.clone()
        };
        let steps = (scenario.duration / scenario.dt).round() as usize;
        let state = scenario.robot.initial_state();

        let sim = Self {
            filters: scenario
                .obstacles
                .iter()
                .map(|_| {
                    ObstacleFilter::new(
                        scenario
                            .noise
                            .as_ref()
                            .map(|n| n.process)
                            .unwrap_or_default(),
                    )
                })
                .collect(),
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            warm: Vec::new(),
            tick_index: 0,
            steps,
            last_u: DVector::zeros(scenario.control_dim()),
            robot_prims,
            filter_bounds,
            plant_bounds,
            state,
            scenario,
        };

        if steps > 0 {
            // Initial state must be safely outside every obstacle.
            let threshold = sim.scenario.initial_alpha_threshold();
            let poses = sim.scenario.robot.segment_poses(&sim.state);
            for (i, (prim, pose)) in sim.robot_prims.iter().zip(&poses).enumerate() {
                for (j, obs) in sim.scenario.obstacles.iter().enumerate() {
                    let sol = min_scaling(prim, pose, &obs.primitive, &obs.motion.pose_at(0.0));
                    if sol.status != ScalingStatus::Optimal || sol.alpha_star <= threshold {
                        return Err(Error::InvalidScenario(format!(
                            "initial state unsafe for robot body {i} vs obstacle {j} \
                             (alpha = {}, needs > {threshold})",
                            sol.alpha_star
                        )));
                    }
                }
            }
        }
        Ok(sim)
    }

    pub fn finished(&self) -> bool {
        self.tick_index >= self.steps
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Simulation time of the next tick.
    pub fn time(&self) -> f64 {
        self.tick_index as f64 * self.scenario.dt
    }

    pub fn current_state(&self) -> &DVector<f64> {
        &self.state
    }

    /// Current tracking belief for obstacle `j` (noisy runs only, after the
    /// first measurement).
    pub fn obstacle_belief(&self, j: usize) -> Option<&crate::estimation::GaussianBelief> {
        self.filters.get(j).and_then(|f| f.belief())
    }

    /// Robot body primitives in scenario order.
    pub fn robot_primitives(&self) -> &[ConvexPrimitive] {
        &self.robot_prims
    }

    fn reference(&self) -> DVector<f64> {
        match &self.scenario.reference {
            ReferenceController::Constant { control } => DVector::from_column_slice(control),
            ReferenceController::Proportional { kp } => {
                let target = self.scenario.target.expect("validated");
                let m = self.scenario.control_dim();
                let pos = DVector::from_fn(m, |i, _| self.state[i]);
                let tgt = DVector::from_fn(m, |i, _| target[i]);
                proportional_reference(&pos, &tgt, *kp)
            }
            ReferenceController::JointPd { q_bar, kp, kd } => pd_reference(
                &self.state,
                &DVector::from_column_slice(q_bar),
                &self.last_u,
                &DVector::from_column_slice(kp),
                &DVector::from_column_slice(kd),
            ),
        }
    }

    fn estimate_obstacles(&mut self, t: f64) -> Result<Vec<ObstacleEstimate>> {
        let dt = self.scenario.dt;
        let mut out = Vec::with_capacity(self.scenario.obstacles.len());
        match &self.scenario.noise {
            None => {
                for obs in &self.scenario.obstacles {
                    out.push(ObstacleEstimate {
                        pose: obs.motion.pose_at(t),
                        velocity: obs.motion.linear_velocity,
                        pose_predicted: obs.motion.pose_at(t + dt),
                        position_cov: None,
                    });
                }
            }
            Some(noise) => {
                let normal = StandardNormal;
                for (obs, filter) in self.scenario.obstacles.iter().zip(&mut self.filters) {
                    let truth = obs.motion.pose_at(t);
                    let mut meas_pos = truth.position;
                    for d in 0..3 {
                        let n: f64 = normal.sample(&mut self.rng);
                        meas_pos[d] += noise.position_variance[d].sqrt() * n;
                    }
                    let mut tangent = Vector3::zeros();
                    for d in 0..3 {
                        let n: f64 = normal.sample(&mut self.rng);
                        tangent[d] = noise.orientation_std * n;
                    }
                    let meas_quat =
                        UnitQuaternion::from_scaled_axis(tangent) * truth.orientation;
                    let mut cov = MeasCov::zeros();
                    for d in 0..3 {
                        cov[(d, d)] = noise.position_variance[d].max(1e-12);
                        cov[(3 + d, 3 + d)] = (noise.orientation_std * noise.orientation_std)
                            .max(1e-12);
                    }
                    let belief = filter
                        .step(
                            &PoseMeasurement {
                                position: meas_pos,
                                orientation: meas_quat,
                                noise: cov,
                            },
                            dt,
                        )?
                        .clone();
                    match noise.estimator {
                        EstimatorMode::Ekf => {
                            let predicted = crate::estimation::predicted_configuration(
                                &belief,
                                dt,
                                &noise.process,
                            );
                            out.push(ObstacleEstimate {
                                pose: belief.pose(),
                                velocity: belief.velocity,
                                pose_predicted: predicted.pose,
                                position_cov: Some(belief.position_cov()),
                            });
                        }
                        EstimatorMode::Raw => {
                            let pose = Pose::new(meas_pos, meas_quat);
                            out.push(ObstacleEstimate {
                                pose,
                                velocity: belief.velocity,
                                pose_predicted: Pose::new(
                                    meas_pos + belief.velocity * dt,
                                    meas_quat,
                                ),
                                position_cov: None,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Advances one tick, returning its record.
    pub fn step(&mut self) -> Result<TickRecord> {
        let t = self.tick_index as f64 * self.scenario.dt;
        let u_ref = self.reference();
        let estimates = self.estimate_obstacles(t)?;
        let seg_poses = self.scenario.robot.segment_poses(&self.state);
        let n_bodies = self.robot_prims.len();
        let n_obs = self.scenario.obstacles.len();

        let mut pair_h = vec![0.0; n_bodies * n_obs];
        let (u, status, solve_time) = match &self.scenario.safety {
            SafetyController::TvcbfQp(cfg) => {
                let started = Instant::now();
                let mut qp_rows = Vec::new();
                for i in 0..n_bodies {
                    let dynamics =
                        self.scenario
                            .robot
                            .pair_dynamics(&self.state, i, self.scenario.control_dim());
                    let v_seg = self
                        .scenario
                        .robot
                        .segment_velocity(&self.state, &self.last_u, i);
                    for (j, est) in estimates.iter().enumerate() {
                        let pair = BodyPairState {
                            robot_index: i,
                            obstacle_index: j,
                            robot_prim: &self.robot_prims[i],
                            robot_pose: seg_poses[i],
                            robot_velocity: v_seg,
                            obstacle_prim: &self.scenario.obstacles[j].primitive,
                            obstacle_pose: est.pose,
                            obstacle_velocity: est.velocity,
                            obstacle_pose_predicted: est.pose_predicted,
                            position_cov: est.position_cov,
                        };
                        let row = constraint_row(&pair, cfg, &dynamics)?;
                        pair_h[i * n_obs + j] = row.h;
                        if row.emergency || row.h_plain <= cfg.prune_threshold {
                            qp_rows.push(row);
                        }
                    }
                }
                let qp = tvcbf_qp(&u_ref, &qp_rows, &self.filter_bounds, &self.warm)?;
                let (u, status) = match qp.status {
                    QpStatus::Optimal => {
                        self.warm = qp.active.clone();
                        (qp.u, TickStatus::Ok)
                    }
                    QpStatus::Infeasible => {
                        self.warm.clear();
                        (fallback_control(&qp_rows, &self.filter_bounds)?, TickStatus::Fallback)
                    }
                    QpStatus::MaxIter => {
                        self.warm.clear();
                        (self.filter_bounds.clamp(&qp.u), TickStatus::HardFailure)
                    }
                };
                (u, status, started.elapsed().as_secs_f64())
            }
            SafetyController::Mpc(cfg) => {
                let est = &estimates[0];
                let n_steps = cfg.steps();
                let path: Vec<Vector3<f64>> = (1..=n_steps)
                    .map(|k| est.pose.position + est.velocity * (k as f64 * cfg.sample_time))
                    .collect();
                let position = Vector3::new(self.state[0], self.state[1], self.state[2]);
                let target = self.scenario.target.expect("validated");
                let plan = mpc_baseline(&position, &target, &path, cfg, &self.filter_bounds)?;
                for v in pair_h.iter_mut() {
                    *v = f64::NAN; // filled from ground truth below
                }
                (
                    self.filter_bounds.clamp(&plan.control),
                    TickStatus::Ok,
                    plan.solve_time,
                )
            }
            SafetyController::None => {
                (self.plant_bounds.clamp(&u_ref), TickStatus::Unfiltered, 0.0)
            }
        };

        // Ground-truth scaling factor and distance per pair.
        let mut pair_alpha = vec![0.0; n_bodies * n_obs];
        let mut pair_distance = vec![0.0; n_bodies * n_obs];
        for i in 0..n_bodies {
            for (j, obs) in self.scenario.obstacles.iter().enumerate() {
                let true_pose = obs.motion.pose_at(t);
                let sol = min_scaling(&self.robot_prims[i], &seg_poses[i], &obs.primitive, &true_pose);
                let alpha = match sol.status {
                    ScalingStatus::Degenerate => 0.0,
                    _ => sol.alpha_star,
                };
                pair_alpha[i * n_obs + j] = alpha;
                pair_distance[i * n_obs + j] =
                    distance::distance(&self.robot_prims[i], &seg_poses[i], &obs.primitive, &true_pose);
                if pair_h[i * n_obs + j].is_nan() {
                    // Runs without a barrier controller record the plain
                    // barrier at beta = 1 for reference.
                    pair_h[i * n_obs + j] = alpha - 1.0;
                }
            }
        }

        let u = self.plant_bounds.clamp(&u);
        let record = TickRecord {
            time: t,
            state: self.state.as_slice().to_vec(),
            control: u.as_slice().to_vec(),
            reference: u_ref.as_slice().to_vec(),
            pair_h,
            pair_alpha,
            pair_distance,
            status,
            solve_time,
        };

        self.scenario.robot.integrate(&mut self.state, &u, self.scenario.dt);
        self.last_u = u;
        self.tick_index += 1;
        Ok(record)
    }

    pub fn run(mut self) -> Result<Trace> {
        let mut ticks = Vec::with_capacity(self.steps);
        while !self.finished() {
            ticks.push(self.step()?);
        }
        Ok(Trace {
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            dt: self.scenario.dt,
            duration: self.scenario.duration,
            robot_bodies: self.robot_prims.len(),
            obstacles: self.scenario.obstacles.len(),
            state_dim: self.scenario.robot.state_dim(),
            control_dim: self.scenario.control_dim(),
            ticks,
        })
    }
}

/// Runs a scenario start to finish.
pub fn run(scenario: &Scenario) -> Result<Trace> {
    Simulation::new(scenario.clone())?.run()
}

/// Summary quantities of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub min_h: f64,
    pub min_alpha: f64,
    pub min_distance: f64,
    /// Largest distance from the straight start-to-target line (m); the line
    /// runs along the initial reference direction when there is no target.
    pub max_lateral_deviation: f64,
    /// Robot came within 0.1 m of the target at some tick.
    pub target_reached: bool,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
    pub fallback_ticks: usize,
    pub hard_failure_ticks: usize,
    /// True scaling factor stayed at or above 1 throughout.
    pub safe: bool,
}

/// Computes metrics for a completed run.
///
/// `target` must be the scenario's target (the trace itself does not carry
/// it); pass `None` for runs without one.
pub fn metrics(trace: &Trace, target: Option<Vector3<f64>>) -> Result<Metrics> {
    if trace.ticks.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut min_h = f64::INFINITY;
    let mut min_alpha = f64::INFINITY;
    let mut min_distance = f64::INFINITY;
    for t in &trace.ticks {
        for &h in &t.pair_h {
            min_h = min_h.min(h);
        }
        for &a in &t.pair_alpha {
            min_alpha = min_alpha.min(a);
        }
        for &d in &t.pair_distance {
            min_distance = min_distance.min(d);
        }
    }

    // Lateral deviation only applies to position-state robots.
    let positional = trace.state_dim == 3 && trace.control_dim <= 3;
    let mut max_lateral_deviation = 0.0_f64;
    let mut target_reached = false;
    if positional {
        let start = Vector3::new(
            trace.ticks[0].state[0],
            trace.ticks[0].state[1],
            trace.ticks[0].state[2],
        );
        let axis = match target {
            Some(tg) if (tg - start).norm() > 1e-9 => (tg - start).normalize(),
            _ => {
                let r = &trace.ticks[0].reference;
                let mut v = Vector3::zeros();
                for d in 0..r.len().min(3) {
                    v[d] = r[d];
                }
                if v.norm() > 1e-9 {
                    v.normalize()
                } else {
                    Vector3::x()
                }
            }
        };
        for t in &trace.ticks {
            let p = Vector3::new(t.state[0], t.state[1], t.state[2]);
            let rel = p - start;
            let lateral = (rel - rel.dot(&axis) * axis).norm();
            max_lateral_deviation = max_lateral_deviation.max(lateral);
            if let Some(tg) = target {
                if (p - tg).norm() <= 0.1 {
                    target_reached = true;
                }
            }
        }
    }

    let n = trace.ticks.len() as f64;
    let mean_solve_time = trace.ticks.iter().map(|t| t.solve_time).sum::<f64>() / n;
    let max_solve_time = trace
        .ticks
        .iter()
        .map(|t| t.solve_time)
        .fold(0.0, f64::max);
    let fallback_ticks = trace
        .ticks
        .iter()
        .filter(|t| t.status == TickStatus::Fallback)
        .count();
    let hard_failure_ticks = trace
        .ticks
        .iter()
        .filter(|t| t.status == TickStatus::HardFailure)
        .count();

    Ok(Metrics {
        min_h,
        min_alpha,
        min_distance,
        max_lateral_deviation,
        target_reached,
        mean_solve_time,
        max_solve_time,
        fallback_ticks,
        hard_failure_ticks,
        safe: min_alpha >= 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn static_scenario() -> Scenario {
        Scenario {
            name: "unit_static".into(),
            description: "static obstacle, zero reference".into(),
            robot: RobotModel::PlanarIntegrator {
                primitive: ConvexPrimitive::sphere(0.5).unwrap(),
                start: Vector3::new(-5.0, -0.5, 0.0),
            },
            obstacles: vec![ObstacleSpec {
                primitive: ConvexPrimitive::sphere(1.5).unwrap(),
                motion: ScriptedMotion {
                    initial_pose: Pose::from_position(Vector3::new(5.0, 0.0, 0.0)),
                    linear_velocity: Vector3::zeros(),
                    angular_velocity: Vector3::zeros(),
                },
            }],
            reference: ReferenceController::Constant {
                control: vec![0.0, 0.0],
            },
            safety: SafetyController::None,
            noise: None,
            control_lower: vec![-10.0, -10.0],
            control_upper: vec![10.0, 10.0],
            unlimited_filter: false,
            dt: 0.01,
            duration: 0.05,
            target: None,
            seed: 0,
        }
    }

    #[test]
    fn zero_control_static_obstacle_state_unchanged() {
        let tr = run(&static_scenario()).unwrap();
        assert_eq!(tr.ticks.len(), 5);
        for t in &tr.ticks {
            assert_relative_eq!(t.state[0], -5.0, epsilon = 1e-12);
            assert_relative_eq!(t.state[1], -0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn euler_step_advances_position() {
        let mut sc = static_scenario();
        sc.reference = ReferenceController::Constant {
            control: vec![2.0, 0.0],
        };
        sc.duration = 0.02;
        let tr = run(&sc).unwrap();
        // After two steps of u = (2, 0) at dt = 0.01 the state moved 0.04,
        // but the recorded states are pre-step: tick1 shows one step.
        assert_relative_eq!(tr.ticks[1].state[0], -4.98, epsilon = 1e-12);
    }

    #[test]
    fn zero_duration_empty_trace() {
        let mut sc = static_scenario();
        sc.duration = 0.0;
        let tr = run(&sc).unwrap();
        assert!(tr.ticks.is_empty());
        assert!(metrics(&tr, None).is_err());
    }

    #[test]
    fn unsafe_start_rejected() {
        let mut sc = static_scenario();
        sc.robot = RobotModel::PlanarIntegrator {
            primitive: ConvexPrimitive::sphere(0.5).unwrap(),
            start: Vector3::new(4.0, 0.0, 0.0),
        };
        assert!(run(&sc).is_err());
    }

    #[test]
    fn filter_inactive_when_far() {
        // First tick of the motivating scenario: u_ref passes through.
        let mut sc = static_scenario();
        sc.reference = ReferenceController::Constant {
            control: vec![2.0, 0.0],
        };
        sc.obstacles[0].motion.linear_velocity = Vector3::new(-4.0, 0.0, 0.0);
        sc.safety = SafetyController::TvcbfQp(CbfConfig::default());
        sc.duration = 0.01;
        let tr = run(&sc).unwrap();
        assert_relative_eq!(tr.ticks[0].control[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(tr.ticks[0].control[1], 0.0, epsilon = 1e-9);
        assert_eq!(tr.ticks[0].status, TickStatus::Ok);
    }

    #[test]
    fn determinism_bit_identical() {
        let mut sc = static_scenario();
        sc.noise = Some(NoiseSpec {
            position_variance: [0.5, 0.5, 0.5],
            orientation_std: 1e-3,
            estimator: EstimatorMode::default(),
            process: ProcessNoise::default(),
        });
        sc.safety = SafetyController::TvcbfQp(CbfConfig::default());
        sc.seed = 1234;
        sc.duration = 0.2;
        let a = run(&sc).unwrap().timing_free().to_csv();
        let b = run(&sc).unwrap().timing_free().to_csv();
        assert_eq!(a, b);
        sc.seed = 1235;
        let c = run(&sc).unwrap().timing_free().to_csv();
        assert_ne!(a, c);
    }

    #[test]
    fn scripted_motion_exact() {
        let m = ScriptedMotion {
            initial_pose: Pose::from_position(Vector3::new(5.0, 0.0, 0.0)),
            linear_velocity: Vector3::new(-4.0, 0.0, 0.0),
            angular_velocity: Vector3::zeros(),
        };
        for k in 0..600 {
            let t = k as f64 * 0.01;
            let p = m.pose_at(t).position;
            let expected = Vector3::new(5.0 - 4.0 * t, 0.0, 0.0);
            assert!((p - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn metrics_reports_deviation_and_target() {
        let mut sc = static_scenario();
        sc.reference = ReferenceController::Proportional { kp: 2.0 };
        sc.target = Some(Vector3::new(-4.0, -0.5, 0.0));
        sc.duration = 3.0;
        sc.control_lower = vec![-1.0, -1.0];
        sc.control_upper = vec![1.0, 1.0];
        let tr = run(&sc).unwrap();
        let m = metrics(&tr, sc.target).unwrap();
        assert!(m.target_reached);
        assert!(m.max_lateral_deviation < 1e-9);
        assert!(m.safe);
    }
}
