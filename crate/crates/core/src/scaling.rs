//! Minimum uniform-scaling collision program between two posed primitives.
//!
//! For bodies `A` and `B`, finds the smallest common scaling factor `alpha`
//! (about each body's own origin) at which the scaled bodies share a point:
//!
//! ```text
//!     minimize    alpha
//!     subject to  p in A(alpha, pose_a)
//!                 p in B(alpha, pose_b)
//!                 alpha > 0
//! ```
//!
//! `alpha* > 1` means the bodies are disjoint; `alpha* <= 1` means touching or
//! overlapping. The program is assembled as a conic problem (second-order-cone
//! rows for spheres and capsules, linear rows for polytopes) and solved with
//! the interior-point iteration in [`crate::conic`], then polished to near
//! machine precision so that central finite differences of `alpha*` are
//! accurate.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::conic::{self, ConeSpec, ConicProblem, ConicSettings, ConicStatus};
use crate::geometry::{scaled_set_contains, ConvexPrimitive, Pose};
use crate::{Error, Result};

/// Absolute accuracy contract on `alpha*`.
pub const ALPHA_TOL: f64 = 1e-7;

/// Origin distance below which the program is declared degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-9;

/// Finite-difference step for pose gradients (meters / radians).
pub const GRADIENT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingStatus {
    /// Global optimum found within tolerance.
    Optimal,
    /// The two body origins (nearly) coincide; `alpha*` is ill-defined.
    Degenerate,
    /// Solver hit its iteration cap; `alpha_star` holds the best iterate.
    MaxIter,
    /// No intersection of the scaled sets exists (not reachable for valid
    /// primitives, kept for completeness).
    Infeasible,
}

/// Solution of the minimum-scaling program.
#[derive(Debug, Clone)]
pub struct ScalingSolution {
    pub alpha_star: f64,
    pub p_star: Vector3<f64>,
    /// Stacked dual vector of the conic program (layout per assembly order).
    pub duals: Vec<f64>,
    /// Primal variables `(p, alpha, capsule axis coordinates...)`, reusable
    /// as a warm start for nearby configurations.
    pub primal: Vec<f64>,
    pub status: ScalingStatus,
}

impl ScalingSolution {
    fn degenerate() -> Self {
        Self {
            alpha_star: 0.0,
            p_star: Vector3::zeros(),
            duals: Vec::new(),
            primal: Vec::new(),
            status: ScalingStatus::Degenerate,
        }
    }
}

/// Gradient of `alpha*` with respect to one body's pose.
///
/// `orientation` is expressed in the body-frame tangent: the directional
/// derivative along `R <- R exp([delta]_x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGradient {
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
}

/// Conic assembly of the scaling program for one body.
///
/// Variables are ordered `[p (3), alpha, axis coordinates of capsules...]`.
struct Assembly {
    objective: DVector<f64>,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    nonneg: usize,
    soc: Vec<usize>,
    nvars: usize,
}

impl Assembly {
    fn new(prims: &[(&ConvexPrimitive, &Pose)]) -> Self {
        let extra = prims
            .iter()
            .filter(|(p, _)| matches!(p, ConvexPrimitive::Capsule { .. }))
            .count();
        let nvars = 4 + extra;
        let mut asm = Self {
            objective: DVector::zeros(nvars),
            rows: Vec::new(),
            rhs: Vec::new(),
            nonneg: 0,
            soc: Vec::new(),
            nvars,
        };
        asm.objective[3] = 1.0;

        // Linear rows first: alpha >= 0, polytope rows, capsule axis bounds.
        asm.push_linear_row(&[(3, -1.0)], 0.0); // s = alpha
        let mut next_aux = 4;
        for (prim, pose) in prims {
            match prim {
                ConvexPrimitive::Polytope {
                    normals, offsets, ..
                } => {
                    let rot = pose.rotation();
                    for (a, b) in normals.iter().zip(offsets) {
                        // a . R^T (p - r) <= alpha b
                        let world_a = rot * a; // row of A R^T
                        let coeffs = [
                            (0, world_a.x),
                            (1, world_a.y),
                            (2, world_a.z),
                            (3, -b),
                        ];
                        asm.push_linear_row(&coeffs, world_a.dot(&pose.position));
                    }
                }
                ConvexPrimitive::Capsule { half_length, .. } => {
                    let aux = next_aux;
                    next_aux += 1;
                    // -L/2 <= s_axis <= L/2
                    asm.push_linear_row(&[(aux, 1.0)], *half_length);
                    asm.push_linear_row(&[(aux, -1.0)], *half_length);
                }
                ConvexPrimitive::Sphere { .. } => {}
            }
        }
        asm.nonneg = asm.rows.len();

        // SOC blocks for spheres and capsules.
        let mut aux_index = 4;
        for (prim, pose) in prims {
            match prim {
                ConvexPrimitive::Sphere { radius } => {
                    asm.push_soc_ball(pose.position, *radius, None);
                }
                ConvexPrimitive::Capsule { radius, .. } => {
                    let axis = pose.orientation * Vector3::z();
                    asm.push_soc_ball(pose.position, *radius, Some((aux_index, axis)));
                    aux_index += 1;
                }
                ConvexPrimitive::Polytope { .. } => {}
            }
        }
        asm
    }

    /// Linear row `sum coeff_j x_j + s = rhs`, `s >= 0`.
    fn push_linear_row(&mut self, coeffs: &[(usize, f64)], rhs: f64) {
        let mut row = vec![0.0; self.nvars];
        for &(j, v) in coeffs {
            row[j] = v;
        }
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    /// SOC block `|p - center - s_axis * axis| <= alpha * radius`.
    fn push_soc_ball(
        &mut self,
        center: Vector3<f64>,
        radius: f64,
        axis: Option<(usize, Vector3<f64>)>,
    ) {
        // u0 = alpha * radius
        let mut row0 = vec![0.0; self.nvars];
        row0[3] = -radius;
        self.rows.push(row0);
        self.rhs.push(0.0);
        // u_i = p_i - center_i - s_axis * axis_i
        for i in 0..3 {
            let mut row = vec![0.0; self.nvars];
            row[i] = -1.0;
            if let Some((aux, ax)) = axis {
                row[aux] = ax[i];
            }
            self.rows.push(row);
            self.rhs.push(-center[i]);
        }
        self.soc.push(4);
    }

    fn problem(&self) -> ConicProblem {
        let m = self.rows.len();
        let mut rows = DMatrix::zeros(m, self.nvars);
        for (i, r) in self.rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                rows[(i, j)] = *v;
            }
        }
        ConicProblem {
            objective: self.objective.clone(),
            rows,
            rhs: DVector::from_vec(self.rhs.clone()),
            cones: ConeSpec {
                nonneg: self.nonneg,
                soc: self.soc.clone(),
            },
        }
    }
}

/// Strictly feasible starting point: midpoint of the two origins with a
/// scaling factor large enough to cover it for both bodies.
fn initial_point(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
    nvars: usize,
) -> DVector<f64> {
    let p0 = 0.5 * (pose_a.position + pose_b.position);
    let needed = |prim: &ConvexPrimitive, pose: &Pose| -> f64 {
        let dist = (p0 - pose.position).norm();
        dist / prim.inner_radius() + 1.0
    };
    let alpha0 = needed(prim_a, pose_a).max(needed(prim_b, pose_b)) + 1.0;
    let mut x = DVector::zeros(nvars);
    x[0] = p0.x;
    x[1] = p0.y;
    x[2] = p0.z;
    x[3] = alpha0;
    x
}

/// Solves the minimum uniform-scaling program for two posed primitives.
pub fn min_scaling(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
) -> ScalingSolution {
    min_scaling_warm(prim_a, pose_a, prim_b, pose_b, None)
}

/// [`min_scaling`] with an optional warm start from a nearby solution.
///
/// The warm point is re-interiorized by bumping the scaling variable, which
/// roughly halves the interior-point iterations for the finite-difference
/// solves clustered around a base configuration.
pub fn min_scaling_warm(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
    warm: Option<&DVector<f64>>,
) -> ScalingSolution {
    if (pose_a.position - pose_b.position).norm() < DEGENERACY_THRESHOLD {
        return ScalingSolution::degenerate();
    }
    let asm = Assembly::new(&[(prim_a, pose_a), (prim_b, pose_b)]);
    let prob = asm.problem();
    let x0 = match warm {
        Some(w) if w.len() == asm.nvars => {
            let mut x = w.clone();
            x[3] += 0.05_f64.max(0.02 * x[3].abs());
            x
        }
        _ => initial_point(prim_a, pose_a, prim_b, pose_b, asm.nvars),
    };
    let settings = ConicSettings::default();
    let sol = conic::solve(&prob, Some(&x0), &settings);

    let status = match sol.status {
        ConicStatus::Optimal => ScalingStatus::Optimal,
        ConicStatus::MaxIter => ScalingStatus::MaxIter,
        ConicStatus::Infeasible => ScalingStatus::Infeasible,
    };

    let (x, z) = match conic::polish(&prob, &sol) {
        Some((px, pz)) if status == ScalingStatus::Optimal => (px, pz),
        _ => (sol.x.clone(), sol.z.clone()),
    };

    let alpha_star = x[3];
    let p_star = Vector3::new(x[0], x[1], x[2]);
    if status == ScalingStatus::Optimal && alpha_star < DEGENERACY_THRESHOLD {
        return ScalingSolution::degenerate();
    }
    ScalingSolution {
        alpha_star,
        p_star,
        duals: z.as_slice().to_vec(),
        primal: x.as_slice().to_vec(),
        status,
    }
}

/// Closed-form scaling factor for a sphere-sphere pair.
///
/// `alpha* = |r_a - r_b| / (R_a + R_b)`; exposed for use as a test oracle and
/// for callers that want to bypass the conic solve on known sphere pairs.
pub fn sphere_sphere_scaling(
    radius_a: f64,
    pose_a: &Pose,
    radius_b: f64,
    pose_b: &Pose,
) -> f64 {
    (pose_a.position - pose_b.position).norm() / (radius_a + radius_b)
}

fn solve_alpha_warm(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
    warm: Option<&DVector<f64>>,
) -> Result<f64> {
    let sol = min_scaling_warm(prim_a, pose_a, prim_b, pose_b, warm);
    match sol.status {
        ScalingStatus::Optimal => Ok(sol.alpha_star),
        other => Err(Error::Numerical(format!(
            "scaling solve failed with status {other:?} during finite differencing"
        ))),
    }
}

/// Central finite-difference gradient of `alpha*` with respect to one body's
/// pose (body `a` when `of_body_a`, else body `b`).
///
/// Orientation derivatives use the body-frame tangent `R exp([delta]_x)`.
/// Sphere orientations do not affect `alpha*`, so their orientation gradient
/// is returned as exactly zero without extra solves.
pub fn pose_gradient(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
    solution: &ScalingSolution,
    of_body_a: bool,
) -> Result<PoseGradient> {
    if solution.status != ScalingStatus::Optimal {
        return Err(Error::GradientUndefined(format!(
            "gradient requires an Optimal scaling solution, got {:?}",
            solution.status
        )));
    }
    let warm = DVector::from_column_slice(&solution.primal);
    let own = if of_body_a { prim_a } else { prim_b };
    let own_pose = if of_body_a { pose_a } else { pose_b };
    let h = GRADIENT_STEP;
    let eval = |pose: &Pose| -> Result<f64> {
        if of_body_a {
            solve_alpha_warm(prim_a, pose, prim_b, pose_b, Some(&warm))
        } else {
            solve_alpha_warm(prim_a, pose_a, prim_b, pose, Some(&warm))
        }
    };
    let mut position = Vector3::zeros();
    for i in 0..3 {
        let mut dp = Vector3::zeros();
        dp[i] = h;
        let ap = eval(&own_pose.perturbed(&dp, &Vector3::zeros()))?;
        let am = eval(&own_pose.perturbed(&(-dp), &Vector3::zeros()))?;
        position[i] = (ap - am) / (2.0 * h);
    }
    let mut orientation = Vector3::zeros();
    if !matches!(own, ConvexPrimitive::Sphere { .. }) {
        for i in 0..3 {
            let mut dt = Vector3::zeros();
            dt[i] = h;
            let ap = eval(&own_pose.perturbed(&Vector3::zeros(), &dt))?;
            let am = eval(&own_pose.perturbed(&Vector3::zeros(), &(-dt)))?;
            orientation[i] = (ap - am) / (2.0 * h);
        }
    }
    Ok(PoseGradient {
        position,
        orientation,
    })
}

/// Central finite difference of `alpha*` along one pose tangent direction of
/// body `a` (or `b`): position step `dp` and body-frame orientation step
/// `dtheta` per unit of the parameter.
///
/// Warm-started from `solution`; lets callers restrict differentiation to the
/// directions their kinematics can actually produce.
pub fn directional_derivative(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
    solution: &ScalingSolution,
    dp: &Vector3<f64>,
    dtheta: &Vector3<f64>,
    of_body_a: bool,
) -> Result<f64> {
    if solution.status != ScalingStatus::Optimal {
        return Err(Error::GradientUndefined(format!(
            "derivative requires an Optimal scaling solution, got {:?}",
            solution.status
        )));
    }
    let warm = DVector::from_column_slice(&solution.primal);
    let h = GRADIENT_STEP;
    let own_pose = if of_body_a { pose_a } else { pose_b };
    let plus = own_pose.perturbed(&(h * dp), &(h * dtheta));
    let minus = own_pose.perturbed(&(-h * dp), &(-h * dtheta));
    let (ap, am) = if of_body_a {
        (
            solve_alpha_warm(prim_a, &plus, prim_b, pose_b, Some(&warm))?,
            solve_alpha_warm(prim_a, &minus, prim_b, pose_b, Some(&warm))?,
        )
    } else {
        (
            solve_alpha_warm(prim_a, pose_a, prim_b, &plus, Some(&warm))?,
            solve_alpha_warm(prim_a, pose_a, prim_b, &minus, Some(&warm))?,
        )
    };
    Ok((ap - am) / (2.0 * h))
}

/// Gradients of `alpha*` with respect to both bodies' poses.
pub fn min_scaling_gradient(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
    solution: &ScalingSolution,
) -> Result<(PoseGradient, PoseGradient)> {
    let grad_a = pose_gradient(prim_a, pose_a, prim_b, pose_b, solution, true)?;
    let grad_b = pose_gradient(prim_a, pose_a, prim_b, pose_b, solution, false)?;
    Ok((grad_a, grad_b))
}

/// Gradient of `alpha*` with respect to one body's position only.
///
/// Solves the base problem once and runs six warm-started solves; used by the
/// noise-robust barrier for the obstacle-position direction.
pub fn position_gradient(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
    of_body_a: bool,
) -> Result<Vector3<f64>> {
    let base = min_scaling(prim_a, pose_a, prim_b, pose_b);
    if base.status != ScalingStatus::Optimal {
        return Err(Error::Numerical(format!(
            "scaling solve failed with status {:?}",
            base.status
        )));
    }
    let warm = DVector::from_column_slice(&base.primal);
    let h = GRADIENT_STEP;
    let mut grad = Vector3::zeros();
    for i in 0..3 {
        let mut dp = Vector3::zeros();
        dp[i] = h;
        let (ap, am) = if of_body_a {
            (
                solve_alpha_warm(prim_a, &pose_a.perturbed(&dp, &Vector3::zeros()), prim_b, pose_b, Some(&warm))?,
                solve_alpha_warm(prim_a, &pose_a.perturbed(&(-dp), &Vector3::zeros()), prim_b, pose_b, Some(&warm))?,
            )
        } else {
            (
                solve_alpha_warm(prim_a, pose_a, prim_b, &pose_b.perturbed(&dp, &Vector3::zeros()), Some(&warm))?,
                solve_alpha_warm(prim_a, pose_a, prim_b, &pose_b.perturbed(&(-dp), &Vector3::zeros()), Some(&warm))?,
            )
        };
        grad[i] = (ap - am) / (2.0 * h);
    }
    Ok(grad)
}

/// Checks that `p_star` lies in both scaled sets at `alpha = alpha* + slack`.
pub fn verify_feasibility(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
    solution: &ScalingSolution,
    slack: f64,
) -> Result<bool> {
    let alpha = solution.alpha_star + slack;
    Ok(scaled_set_contains(prim_a, pose_a, alpha, &solution.p_star)?
        && scaled_set_contains(prim_b, pose_b, alpha, &solution.p_star)?)
}
