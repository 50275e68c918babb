//! The TVCBFQP safety filter: Euclidean projection of the reference control
//! onto the polytope cut out by the barrier rows and the control box.
//!
//! Solved with a dual active-set iteration (Goldfarb-Idnani specialized to an
//! identity Hessian): start at the unconstrained optimum `u_ref`, repeatedly
//! add the most violated constraint, and drop active constraints whose
//! multiplier would go negative. Terminates in finitely many steps with
//! KKT residuals at machine precision.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::cbf::ConstraintRow;
use crate::conic::{self, ConeSpec, ConicProblem, ConicSettings, ConicStatus};
use crate::control::ControlBox;
use crate::{Error, Result};

/// Identity of one QP constraint, stable across ticks for warm-starting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintId {
    /// Barrier row for a (robot body, obstacle) pair.
    Row { robot: usize, obstacle: usize },
    BoxLower(usize),
    BoxUpper(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpResult {
    pub u: DVector<f64>,
    pub status: QpStatus,
    /// Constraints active at the solution, reusable as next tick's hint.
    pub active: Vec<ConstraintId>,
    /// Multipliers of the active constraints (same order as `active`).
    pub multipliers: Vec<f64>,
    pub solve_time: f64,
}

struct Constraint {
    id: ConstraintId,
    normal: DVector<f64>,
    rhs: f64,
}

/// Minimizes `|u - u_ref|^2` subject to `a_i' u >= c_i` for every row and the
/// box bounds.
///
/// `warm_hint` biases the order in which violated constraints are activated;
/// it never changes the solution. Emergency rows (degenerate scaling) make
/// the problem infeasible immediately and the commanded control is a full
/// stop clamped into the box.
pub fn tvcbf_qp(
    u_ref: &DVector<f64>,
    rows: &[ConstraintRow],
    bounds: &ControlBox,
    warm_hint: &[ConstraintId],
) -> Result<QpResult> {
    let start = Instant::now();
    let m = bounds.dim();
    if u_ref.len() != m {
        return Err(Error::InvalidParameter(
            "reference control dimension does not match box".into(),
        ));
    }
    if rows.iter().any(|r| r.emergency) {
        return Ok(QpResult {
            u: bounds.clamp(&DVector::zeros(m)),
            status: QpStatus::Infeasible,
            active: Vec::new(),
            multipliers: Vec::new(),
            solve_time: start.elapsed().as_secs_f64(),
        });
    }
    for row in rows {
        if row.coeffs.len() != m {
            return Err(Error::InvalidParameter(
                "constraint row dimension does not match box".into(),
            ));
        }
        if !row.coeffs.iter().all(|v| v.is_finite()) || !row.lower.is_finite() {
            return Err(Error::InvalidParameter(
                "constraint row with non-finite entries".into(),
            ));
        }
    }

    let mut constraints: Vec<Constraint> = Vec::with_capacity(rows.len() + 2 * m);
    for row in rows {
        constraints.push(Constraint {
            id: ConstraintId::Row {
                robot: row.robot_index,
                obstacle: row.obstacle_index,
            },
            normal: row.coeffs.clone(),
            rhs: row.lower,
        });
    }
    for i in 0..m {
        let mut e = DVector::zeros(m);
        e[i] = 1.0;
        constraints.push(Constraint {
            id: ConstraintId::BoxLower(i),
            normal: e.clone(),
            rhs: bounds.lower[i],
        });
        constraints.push(Constraint {
            id: ConstraintId::BoxUpper(i),
            normal: -e,
            rhs: -bounds.upper[i],
        });
    }

    let scale = 1.0 + u_ref.amax();
    let viol_tol = 1e-11 * scale;
    let mut u = u_ref.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let max_iter = 50 * (constraints.len() + m);

    let mut status = QpStatus::MaxIter;
    for _ in 0..max_iter {
        // Most violated constraint, warm-hinted ids first.
        let violation = |c: &Constraint| c.rhs - c.normal.dot(&u);
        let mut pick: Option<usize> = None;
        let mut worst = viol_tol;
        for pass_warm in [true, false] {
            for (ci, c) in constraints.iter().enumerate() {
                if active.contains(&ci) {
                    continue;
                }
                if warm_hint.contains(&c.id) != pass_warm {
                    continue;
                }
                let v = violation(c);
                if v > worst {
                    worst = v;
                    pick = Some(ci);
                }
            }
            if pick.is_some() {
                break;
            }
        }
        let Some(p) = pick else {
            status = QpStatus::Optimal;
            break;
        };

        // Inner loop: add p, dropping blocking constraints as needed. The
        // entering multiplier accumulates across partial steps.
        let mut lambda_p = 0.0;
        loop {
            let v_p = constraints[p].rhs - constraints[p].normal.dot(&u);
            if v_p <= viol_tol {
                if lambda_p > 0.0 {
                    active.push(p);
                    lambda.push(lambda_p);
                }
                break;
            }
            let k = active.len();
            let n_p = &constraints[p].normal;
            let (z, r) = if k == 0 {
                (n_p.clone(), DVector::zeros(0))
            } else {
                let mut n_mat = DMatrix::zeros(m, k);
                for (col, &ci) in active.iter().enumerate() {
                    n_mat.set_column(col, &constraints[ci].normal);
                }
                let gram = n_mat.transpose() * &n_mat;
                let rhs = n_mat.transpose() * n_p;
                let r = match gram.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => gram
                        .svd(true, true)
                        .solve(&rhs, 1e-12)
                        .map_err(|e| Error::Numerical(e.to_string()))?,
                };
                let z = n_p - &n_mat * &r;
                (z, r)
            };
            let z_norm_sq = z.norm_squared();
            let t1 = if z_norm_sq > 1e-16 * n_p.norm_squared().max(1e-300) {
                v_p / z_norm_sq
            } else {
                f64::INFINITY
            };
            let mut t2 = f64::INFINITY;
            let mut blocker = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 1e-12 {
                    let ratio = lambda[j] / rj;
                    if ratio < t2 {
                        t2 = ratio;
                        blocker = Some(j);
                    }
                }
            }
            if !t1.is_finite() && !t2.is_finite() {
                return Ok(QpResult {
                    u: bounds.clamp(&u),
                    status: QpStatus::Infeasible,
                    active: active.iter().map(|&ci| constraints[ci].id).collect(),
                    multipliers: lambda.clone(),
                    solve_time: start.elapsed().as_secs_f64(),
                });
            }
            let t = t1.min(t2);
            if t1.is_finite() {
                u += t * &z;
            }
            for (j, rj) in r.iter().enumerate() {
                lambda[j] -= t * rj;
            }
            lambda_p += t;
            if t2 < t1 {
                let j = blocker.expect("blocking index when t2 finite");
                active.remove(j);
                lambda.remove(j);
                // Same violated constraint p is retried with the smaller set.
            } else {
                active.push(p);
                lambda.push(lambda_p);
                break;
            }
        }
    }

    // Drop numerically zero multipliers from the reported active set.
    let mut ids = Vec::new();
    let mut mults = Vec::new();
    for (j, &ci) in active.iter().enumerate() {
        if lambda[j] > 1e-12 * scale {
            ids.push(constraints[ci].id);
            mults.push(lambda[j]);
        }
    }
    Ok(QpResult {
        u,
        status,
        active: ids,
        multipliers: mults,
        solve_time: start.elapsed().as_secs_f64(),
    })
}

/// Fallback for an infeasible filter tick: the box-clamped control that
/// maximizes the smallest row margin (a linear program).
pub fn fallback_control(rows: &[ConstraintRow], bounds: &ControlBox) -> Result<DVector<f64>> {
    let m = bounds.dim();
    let usable: Vec<&ConstraintRow> = rows.iter().filter(|r| !r.emergency).collect();
    if usable.is_empty() {
        return Ok(bounds.clamp(&DVector::zeros(m)));
    }
    // Variables (u, t): maximize t subject to a_i' u - t >= c_i and the box.
    let nrows = usable.len() + 2 * m;
    let mut a = DMatrix::zeros(nrows, m + 1);
    let mut b = DVector::zeros(nrows);
    for (i, row) in usable.iter().enumerate() {
        for j in 0..m {
            a[(i, j)] = -row.coeffs[j];
        }
        a[(i, m)] = 1.0;
        b[i] = -row.lower;
    }
    for j in 0..m {
        let base = usable.len() + 2 * j;
        a[(base, j)] = 1.0;
        b[base] = bounds.upper[j];
        a[(base + 1, j)] = -1.0;
        b[base + 1] = -bounds.lower[j];
    }
    let mut objective = DVector::zeros(m + 1);
    objective[m] = -1.0;
    let prob = ConicProblem {
        objective,
        rows: a,
        rhs: b,
        cones: ConeSpec {
            nonneg: nrows,
            soc: vec![],
        },
    };
    let mid = bounds.midpoint();
    let worst = usable
        .iter()
        .map(|r| r.coeffs.dot(&mid) - r.lower)
        .fold(f64::INFINITY, f64::min);
    let mut x0 = DVector::zeros(m + 1);
    for j in 0..m {
        x0[j] = mid[j];
    }
    x0[m] = worst - 1.0;
    let sol = conic::solve(&prob, Some(&x0), &ConicSettings::default());
    if sol.status == ConicStatus::Infeasible {
        return Ok(bounds.clamp(&DVector::zeros(m)));
    }
    let u = DVector::from_fn(m, |i, _| sol.x[i]);
    Ok(bounds.clamp(&u))
}
