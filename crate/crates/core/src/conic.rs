//! Dense primal-dual interior-point solver for small conic programs.
//!
//! Solves
//!
//! ```text
//!     minimize    c' x
//!     subject to  A x + s = b,   s in K
//! ```
//!
//! where `K` is a product of a nonnegative orthant and second-order cones.
//! Rows of `A` are laid out with the orthant rows first, followed by the
//! second-order-cone blocks in order.
//!
//! The iteration is Mehrotra-style predictor-corrector path following with
//! Nesterov-Todd scaling. Problems in this crate have a handful of variables
//! and at most a few hundred rows, so all linear algebra is dense.
//!
//! [`polish`] refines a solution to near machine precision by solving the
//! KKT system of the active constraints with Newton's method; the scaling
//! module relies on this to make finite-difference gradients of the optimal
//! value usable.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Cone layout of the rows: `nonneg` scalar rows, then SOC blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeSpec {
    pub nonneg: usize,
    pub soc: Vec<usize>,
}

impl ConeSpec {
    pub fn total_rows(&self) -> usize {
        self.nonneg + self.soc.iter().sum::<usize>()
    }

    /// Barrier degree: one per orthant row, one per SOC block.
    fn degree(&self) -> usize {
        self.nonneg + self.soc.len()
    }
}

#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub objective: DVector<f64>,
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub cones: ConeSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConicStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: DVector<f64>,
    pub s: DVector<f64>,
    pub z: DVector<f64>,
    pub status: ConicStatus,
    pub iterations: usize,
    /// Complementarity measure `s' z / degree` at exit.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ConicSettings {
    pub gap_tol: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for ConicSettings {
    fn default() -> Self {
        Self {
            gap_tol: 1e-10,
            feas_tol: 1e-9,
            max_iter: 200,
        }
    }
}

/// Nesterov-Todd scaling for one cone block.
enum BlockScaling {
    /// Diagonal `w_i = sqrt(s_i / z_i)` per orthant coordinate.
    NonNeg { w: Vec<f64> },
    /// `W = eta * [wbar0, wbar1'; wbar1, I + wbar1 wbar1'/(1 + wbar0)]`
    /// with `det(wbar) = 1`.
    Soc { eta: f64, wbar: DVector<f64> },
}

struct Scaling {
    blocks: Vec<BlockScaling>,
    /// Scaled point `lambda = W z = W^{-1} s`.
    lambda: DVector<f64>,
}

fn soc_det(u: &[f64]) -> f64 {
    let tail: f64 = u[1..].iter().map(|v| v * v).sum();
    u[0] * u[0] - tail
}

fn soc_margin(u: &[f64]) -> f64 {
    u[0] - u[1..].iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Jordan product for the second-order cone.
fn soc_mul(u: &[f64], v: &[f64], out: &mut [f64]) {
    out[0] = u.iter().zip(v).map(|(a, b)| a * b).sum();
    for i in 1..u.len() {
        out[i] = u[0] * v[i] + v[0] * u[i];
    }
}

/// Solves the arrow system `lambda o x = v`.
fn soc_arrow_solve(lambda: &[f64], v: &[f64], out: &mut [f64]) {
    let det = soc_det(lambda);
    let tail_dot: f64 = lambda[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
    let x0 = (lambda[0] * v[0] - tail_dot) / det;
    out[0] = x0;
    for i in 1..lambda.len() {
        out[i] = (v[i] - x0 * lambda[i]) / lambda[0];
    }
}

/// Largest step `t` keeping `u + t du` inside the cone (f64::INFINITY if any).
fn soc_max_step(u: &[f64], du: &[f64]) -> f64 {
    // Roots of det(u + t du) = 0 with u interior (det(u) > 0, u0 > 0).
    let a = soc_det(du);
    let b = 2.0
        * (u[0] * du[0]
            - u[1..]
                .iter()
                .zip(&du[1..])
                .map(|(x, y)| x * y)
                .sum::<f64>());
    let c = soc_det(u);
    let mut best = f64::INFINITY;
    if a.abs() < 1e-14 {
        if b < 0.0 {
            best = -c / b;
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for root in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                if root > 0.0 {
                    best = best.min(root);
                }
            }
        }
    }
    // Also the u0 + t du0 >= 0 line.
    if du[0] < 0.0 {
        best = best.min(-u[0] / du[0]);
    }
    best
}

impl Scaling {
    fn compute(s: &DVector<f64>, z: &DVector<f64>, cones: &ConeSpec) -> Option<Self> {
        let mut blocks = Vec::with_capacity(1 + cones.soc.len());
        let mut lambda = DVector::zeros(s.len());
        if cones.nonneg > 0 {
            let mut w = Vec::with_capacity(cones.nonneg);
            for i in 0..cones.nonneg {
                if s[i] <= 0.0 || z[i] <= 0.0 {
                    return None;
                }
                w.push((s[i] / z[i]).sqrt());
                lambda[i] = (s[i] * z[i]).sqrt();
            }
            blocks.push(BlockScaling::NonNeg { w });
        }
        let mut offset = cones.nonneg;
        for &dim in &cones.soc {
            let sb = s.as_slice()[offset..offset + dim].to_vec();
            let zb = z.as_slice()[offset..offset + dim].to_vec();
            let ds = soc_det(&sb);
            let dz = soc_det(&zb);
            if ds <= 0.0 || dz <= 0.0 || sb[0] <= 0.0 || zb[0] <= 0.0 {
                return None;
            }
            let (rs, rz) = (ds.sqrt(), dz.sqrt());
            let sn: Vec<f64> = sb.iter().map(|v| v / rs).collect();
            let zn: Vec<f64> = zb.iter().map(|v| v / rz).collect();
            let dot: f64 = sn.iter().zip(&zn).map(|(a, b)| a * b).sum();
            let gamma = ((1.0 + dot) / 2.0).sqrt();
            let mut wbar = DVector::zeros(dim);
            wbar[0] = (sn[0] + zn[0]) / (2.0 * gamma);
            for i in 1..dim {
                wbar[i] = (sn[i] - zn[i]) / (2.0 * gamma);
            }
            let eta = (ds / dz).powf(0.25);
            // lambda = W z for this block.
            let block = BlockScaling::Soc { eta, wbar };
            let mut lz = vec![0.0; dim];
            block.apply(&zb, &mut lz);
            lambda.as_mut_slice()[offset..offset + dim].copy_from_slice(&lz);
            blocks.push(block);
            offset += dim;
        }
        Some(Self { blocks, lambda })
    }

    fn apply_to(&self, v: &DVector<f64>, cones: &ConeSpec, inverse: bool) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        let mut offset = 0;
        let mut block_iter = self.blocks.iter();
        if cones.nonneg > 0 {
            let Some(BlockScaling::NonNeg { w }) = block_iter.next() else {
                unreachable!()
            };
            for i in 0..cones.nonneg {
                out[i] = if inverse { v[i] / w[i] } else { v[i] * w[i] };
            }
            offset = cones.nonneg;
        }
        for &dim in &cones.soc {
            let Some(block) = block_iter.next() else {
                unreachable!()
            };
            let vb = &v.as_slice()[offset..offset + dim];
            let mut ob = vec![0.0; dim];
            if inverse {
                block.apply_inv(vb, &mut ob);
            } else {
                block.apply(vb, &mut ob);
            }
            out.as_mut_slice()[offset..offset + dim].copy_from_slice(&ob);
            offset += dim;
        }
        out
    }
}

impl BlockScaling {
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            BlockScaling::NonNeg { w } => {
                for i in 0..v.len() {
                    out[i] = w[i] * v[i];
                }
            }
            BlockScaling::Soc { eta, wbar } => {
                let tail: f64 = wbar.as_slice()[1..]
                    .iter()
                    .zip(&v[1..])
                    .map(|(a, b)| a * b)
                    .sum();
                out[0] = eta * (wbar[0] * v[0] + tail);
                let coef = tail / (1.0 + wbar[0]);
                for i in 1..v.len() {
                    out[i] = eta * (v[0] * wbar[i] + v[i] + coef * wbar[i]);
                }
            }
        }
    }

    fn apply_inv(&self, v: &[f64], out: &mut [f64]) {
        match self {
            BlockScaling::NonNeg { w } => {
                for i in 0..v.len() {
                    out[i] = v[i] / w[i];
                }
            }
            BlockScaling::Soc { eta, wbar } => {
                let tail: f64 = wbar.as_slice()[1..]
                    .iter()
                    .zip(&v[1..])
                    .map(|(a, b)| a * b)
                    .sum();
                out[0] = (wbar[0] * v[0] - tail) / eta;
                let coef = tail / (1.0 + wbar[0]);
                for i in 1..v.len() {
                    out[i] = (-v[0] * wbar[i] + v[i] + coef * wbar[i]) / eta;
                }
            }
        }
    }
}

/// Componentwise Jordan product across the whole cone layout.
fn cone_mul(u: &DVector<f64>, v: &DVector<f64>, cones: &ConeSpec, out: &mut DVector<f64>) {
    for i in 0..cones.nonneg {
        out[i] = u[i] * v[i];
    }
    let mut offset = cones.nonneg;
    for &dim in &cones.soc {
        let mut ob = vec![0.0; dim];
        soc_mul(
            &u.as_slice()[offset..offset + dim],
            &v.as_slice()[offset..offset + dim],
            &mut ob,
        );
        out.as_mut_slice()[offset..offset + dim].copy_from_slice(&ob);
        offset += dim;
    }
}

/// Solves `lambda o x = v` blockwise.
fn cone_arrow_solve(
    lambda: &DVector<f64>,
    v: &DVector<f64>,
    cones: &ConeSpec,
    out: &mut DVector<f64>,
) {
    for i in 0..cones.nonneg {
        out[i] = v[i] / lambda[i];
    }
    let mut offset = cones.nonneg;
    for &dim in &cones.soc {
        let mut ob = vec![0.0; dim];
        soc_arrow_solve(
            &lambda.as_slice()[offset..offset + dim],
            &v.as_slice()[offset..offset + dim],
            &mut ob,
        );
        out.as_mut_slice()[offset..offset + dim].copy_from_slice(&ob);
        offset += dim;
    }
}

/// Identity element of the cone algebra (ones / (1, 0, ...) per block).
fn cone_identity(cones: &ConeSpec) -> DVector<f64> {
    let mut e = DVector::zeros(cones.total_rows());
    for i in 0..cones.nonneg {
        e[i] = 1.0;
    }
    let mut offset = cones.nonneg;
    for &dim in &cones.soc {
        e[offset] = 1.0;
        offset += dim;
    }
    e
}

/// Largest feasible step for the full cone layout.
fn cone_max_step(u: &DVector<f64>, du: &DVector<f64>, cones: &ConeSpec) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..cones.nonneg {
        if du[i] < 0.0 {
            best = best.min(-u[i] / du[i]);
        }
    }
    let mut offset = cones.nonneg;
    for &dim in &cones.soc {
        best = best.min(soc_max_step(
            &u.as_slice()[offset..offset + dim],
            &du.as_slice()[offset..offset + dim],
        ));
        offset += dim;
    }
    best
}

/// Moves `s` strictly inside the cone, used for initialization.
fn push_interior(s: &mut DVector<f64>, cones: &ConeSpec) {
    let floor = 1e-8;
    for i in 0..cones.nonneg {
        if s[i] < floor {
            s[i] = 1.0;
        }
    }
    let mut offset = cones.nonneg;
    for &dim in &cones.soc {
        let block = &s.as_slice()[offset..offset + dim];
        if soc_margin(block) < floor {
            let tail_norm: f64 = block[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            s[offset] = tail_norm + 1.0;
        }
        offset += dim;
    }
}

pub fn solve(
    prob: &ConicProblem,
    x0: Option<&DVector<f64>>,
    settings: &ConicSettings,
) -> ConicSolution {
    let n = prob.objective.len();
    let m = prob.cones.total_rows();
    debug_assert_eq!(prob.rows.nrows(), m);
    debug_assert_eq!(prob.rows.ncols(), n);
    debug_assert_eq!(prob.rhs.len(), m);
    let degree = prob.cones.degree() as f64;

    let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
    let mut s = &prob.rhs - &prob.rows * &x;
    push_interior(&mut s, &prob.cones);
    let mut z = cone_identity(&prob.cones);

    let b_scale = 1.0 + prob.rhs.amax();
    let c_scale = 1.0 + prob.objective.amax();

    let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>, f64)> = None;
    let mut status = ConicStatus::MaxIter;
    let mut iterations = settings.max_iter;
    let mut mu = s.dot(&z) / degree;

    for iter in 0..settings.max_iter {
        let r_p = &prob.rhs - &prob.rows * &x - &s;
        let r_d = -&prob.objective - prob.rows.transpose() * &z;
        mu = s.dot(&z) / degree;

        let p_res = r_p.amax() / b_scale;
        let d_res = r_d.amax() / c_scale;
        let merit = p_res.max(d_res).max(mu);
        if best.as_ref().map_or(true, |(bm, ..)| merit < *bm) {
            best = Some((merit, x.clone(), s.clone(), z.clone(), mu));
        }
        if p_res <= settings.feas_tol && d_res <= settings.feas_tol && mu <= settings.gap_tol {
            status = ConicStatus::Optimal;
            iterations = iter;
            break;
        }
        // Dual variables diverging while the gap refuses to close indicates
        // primal infeasibility.
        if z.amax() > 1e12 {
            status = ConicStatus::Infeasible;
            iterations = iter;
            break;
        }

        let Some(scaling) = Scaling::compute(&s, &z, &prob.cones) else {
            iterations = iter;
            break;
        };

        // M = A' W^{-2} A, shared by both solves this iteration.
        let mut w2a = DMatrix::zeros(m, n);
        for j in 0..n {
            let col = DVector::from_column_slice(prob.rows.column(j).as_slice());
            let once = scaling.apply_to(&col, &prob.cones, true);
            let twice = scaling.apply_to(&once, &prob.cones, true);
            w2a.set_column(j, &twice);
        }
        let m_mat = prob.rows.transpose() * &w2a;
        let mut chol = Cholesky::new(m_mat.clone());
        if chol.is_none() {
            let mut ridge = 1e-13 * (1.0 + m_mat.trace() / n as f64);
            for _ in 0..6 {
                let mut reg = m_mat.clone();
                for d in 0..n {
                    reg[(d, d)] += ridge;
                }
                chol = Cholesky::new(reg);
                if chol.is_some() {
                    break;
                }
                ridge *= 100.0;
            }
        }
        let Some(chol) = chol else {
            iterations = iter;
            break;
        };

        // Newton system on (dx, ds, dz):
        //   A dx + ds = rp,   A' dz = rd,   W^{-1} ds + W dz = dsc
        // eliminated to A' W^{-2} A dx = rd + A' W^{-2} (rp - W dsc).
        let solve_kkt_once = |rp: &DVector<f64>,
                              rd: &DVector<f64>,
                              dsc: &DVector<f64>|
         -> (DVector<f64>, DVector<f64>, DVector<f64>) {
            let wds = scaling.apply_to(dsc, &prob.cones, false);
            let rhs_vec = rp - &wds;
            let w2rhs = {
                let once = scaling.apply_to(&rhs_vec, &prob.cones, true);
                scaling.apply_to(&once, &prob.cones, true)
            };
            let rhs_x = rd + prob.rows.transpose() * &w2rhs;
            let dx = chol.solve(&rhs_x);
            let adx = &prob.rows * &dx;
            let tmp = &adx - &rhs_vec;
            let dz = {
                let once = scaling.apply_to(&tmp, &prob.cones, true);
                scaling.apply_to(&once, &prob.cones, true)
            };
            let ds = rp - adx;
            (dx, ds, dz)
        };
        // One round of iterative refinement keeps the dual residual from
        // deteriorating once the scaling becomes extreme near convergence.
        let solve_kkt = |rp: &DVector<f64>,
                         rd: &DVector<f64>,
                         dsc: &DVector<f64>|
         -> (DVector<f64>, DVector<f64>, DVector<f64>) {
            let (mut dx, mut ds, mut dz) = solve_kkt_once(rp, rd, dsc);
            let e1 = rp - (&prob.rows * &dx + &ds);
            let e2 = rd - prob.rows.transpose() * &dz;
            let e3 = dsc
                - (scaling.apply_to(&ds, &prob.cones, true)
                    + scaling.apply_to(&dz, &prob.cones, false));
            let (cx, cs, cz) = solve_kkt_once(&e1, &e2, &e3);
            dx += cx;
            ds += cs;
            dz += cz;
            (dx, ds, dz)
        };

        // Predictor: pure Newton toward complementarity zero.
        let mut lam_sq = DVector::zeros(m);
        cone_mul(&scaling.lambda, &scaling.lambda, &prob.cones, &mut lam_sq);
        let d_s_aff = -&scaling.lambda;
        let (_dx_aff, ds_aff, dz_aff) = solve_kkt(&r_p, &r_d, &d_s_aff);

        let alpha_aff = {
            let a_s = cone_max_step(&s, &ds_aff, &prob.cones);
            let a_z = cone_max_step(&z, &dz_aff, &prob.cones);
            a_s.min(a_z).min(1.0)
        };
        let mu_aff = {
            let s_new = &s + alpha_aff * &ds_aff;
            let z_new = &z + alpha_aff * &dz_aff;
            s_new.dot(&z_new) / degree
        };
        let sigma = (mu_aff / mu).powi(3).clamp(1e-8, 1.0);

        // Corrector with Mehrotra second-order term.
        let winv_ds = scaling.apply_to(&ds_aff, &prob.cones, true);
        let w_dz = scaling.apply_to(&dz_aff, &prob.cones, false);
        let mut corr = DVector::zeros(m);
        cone_mul(&winv_ds, &w_dz, &prob.cones, &mut corr);
        let e = cone_identity(&prob.cones);
        let target = sigma * mu * e - lam_sq - corr;
        let mut d_s = DVector::zeros(m);
        cone_arrow_solve(&scaling.lambda, &target, &prob.cones, &mut d_s);

        let (dx, ds, dz) = solve_kkt(&r_p, &r_d, &d_s);
        let alpha = {
            let a_s = cone_max_step(&s, &ds, &prob.cones);
            let a_z = cone_max_step(&z, &dz, &prob.cones);
            (0.99 * a_s.min(a_z)).min(1.0)
        };
        if alpha < 1e-11 {
            iterations = iter;
            break;
        }
        x += alpha * &dx;
        s += alpha * &ds;
        z += alpha * &dz;
    }

    if status == ConicStatus::Optimal {
        return ConicSolution {
            x,
            s,
            z,
            status,
            iterations,
            gap: mu,
        };
    }

    // Return the best iterate observed; re-check optimality at a relaxed
    // threshold so a run that stalls just above the target tolerances still
    // reports success honestly relative to the 1e-7 accuracy contract.
    let (merit, bx, bs, bz, bmu) = best.expect("at least one iterate recorded");
    let relaxed = merit <= 1e-8;
    ConicSolution {
        x: bx,
        s: bs,
        z: bz,
        status: if status == ConicStatus::Infeasible {
            ConicStatus::Infeasible
        } else if relaxed {
            ConicStatus::Optimal
        } else {
            ConicStatus::MaxIter
        },
        iterations,
        gap: bmu,
    }
}

/// Active constraints at a conic solution, for the polish step.
#[derive(Debug, Clone)]
enum ActiveConstraint {
    /// Orthant row index.
    Linear(usize),
    /// SOC block index (into `cones.soc`) with its row offset.
    Soc { block: usize, offset: usize },
}

/// Newton refinement of the active-constraint KKT system.
///
/// Returns a replacement `(x, z)` accurate to near machine precision, or
/// `None` when the active set cannot be identified or Newton fails, in which
/// case the caller keeps the interior-point iterate.
pub fn polish(prob: &ConicProblem, sol: &ConicSolution) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.objective.len();
    let active_tol = 1e-6;
    let mut active: Vec<ActiveConstraint> = Vec::new();
    for i in 0..prob.cones.nonneg {
        if sol.s[i] <= active_tol * (1.0 + prob.rhs[i].abs()) {
            active.push(ActiveConstraint::Linear(i));
        }
    }
    let mut offset = prob.cones.nonneg;
    for (bi, &dim) in prob.cones.soc.iter().enumerate() {
        let block = &sol.s.as_slice()[offset..offset + dim];
        let tail_norm: f64 = block[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if soc_margin(block) <= active_tol * (1.0 + block[0].abs()) {
            if tail_norm < 1e-9 {
                // Cone vertex: the boundary is not smooth there.
                return None;
            }
            active.push(ActiveConstraint::Soc { block: bi, offset });
        }
        offset += dim;
    }
    if active.is_empty() || active.len() > n + 8 {
        return None;
    }

    let k = active.len();
    let mut x = sol.x.clone();
    let mut lam = DVector::zeros(k);
    for (ai, a) in active.iter().enumerate() {
        lam[ai] = match a {
            ActiveConstraint::Linear(i) => sol.z[*i].max(0.0),
            ActiveConstraint::Soc { offset, .. } => sol.z[*offset].max(0.0),
        };
    }

    let soc_dims: Vec<usize> = prob.cones.soc.clone();
    // g_i(x) >= 0 slack value, gradient, and Hessian contribution.
    let eval = |x: &DVector<f64>,
                lam: &DVector<f64>|
     -> Option<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let u_all = &prob.rhs - &prob.rows * x;
        let mut g = DVector::zeros(k);
        let mut grad = DMatrix::zeros(k, n);
        let mut hess = DMatrix::zeros(n, n);
        for (ai, a) in active.iter().enumerate() {
            match a {
                ActiveConstraint::Linear(i) => {
                    g[ai] = u_all[*i];
                    for j in 0..n {
                        grad[(ai, j)] = -prob.rows[(*i, j)];
                    }
                }
                ActiveConstraint::Soc { block, offset } => {
                    let dim = soc_dims[*block];
                    let u = &u_all.as_slice()[*offset..*offset + dim];
                    let tail_norm: f64 = u[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if tail_norm < 1e-12 {
                        return None;
                    }
                    g[ai] = u[0] - tail_norm;
                    // grad = -A_0 + (ubar/|ubar|)' A_tail
                    for j in 0..n {
                        let mut acc = -prob.rows[(*offset, j)];
                        for t in 1..dim {
                            acc += u[t] / tail_norm * prob.rows[(*offset + t, j)];
                        }
                        grad[(ai, j)] = acc;
                    }
                    // hess_i = -A_tail' (I - nn')/|ubar| A_tail; accumulate
                    // -lam_i * hess_i (positive semidefinite contribution).
                    let scale = lam[ai] / tail_norm;
                    if scale != 0.0 {
                        for p in 0..n {
                            for q in 0..n {
                                let mut apq = 0.0;
                                let mut np = 0.0;
                                let mut nq = 0.0;
                                for t in 1..dim {
                                    apq += prob.rows[(*offset + t, p)] * prob.rows[(*offset + t, q)];
                                    np += prob.rows[(*offset + t, p)] * u[t] / tail_norm;
                                    nq += prob.rows[(*offset + t, q)] * u[t] / tail_norm;
                                }
                                hess[(p, q)] += scale * (apq - np * nq);
                            }
                        }
                    }
                }
            }
        }
        Some((g, grad, hess))
    };

    let mut last_residual = f64::INFINITY;
    for _ in 0..12 {
        let (g, grad, hess) = eval(&x, &lam)?;
        let r1 = &prob.objective - grad.transpose() * &lam;
        let r1_norm = r1.amax();
        let r2_norm = g.amax();
        if r1_norm < 1e-13 * (1.0 + prob.objective.amax()) && r2_norm < 1e-13 {
            break;
        }
        // Quadratic convergence or bust: a stalling iteration means the
        // active set is wrong and more Newton steps will not fix it.
        let residual = r1_norm.max(r2_norm);
        if residual > 0.5 * last_residual {
            return None;
        }
        last_residual = residual;
        // KKT Newton system [H -G'; G 0].
        let dim = n + k;
        let mut kkt = DMatrix::zeros(dim, dim);
        for p in 0..n {
            for q in 0..n {
                kkt[(p, q)] = hess[(p, q)];
            }
            kkt[(p, p)] += 1e-12;
        }
        for ai in 0..k {
            for j in 0..n {
                kkt[(j, n + ai)] = -grad[(ai, j)];
                kkt[(n + ai, j)] = grad[(ai, j)];
            }
        }
        let mut rhs = DVector::zeros(dim);
        for j in 0..n {
            rhs[j] = -r1[j];
        }
        for ai in 0..k {
            rhs[n + ai] = -g[ai];
        }
        let lu = kkt.lu();
        let delta = lu.solve(&rhs)?;
        for j in 0..n {
            x[j] += delta[j];
        }
        for ai in 0..k {
            lam[ai] += delta[n + ai];
        }
    }

    // Validate: primal feasibility on all rows, dual sign, no objective blowup.
    let u_all = &prob.rhs - &prob.rows * &x;
    for i in 0..prob.cones.nonneg {
        if u_all[i] < -1e-9 * (1.0 + prob.rhs[i].abs()) {
            return None;
        }
    }
    let mut offset = prob.cones.nonneg;
    for &dim in &prob.cones.soc {
        if soc_margin(&u_all.as_slice()[offset..offset + dim]) < -1e-9 {
            return None;
        }
        offset += dim;
    }
    if lam.iter().any(|&l| l < -1e-8) {
        return None;
    }
    let old_obj = prob.objective.dot(&sol.x);
    let new_obj = prob.objective.dot(&x);
    if new_obj > old_obj + 1e-7 * (1.0 + old_obj.abs()) {
        return None;
    }

    // Reassemble the dual vector from the active multipliers.
    let mut z = DVector::zeros(prob.cones.total_rows());
    for (ai, a) in active.iter().enumerate() {
        match a {
            ActiveConstraint::Linear(i) => z[*i] = lam[ai].max(0.0),
            ActiveConstraint::Soc { block, offset } => {
                let dim = soc_dims[*block];
                let u = &u_all.as_slice()[*offset..*offset + dim];
                let tail_norm: f64 = u[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                if tail_norm > 1e-12 {
                    z[*offset] = lam[ai].max(0.0);
                    for t in 1..dim {
                        z[*offset + t] = -lam[ai].max(0.0) * u[t] / tail_norm;
                    }
                }
            }
        }
    }
    Some((x, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// min x0 subject to x0 >= 3 (orthant row: s = x0 - 3 >= 0).
    #[test]
    fn lp_single_bound() {
        let prob = ConicProblem {
            objective: DVector::from_vec(vec![1.0]),
            rows: DMatrix::from_row_slice(1, 1, &[-1.0]),
            rhs: DVector::from_vec(vec![-3.0]),
            cones: ConeSpec {
                nonneg: 1,
                soc: vec![],
            },
        };
        let sol = solve(&prob, None, &ConicSettings::default());
        assert_eq!(sol.status, ConicStatus::Optimal);
        assert_relative_eq!(sol.x[0], 3.0, epsilon = 1e-7);
        let polished = polish(&prob, &sol).expect("polish");
        assert_relative_eq!(polished.0[0], 3.0, epsilon = 1e-12);
    }

    /// min -x - y subject to x <= 1, y <= 2, x,y >= 0.
    #[test]
    fn lp_box_corner() {
        let rows = DMatrix::from_row_slice(
            4,
            2,
            &[
                1.0, 0.0, //  s0 = 1 - x
                0.0, 1.0, //  s1 = 2 - y
                -1.0, 0.0, // s2 = x
                0.0, -1.0, // s3 = y
            ],
        );
        let prob = ConicProblem {
            objective: DVector::from_vec(vec![-1.0, -1.0]),
            rows,
            rhs: DVector::from_vec(vec![1.0, 2.0, 0.0, 0.0]),
            cones: ConeSpec {
                nonneg: 4,
                soc: vec![],
            },
        };
        let sol = solve(&prob, None, &ConicSettings::default());
        assert_eq!(sol.status, ConicStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-7);
    }

    /// Euclidean projection of the origin onto the line x + y = 4 written as
    /// an SOCP: min t s.t. |(x, y) - 0| <= t, x + y >= 4.
    #[test]
    fn socp_projection_onto_halfplane() {
        // Variables (x, y, t).
        let rows = DMatrix::from_row_slice(
            4,
            3,
            &[
                -1.0, -1.0, 0.0, // s0 = x + y - 4 >= 0
                0.0, 0.0, -1.0, // u0 = t
                -1.0, 0.0, 0.0, // u1 = x
                0.0, -1.0, 0.0, // u2 = y
            ],
        );
        let prob = ConicProblem {
            objective: DVector::from_vec(vec![0.0, 0.0, 1.0]),
            rows,
            rhs: DVector::from_vec(vec![-4.0, 0.0, 0.0, 0.0]),
            cones: ConeSpec {
                nonneg: 1,
                soc: vec![3],
            },
        };
        let sol = solve(&prob, None, &ConicSettings::default());
        assert_eq!(sol.status, ConicStatus::Optimal);
        assert_relative_eq!(sol.x[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-6);
        assert_relative_eq!(sol.x[2], (8.0f64).sqrt(), epsilon = 1e-6);

        let (px, _) = polish(&prob, &sol).expect("polish");
        assert_relative_eq!(px[0], 2.0, epsilon = 1e-11);
        assert_relative_eq!(px[1], 2.0, epsilon = 1e-11);
        assert_relative_eq!(px[2], (8.0f64).sqrt(), epsilon = 1e-11);
    }

    /// Two-ball minimum scaling in one dimension embedded in a cone program:
    /// centers at 0 and d, radii r1 r2: min alpha s.t. |p| <= alpha r1,
    /// |p - d| <= alpha r2 with scalar p (dim-2 SOCs).
    #[test]
    fn socp_two_interval_scaling() {
        let (d, r1, r2) = (10.0, 1.0, 3.0);
        // Variables (p, alpha).
        let rows = DMatrix::from_row_slice(
            4,
            2,
            &[
                0.0, -r1, // u0 = alpha r1
                -1.0, 0.0, // u1 = p
                0.0, -r2, // v0 = alpha r2
                -1.0, 0.0, // v1 = p - d
            ],
        );
        let prob = ConicProblem {
            objective: DVector::from_vec(vec![0.0, 1.0]),
            rows,
            rhs: DVector::from_vec(vec![0.0, 0.0, 0.0, -d]),
            cones: ConeSpec {
                nonneg: 0,
                soc: vec![2, 2],
            },
        };
        let sol = solve(&prob, None, &ConicSettings::default());
        assert_eq!(sol.status, ConicStatus::Optimal);
        // alpha* = d / (r1 + r2) = 2.5, touch point at alpha r1 = 2.5.
        assert_relative_eq!(sol.x[1], 2.5, epsilon = 1e-6);
        assert_relative_eq!(sol.x[0], 2.5, epsilon = 1e-6);
        let (px, _) = polish(&prob, &sol).expect("polish");
        assert_relative_eq!(px[1], 2.5, epsilon = 1e-12);
    }

    /// s = b - Ax must stay in the cone and z in the dual cone at the solution.
    #[test]
    fn solution_is_cone_feasible() {
        let rows = DMatrix::from_row_slice(
            4,
            3,
            &[
                -1.0, -1.0, 0.0,
                0.0, 0.0, -1.0,
                -1.0, 0.0, 0.0,
                0.0, -1.0, 0.0,
            ],
        );
        let prob = ConicProblem {
            objective: DVector::from_vec(vec![0.0, 0.0, 1.0]),
            rows,
            rhs: DVector::from_vec(vec![-4.0, 0.0, 0.0, 0.0]),
            cones: ConeSpec {
                nonneg: 1,
                soc: vec![3],
            },
        };
        let sol = solve(&prob, None, &ConicSettings::default());
        assert!(sol.s[0] >= -1e-9);
        assert!(soc_margin(&sol.s.as_slice()[1..4]) >= -1e-9);
        assert!(sol.z[0] >= -1e-9);
        assert!(soc_margin(&sol.z.as_slice()[1..4]) >= -1e-9);
    }

    /// Contradictory rows x >= 1 and -x >= 1.
    #[test]
    fn lp_infeasible_detected() {
        let rows = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let prob = ConicProblem {
            objective: DVector::from_vec(vec![0.0]),
            rows,
            rhs: DVector::from_vec(vec![-1.0, -1.0]),
            cones: ConeSpec {
                nonneg: 2,
                soc: vec![],
            },
        };
        let sol = solve(&prob, None, &ConicSettings::default());
        assert_ne!(sol.status, ConicStatus::Optimal);
    }

    #[test]
    fn nt_scaling_identities() {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        use rand::SeedableRng;
        for _ in 0..50 {
            let dim = 4;
            let mut s = DVector::zeros(dim);
            let mut z = DVector::zeros(dim);
            for i in 1..dim {
                s[i] = rng.random_range(-1.0..1.0);
                z[i] = rng.random_range(-1.0..1.0);
            }
            s[0] = s.as_slice()[1..].iter().map(|v| v * v).sum::<f64>().sqrt()
                + rng.random_range(0.1..2.0);
            z[0] = z.as_slice()[1..].iter().map(|v| v * v).sum::<f64>().sqrt()
                + rng.random_range(0.1..2.0);
            let cones = ConeSpec {
                nonneg: 0,
                soc: vec![dim],
            };
            let sc = Scaling::compute(&s, &z, &cones).unwrap();
            let wz = sc.apply_to(&z, &cones, false);
            let winv_s = sc.apply_to(&s, &cones, true);
            for i in 0..dim {
                assert_relative_eq!(wz[i], winv_s[i], epsilon = 1e-10);
                assert_relative_eq!(wz[i], sc.lambda[i], epsilon = 1e-10);
            }
            // lambda' lambda = s' z.
            assert_relative_eq!(sc.lambda.dot(&sc.lambda), s.dot(&z), epsilon = 1e-10);
        }
    }
}
