//! Dense convex QP solver used by the MPC.
//!
//! Operator-splitting (ADMM) method in the OSQP style: the problem
//!   min ½ xᵀHx + fᵀx  s.t.  A_eq x = b_eq,  lo ≤ A_rg x ≤ hi,  A_in x ≤ b_in
//! is rewritten as l ≤ Ax ≤ u with a stacked constraint matrix, and the
//! splitting iterates against a single Cholesky factorization of
//! H + σI + Aᵀdiag(ρ)A. Warm-start friendly, deterministic, and sized for
//! the MPC's dense problems (n up to ~150).

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct QuadProgram {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Two-sided range rows: rg_lo ≤ A_rg x ≤ rg_hi. Boxes belong here
    /// (one row per axis) rather than as paired one-sided rows.
    pub a_rg: DMatrix<f64>,
    pub rg_lo: DVector<f64>,
    pub rg_hi: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QuadProgram {
    /// Unconstrained problem of dimension n.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_rg: DMatrix::zeros(0, n),
            rg_lo: DVector::zeros(0),
            rg_hi: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.h * x)[(0, 0)] + self.f.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeas: f64,
    pub max_iter: usize,
    pub rho: f64,
    /// Equality rows use rho * rho_eq_scale.
    pub rho_eq_scale: f64,
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    pub check_interval: usize,
    /// Tikhonov term added to H before factorization.
    pub reg: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeas: 1e-7,
            max_iter: 1000,
            rho: 0.1,
            rho_eq_scale: 1e3,
            sigma: 1e-6,
            alpha: 1.6,
            check_interval: 25,
            reg: 1e-8,
        }
    }
}

pub fn solve(qp: &QuadProgram, warm_start: Option<&DVector<f64>>) -> QpSolution {
    solve_with(qp, warm_start, &QpSettings::default())
}

pub fn solve_with(
    qp: &QuadProgram,
    warm_start: Option<&DVector<f64>>,
    settings: &QpSettings,
) -> QpSolution {
    let n = qp.num_vars();
    let m_eq = qp.b_eq.len();
    let m_rg = qp.rg_lo.len();
    let m_in = qp.b_in.len();
    let m = m_eq + m_rg + m_in;
    debug_assert_eq!(qp.h.nrows(), n);
    debug_assert_eq!(qp.h.ncols(), n);
    debug_assert_eq!(qp.a_eq.ncols().max(n), n);
    debug_assert!((&qp.h - qp.h.transpose()).norm() <= 1e-8 * (1.0 + qp.h.norm()));

    // symmetrize; callers may carry tiny asymmetry from accumulation
    let h = (&qp.h + qp.h.transpose()) * 0.5;

    if m == 0 {
        let reg = DMatrix::identity(n, n) * settings.reg;
        let chol = Cholesky::new(&h + reg).expect("cost matrix not PSD");
        let x = chol.solve(&(-&qp.f));
        let dual = (&h * &x + &qp.f).amax();
        return QpSolution {
            x,
            status: QpStatus::Optimal,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: dual,
        };
    }

    // stack constraints as l <= Ax <= u
    let mut a = DMatrix::zeros(m, n);
    a.rows_mut(0, m_eq).copy_from(&qp.a_eq);
    a.rows_mut(m_eq, m_rg).copy_from(&qp.a_rg);
    a.rows_mut(m_eq + m_rg, m_in).copy_from(&qp.a_in);
    let mut lower = DVector::from_element(m, f64::NEG_INFINITY);
    let mut upper = DVector::zeros(m);
    lower.rows_mut(0, m_eq).copy_from(&qp.b_eq);
    upper.rows_mut(0, m_eq).copy_from(&qp.b_eq);
    lower.rows_mut(m_eq, m_rg).copy_from(&qp.rg_lo);
    upper.rows_mut(m_eq, m_rg).copy_from(&qp.rg_hi);
    upper.rows_mut(m_eq + m_rg, m_in).copy_from(&qp.b_in);

    // row equilibration: unit-norm constraint rows condition the splitting
    for r in 0..m {
        let nrm = a.row(r).norm();
        if nrm > 1e-12 {
            let inv = 1.0 / nrm;
            a.row_mut(r).scale_mut(inv);
            if lower[r].is_finite() {
                lower[r] *= inv;
            }
            upper[r] *= inv;
        }
    }

    let mut rho = DVector::from_element(m, settings.rho);
    for i in 0..m_eq {
        rho[i] = settings.rho * settings.rho_eq_scale;
    }

    let factorize = |rho: &DVector<f64>| -> Cholesky<f64, nalgebra::Dyn> {
        let mut kkt = h.clone();
        for i in 0..n {
            kkt[(i, i)] += settings.sigma + settings.reg;
        }
        // kkt += A^T diag(rho) A
        for r in 0..m {
            let row = a.row(r);
            let w = rho[r];
            for i in 0..n {
                let ai = row[i];
                if ai == 0.0 {
                    continue;
                }
                for j in 0..n {
                    kkt[(i, j)] += w * ai * row[j];
                }
            }
        }
        Cholesky::new(kkt).expect("KKT matrix not positive definite")
    };
    let mut chol = factorize(&rho);

    let mut x = warm_start
        .map(|x0| x0.clone())
        .unwrap_or_else(|| DVector::zeros(n));
    let mut z = {
        let ax = &a * &x;
        ax.zip_zip_map(&lower, &upper, |v, l, u| v.clamp(l, u))
    };
    let mut y = DVector::zeros(m);
    let mut y_prev = y.clone();

    let mut iterations = 0;
    let mut primal_residual = f64::INFINITY;
    let mut dual_residual = f64::INFINITY;
    let mut status = QpStatus::MaxIter;

    for it in 1..=settings.max_iter {
        iterations = it;
        // x-update: (H + sigma I + A^T rho A) x~ = sigma x - f + A^T (rho z - y)
        let rhs_con = rho.component_mul(&z) - &y;
        let rhs = &x * settings.sigma - &qp.f + a.transpose() * rhs_con;
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &a * &x_tilde;

        let alpha = settings.alpha;
        x = &x_tilde * alpha + &x * (1.0 - alpha);
        let z_relaxed = &z_tilde * alpha + &z * (1.0 - alpha);
        let z_unproj = &z_relaxed + y.component_div(&rho);
        let z_new = z_unproj.zip_zip_map(&lower, &upper, |v, l, u| v.clamp(l, u));
        y_prev.copy_from(&y);
        y += rho.component_mul(&(&z_relaxed - &z_new));
        z = z_new;

        if it % settings.check_interval == 0 || it == settings.max_iter {
            let ax = &a * &x;
            primal_residual = (&ax - &z).amax();
            let hx = &h * &x;
            let aty = a.transpose() * &y;
            dual_residual = (&hx + &qp.f + &aty).amax();

            let eps_prim = settings.eps_abs + settings.eps_rel * ax.amax().max(z.amax());
            let eps_dual = settings.eps_abs
                + settings.eps_rel * hx.amax().max(qp.f.amax()).max(aty.amax());
            if primal_residual <= eps_prim && dual_residual <= eps_dual {
                status = QpStatus::Optimal;
                break;
            }

            // primal infeasibility certificate from the dual increment
            let dy = &y - &y_prev;
            let dy_norm = dy.amax();
            if settings.eps_infeas > 0.0 && dy_norm > settings.eps_infeas {
                let at_dy = (a.transpose() * dy.clone()).amax();
                let mut support = 0.0;
                let mut bounded = true;
                for i in 0..m {
                    if dy[i] > 0.0 {
                        support += upper[i] * dy[i];
                    } else if dy[i] < 0.0 {
                        if lower[i].is_infinite() {
                            bounded = false;
                            break;
                        }
                        support += lower[i] * dy[i];
                    }
                }
                if bounded
                    && at_dy <= settings.eps_infeas * dy_norm
                    && support < -settings.eps_infeas * dy_norm
                {
                    status = QpStatus::PrimalInfeasible;
                    break;
                }
            }

            // residual balancing: rho rescale + refactorization when the
            // relative residuals drift apart
            if it % (settings.check_interval * 4) == 0 {
                let prim_rel = primal_residual / ax.amax().max(z.amax()).max(1e-10);
                let dual_rel = dual_residual
                    / hx.amax().max(qp.f.amax()).max(aty.amax()).max(1e-10);
                let ratio = (prim_rel / dual_rel.max(1e-30)).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    let scale = ratio.clamp(1e-2, 1e2);
                    for i in 0..m {
                        rho[i] = (rho[i] * scale).clamp(1e-6, 1e6);
                    }
                    chol = factorize(&rho);
                }
            }
        }
    }

    // polish: exact KKT solve on the active set detected by the splitting;
    // accepted only when it verifies, so MaxIter runs can still end Optimal
    if status != QpStatus::PrimalInfeasible {
        if let Some((px, pr, dr)) = polish(&h, &qp.f, &a, &lower, &upper, &z, &y) {
            if pr <= settings.eps_abs && dr <= 10.0 * settings.eps_abs {
                return QpSolution {
                    x: px,
                    status: QpStatus::Optimal,
                    iterations,
                    primal_residual: pr,
                    dual_residual: dr,
                };
            }
        }
    }

    QpSolution {
        x,
        status,
        iterations,
        primal_residual,
        dual_residual,
    }
}

/// Equality-constrained re-solve on the active constraints, expanding the
/// set when the polished point violates a missed row. Returns the polished
/// x with its true KKT residuals, or None when no active-set guess
/// validates.
fn polish(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, f64, f64)> {
    let m = z.len();
    let act_tol = 1e-7;
    let mut active = Vec::new();
    for i in 0..m {
        if lower[i] == upper[i] {
            // equality row: always active, multiplier sign free
            active.push((i, upper[i], 0.0));
            continue;
        }
        let at_upper = (upper[i] - z[i]).abs() < act_tol || y[i] > act_tol;
        let at_lower = lower[i].is_finite()
            && ((z[i] - lower[i]).abs() < act_tol || y[i] < -act_tol);
        if at_upper {
            active.push((i, upper[i], 1.0));
        } else if at_lower {
            active.push((i, lower[i], -1.0));
        }
    }
    for _ in 0..3 {
        let (px, pr, dr, worst) = polish_step(h, f, a, lower, upper, &active)?;
        match worst {
            Some(add) if !active.iter().any(|&(i, _, _)| i == add.0) => active.push(add),
            _ => return Some((px, pr, dr)),
        }
    }
    None
}

/// One equality-constrained KKT solve on a fixed active set. Returns the
/// candidate x, its residuals, and the most-violated inactive row (if any).
fn polish_step(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    active: &[(usize, f64, f64)],
) -> Option<(DVector<f64>, f64, f64, Option<(usize, f64, f64)>)> {
    let n = f.len();
    let m = lower.len();
    let na = active.len();
    let dim = n + na;
    let delta = 1e-9;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for (row, &(ci, _, _)) in active.iter().enumerate() {
        for col in 0..n {
            kkt[(n + row, col)] = a[(ci, col)];
            kkt[(col, n + row)] = a[(ci, col)];
        }
        kkt[(n + row, n + row)] = -delta;
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..n {
        rhs[i] = -f[i];
    }
    for (row, &(_, b, _)) in active.iter().enumerate() {
        rhs[n + row] = b;
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // one step of iterative refinement against the regularization
    let resid = &rhs - &kkt * &sol;
    if let Some(corr) = lu.solve(&resid) {
        sol += corr;
    }
    let px = sol.rows(0, n).into_owned();

    // multiplier signs must match the constraint side
    for (row, &(_, _, sign)) in active.iter().enumerate() {
        if sign * sol[n + row] < -1e-7 {
            return None;
        }
    }
    let ax = a * &px;
    let mut pr = 0.0f64;
    let mut worst = None;
    for i in 0..m {
        let up_viol = ax[i] - upper[i];
        let lo_viol = lower[i] - ax[i];
        let v = up_viol.max(lo_viol).max(0.0);
        if v > pr {
            pr = v;
            if v > 1e-9 {
                worst = Some(if up_viol >= lo_viol {
                    (i, upper[i], 1.0)
                } else {
                    (i, lower[i], -1.0)
                });
            }
        }
    }
    let mut dual = h * &px + f;
    for (row, &(ci, _, _)) in active.iter().enumerate() {
        for col in 0..n {
            dual[col] += a[(ci, col)] * sol[n + row];
        }
    }
    Some((px, pr, dual.amax(), worst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn projection_onto_hyperplane() {
        // min ||x||^2 s.t. x1 = 1
        let n = 4;
        let mut qp = QuadProgram::unconstrained(DMatrix::identity(n, n) * 2.0, DVector::zeros(n));
        qp.a_eq = DMatrix::zeros(1, n);
        qp.a_eq[(0, 0)] = 1.0;
        qp.b_eq = DVector::from_element(1, 1.0);
        let sol = solve(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-5);
        for i in 1..n {
            assert_abs_diff_eq!(sol.x[i], 0.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn componentwise_clamp() {
        // min (x-c)^T(x-c) s.t. x <= 0, c = (1, -1) -> x = (0, -1)
        let c = DVector::from_vec(vec![1.0, -1.0]);
        let mut qp = QuadProgram::unconstrained(DMatrix::identity(2, 2) * 2.0, -2.0 * &c);
        qp.a_in = DMatrix::identity(2, 2);
        qp.b_in = DVector::zeros(2);
        let sol = solve(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.x[1], -1.0, epsilon = 1e-5);
    }

    #[test]
    fn unconstrained_solve() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let f = DVector::from_vec(vec![-2.0, -4.0]);
        let sol = solve(&QuadProgram::unconstrained(h, f), None);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_detected() {
        // x <= -1 and -x <= -1 (x >= 1) is empty
        let mut qp = QuadProgram::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1));
        qp.a_in = DMatrix::from_vec(2, 1, vec![1.0, -1.0]);
        qp.b_in = DVector::from_vec(vec![-1.0, -1.0]);
        let sol = solve(&qp, None);
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn warm_start_same_optimum() {
        let mut qp = QuadProgram::unconstrained(
            DMatrix::identity(3, 3) * 2.0,
            DVector::from_vec(vec![1.0, -2.0, 0.5]),
        );
        qp.a_in = DMatrix::identity(3, 3);
        qp.b_in = DVector::from_element(3, 0.3);
        let cold = solve(&qp, None);
        let warm = solve(&qp, Some(&cold.x));
        assert_eq!(cold.status, QpStatus::Optimal);
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!((&cold.x - &warm.x).amax() < 1e-5);
        assert!(warm.iterations <= cold.iterations);
    }
}
