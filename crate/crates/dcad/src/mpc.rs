//! Per-agent receding-horizon planner in flat space.
//!
//! The flat model is a triple integrator on position plus a yaw
//! integrator, discretized in closed form. Each planning cycle assembles a
//! dense condensed QP: quadratic tracking + input cost, box constraints on
//! velocity and acceleration, a state-dependent world-frame jerk box
//! derived from the inner-loop attitude limits, and per-step ORCA
//! half-planes on predicted velocity.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix4, SMatrix, SVector};
use thiserror::Error;

use crate::dynamics::{FlatInput, FlatState, Vec3, VehicleParams};
use crate::orca::HalfPlane;
use crate::qp::{self, QpSettings, QpStatus, QuadProgram};

pub const STATE_DIM: usize = 10;
pub const INPUT_DIM: usize = 4;

type StateMat = SMatrix<f64, STATE_DIM, STATE_DIM>;
type InputMat = SMatrix<f64, STATE_DIM, INPUT_DIM>;
type StateVec = SVector<f64, STATE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("jerk-bound jacobian ill-conditioned (cond = {0:.3e})")]
    SingularJacobian(f64),
    #[error("QP solver failed even on the slack-relaxed problem ({0:?})")]
    SolverFailure(QpStatus),
}

/// Exact zero-order-hold discretization of the flat model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatModel {
    pub a_d: StateMat,
    pub b_d: InputMat,
    pub dt: f64,
}

/// State layout: [r(3), v(3), a(3), psi]; input layout: [j(3), psi_dot].
pub fn discretize(dt: f64) -> FlatModel {
    assert!(dt > 0.0);
    let mut a_d = StateMat::identity();
    let mut b_d = InputMat::zeros();
    for i in 0..3 {
        a_d[(i, i + 3)] = dt;
        a_d[(i, i + 6)] = dt * dt / 2.0;
        a_d[(i + 3, i + 6)] = dt;
        b_d[(i, i)] = dt * dt * dt / 6.0;
        b_d[(i + 3, i)] = dt * dt / 2.0;
        b_d[(i + 6, i)] = dt;
    }
    a_d[(9, 9)] = 1.0;
    b_d[(9, 3)] = dt;
    FlatModel { a_d, b_d, dt }
}

pub fn state_to_vec(fs: &FlatState) -> StateVec {
    let mut x = StateVec::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&fs.r);
    x.fixed_rows_mut::<3>(3).copy_from(&fs.v);
    x.fixed_rows_mut::<3>(6).copy_from(&fs.a);
    x[9] = fs.psi;
    x
}

pub fn vec_to_state(x: &StateVec) -> FlatState {
    FlatState {
        r: x.fixed_rows::<3>(0).into_owned(),
        v: x.fixed_rows::<3>(3).into_owned(),
        a: x.fixed_rows::<3>(6).into_owned(),
        psi: x[9],
    }
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub n: usize,
    pub dt: f64,
    /// Tracking weight on zeta = [r, psi].
    pub q: Matrix4<f64>,
    /// Input weight on nu = [j, psi_dot].
    pub r: Matrix4<f64>,
    pub v_max: Vec3,
    pub a_max: Vec3,
    pub jerk_z_max: f64,
    pub w_slack: f64,
    pub qp: QpSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            n: 10,
            dt: 0.1,
            q: Matrix4::from_diagonal(&nalgebra::Vector4::new(10.0, 10.0, 10.0, 1.0)),
            r: Matrix4::from_diagonal(&nalgebra::Vector4::new(0.1, 0.1, 0.1, 0.1)),
            v_max: Vec3::new(10.0, 10.0, 10.0),
            a_max: Vec3::new(20.0, 20.0, 20.0),
            jerk_z_max: 20.0,
            w_slack: 1e4,
            qp: QpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcStatus {
    Optimal,
    MaxIter,
    InfeasibleRelaxed,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub inputs: Vec<FlatInput>,
    pub predicted: Vec<FlatState>,
    pub status: MpcStatus,
    pub solve_time: f64,
    /// Raw decision vector, for warm starting the next cycle.
    pub raw: DVector<f64>,
}

/// World-frame jerk box [min, max] valid over one planning horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JerkBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl JerkBounds {
    /// Unbounded-in-practice box for tests and the ORCA baseline.
    pub fn wide(limit: f64) -> Self {
        Self {
            min: Vec3::from_element(-limit),
            max: Vec3::from_element(limit),
        }
    }

    pub fn contains(&self, j: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| j[i] >= self.min[i] - tol && j[i] <= self.max[i] + tol)
    }
}

/// Achievable jerk extents along the body x/y axes (and the z bound),
/// from the inner-loop rate headroom at the current attitude.
///
/// With psi_dot_ref = 0 the 2x2 relation between (phi_dot, theta_dot) and
/// the body-plane jerk components diagonalizes:
///   j_xB = (T/m) cos(phi) theta_dot,  j_yB = -(T/m) phi_dot.
pub fn body_plane_jerk_extents(
    phi: f64,
    theta: f64,
    thrust: f64,
    params: &VehicleParams,
    cfg: &MpcConfig,
) -> Result<(std::ops::Range<f64>, std::ops::Range<f64>, f64), MpcError> {
    let cos_phi = phi.cos();
    let cond = 1.0 / cos_phi.abs().max(1e-300);
    if cond > 1e6 || thrust <= 0.0 {
        return Err(MpcError::SingularJacobian(cond));
    }
    let phi_dot_max = (params.k_phi * params.phi_max - phi) / params.tau_phi;
    let phi_dot_min = (-params.k_phi * params.phi_max - phi) / params.tau_phi;
    let theta_dot_max = (params.k_theta * params.theta_max - theta) / params.tau_theta;
    let theta_dot_min = (-params.k_theta * params.theta_max - theta) / params.tau_theta;
    let scale = thrust / params.m;
    // j_yB = -scale * phi_dot flips the interval
    let y_range = (-scale * phi_dot_max)..(-scale * phi_dot_min);
    let x_range = (scale * cos_phi * theta_dot_min)..(scale * cos_phi * theta_dot_max);
    Ok((x_range, y_range, cfg.jerk_z_max))
}

/// State-dependent world-frame jerk box, held constant over the horizon.
///
/// The body-frame box from the attitude-rate headroom is rotated to the
/// world frame; its enclosing axis-aligned box is shrunk by sqrt(2) and
/// then scaled further if needed so the world box stays inside the body
/// box (the attitude limits remain hard).
pub fn jerk_bounds(
    fs: &FlatState,
    attitude: (f64, f64),
    thrust: f64,
    params: &VehicleParams,
    cfg: &MpcConfig,
) -> Result<JerkBounds, MpcError> {
    let (phi, theta) = attitude;
    let (x_range, y_range, z_half) = body_plane_jerk_extents(phi, theta, thrust, params, cfg)?;
    let rot = crate::dynamics::rotation_from_euler(phi, theta, fs.psi);

    let center_body = Vec3::new(
        0.5 * (x_range.start + x_range.end),
        0.5 * (y_range.start + y_range.end),
        0.0,
    );
    let half_body = Vec3::new(
        0.5 * (x_range.end - x_range.start).abs(),
        0.5 * (y_range.end - y_range.start).abs(),
        z_half,
    );

    let center_world = rot * center_body;
    // outer AABB of the rotated box, then conservative shrink
    let mut half_world = Vec3::zeros();
    for i in 0..3 {
        half_world[i] =
            (0..3).map(|k| rot[(i, k)].abs() * half_body[k]).sum::<f64>() / 2f64.sqrt();
    }
    // enforce world box subset of body box: project onto each body axis
    let mut scale: f64 = 1.0;
    for k in 0..3 {
        let spread: f64 = (0..3).map(|i| rot[(i, k)].abs() * half_world[i]).sum();
        if spread > half_body[k] {
            scale = scale.min(half_body[k] / spread);
        }
    }
    let half_world = half_world * scale;
    Ok(JerkBounds {
        min: center_world - half_world,
        max: center_world + half_world,
    })
}

/// Assembles and solves the horizon QP, optionally warm-started.
///
/// `ref_window` holds N+1 flat reference samples, `planes[k]` the ORCA
/// constraints on the velocity at step k+1. An infeasible problem is
/// retried with quadratic slack on the ORCA planes only; dynamics,
/// velocity/acceleration boxes, and the jerk box stay hard.
pub fn build_and_solve(
    ref_window: &[FlatState],
    fs0: &FlatState,
    planes: &[Vec<HalfPlane>],
    jerk: &JerkBounds,
    cfg: &MpcConfig,
    model: &FlatModel,
    warm_start: Option<&DVector<f64>>,
) -> Result<MpcSolution, MpcError> {
    let n = cfg.n;
    assert_eq!(ref_window.len(), n + 1, "reference window must have N+1 samples");
    assert_eq!(planes.len(), n, "one plane list per horizon step");
    let start = Instant::now();

    let nv = INPUT_DIM * n;
    let x0 = state_to_vec(fs0);

    // prediction matrices: xi_k = a_pow[k] x0 + g[k] u  (g[k]: 10 x nv)
    let mut a_pow = Vec::with_capacity(n + 1);
    a_pow.push(StateMat::identity());
    for k in 1..=n {
        a_pow.push(a_pow[k - 1] * model.a_d);
    }
    let mut g = vec![DMatrix::<f64>::zeros(STATE_DIM, nv); n + 1];
    for k in 1..=n {
        for j in 0..k {
            let block = a_pow[k - 1 - j] * model.b_d;
            g[k].view_mut((0, INPUT_DIM * j), (STATE_DIM, INPUT_DIM))
                .copy_from(&block);
        }
    }

    // selector C: zeta = [r, psi]
    let mut sel_zeta = DMatrix::<f64>::zeros(4, STATE_DIM);
    for i in 0..3 {
        sel_zeta[(i, i)] = 1.0;
    }
    sel_zeta[(3, 9)] = 1.0;
    let q_dyn = DMatrix::from_fn(4, 4, |i, j| cfg.q[(i, j)]);
    let r_dyn = DMatrix::from_fn(4, 4, |i, j| cfg.r[(i, j)]);

    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut f = DVector::<f64>::zeros(nv);
    let mut f_hold = DVector::<f64>::zeros(nv);
    let zeta_hold = DVector::from_vec(vec![fs0.r.x, fs0.r.y, fs0.r.z, fs0.psi]);
    for k in 1..=n {
        let cg = &sel_zeta * &g[k];
        let zeta_free = &sel_zeta * DVector::from_iterator(STATE_DIM, (a_pow[k] * x0).iter().cloned());
        let zeta_ref = {
            let r = &ref_window[k];
            DVector::from_vec(vec![r.r.x, r.r.y, r.r.z, r.psi])
        };
        let grad = 2.0 * cg.transpose() * &q_dyn;
        h += &grad * &cg;
        f += &grad * (&zeta_free - &zeta_ref);
        f_hold += &grad * (&zeta_free - &zeta_hold);
    }
    for k in 0..n {
        let i0 = INPUT_DIM * k;
        for a in 0..INPUT_DIM {
            for b in 0..INPUT_DIM {
                h[(i0 + a, i0 + b)] += 2.0 * r_dyn[(a, b)];
            }
        }
    }

    // box constraints as two-sided range rows (one row per axis; paired
    // one-sided rows would reorder sums between mirror-image problems)
    let m_rg = 6 * n + 3 * n;
    let mut a_rg = DMatrix::<f64>::zeros(m_rg, nv);
    let mut rg_lo = DVector::<f64>::zeros(m_rg);
    let mut rg_hi = DVector::<f64>::zeros(m_rg);
    let mut row = 0;
    for k in 1..=n {
        for (offset, bound) in [(3, &cfg.v_max), (6, &cfg.a_max)] {
            for axis in 0..3 {
                let grow = g[k].row(offset + axis);
                for col in 0..nv {
                    a_rg[(row, col)] = grow[col];
                }
                let free = (a_pow[k] * x0)[offset + axis];
                rg_lo[row] = -bound[axis] - free;
                rg_hi[row] = bound[axis] - free;
                row += 1;
            }
        }
    }
    // jerk box directly on the inputs
    for k in 0..n {
        for axis in 0..3 {
            a_rg[(row, INPUT_DIM * k + axis)] = 1.0;
            rg_lo[row] = jerk.min[axis];
            rg_hi[row] = jerk.max[axis];
            row += 1;
        }
    }
    debug_assert_eq!(row, m_rg);

    // ORCA planes on predicted velocity, softened on the slack retry
    let n_planes: usize = planes.iter().map(|p| p.len()).sum();
    let mut a_in = DMatrix::<f64>::zeros(n_planes, nv);
    let mut b_in = DVector::<f64>::zeros(n_planes);
    let mut plane_urgency = Vec::with_capacity(n_planes);
    let mut plane_source = Vec::with_capacity(n_planes);
    let mut row = 0;
    for (k, step_planes) in planes.iter().enumerate() {
        for plane in step_planes {
            let step = k + 1;
            plane_urgency.push(plane.urgency);
            plane_source.push(plane.source);
            let vfree: Vec3 = (a_pow[step] * x0).fixed_rows::<3>(3).into_owned();
            for axis in 0..3 {
                let grow = g[step].row(3 + axis);
                for col in 0..nv {
                    a_in[(row, col)] += plane.n[axis] * grow[col];
                }
            }
            b_in[row] = plane.b - plane.n.dot(&vfree);
            row += 1;
        }
    }
    debug_assert_eq!(row, n_planes);

    let qp_hard = QuadProgram {
        h,
        f,
        a_eq: DMatrix::zeros(0, nv),
        b_eq: DVector::zeros(0),
        a_rg,
        rg_lo,
        rg_hi,
        a_in,
        b_in,
    };
    let sol = qp::solve_with(&qp_hard, warm_start.filter(|w| w.len() == nv), &cfg.qp);

    let (xsol, status) = match sol.status {
        QpStatus::Optimal => (sol.x, MpcStatus::Optimal),
        QpStatus::MaxIter => (sol.x, MpcStatus::MaxIter),
        QpStatus::PrimalInfeasible => {
            // no velocity satisfies every plane within the input budget:
            // prefer stopping over plowing on along the reference, so the
            // softened solve trades tracking for braking; mutual braking
            // restores feasibility within a few cycles
            let mut qp_brake = qp_hard;
            qp_brake.f = f_hold;
            let warm_x = |relaxed: &QuadProgram| {
                let mut w = DVector::zeros(relaxed.num_vars());
                w.rows_mut(0, nv).copy_from(&sol.x);
                w
            };
            // first try keeping the most imminent neighbor's planes hard:
            // when a converging pair ranks each other most urgent, both
            // retain the reciprocal constraint and the pairwise avoidance
            // guarantee survives the congestion
            let critical = plane_urgency
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| plane_source[i])
                .filter(|&s| s != usize::MAX);
            if let Some(src) = critical {
                // only steps the input budget can actually reach stay
                // hard: the velocity at step k can move n·v by at most
                // k*dt*(|n|·a_max), so earlier steps would be infeasible
                // no matter what (one extra step absorbs the jerk ramp)
                let mut keep = vec![false; plane_urgency.len()];
                let mut r = 0;
                for step_planes in planes {
                    for pl in step_planes {
                        if pl.source == src {
                            let amax_n = pl.n.x.abs() * cfg.a_max.x
                                + pl.n.y.abs() * cfg.a_max.y
                                + pl.n.z.abs() * cfg.a_max.z;
                            let viol = (pl.n.dot(&fs0.v) - pl.b).max(0.0);
                            let k_star = (viol / (amax_n * cfg.dt).max(1e-9)).ceil() as usize + 1;
                            keep[r] = pl.step >= k_star;
                        }
                        r += 1;
                    }
                }
                let keep = keep;
                let relaxed = relax_with_slack(&qp_brake, &plane_urgency, &keep, cfg);
                if std::env::var_os("DCAD_PH").is_some() && keep.iter().any(|&b| b) {
                    let warm = warm_x(&relaxed);
                    let rsol = qp::solve_with(&relaxed, Some(&warm), &cfg.qp);
                    // an unconverged iterate is still good enough to fly
                    // as long as it honors the hard rows
                    let usable = match rsol.status {
                        QpStatus::Optimal => true,
                        QpStatus::MaxIter => primal_violation(&relaxed, &rsol.x) < 1e-3,
                        QpStatus::PrimalInfeasible => false,
                    };
                    if std::env::var_os("DCAD_DEBUG").is_some() {
                        eprintln!("partial-hard: kept={} status={:?} usable={usable}", keep.iter().filter(|&&b| b).count(), rsol.status);
                    }
                    if usable {
                        let xsol = rsol.x.rows(0, nv).into_owned();
                        return finish(xsol, MpcStatus::InfeasibleRelaxed, x0, n, model, start);
                    }
                }
            }
            // fully softened fallback: feasible by construction, so the
            // certificate check (which would only misfire on this badly
            // scaled problem) is disabled
            let keep = vec![false; plane_urgency.len()];
            let relaxed = relax_with_slack(&qp_brake, &plane_urgency, &keep, cfg);
            let mut rset = cfg.qp;
            rset.eps_infeas = 0.0;
            let warm = warm_x(&relaxed);
            let rsol = qp::solve_with(&relaxed, Some(&warm), &rset);
            match rsol.status {
                QpStatus::PrimalInfeasible => return Err(MpcError::SolverFailure(rsol.status)),
                _ => (rsol.x.rows(0, nv).into_owned(), MpcStatus::InfeasibleRelaxed),
            }
        }
    };

    finish(xsol, status, x0, n, model, start)
}

/// Unpacks a decision vector into inputs plus an exact rollout of the
/// discrete dynamics.
fn finish(
    xsol: DVector<f64>,
    status: MpcStatus,
    x0: StateVec,
    n: usize,
    model: &FlatModel,
    start: Instant,
) -> Result<MpcSolution, MpcError> {
    let mut inputs = Vec::with_capacity(n);
    for k in 0..n {
        let i0 = INPUT_DIM * k;
        inputs.push(FlatInput {
            j: Vec3::new(xsol[i0], xsol[i0 + 1], xsol[i0 + 2]),
            psi_dot: xsol[i0 + 3],
        });
    }
    let mut predicted = Vec::with_capacity(n + 1);
    let mut xi = x0;
    predicted.push(vec_to_state(&xi));
    for inp in &inputs {
        let mut u = SVector::<f64, INPUT_DIM>::zeros();
        u.fixed_rows_mut::<3>(0).copy_from(&inp.j);
        u[3] = inp.psi_dot;
        xi = model.a_d * xi + model.b_d * u;
        predicted.push(vec_to_state(&xi));
    }

    Ok(MpcSolution {
        inputs,
        predicted,
        status,
        solve_time: start.elapsed().as_secs_f64(),
        raw: xsol,
    })
}

/// Worst constraint violation of `x` over a program's ranges and
/// inequalities (equalities are unused here).
fn primal_violation(qp: &QuadProgram, x: &DVector<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    let rg = &qp.a_rg * x;
    for i in 0..rg.len() {
        worst = worst.max(qp.rg_lo[i] - rg[i]).max(rg[i] - qp.rg_hi[i]);
    }
    let ineq = &qp.a_in * x;
    for i in 0..ineq.len() {
        worst = worst.max(ineq[i] - qp.b_in[i]);
    }
    worst
}

/// Appends one slack variable per ORCA plane row with quadratic penalty;
/// every other constraint stays hard.
fn relax_with_slack(
    qp_hard: &QuadProgram,
    urgency: &[f64],
    keep_hard: &[bool],
    cfg: &MpcConfig,
) -> QuadProgram {
    let nv = qp_hard.num_vars();
    let n_planes = qp_hard.b_in.len();
    debug_assert_eq!(urgency.len(), n_planes);
    debug_assert_eq!(keep_hard.len(), n_planes);
    let soft: Vec<usize> = (0..n_planes).filter(|&i| !keep_hard[i]).collect();
    let ns = soft.len();
    let m_rg = qp_hard.rg_lo.len();
    let nv2 = nv + ns;
    let mut h = DMatrix::<f64>::zeros(nv2, nv2);
    h.view_mut((0, 0), (nv, nv)).copy_from(&qp_hard.h);
    for (si, &i) in soft.iter().enumerate() {
        h[(nv + si, nv + si)] = 2.0 * cfg.w_slack * urgency[i];
    }
    let mut f = DVector::<f64>::zeros(nv2);
    f.rows_mut(0, nv).copy_from(&qp_hard.f);

    let mut a_rg = DMatrix::<f64>::zeros(m_rg, nv2);
    a_rg.view_mut((0, 0), (m_rg, nv)).copy_from(&qp_hard.a_rg);

    // softened plane rows gain a slack column plus s >= 0 rows
    let mut a_in = DMatrix::<f64>::zeros(n_planes + ns, nv2);
    a_in.view_mut((0, 0), (n_planes, nv)).copy_from(&qp_hard.a_in);
    let mut b_in = DVector::<f64>::zeros(n_planes + ns);
    b_in.rows_mut(0, n_planes).copy_from(&qp_hard.b_in);
    for (si, &i) in soft.iter().enumerate() {
        a_in[(i, nv + si)] = -1.0; // n·v - s <= b
        a_in[(n_planes + si, nv + si)] = -1.0; // -s <= 0
    }
    QuadProgram {
        h,
        f,
        a_eq: DMatrix::zeros(0, nv2),
        b_eq: DVector::zeros(0),
        a_rg,
        rg_lo: qp_hard.rg_lo.clone(),
        rg_hi: qp_hard.rg_hi.clone(),
        a_in,
        b_in,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn discretize_closed_form_entries() {
        let m = discretize(0.1);
        assert_relative_eq!(m.b_d[(0, 0)], 0.1f64.powi(3) / 6.0, epsilon = 1e-15);
        assert_relative_eq!(m.a_d[(0, 3)], 0.1, epsilon = 1e-15);
        assert_relative_eq!(m.a_d[(0, 6)], 0.005, epsilon = 1e-15);
        // state (p=0, v=1, a=0) advances position by v dt
        let mut x = StateVec::zeros();
        x[3] = 1.0;
        let x1 = m.a_d * x;
        assert_relative_eq!(x1[0], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn discretize_semigroup() {
        let m1 = discretize(0.07);
        let m2 = discretize(0.13);
        let m12 = discretize(0.2);
        assert_abs_diff_eq!(m1.a_d * m2.a_d, m12.a_d, epsilon = 1e-12);
    }

    #[test]
    fn jerk_extents_hover() {
        let params = VehicleParams::default();
        let cfg = MpcConfig::default();
        let thrust = params.hover_thrust();
        let (xr, yr, _) = body_plane_jerk_extents(0.0, 0.0, thrust, &params, &cfg).unwrap();
        // phi_dot_max = (0.5 - 0)/0.1 = 5, magnitude g * 5
        let expect = params.g * 5.0;
        assert_relative_eq!(xr.end, expect, epsilon = 1e-9);
        assert_relative_eq!(-xr.start, expect, epsilon = 1e-9);
        assert_relative_eq!(yr.end, expect, epsilon = 1e-9);
        assert_relative_eq!(-yr.start, expect, epsilon = 1e-9);
    }

    #[test]
    fn jerk_extents_saturated_roll() {
        let params = VehicleParams::default();
        let cfg = MpcConfig::default();
        let (_, yr, _) =
            body_plane_jerk_extents(params.phi_max, 0.0, params.hover_thrust(), &params, &cfg)
                .unwrap();
        // phi at phi_max: no positive roll-rate headroom, so the coupled
        // jerk direction has zero room on one side
        assert_abs_diff_eq!(yr.start, 0.0, epsilon = 1e-9);
        assert!(yr.end > 0.0);
    }

    #[test]
    fn jerk_bounds_hover_symmetric() {
        let params = VehicleParams::default();
        let cfg = MpcConfig::default();
        let fs = FlatState::hover(Vec3::zeros());
        let jb = jerk_bounds(&fs, (0.0, 0.0), params.hover_thrust(), &params, &cfg).unwrap();
        assert_abs_diff_eq!(jb.min, -jb.max, epsilon = 1e-9);
        assert!(jb.max.x > 0.0 && jb.max.z > 0.0);
    }

    fn hover_window(n: usize, r: Vec3) -> Vec<FlatState> {
        (0..=n).map(|_| FlatState::hover(r)).collect()
    }

    #[test]
    fn on_reference_inputs_vanish() {
        let cfg = MpcConfig::default();
        let model = discretize(cfg.dt);
        let fs0 = FlatState::hover(Vec3::new(1.0, 2.0, 3.0));
        let planes = vec![Vec::new(); cfg.n];
        let jb = JerkBounds::wide(100.0);
        let sol = build_and_solve(
            &hover_window(cfg.n, fs0.r),
            &fs0,
            &planes,
            &jb,
            &cfg,
            &model,
            None,
        )
        .unwrap();
        assert_eq!(sol.status, MpcStatus::Optimal);
        for inp in &sol.inputs {
            assert_abs_diff_eq!(inp.j, Vec3::zeros(), epsilon = 1e-4);
        }
        for fs in &sol.predicted {
            assert_abs_diff_eq!(fs.r, fs0.r, epsilon = 1e-4);
        }
    }

    #[test]
    fn forbidden_positive_vx_respected() {
        let cfg = MpcConfig::default();
        let model = discretize(cfg.dt);
        let fs0 = FlatState::hover(Vec3::zeros());
        // reference races away in +x, but planes forbid v_x > 0
        let reference: Vec<FlatState> = (0..=cfg.n)
            .map(|k| {
                let mut fs = FlatState::hover(Vec3::new(2.0 * k as f64 * cfg.dt, 0.0, 0.0));
                fs.v = Vec3::new(2.0, 0.0, 0.0);
                fs
            })
            .collect();
        let plane = HalfPlane {
            n: Vec3::x(),
            b: 0.0,
            step: 0,
            urgency: 1.0,
            source: 0,
        };
        let planes: Vec<Vec<HalfPlane>> = (0..cfg.n)
            .map(|k| {
                vec![HalfPlane {
                    step: k + 1,
                    ..plane
                }]
            })
            .collect();
        let sol = build_and_solve(
            &reference,
            &fs0,
            &planes,
            &JerkBounds::wide(100.0),
            &cfg,
            &model,
            None,
        )
        .unwrap();
        assert_eq!(sol.status, MpcStatus::Optimal);
        for fs in &sol.predicted[1..] {
            assert!(fs.v.x <= 1e-5, "v_x = {}", fs.v.x);
        }
    }

    #[test]
    fn velocity_box_respected() {
        let mut cfg = MpcConfig::default();
        cfg.v_max = Vec3::new(5.0, 5.0, 5.0);
        let model = discretize(cfg.dt);
        let fs0 = FlatState::hover(Vec3::zeros());
        // far-away reference encourages max speed
        let reference: Vec<FlatState> =
            (0..=cfg.n).map(|_| FlatState::hover(Vec3::new(100.0, 0.0, 0.0))).collect();
        let planes = vec![Vec::new(); cfg.n];
        let sol = build_and_solve(
            &reference,
            &fs0,
            &planes,
            &JerkBounds::wide(1e4),
            &cfg,
            &model,
            None,
        )
        .unwrap();
        for fs in &sol.predicted {
            for axis in 0..3 {
                assert!(fs.v[axis].abs() <= 5.0 + 1e-5);
            }
        }
    }

    #[test]
    fn predicted_satisfies_discrete_dynamics() {
        let cfg = MpcConfig::default();
        let model = discretize(cfg.dt);
        let mut fs0 = FlatState::hover(Vec3::zeros());
        fs0.v = Vec3::new(1.0, -0.5, 0.2);
        let reference: Vec<FlatState> = (0..=cfg.n)
            .map(|k| FlatState::hover(Vec3::new(k as f64 * 0.2, 0.0, 1.0)))
            .collect();
        let sol = build_and_solve(
            &reference,
            &fs0,
            &vec![Vec::new(); cfg.n],
            &JerkBounds::wide(100.0),
            &cfg,
            &model,
            None,
        )
        .unwrap();
        for k in 0..cfg.n {
            let xk = state_to_vec(&sol.predicted[k]);
            let mut u = SVector::<f64, INPUT_DIM>::zeros();
            u.fixed_rows_mut::<3>(0).copy_from(&sol.inputs[k].j);
            u[3] = sol.inputs[k].psi_dot;
            let next = model.a_d * xk + model.b_d * u;
            assert_abs_diff_eq!(next, state_to_vec(&sol.predicted[k + 1]), epsilon = 1e-9);
        }
        assert_abs_diff_eq!(state_to_vec(&sol.predicted[0]), state_to_vec(&fs0), epsilon = 1e-12);
    }

    #[test]
    fn contradictory_planes_trigger_slack() {
        let cfg = MpcConfig::default();
        let model = discretize(cfg.dt);
        let mut fs0 = FlatState::hover(Vec3::zeros());
        fs0.v = Vec3::new(1.0, 0.0, 0.0);
        // v_x <= -1 and -v_x <= -1 cannot both hold
        let planes: Vec<Vec<HalfPlane>> = (0..cfg.n)
            .map(|k| {
                vec![
                    HalfPlane { n: Vec3::x(), b: -1.0, step: k + 1, urgency: 1.0, source: 0 },
                    HalfPlane { n: -Vec3::x(), b: -1.0, step: k + 1, urgency: 1.0, source: 1 },
                ]
            })
            .collect();
        let sol = build_and_solve(
            &hover_window(cfg.n, fs0.r),
            &fs0,
            &planes,
            &JerkBounds::wide(100.0),
            &cfg,
            &model,
            None,
        )
        .unwrap();
        assert_eq!(sol.status, MpcStatus::InfeasibleRelaxed);
    }

    #[test]
    fn hover_regulation_converges() {
        // receding-horizon consistency: closed flat-model loop settles on
        // a constant hover reference
        let cfg = MpcConfig::default();
        let model = discretize(cfg.dt);
        let goal = Vec3::new(1.0, 0.0, 2.0);
        let mut fs = FlatState::hover(Vec3::zeros());
        let reference = hover_window(cfg.n, goal);
        let mut warm: Option<DVector<f64>> = None;
        let mut errs = Vec::new();
        for _ in 0..160 {
            let sol = build_and_solve(
                &reference,
                &fs,
                &vec![Vec::new(); cfg.n],
                &JerkBounds::wide(100.0),
                &cfg,
                &model,
                warm.as_ref(),
            )
            .unwrap();
            fs = sol.predicted[1];
            warm = Some(sol.raw);
            errs.push((fs.r - goal).norm());
        }
        // underdamped response: check envelope decay per 40-tick window
        let peak = |w: &[f64]| w.iter().cloned().fold(0.0, f64::max);
        let peaks: Vec<f64> = errs.chunks(40).map(peak).collect();
        for w in peaks.windows(2) {
            assert!(w[1] < 0.5 * w[0], "envelope not decaying: {w:?}");
        }
        assert!(peaks[3] < 2e-2, "final window peak {}", peaks[3]);
    }
}
