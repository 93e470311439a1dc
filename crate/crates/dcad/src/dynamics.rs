//! Quadrotor truth dynamics, flat-space conversions, and the nonlinear map
//! from flat inputs to inner-loop attitude commands.
//!
//! Euler convention is ZYX (yaw-pitch-roll), rotation matrices are
//! body-to-world. The truth model integrates translational dynamics plus
//! first-order roll/pitch inner loops with fixed-step RK4; rotational
//! dynamics beyond the inner-loop lag are not modelled.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Relative thrust floor below which attitude recovery is singular,
/// as a fraction of g.
pub const EPS_THRUST_FRAC: f64 = 1e-3;
/// Floor on R33 for the thrust map (near-horizontal body z rejected).
pub const EPS_R33: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("free-fall singularity: ‖a + g z_W‖ = {0:.3e} m/s², attitude undefined")]
    FreeFallSingularity(f64),
    #[error("attitude singularity: R33 = {0:.3e}")]
    AttitudeSingularity(f64),
    #[error("Euler chart exit: |phi| or |theta| reached pi/2 (phi={phi:.3}, theta={theta:.3})")]
    EulerChartExit { phi: f64, theta: f64 },
}

/// Full 12-dim truth state. `omega` is body rates [p, q, r] derived from
/// Euler-rate bookkeeping, not independently integrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub r: Vec3,
    pub v: Vec3,
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
    pub omega: Vec3,
}

impl QuadState {
    pub fn at_rest(r: Vec3) -> Self {
        Self {
            r,
            v: Vec3::zeros(),
            phi: 0.0,
            theta: 0.0,
            psi: 0.0,
            omega: Vec3::zeros(),
        }
    }
}

/// 10-dim flat-space state [r, v, a, psi] each agent plans in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatState {
    pub r: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    pub psi: f64,
}

impl FlatState {
    pub fn hover(r: Vec3) -> Self {
        Self {
            r,
            v: Vec3::zeros(),
            a: Vec3::zeros(),
            psi: 0.0,
        }
    }
}

/// Flat control [j, psi_dot].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlatInput {
    pub j: Vec3,
    pub psi_dot: f64,
}

/// Input to the inner-loop attitude controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeCommand {
    pub thrust: f64,
    pub phi_cmd: f64,
    pub theta_cmd: f64,
    pub psi_dot: f64,
    /// Set when thrust or a commanded angle hit its limit.
    pub clamped: bool,
}

impl AttitudeCommand {
    pub fn hover(params: &VehicleParams) -> Self {
        Self {
            thrust: params.m * params.g,
            phi_cmd: 0.0,
            theta_cmd: 0.0,
            psi_dot: 0.0,
            clamped: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub m: f64,
    pub g: f64,
    pub k_phi: f64,
    pub k_theta: f64,
    pub tau_phi: f64,
    pub tau_theta: f64,
    pub phi_max: f64,
    pub theta_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            g: 9.81,
            k_phi: 1.0,
            k_theta: 1.0,
            tau_phi: 0.1,
            tau_theta: 0.1,
            phi_max: 0.5,
            theta_max: 0.5,
            t_min: 0.0,
            t_max: 24.0,
        }
    }
}

impl VehicleParams {
    pub fn hover_thrust(&self) -> f64 {
        self.m * self.g
    }
}

/// Body-to-world rotation for ZYX Euler angles: R = Rz(psi) Ry(theta) Rx(phi).
pub fn rotation_from_euler(phi: f64, theta: f64, psi: f64) -> Matrix3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (sy, cy) = psi.sin_cos();
    Matrix3::new(
        cy * ct,
        cy * st * sp - sy * cp,
        cy * st * cp + sy * sp,
        sy * ct,
        sy * st * sp + cy * cp,
        sy * st * cp - cy * sp,
        -st,
        ct * sp,
        ct * cp,
    )
}

/// Recovers the full state and collective thrust from a flat state.
///
/// Body z is aligned with a + g z_W, yaw comes from the flat state, and
/// T = m ‖a + g z_W‖.
pub fn flat_to_full(
    fs: &FlatState,
    params: &VehicleParams,
) -> Result<(QuadState, f64), DynamicsError> {
    let t_vec = fs.a + Vec3::new(0.0, 0.0, params.g);
    let t_norm = t_vec.norm();
    if t_norm <= EPS_THRUST_FRAC * params.g {
        return Err(DynamicsError::FreeFallSingularity(t_norm));
    }
    let z_b = t_vec / t_norm;
    // in the ZYX chart the body x axis lies in span(x_C, z_W); the unique
    // direction there orthogonal to z_B is x_C (z_B·z_W) - z_W (z_B·x_C)
    let x_c = Vec3::new(fs.psi.cos(), fs.psi.sin(), 0.0);
    let x_raw = x_c * z_b.z - Vec3::z() * z_b.dot(&x_c);
    let x_norm = x_raw.norm();
    if x_norm < 1e-6 {
        // knife-edge: body z orthogonal to both heading and vertical
        return Err(DynamicsError::AttitudeSingularity(z_b.z));
    }
    let x_b = x_raw / x_norm;
    let y_b = z_b.cross(&x_b);

    // ZYX extraction from R = [x_b y_b z_b]
    let theta = (-x_b.z).asin();
    let phi = y_b.z.atan2(z_b.z);
    let thrust = params.m * t_norm;
    Ok((
        QuadState {
            r: fs.r,
            v: fs.v,
            phi,
            theta,
            psi: fs.psi,
            omega: Vec3::zeros(),
        },
        thrust,
    ))
}

/// Thrust from the flat acceleration and the R33 entry of the attitude:
/// T = m (g + a_z) / R33, clamped to the vehicle's thrust limits.
pub fn thrust_from_flat(
    fs: &FlatState,
    r33: f64,
    params: &VehicleParams,
) -> Result<(f64, bool), DynamicsError> {
    if r33 <= EPS_R33 {
        return Err(DynamicsError::AttitudeSingularity(r33));
    }
    let t = params.m * (params.g + fs.a.z) / r33;
    let clamped = t < params.t_min || t > params.t_max;
    Ok((t.clamp(params.t_min, params.t_max), clamped))
}

/// Euler angle rates (phi_dot, theta_dot) implied by a flat input at the
/// given attitude and thrust.
///
/// Derived by differentiating m a = -m g z_W + T z_B and resolving the
/// yaw-rate coupling through the ZYX Euler kinematics:
///   phi_dot   = -(m/T) Y_B·j + psi_dot sin(theta)
///   theta_dot =  (m/T) X_B·j / cos(phi) - psi_dot cos(theta) tan(phi)
pub fn euler_rates_from_flat(
    rot: &Matrix3<f64>,
    phi: f64,
    theta: f64,
    thrust: f64,
    nu: &FlatInput,
    params: &VehicleParams,
) -> Result<(f64, f64), DynamicsError> {
    let cos_phi = phi.cos();
    if cos_phi.abs() < EPS_R33 {
        return Err(DynamicsError::AttitudeSingularity(cos_phi));
    }
    let x_b = rot.column(0);
    let y_b = rot.column(1);
    let scale = params.m / thrust;
    let phi_dot = -scale * y_b.dot(&nu.j) + nu.psi_dot * theta.sin();
    let theta_dot = scale * x_b.dot(&nu.j) / cos_phi - nu.psi_dot * theta.cos() * phi.tan();
    Ok((phi_dot, theta_dot))
}

/// Nonlinear map from flat state and input to the inner-loop command.
///
/// The required Euler rates are inverted through the first-order inner
/// loops: phi_cmd = (tau_phi phi_dot + phi) / K_phi, same for theta; the
/// yaw rate passes through.
pub fn nonlinear_map(
    fs: &FlatState,
    nu: &FlatInput,
    params: &VehicleParams,
) -> Result<AttitudeCommand, DynamicsError> {
    let (qs, _) = flat_to_full(fs, params)?;
    let rot = rotation_from_euler(qs.phi, qs.theta, qs.psi);
    let (thrust, t_clamped) = thrust_from_flat(fs, rot[(2, 2)], params)?;
    let (phi_dot, theta_dot) = euler_rates_from_flat(&rot, qs.phi, qs.theta, thrust, nu, params)?;

    let phi_cmd = (params.tau_phi * phi_dot + qs.phi) / params.k_phi;
    let theta_cmd = (params.tau_theta * theta_dot + qs.theta) / params.k_theta;
    let ang_clamped = phi_cmd.abs() > params.phi_max || theta_cmd.abs() > params.theta_max;
    Ok(AttitudeCommand {
        thrust,
        phi_cmd: phi_cmd.clamp(-params.phi_max, params.phi_max),
        theta_cmd: theta_cmd.clamp(-params.theta_max, params.theta_max),
        psi_dot: nu.psi_dot,
        clamped: t_clamped || ang_clamped,
    })
}

/// Recovers the flat state from a truth state given the currently applied
/// thrust (acceleration via m a = -m g z_W + T z_B).
pub fn flat_from_quad(qs: &QuadState, thrust: f64, params: &VehicleParams) -> FlatState {
    let z_b = rotation_from_euler(qs.phi, qs.theta, qs.psi).column(2).into_owned();
    let a = z_b * (thrust / params.m) - Vec3::new(0.0, 0.0, params.g);
    FlatState {
        r: qs.r,
        v: qs.v,
        a,
        psi: qs.psi,
    }
}

const CHART_LIMIT: f64 = std::f64::consts::FRAC_PI_2 - 1e-9;

#[derive(Clone, Copy)]
struct StateVec {
    r: Vec3,
    v: Vec3,
    phi: f64,
    theta: f64,
    psi: f64,
}

impl StateVec {
    fn axpy(&self, k: f64, d: &StateVec) -> StateVec {
        StateVec {
            r: self.r + k * d.r,
            v: self.v + k * d.v,
            phi: self.phi + k * d.phi,
            theta: self.theta + k * d.theta,
            psi: self.psi + k * d.psi,
        }
    }
}

fn deriv(s: &StateVec, cmd: &AttitudeCommand, params: &VehicleParams) -> StateVec {
    let z_b = rotation_from_euler(s.phi, s.theta, s.psi).column(2).into_owned();
    let thrust = cmd.thrust.clamp(params.t_min, params.t_max);
    StateVec {
        r: s.v,
        v: z_b * (thrust / params.m) - Vec3::new(0.0, 0.0, params.g),
        phi: (params.k_phi * cmd.phi_cmd - s.phi) / params.tau_phi,
        theta: (params.k_theta * cmd.theta_cmd - s.theta) / params.tau_theta,
        psi: cmd.psi_dot,
    }
}

/// One fixed-step RK4 step of the truth dynamics under a held command.
pub fn step_truth(
    qs: &QuadState,
    cmd: &AttitudeCommand,
    dt: f64,
    params: &VehicleParams,
) -> Result<QuadState, DynamicsError> {
    debug_assert!(dt > 0.0);
    let s0 = StateVec {
        r: qs.r,
        v: qs.v,
        phi: qs.phi,
        theta: qs.theta,
        psi: qs.psi,
    };
    let k1 = deriv(&s0, cmd, params);
    let k2 = deriv(&s0.axpy(dt / 2.0, &k1), cmd, params);
    let k3 = deriv(&s0.axpy(dt / 2.0, &k2), cmd, params);
    let k4 = deriv(&s0.axpy(dt, &k3), cmd, params);

    let s1 = StateVec {
        r: s0.r + dt / 6.0 * (k1.r + 2.0 * k2.r + 2.0 * k3.r + k4.r),
        v: s0.v + dt / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
        phi: s0.phi + dt / 6.0 * (k1.phi + 2.0 * k2.phi + 2.0 * k3.phi + k4.phi),
        theta: s0.theta + dt / 6.0 * (k1.theta + 2.0 * k2.theta + 2.0 * k3.theta + k4.theta),
        psi: s0.psi + dt / 6.0 * (k1.psi + 2.0 * k2.psi + 2.0 * k3.psi + k4.psi),
    };
    if s1.phi.abs() >= CHART_LIMIT || s1.theta.abs() >= CHART_LIMIT {
        return Err(DynamicsError::EulerChartExit {
            phi: s1.phi,
            theta: s1.theta,
        });
    }
    // body rates from Euler-rate bookkeeping at the end state
    let d1 = deriv(&s1, cmd, params);
    let (sp, cp) = s1.phi.sin_cos();
    let (st, ct) = s1.theta.sin_cos();
    let omega = Vec3::new(
        d1.phi - d1.psi * st,
        d1.theta * cp + d1.psi * ct * sp,
        d1.psi * ct * cp - d1.theta * sp,
    );
    Ok(QuadState {
        r: s1.r,
        v: s1.v,
        phi: s1.phi,
        theta: s1.theta,
        psi: s1.psi,
        omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn rotation_zero_is_identity() {
        let r = rotation_from_euler(0.0, 0.0, 0.0);
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn rotation_pure_yaw_maps_x_to_y() {
        let r = rotation_from_euler(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let mapped = r * Vec3::x();
        assert_abs_diff_eq!(mapped, Vec3::y(), epsilon = 1e-12);
    }

    #[test]
    fn rotation_orthonormal() {
        let r = rotation_from_euler(0.1, -0.2, 0.3);
        assert_abs_diff_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn flat_to_full_hover() {
        let p = params();
        let fs = FlatState::hover(Vec3::new(1.0, 2.0, 3.0));
        let (qs, thrust) = flat_to_full(&fs, &p).unwrap();
        assert_abs_diff_eq!(qs.phi, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(qs.theta, 0.0, epsilon = 1e-12);
        assert_relative_eq!(thrust, p.m * p.g, epsilon = 1e-12);
    }

    #[test]
    fn flat_to_full_vertical_acceleration() {
        let p = params();
        let mut fs = FlatState::hover(Vec3::zeros());
        fs.a = Vec3::new(0.0, 0.0, p.g);
        let (qs, thrust) = flat_to_full(&fs, &p).unwrap();
        assert_relative_eq!(thrust, 2.0 * p.m * p.g, epsilon = 1e-12);
        assert_abs_diff_eq!(qs.phi, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(qs.theta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn flat_to_full_planar_acceleration_gives_pitch() {
        let p = params();
        let theta0: f64 = 0.3;
        let mut fs = FlatState::hover(Vec3::zeros());
        fs.a = Vec3::new(p.g * theta0.tan(), 0.0, 0.0);
        let (qs, _) = flat_to_full(&fs, &p).unwrap();
        assert_relative_eq!(qs.theta, theta0, epsilon = 1e-12);
        assert_abs_diff_eq!(qs.phi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn flat_to_full_roundtrip_on_acceleration() {
        let p = params();
        let fs = FlatState {
            r: Vec3::zeros(),
            v: Vec3::new(1.0, -2.0, 0.5),
            a: Vec3::new(2.0, 1.0, -3.0),
            psi: 0.7,
        };
        let (qs, thrust) = flat_to_full(&fs, &p).unwrap();
        let back = flat_from_quad(&qs, thrust, &p);
        assert_abs_diff_eq!(back.a, fs.a, epsilon = 1e-9);
    }

    #[test]
    fn flat_to_full_free_fall_rejected() {
        let p = params();
        let mut fs = FlatState::hover(Vec3::zeros());
        fs.a = Vec3::new(0.0, 0.0, -p.g);
        assert!(matches!(
            flat_to_full(&fs, &p),
            Err(DynamicsError::FreeFallSingularity(_))
        ));
    }

    #[test]
    fn thrust_from_flat_cases() {
        let p = params();
        let fs = FlatState::hover(Vec3::zeros());
        let (t, c) = thrust_from_flat(&fs, 1.0, &p).unwrap();
        assert_relative_eq!(t, p.m * p.g, epsilon = 1e-12);
        assert!(!c);

        let mut fs2 = fs;
        fs2.a.z = p.g;
        let (t2, _) = thrust_from_flat(&fs2, 1.0, &p).unwrap();
        assert_relative_eq!(t2, 2.0 * p.m * p.g, epsilon = 1e-12);

        let (t3, _) = thrust_from_flat(&fs, 0.3f64.cos(), &p).unwrap();
        assert_relative_eq!(t3, p.m * p.g / 0.3f64.cos(), epsilon = 1e-12);

        assert!(matches!(
            thrust_from_flat(&fs, 0.01, &p),
            Err(DynamicsError::AttitudeSingularity(_))
        ));
    }

    #[test]
    fn nonlinear_map_hover_zero_input() {
        let p = params();
        let cmd = nonlinear_map(&FlatState::hover(Vec3::zeros()), &FlatInput::default(), &p)
            .unwrap();
        assert_relative_eq!(cmd.thrust, p.m * p.g, epsilon = 1e-12);
        assert_abs_diff_eq!(cmd.phi_cmd, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cmd.theta_cmd, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cmd.psi_dot, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nonlinear_map_hover_x_jerk_pitches() {
        let p = params();
        let jx = 2.0;
        let nu = FlatInput {
            j: Vec3::new(jx, 0.0, 0.0),
            psi_dot: 0.0,
        };
        let cmd = nonlinear_map(&FlatState::hover(Vec3::zeros()), &nu, &p).unwrap();
        // at hover the map diagonalizes: theta_dot = jx / g
        let expected = p.tau_theta * (jx / p.g) / p.k_theta;
        assert_relative_eq!(cmd.theta_cmd, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(cmd.phi_cmd, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn euler_rates_pure_yaw_rate_term() {
        let p = params();
        let fs = FlatState {
            r: Vec3::zeros(),
            v: Vec3::zeros(),
            a: Vec3::new(1.5, -0.8, 0.4),
            psi: 0.2,
        };
        let (qs, thrust) = flat_to_full(&fs, &p).unwrap();
        let rot = rotation_from_euler(qs.phi, qs.theta, qs.psi);
        let nu = FlatInput {
            j: Vec3::zeros(),
            psi_dot: 0.5,
        };
        let (pd, td) = euler_rates_from_flat(&rot, qs.phi, qs.theta, thrust, &nu, &p).unwrap();
        assert_relative_eq!(pd, 0.5 * qs.theta.sin(), epsilon = 1e-12);
        assert_relative_eq!(td, -0.5 * qs.theta.cos() * qs.phi.tan(), epsilon = 1e-12);
    }

    #[test]
    fn step_truth_hover_equilibrium() {
        let p = params();
        let qs = QuadState::at_rest(Vec3::new(0.0, 0.0, 1.0));
        let out = step_truth(&qs, &AttitudeCommand::hover(&p), 0.01, &p).unwrap();
        assert_abs_diff_eq!(out.r, qs.r, epsilon = 1e-10);
        assert_abs_diff_eq!(out.v, qs.v, epsilon = 1e-10);
        assert_abs_diff_eq!(out.phi, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn step_truth_first_order_roll_response() {
        let p = params();
        let phi_cmd = 0.2;
        let cmd = AttitudeCommand {
            thrust: p.m * p.g,
            phi_cmd,
            theta_cmd: 0.0,
            psi_dot: 0.0,
            clamped: false,
        };
        let mut qs = QuadState::at_rest(Vec3::zeros());
        let dt = 0.001;
        let steps = 200;
        for _ in 0..steps {
            qs = step_truth(&qs, &cmd, dt, &p).unwrap();
        }
        let t = dt * steps as f64;
        let analytic = phi_cmd * (1.0 - (-t / p.tau_phi).exp());
        assert_abs_diff_eq!(qs.phi, analytic, epsilon = 1e-6);
    }

    #[test]
    fn step_truth_zero_thrust_free_fall() {
        let p = params();
        let cmd = AttitudeCommand {
            thrust: 0.0,
            phi_cmd: 0.0,
            theta_cmd: 0.0,
            psi_dot: 0.0,
            clamped: false,
        };
        let dt = 0.01;
        let out = step_truth(&QuadState::at_rest(Vec3::zeros()), &cmd, dt, &p).unwrap();
        assert_relative_eq!(out.v.z, -p.g * dt, epsilon = 1e-9);
    }

    #[test]
    fn step_truth_deterministic() {
        let p = params();
        let cmd = AttitudeCommand {
            thrust: 10.3,
            phi_cmd: 0.1,
            theta_cmd: -0.05,
            psi_dot: 0.2,
            clamped: false,
        };
        let qs = QuadState {
            r: Vec3::new(0.3, -0.1, 1.2),
            v: Vec3::new(1.0, 0.2, -0.3),
            phi: 0.05,
            theta: -0.02,
            psi: 0.4,
            omega: Vec3::zeros(),
        };
        let a = step_truth(&qs, &cmd, 0.01, &p).unwrap();
        let b = step_truth(&qs, &cmd, 0.01, &p).unwrap();
        assert_eq!(a, b);
    }
}
