//! 3D ORCA constraint engine with downwash-aware oriented-ellipsoid
//! geometry and covariance-based inflation.
//!
//! Of a close pair, the vehicle at the higher altitude is modelled as an
//! ellipsoid rotated by its roll/pitch (its downwash region), the other as
//! a sphere. The Minkowski sum of the two is outer-bounded by an ellipsoid
//! so the velocity-obstacle construction reduces, through a linear map of
//! velocity space, to the standard sphere ORCA.

use nalgebra::Matrix3;

use crate::dynamics::{rotation_from_euler, FlatState, Vec3};

/// Sigma multiplier for covariance inflation.
pub const DEFAULT_K_SIGMA: f64 = 3.0;
/// Default agent sphere radius (m).
pub const DEFAULT_AGENT_RADIUS: f64 = 0.3;
/// Default downwash ellipsoid semi-axes (m): 3:1 vertical stretch.
pub const DEFAULT_DOWNWASH_SEMI_AXES: [f64; 3] = [0.3, 0.3, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub enum BoundingVolume {
    Sphere {
        radius: f64,
    },
    Ellipsoid {
        semi_axes: Vec3,
        orientation: Matrix3<f64>,
    },
}

impl BoundingVolume {
    pub fn default_agent_ellipsoid() -> Self {
        BoundingVolume::Ellipsoid {
            semi_axes: Vec3::from(DEFAULT_DOWNWASH_SEMI_AXES),
            orientation: Matrix3::identity(),
        }
    }

    pub fn max_extent(&self) -> f64 {
        match self {
            BoundingVolume::Sphere { radius } => *radius,
            BoundingVolume::Ellipsoid { semi_axes, .. } => semi_axes.amax(),
        }
    }

    pub fn min_extent(&self) -> f64 {
        match self {
            BoundingVolume::Sphere { radius } => *radius,
            BoundingVolume::Ellipsoid { semi_axes, .. } => {
                semi_axes.x.min(semi_axes.y).min(semi_axes.z)
            }
        }
    }

    /// Grows every radius/semi-axis by `delta`.
    pub fn inflated(&self, delta: f64) -> Self {
        match self {
            BoundingVolume::Sphere { radius } => BoundingVolume::Sphere {
                radius: radius + delta,
            },
            BoundingVolume::Ellipsoid {
                semi_axes,
                orientation,
            } => BoundingVolume::Ellipsoid {
                semi_axes: semi_axes.add_scalar(delta),
                orientation: *orientation,
            },
        }
    }

    /// Linear map taking this volume to the unit ball at the origin.
    pub fn to_unit_sphere_map(&self) -> Matrix3<f64> {
        match self {
            BoundingVolume::Sphere { radius } => Matrix3::identity() / *radius,
            BoundingVolume::Ellipsoid {
                semi_axes,
                orientation,
            } => {
                let inv_scale = Matrix3::from_diagonal(&Vec3::new(
                    1.0 / semi_axes.x,
                    1.0 / semi_axes.y,
                    1.0 / semi_axes.z,
                ));
                inv_scale * orientation.transpose()
            }
        }
    }

    /// True when `point` (relative to the volume's center) lies inside.
    pub fn contains(&self, point: &Vec3) -> bool {
        (self.to_unit_sphere_map() * point).norm() < 1.0
    }
}

/// One linear ORCA velocity constraint n·v <= b at horizon step `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub n: Vec3,
    pub b: f64,
    pub step: usize,
    /// Urgency multiplier for the slack penalty when the plane has to be
    /// softened: grows as time-to-collision shrinks, so a crowded solve
    /// spends its input budget on the most imminent threat instead of
    /// spreading it evenly over every neighbor.
    pub urgency: f64,
    /// Id of the neighbor this plane protects against (usize::MAX when
    /// constructed outside constraints_for_horizon).
    pub source: usize,
}

impl HalfPlane {
    pub fn satisfied_by(&self, v: &Vec3, tol: f64) -> bool {
        self.n.dot(v) <= self.b + tol
    }
}

/// World-state view of one sensed agent or obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSnapshot {
    pub id: usize,
    pub r: Vec3,
    pub v: Vec3,
    /// Roll and pitch (rad); orients the downwash ellipsoid.
    pub attitude: (f64, f64),
    pub volume: BoundingVolume,
    pub pos_cov: Matrix3<f64>,
    pub vel_cov: Matrix3<f64>,
    /// Reciprocal (half) responsibility for agents, full for obstacles.
    pub is_agent: bool,
}

impl NeighborSnapshot {
    fn oriented_ellipsoid(&self) -> BoundingVolume {
        let rot = rotation_from_euler(self.attitude.0, self.attitude.1, 0.0);
        match &self.volume {
            BoundingVolume::Sphere { radius } => BoundingVolume::Sphere { radius: *radius },
            BoundingVolume::Ellipsoid { semi_axes, .. } => {
                // axisymmetric case: rebuild the frame from the tilt axis
                // alone so mirror-image worlds stay bit-exact mirrors
                let orientation = if semi_axes.x == semi_axes.y {
                    canonical_axis_frame(&rot.column(2).into_owned())
                } else {
                    rot
                };
                BoundingVolume::Ellipsoid {
                    semi_axes: *semi_axes,
                    orientation,
                }
            }
        }
    }

    /// Body-sphere radius when this member takes the sphere role of the
    /// pair: the downwash ellipsoid's horizontal semi-axis, since only
    /// the upper vehicle's downwash region matters.
    fn sphere_radius(&self) -> f64 {
        self.volume.min_extent()
    }
}

/// Rotation whose third column is `axis` (normalized), built from the
/// axis alone; equivariant under rotations about the world z axis.
fn canonical_axis_frame(axis: &Vec3) -> Matrix3<f64> {
    let u = axis / axis.norm();
    let x_raw = u.cross(&Vec3::z());
    let nx = x_raw.norm();
    if nx < 1e-9 {
        return if u.z >= 0.0 {
            Matrix3::identity()
        } else {
            Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))
        };
    }
    let x = x_raw / nx;
    let y = u.cross(&x);
    Matrix3::from_columns(&[x, y, u])
}

/// Conservative ellipsoidal outer bound of the Minkowski sum for a pair.
///
/// The member at the higher current altitude contributes its ellipsoid
/// oriented by its attitude; the other contributes its bounding sphere.
/// Altitude ties break toward the lower id as the ellipsoid. The bound
/// scales the semi-axes by (1 + rho / a_min), which is exact when both
/// volumes are spheres.
pub fn combined_volume(a: &NeighborSnapshot, b: &NeighborSnapshot) -> BoundingVolume {
    let (a_is_upper, tied) = match a.r.z.partial_cmp(&b.r.z) {
        Some(std::cmp::Ordering::Greater) => (true, false),
        Some(std::cmp::Ordering::Less) => (false, false),
        _ => (a.id < b.id, true),
    };
    let (upper, lower) = if a_is_upper { (a, b) } else { (b, a) };
    let rho = lower.sphere_radius();
    // on an exact altitude tie the orientation choice is arbitrary; keep
    // the ellipsoid upright so mirror-image worlds agree bit-for-bit
    let ellipsoid = if tied {
        match &upper.volume {
            BoundingVolume::Sphere { radius } => BoundingVolume::Sphere { radius: *radius },
            BoundingVolume::Ellipsoid { semi_axes, .. } => BoundingVolume::Ellipsoid {
                semi_axes: *semi_axes,
                orientation: Matrix3::identity(),
            },
        }
    } else {
        upper.oriented_ellipsoid()
    };
    match ellipsoid {
        BoundingVolume::Sphere { radius } => BoundingVolume::Sphere {
            radius: radius + rho,
        },
        BoundingVolume::Ellipsoid {
            semi_axes,
            orientation,
        } => {
            let a_min = semi_axes.x.min(semi_axes.y).min(semi_axes.z);
            BoundingVolume::Ellipsoid {
                semi_axes: semi_axes * (1.0 + rho / a_min),
                orientation,
            }
        }
    }
}

/// ORCA half-plane for one neighbor at one horizon step.
///
/// `rel_pos` = neighbor - self, `rel_vel` = v_self - v_neighbor, both at
/// the step the plane protects. The combined volume is mapped to the unit
/// ball, the standard truncated-cone VO is evaluated there, and the plane
/// is mapped back. `share` is the reciprocity share (1/2 between agents,
/// 1 against obstacles). Pairs already in collision get the
/// tau-independent escape plane that separates them within one step `dt`.
#[allow(clippy::too_many_arguments)]
pub fn vo_halfplane(
    rel_pos: Vec3,
    rel_vel: Vec3,
    v_self: Vec3,
    vol: &BoundingVolume,
    tau: f64,
    share: f64,
    dt: f64,
    step: usize,
) -> HalfPlane {
    debug_assert!(tau > 0.0 && dt > 0.0);
    let s = vol.to_unit_sphere_map();
    let p = s * rel_pos;
    let v = s * rel_vel;
    let dist_sq = p.norm_squared();

    let (normal_t, u_t) = if dist_sq > 1.0 {
        sphere_vo_change(p, v, tau)
    } else {
        // already overlapping (the planning volume, not the bare bodies):
        // push apart along the transformed line of centers. Resolving
        // within one control step would demand a separation speed far
        // beyond the input budget and drown every other constraint in
        // slack, so give the escape a few steps
        let inv_dt = 1.0 / (0.1 * tau).max(dt);
        let w = v - p * inv_dt;
        let w_len = w.norm();
        let unit_w = if w_len > 1e-12 {
            w / w_len
        } else if dist_sq > 1e-12 {
            -p.normalize()
        } else {
            Vec3::z()
        };
        (unit_w, unit_w * (inv_dt - w_len))
    };

    // time to contact in the transformed space: surface gap over closing
    // speed; already-overlapping pairs get the maximum urgency
    let urgency = if dist_sq > 1.0 {
        let dist = dist_sq.sqrt();
        let gap = dist - 1.0;
        let closing = v.dot(&p) / dist;
        if closing > 1e-9 {
            (tau * closing / gap).clamp(1.0, 25.0)
        } else {
            1.0
        }
    } else {
        25.0
    };

    // permitted set in world velocity space: (v - point)·m >= 0
    let s_inv = vol.to_unit_sphere_map().try_inverse().expect("volume map invertible");
    let point = v_self + share * (s_inv * u_t);
    let m_raw = s.transpose() * normal_t;
    let m = m_raw.normalize();
    HalfPlane {
        n: -m,
        b: -m.dot(&point),
        step,
        urgency,
        source: usize::MAX,
    }
}

/// Smallest change u moving `v` out of the truncated-cone VO of a unit
/// sphere at `p` over horizon tau, and the outward normal at that
/// boundary point. RVO2-3D construction.
fn sphere_vo_change(p: Vec3, v: Vec3, tau: f64) -> (Vec3, Vec3) {
    let inv_tau = 1.0 / tau;
    let dist_sq = p.norm_squared();
    let w = v - p * inv_tau;
    let w_len_sq = w.norm_squared();
    let dot1 = w.dot(&p);
    // combined radius is 1 in the transformed space
    if dot1 < 0.0 && dot1 * dot1 > w_len_sq {
        // project on the cutoff sphere (radius 1/tau at p/tau)
        let w_len = w_len_sq.sqrt();
        let unit_w = if w_len > 1e-12 { w / w_len } else { -p.normalize() };
        // exact head-on gives a pure slow-down plane and a symmetric
        // deadlock; deflect the boundary point sideways (still on the
        // cutoff cap, so the VO guarantee is unchanged)
        if unit_w.cross(&p).norm() < 1e-3 * p.norm() {
            let tilted = (unit_w + 0.1 * perpendicular(&p)).normalize();
            return (tilted, tilted * inv_tau - w);
        }
        (unit_w, unit_w * (inv_tau - w_len))
    } else {
        // project on the cone surface
        let cross_sq = p.cross(&v).norm_squared();
        let a = dist_sq;
        let b = p.dot(&v);
        let c = v.norm_squared() - cross_sq / (dist_sq - 1.0);
        let disc = (b * b - a * c).max(0.0);
        let t = (b + disc.sqrt()) / a;
        let ww = v - p * t;
        let ww_len = ww.norm();
        // near the cone axis the projection azimuth is numerically
        // meaningless (ww is a noise-dominated near-zero vector); use the
        // canonical lateral direction, which also breaks the symmetric
        // head-on deadlock toward mirrored sides
        let near_axis = cross_sq < 1e-4 * dist_sq * v.norm_squared();
        let unit_ww = if near_axis || ww_len < 1e-12 {
            perpendicular(&p)
        } else {
            ww / ww_len
        };
        (unit_ww, unit_ww * (t - ww_len))
    }
}

fn perpendicular(p: &Vec3) -> Vec3 {
    // cross with the world z axis keeps the choice equivariant under
    // rotations about z (mirror-image worlds deflect to mirrored sides)
    let c = p.cross(&Vec3::z());
    if c.norm() > 1e-9 * p.norm() {
        c.normalize()
    } else {
        p.cross(&Vec3::x()).normalize()
    }
}

/// Covariance-driven conservatism: every semi-axis grows by
/// k_sigma * sqrt(lambda_max(pos_cov)) and the plane offset tightens by
/// k_sigma * sqrt(n' vel_cov n).
pub fn inflate_for_uncertainty(
    vol: &BoundingVolume,
    pos_cov: &Matrix3<f64>,
    vel_cov: &Matrix3<f64>,
    plane: &HalfPlane,
    k_sigma: f64,
) -> (BoundingVolume, HalfPlane) {
    (
        inflate_volume(vol, pos_cov, k_sigma),
        tighten_plane(plane, vel_cov, k_sigma),
    )
}

pub fn inflate_volume(vol: &BoundingVolume, pos_cov: &Matrix3<f64>, k_sigma: f64) -> BoundingVolume {
    let lambda_max = pos_cov.symmetric_eigenvalues().amax().max(0.0);
    vol.inflated(k_sigma * lambda_max.sqrt())
}

pub fn tighten_plane(plane: &HalfPlane, vel_cov: &Matrix3<f64>, k_sigma: f64) -> HalfPlane {
    let quad = (plane.n.transpose() * vel_cov * plane.n)[(0, 0)].max(0.0);
    HalfPlane {
        b: plane.b - k_sigma * quad.sqrt(),
        ..*plane
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HorizonConfig {
    pub n_steps: usize,
    pub dt: f64,
    pub tau: f64,
    pub sensing_radius: f64,
    pub neighbor_cap: usize,
    pub k_sigma: f64,
    /// Fixed planning-side inflation (m) absorbing tracking and
    /// discretization error between the planned and flown trajectory.
    pub safety_margin: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            dt: 0.1,
            tau: 5.0,
            sensing_radius: 6.0,
            neighbor_cap: 10,
            k_sigma: DEFAULT_K_SIGMA,
            safety_margin: 0.3,
        }
    }
}

/// Per-horizon-step ORCA planes for one agent.
///
/// `self_pred` is the previous MPC prediction (length >= n_steps + 1;
/// first planning cycle: constant-velocity propagation). Entry k of the
/// result constrains the velocity at step k+1 and is built from the
/// agent's predicted state at step k and the neighbor propagated k*dt at
/// constant velocity. Neighbors outside the sensing radius or beyond the
/// nearest `neighbor_cap` are skipped.
pub fn constraints_for_horizon(
    self_snap: &NeighborSnapshot,
    self_pred: &[FlatState],
    neighbors: &[NeighborSnapshot],
    cfg: &HorizonConfig,
) -> Vec<Vec<HalfPlane>> {
    assert!(self_pred.len() > cfg.n_steps);
    let here = self_pred[0].r;
    let mut in_range: Vec<&NeighborSnapshot> = neighbors
        .iter()
        .filter(|nb| nb.id != self_snap.id && (nb.r - here).norm() <= cfg.sensing_radius)
        .collect();
    in_range.sort_by(|x, y| {
        let dx = (x.r - here).norm_squared();
        let dy = (y.r - here).norm_squared();
        dx.partial_cmp(&dy).unwrap().then(x.id.cmp(&y.id))
    });
    in_range.truncate(cfg.neighbor_cap);

    let mut planes = vec![Vec::with_capacity(in_range.len()); cfg.n_steps];
    for nb in &in_range {
        let base = combined_volume(self_snap, nb).inflated(cfg.safety_margin);
        let vol = inflate_volume(&base, &nb.pos_cov, cfg.k_sigma);
        let share = if nb.is_agent { 0.5 } else { 1.0 };
        for k in 0..cfg.n_steps {
            let t = k as f64 * cfg.dt;
            let nb_pos = nb.r + nb.v * t;
            let rel_pos = nb_pos - self_pred[k].r;
            let rel_vel = self_pred[k].v - nb.v;
            let plane = vo_halfplane(
                rel_pos,
                rel_vel,
                self_pred[k].v,
                &vol,
                cfg.tau,
                share,
                cfg.dt,
                k + 1,
            );
            let mut plane = tighten_plane(&plane, &nb.vel_cov, cfg.k_sigma);
            plane.source = nb.id;
            planes[k].push(plane);
        }
    }
    planes
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn snap(id: usize, r: Vec3, v: Vec3, vol: BoundingVolume) -> NeighborSnapshot {
        NeighborSnapshot {
            id,
            r,
            v,
            attitude: (0.0, 0.0),
            volume: vol,
            pos_cov: Matrix3::zeros(),
            vel_cov: Matrix3::zeros(),
            is_agent: true,
        }
    }

    #[test]
    fn sphere_sphere_sum_exact() {
        let a = snap(0, Vec3::zeros(), Vec3::zeros(), BoundingVolume::Sphere { radius: 0.4 });
        let b = snap(1, Vec3::new(2.0, 0.0, 0.0), Vec3::zeros(), BoundingVolume::Sphere { radius: 0.4 });
        match combined_volume(&a, &b) {
            BoundingVolume::Sphere { radius } => assert_relative_eq!(radius, 0.8),
            other => panic!("expected sphere, got {other:?}"),
        }
    }

    #[test]
    fn ellipsoid_sphere_outer_bound() {
        let mut a = snap(0, Vec3::new(0.0, 0.0, 1.0), Vec3::zeros(), BoundingVolume::default_agent_ellipsoid());
        a.attitude = (0.0, 0.0);
        let b = snap(1, Vec3::zeros(), Vec3::zeros(), BoundingVolume::Sphere { radius: 0.3 });
        match combined_volume(&a, &b) {
            BoundingVolume::Ellipsoid { semi_axes, .. } => {
                assert_abs_diff_eq!(semi_axes, Vec3::new(0.6, 0.6, 1.8), epsilon = 1e-12);
            }
            other => panic!("expected ellipsoid, got {other:?}"),
        }
    }

    #[test]
    fn altitude_tie_breaks_to_lower_id() {
        // exact altitude tie: lower id contributes the ellipsoid, kept
        // upright because the orientation choice is ambiguous
        let mut a = snap(3, Vec3::zeros(), Vec3::zeros(), BoundingVolume::default_agent_ellipsoid());
        a.attitude = (0.3, 0.0);
        let mut b = snap(7, Vec3::new(1.0, 0.0, 0.0), Vec3::zeros(), BoundingVolume::default_agent_ellipsoid());
        b.attitude = (0.0, 0.2);
        for vol in [combined_volume(&a, &b), combined_volume(&b, &a)] {
            match vol {
                BoundingVolume::Ellipsoid { orientation, .. } => {
                    assert_abs_diff_eq!(orientation, Matrix3::identity(), epsilon = 1e-12);
                }
                other => panic!("expected ellipsoid, got {other:?}"),
            }
        }
        // strictly higher member orients the ellipsoid by its attitude
        a.r.z = 0.5;
        let axis = rotation_from_euler(0.3, 0.0, 0.0).column(2).into_owned();
        for vol in [combined_volume(&a, &b), combined_volume(&b, &a)] {
            match vol {
                BoundingVolume::Ellipsoid { orientation, .. } => {
                    assert_abs_diff_eq!(orientation.column(2).into_owned(), axis, epsilon = 1e-12);
                }
                other => panic!("expected ellipsoid, got {other:?}"),
            }
        }
    }

    #[test]
    fn diverging_agents_current_velocity_feasible() {
        let vol = BoundingVolume::Sphere { radius: 1.0 };
        let v_self = Vec3::new(2.0, 0.0, 0.0); // moving away fast
        let plane = vo_halfplane(
            Vec3::new(-4.0, 0.0, 0.0),
            v_self,
            v_self,
            &vol,
            5.0,
            0.5,
            0.1,
            1,
        );
        assert!(plane.satisfied_by(&v_self, 0.0));
        assert!(plane.b - plane.n.dot(&v_self) >= 0.0);
    }

    #[test]
    fn on_axis_plane_normal_and_offset() {
        // neighbor ahead on +x, relative velocity -2 m/s exactly along the
        // line of centers: the head-on tie-break tilts the cutoff-ball
        // projection toward the canonical lateral direction (p x z), so
        // the normal is normalize((1, 0.1, 0)) and the corrected relative
        // velocity lands on the cutoff ball (center p/tau, radius R/tau)
        let tau = 5.0;
        let vol = BoundingVolume::Sphere { radius: 1.0 };
        let rel_pos = Vec3::new(4.0, 0.0, 0.0);
        let rel_vel = Vec3::new(-2.0, 0.0, 0.0);
        let v_self = Vec3::new(-2.0, 0.0, 0.0); // neighbor at rest
        let p = vo_halfplane(rel_pos, rel_vel, v_self, &vol, tau, 0.5, 0.1, 1);
        assert_abs_diff_eq!(p.n, Vec3::new(1.0, 0.1, 0.0).normalize(), epsilon = 1e-9);
        assert!(p.satisfied_by(&v_self, 0.0));
        // the correction lands the relative velocity on the cutoff ball,
        // and the plane normal is the ball's outward normal there
        let (normal, u) = sphere_vo_change(rel_pos, rel_vel, tau);
        let w_new = rel_vel + u - rel_pos / tau;
        assert_abs_diff_eq!(w_new.norm(), 1.0 / tau, epsilon = 1e-9);
        assert_abs_diff_eq!(w_new.normalize(), normal, epsilon = 1e-9);
    }

    #[test]
    fn symmetry_between_pair() {
        // planes for A|B and B|A are reflections through the origin of
        // relative-velocity space
        let vol = BoundingVolume::Sphere { radius: 1.0 };
        let rel_pos = Vec3::new(3.0, 1.0, -0.5);
        let va = Vec3::new(1.0, 0.2, 0.0);
        let vb = Vec3::new(-0.5, 0.1, 0.3);
        let pa = vo_halfplane(rel_pos, va - vb, va, &vol, 5.0, 0.5, 0.1, 1);
        let pb = vo_halfplane(-rel_pos, vb - va, vb, &vol, 5.0, 0.5, 0.1, 1);
        assert_abs_diff_eq!(pa.n, -pb.n, epsilon = 1e-9);
        // the reciprocity midpoint (va + vb)/2 + ... lies on both planes:
        // residuals of the two planes at their own boundary points mirror
        let ra = pa.b - pa.n.dot(&va);
        let rb = pb.b - pb.n.dot(&vb);
        assert_abs_diff_eq!(ra, rb, epsilon = 1e-9);
    }

    #[test]
    fn z_stretch_orthogonal_to_motion_is_invariant() {
        let sphere = BoundingVolume::Sphere { radius: 1.0 };
        let ell = BoundingVolume::Ellipsoid {
            semi_axes: Vec3::new(1.0, 1.0, 2.5),
            orientation: Matrix3::identity(),
        };
        let rel_pos = Vec3::new(4.0, 0.0, 0.0);
        let rel_vel = Vec3::new(-2.0, 0.0, 0.0);
        let v_self = Vec3::new(-2.0, 0.0, 0.0);
        let p1 = vo_halfplane(rel_pos, rel_vel, v_self, &sphere, 5.0, 0.5, 0.1, 1);
        let p2 = vo_halfplane(rel_pos, rel_vel, v_self, &ell, 5.0, 0.5, 0.1, 1);
        assert_abs_diff_eq!(p1.n, p2.n, epsilon = 1e-9);
        assert_abs_diff_eq!(p1.b, p2.b, epsilon = 1e-9);
    }

    #[test]
    fn uncertainty_inflation_cases() {
        let vol = BoundingVolume::Sphere { radius: 0.5 };
        let plane = HalfPlane {
            n: Vec3::x(),
            b: 1.0,
            step: 1,
            urgency: 1.0,
            source: 0,
        };
        // zero covariances: unchanged
        let (v0, p0) =
            inflate_for_uncertainty(&vol, &Matrix3::zeros(), &Matrix3::zeros(), &plane, 3.0);
        assert_eq!(v0, vol);
        assert_eq!(p0, plane);

        // isotropic position covariance grows each axis by k*sigma
        let sigma = 0.2;
        let (v1, _) = inflate_for_uncertainty(
            &vol,
            &(Matrix3::identity() * sigma * sigma),
            &Matrix3::zeros(),
            &plane,
            3.0,
        );
        match v1 {
            BoundingVolume::Sphere { radius } => {
                assert_relative_eq!(radius, 0.5 + 3.0 * sigma, epsilon = 1e-12)
            }
            other => panic!("expected sphere, got {other:?}"),
        }

        // velocity covariance along the normal tightens the offset exactly
        let sigma_v = 0.3;
        let mut vel_cov = Matrix3::zeros();
        vel_cov[(0, 0)] = sigma_v * sigma_v;
        let (_, p2) = inflate_for_uncertainty(&vol, &Matrix3::zeros(), &vel_cov, &plane, 3.0);
        assert_relative_eq!(p2.b, 1.0 - 3.0 * sigma_v, epsilon = 1e-12);
    }

    #[test]
    fn horizon_empty_without_neighbors() {
        let me = snap(0, Vec3::zeros(), Vec3::zeros(), BoundingVolume::default_agent_ellipsoid());
        let pred: Vec<FlatState> = (0..=10).map(|_| FlatState::hover(Vec3::zeros())).collect();
        let cfg = HorizonConfig::default();
        let planes = constraints_for_horizon(&me, &pred, &[], &cfg);
        assert_eq!(planes.len(), 10);
        assert!(planes.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn horizon_sensing_cutoff() {
        let me = snap(0, Vec3::zeros(), Vec3::zeros(), BoundingVolume::default_agent_ellipsoid());
        let far = snap(
            1,
            Vec3::new(20.0, 0.0, 0.0),
            Vec3::zeros(),
            BoundingVolume::default_agent_ellipsoid(),
        );
        let pred: Vec<FlatState> = (0..=10).map(|_| FlatState::hover(Vec3::zeros())).collect();
        let planes = constraints_for_horizon(&me, &pred, &[far], &HorizonConfig::default());
        assert!(planes.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn horizon_matches_single_step_recomputation() {
        let me = snap(0, Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), BoundingVolume::Sphere { radius: 0.3 });
        let nb = snap(
            1,
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            BoundingVolume::Sphere { radius: 0.3 },
        );
        let cfg = HorizonConfig::default();
        let pred: Vec<FlatState> = (0..=cfg.n_steps)
            .map(|k| {
                let mut fs = FlatState::hover(Vec3::new(k as f64 * 0.1, 0.0, 0.0));
                fs.v = Vec3::new(1.0, 0.0, 0.0);
                fs
            })
            .collect();
        let planes = constraints_for_horizon(&me, &pred, &[nb.clone()], &cfg);
        for (k, step_planes) in planes.iter().enumerate() {
            assert_eq!(step_planes.len(), 1);
            let vol = combined_volume(&me, &nb);
            let t = k as f64 * cfg.dt;
            let expected = vo_halfplane(
                nb.r + nb.v * t - pred[k].r,
                pred[k].v - nb.v,
                pred[k].v,
                &vol,
                cfg.tau,
                0.5,
                cfg.dt,
                k + 1,
            );
            assert_abs_diff_eq!(step_planes[0].n, expected.n, epsilon = 1e-12);
            assert_abs_diff_eq!(step_planes[0].b, expected.b, epsilon = 1e-12);
        }
    }
}
