//! Deterministic decentralized swarm simulation: scenario generators,
//! the per-tick plan/advance loop, collision detection, and metrics.
//!
//! Agents plan at the MPC rate against a frozen snapshot of the previous
//! tick's world while the truth integrator substeps at 1 kHz between
//! commands. All randomness derives from the scenario seed, keyed by
//! (tick, observer, target) so results are independent of agent update
//! order.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    self, AttitudeCommand, DynamicsError, FlatState, QuadState, Vec3, VehicleParams,
};
use crate::estimation::{
    default_process_noise, noise_from_sigmas, KalmanTrack, Measurement,
};
use crate::mpc::{self, MpcConfig, MpcError, MpcStatus};
use crate::orca::{
    combined_volume, constraints_for_horizon, BoundingVolume, HorizonConfig, NeighborSnapshot,
    DEFAULT_K_SIGMA,
};
use crate::qp::{self, QuadProgram};

/// Truth-integrator substeps per planning tick (1 kHz at dt = 0.1 s).
pub const SUBSTEPS_PER_TICK: usize = 100;
/// Episode completion: position tolerance (m).
pub const GOAL_POS_TOL: f64 = 0.2;
/// Episode completion: speed tolerance (m/s).
pub const GOAL_SPEED_TOL: f64 = 0.1;
/// Timeout as a multiple of the longest reference duration.
pub const TIMEOUT_FACTOR: f64 = 3.0;
/// Scenario file schema version.
pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("agent {agent} dynamics abort at t = {t:.2} s: {source}")]
    Abort {
        agent: usize,
        t: f64,
        source: DynamicsError,
    },
    #[error("agent {agent} planner failure at t = {t:.2} s: {source}")]
    Planner {
        agent: usize,
        t: f64,
        source: MpcError,
    },
}

/// Planner selector; the ORCA baseline reproduces the comparison column
/// by projecting the preferred velocity onto single-step ORCA planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dcad,
    OrcaBaseline,
}

/// One agent's reference trajectory specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// Straight line with a C² symmetric speed profile.
    Line {
        start: [f64; 3],
        goal: [f64; 3],
        v_peak: f64,
    },
    /// Closed Gerono figure-eight at constant angular rate.
    Lemniscate {
        center: [f64; 3],
        scale: f64,
        avg_speed: f64,
        reverse: bool,
    },
}

impl ReferenceSpec {
    pub fn build(&self, dt: f64) -> Vec<FlatState> {
        match self {
            ReferenceSpec::Line { start, goal, v_peak } => {
                reference_trajectory(Vec3::from(*start), Vec3::from(*goal), *v_peak, dt)
            }
            ReferenceSpec::Lemniscate {
                center,
                scale,
                avg_speed,
                reverse,
            } => lemniscate_reference(Vec3::from(*center), *scale, *avg_speed, *reverse, dt),
        }
    }
}

/// Constant-velocity dynamic obstacle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub start: [f64; 3],
    pub vel: [f64; 3],
    pub radius: f64,
}

/// Simulated measurement noise (per-axis standard deviations).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub sigma_p: f64,
    pub sigma_v: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            sigma_p: 0.1,
            sigma_v: 0.2,
        }
    }
}

/// Serializable mirror of [`MpcConfig`] with diagonal weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcParams {
    pub n: usize,
    pub dt: f64,
    pub q_pos: f64,
    pub q_psi: f64,
    pub r_input: f64,
    pub v_max: [f64; 3],
    pub a_max: [f64; 3],
    pub jerk_z_max: f64,
    pub w_slack: f64,
}

impl Default for MpcParams {
    fn default() -> Self {
        let c = MpcConfig::default();
        Self {
            n: c.n,
            dt: c.dt,
            q_pos: c.q[(0, 0)],
            q_psi: c.q[(3, 3)],
            r_input: c.r[(0, 0)],
            v_max: [c.v_max.x, c.v_max.y, c.v_max.z],
            // scenario default stays inside the attitude envelope
            // (phi_max = 0.5 rad gives ~5.4 m/s² of lateral authority)
            a_max: [5.0, 5.0, 5.0],
            jerk_z_max: c.jerk_z_max,
            w_slack: c.w_slack,
        }
    }
}

impl MpcParams {
    pub fn to_config(&self) -> MpcConfig {
        let mut c = MpcConfig::default();
        c.n = self.n;
        c.dt = self.dt;
        c.q = nalgebra::Matrix4::from_diagonal(&nalgebra::Vector4::new(
            self.q_pos, self.q_pos, self.q_pos, self.q_psi,
        ));
        c.r = nalgebra::Matrix4::identity() * self.r_input;
        c.v_max = Vec3::from(self.v_max);
        c.a_max = Vec3::from(self.a_max);
        c.jerk_z_max = self.jerk_z_max;
        c.w_slack = self.w_slack;
        c
    }
}

/// Full episode description; the seed fixes all randomness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub agents: Vec<ReferenceSpec>,
    pub obstacles: Vec<ObstacleSpec>,
    pub params: VehicleParams,
    pub mpc: MpcParams,
    pub sensing_radius: f64,
    pub neighbor_cap: usize,
    pub tau: f64,
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            version: SCENARIO_SCHEMA_VERSION,
            name: String::new(),
            agents: Vec::new(),
            obstacles: Vec::new(),
            params: VehicleParams::default(),
            mpc: MpcParams::default(),
            sensing_radius: 6.0,
            neighbor_cap: 10,
            tau: 5.0,
            seed: 0,
            noise: NoiseConfig::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.version != SCENARIO_SCHEMA_VERSION {
            return Err(SimError::InvalidScenario(format!(
                "unsupported schema version {} (expected {})",
                self.version, SCENARIO_SCHEMA_VERSION
            )));
        }
        if self.agents.is_empty() {
            return Err(SimError::InvalidScenario("no agents".into()));
        }
        if !(self.mpc.dt > 0.0) || self.mpc.n == 0 {
            return Err(SimError::InvalidScenario("mpc horizon invalid".into()));
        }
        let starts: Vec<Vec3> = self
            .agents
            .iter()
            .map(|a| a.build(self.mpc.dt)[0].r)
            .collect();
        for i in 0..starts.len() {
            for j in (i + 1)..starts.len() {
                let si = agent_snapshot(i, starts[i], Vec3::zeros(), (0.0, 0.0));
                let sj = agent_snapshot(j, starts[j], Vec3::zeros(), (0.0, 0.0));
                if detect_collision(&si, &sj) {
                    return Err(SimError::InvalidScenario(format!(
                        "agents {i} and {j} start in collision"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-tick trajectory record for one agent.
#[derive(Debug, Clone, Copy)]
pub struct TraceSample {
    pub t: f64,
    pub state: QuadState,
    /// World acceleration recovered from thrust and attitude.
    pub accel: Vec3,
    pub thrust: f64,
    pub solve_ms: f64,
    pub slack_active: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub trajectories: Vec<Vec<TraceSample>>,
    pub collided: bool,
    pub collision_pairs: Vec<(usize, usize)>,
    pub path_lengths: Vec<f64>,
    /// First time each agent satisfies the goal tolerance after its
    /// reference ends; None when it never does before timeout.
    pub times_to_goal: Vec<Option<f64>>,
    /// Minimum center-to-center agent separation (m); infinite for a
    /// single agent.
    pub min_separation: f64,
    /// Per-agent RMS jerk from finite-differenced accelerations.
    pub jerk_rms: Vec<f64>,
    /// Per-tick total planner compute time (s).
    pub solve_times: Vec<f64>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsSummary {
    pub mean_path_length: f64,
    pub mean_time_to_goal: f64,
    pub completed: usize,
    pub min_separation: f64,
    pub mean_jerk_rms: f64,
    pub solve_ms_p50: f64,
    pub solve_ms_p95: f64,
    pub solve_ms_p99: f64,
}

/// Straight-line reference with a quintic (C²) symmetric speed profile:
/// zero boundary velocity/acceleration, peak speed at the midpoint
/// (peak = 15 L / 8 T, i.e. mean speed = 8/15 of the peak).
pub fn reference_trajectory(start: Vec3, goal: Vec3, v_peak: f64, dt: f64) -> Vec<FlatState> {
    assert!(v_peak > 0.0 && dt > 0.0);
    let l = (goal - start).norm();
    if l < 1e-9 {
        return vec![FlatState::hover(start)];
    }
    let dir = (goal - start) / l;
    let t_total = 1.875 * l / v_peak;
    let n = (t_total / dt).ceil() as usize;
    (0..=n)
        .map(|k| {
            let u = ((k as f64 * dt) / t_total).min(1.0);
            let s = l * u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
            let sd = l / t_total * 30.0 * u * u * (1.0 - u) * (1.0 - u);
            let sdd = l / (t_total * t_total) * 60.0 * u * (1.0 - 3.0 * u + 2.0 * u * u);
            FlatState {
                r: start + dir * s,
                v: dir * sd,
                a: dir * sdd,
                psi: 0.0,
            }
        })
        .collect()
}

/// Closed Gerono lemniscate x = A sin θ, y = A sin θ cos θ traversed at
/// constant angular rate; θ(0) = ±π/2 so opposing agents start on
/// opposite lobes and meet at the crossing point.
pub fn lemniscate_reference(
    center: Vec3,
    scale: f64,
    avg_speed: f64,
    reverse: bool,
    dt: f64,
) -> Vec<FlatState> {
    assert!(scale > 0.0 && avg_speed > 0.0 && dt > 0.0);
    let arclen = scale * gerono_unit_arclen();
    let t_total = arclen / avg_speed;
    let omega = std::f64::consts::TAU / t_total;
    let sign = if reverse { -1.0 } else { 1.0 };
    let n = (t_total / dt).ceil() as usize;
    (0..=n)
        .map(|k| {
            let t = (k as f64 * dt).min(t_total);
            let th = sign * (omega * t + std::f64::consts::FRAC_PI_2);
            let thd = sign * omega;
            let (s1, c1) = th.sin_cos();
            let (s2, c2) = (2.0 * th).sin_cos();
            FlatState {
                r: center + scale * Vec3::new(s1, s1 * c1, 0.0),
                v: scale * thd * Vec3::new(c1, c2, 0.0),
                a: -scale * thd * thd * Vec3::new(s1, 2.0 * s2, 0.0),
                psi: 0.0,
            }
        })
        .collect()
}

/// Arc length of the unit-scale Gerono lemniscate (numeric quadrature).
fn gerono_unit_arclen() -> f64 {
    let steps = 20_000;
    let h = std::f64::consts::TAU / steps as f64;
    (0..steps)
        .map(|k| {
            let th = (k as f64 + 0.5) * h;
            (th.cos().powi(2) + (2.0 * th).cos().powi(2)).sqrt() * h
        })
        .sum()
}

/// Agents equally spaced on a circle, each exchanging position with its
/// antipodal partner.
pub fn circle_exchange(n: usize, diameter: f64, v_peak: f64) -> Scenario {
    assert!(n >= 2 && n % 2 == 0, "circle exchange needs an even agent count");
    assert!(diameter > 0.0 && v_peak > 0.0);
    let radius = diameter / 2.0;
    let altitude = 2.0;
    let agents = (0..n)
        .map(|i| {
            let ang = std::f64::consts::TAU * i as f64 / n as f64;
            // snap near-zero coordinates so antipodal starts are exact
            // negatives of each other
            let snap = |x: f64| if x.abs() < 1e-9 * radius { 0.0 } else { x };
            let start = [snap(radius * ang.cos()), snap(radius * ang.sin()), altitude];
            let goal = [-start[0], -start[1], altitude];
            ReferenceSpec::Line {
                start,
                goal,
                v_peak,
            }
        })
        .collect();
    Scenario {
        name: format!("circle{n}_d{diameter:.0}"),
        agents,
        ..Scenario::default()
    }
}

/// Two agents tracking the same figure-eight in opposing directions.
pub fn lemniscate(scale: f64, avg_speed: f64) -> Scenario {
    assert!(scale > 0.0 && avg_speed > 0.0);
    let center = [0.0, 0.0, 2.0];
    let agents = vec![
        ReferenceSpec::Lemniscate {
            center,
            scale,
            avg_speed,
            reverse: false,
        },
        ReferenceSpec::Lemniscate {
            center,
            scale,
            avg_speed,
            reverse: true,
        },
    ];
    Scenario {
        name: format!("lemniscate_s{scale:.0}"),
        agents,
        ..Scenario::default()
    }
}

/// True iff the pair's centers lie inside their combined bounding volume
/// (transformed relative position has norm < 1).
pub fn detect_collision(a: &NeighborSnapshot, b: &NeighborSnapshot) -> bool {
    combined_volume(a, b).contains(&(b.r - a.r))
}

/// Episode summary statistics (Table IV columns plus solver percentiles).
pub fn metrics(result: &EpisodeResult) -> MetricsSummary {
    let n = result.path_lengths.len().max(1) as f64;
    let completed: Vec<f64> = result.times_to_goal.iter().flatten().copied().collect();
    let mut solve_ms: Vec<f64> = result.solve_times.iter().map(|s| s * 1e3).collect();
    solve_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    MetricsSummary {
        mean_path_length: result.path_lengths.iter().sum::<f64>() / n,
        mean_time_to_goal: if completed.is_empty() {
            f64::NAN
        } else {
            completed.iter().sum::<f64>() / completed.len() as f64
        },
        completed: completed.len(),
        min_separation: result.min_separation,
        mean_jerk_rms: result.jerk_rms.iter().sum::<f64>() / n,
        solve_ms_p50: percentile(&solve_ms, 0.50),
        solve_ms_p95: percentile(&solve_ms, 0.95),
        solve_ms_p99: percentile(&solve_ms, 0.99),
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn agent_snapshot(id: usize, r: Vec3, v: Vec3, attitude: (f64, f64)) -> NeighborSnapshot {
    NeighborSnapshot {
        id,
        r,
        v,
        attitude,
        volume: BoundingVolume::default_agent_ellipsoid(),
        pos_cov: Matrix3::zeros(),
        vel_cov: Matrix3::zeros(),
        is_agent: true,
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream keyed by (tick, observer, target) so measurement noise does not
/// depend on the order agents are updated in.
fn noise_rng(seed: u64, tick: usize, observer: usize, target: usize) -> ChaCha8Rng {
    let mut k = seed;
    for w in [tick as u64 + 1, observer as u64 + 1, target as u64 + 1] {
        k = splitmix64(k ^ w);
    }
    ChaCha8Rng::seed_from_u64(k)
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vec3 {
    Vec3::new(std_normal(rng), std_normal(rng), std_normal(rng)) * sigma
}

struct AgentRuntime {
    qs: QuadState,
    /// Thrust currently applied (used to recover the flat acceleration).
    thrust: f64,
    reference: Vec<FlatState>,
    goal: Vec3,
    tracks: BTreeMap<usize, KalmanTrack>,
    warm: Option<DVector<f64>>,
    predicted: Option<Vec<FlatState>>,
    cmd: AttitudeCommand,
    time_to_goal: Option<f64>,
    trace: Vec<TraceSample>,
}

/// World view frozen at the start of a tick.
struct WorldSnapshot {
    agents: Vec<(Vec3, Vec3, (f64, f64))>,
    obstacles: Vec<(Vec3, Vec3, f64)>,
}

/// Runs one episode of the scenario with the selected planner.
///
/// Deterministic given the scenario (including its seed): identical calls
/// produce identical results. Timeout is reported in the result; dynamics
/// chart exits and unrecoverable planner failures abort the episode.
pub fn run_episode(scn: &Scenario, method: Method) -> Result<EpisodeResult, SimError> {
    scn.validate()?;
    let params = scn.params;
    let cfg = scn.mpc.to_config();
    let dt = cfg.dt;
    let dt_sub = dt / SUBSTEPS_PER_TICK as f64;
    let model = mpc::discretize(dt);
    let hcfg = HorizonConfig {
        n_steps: cfg.n,
        dt,
        tau: scn.tau,
        sensing_radius: scn.sensing_radius,
        neighbor_cap: scn.neighbor_cap,
        ..HorizonConfig::default()
    };
    let q_proc = default_process_noise();
    let r_meas = noise_from_sigmas(scn.noise.sigma_p, scn.noise.sigma_v);

    let n_agents = scn.agents.len();
    let mut agents: Vec<AgentRuntime> = scn
        .agents
        .iter()
        .map(|spec| {
            let reference = spec.build(dt);
            let goal = reference.last().unwrap().r;
            AgentRuntime {
                qs: QuadState::at_rest(reference[0].r),
                thrust: params.hover_thrust(),
                reference,
                goal,
                tracks: BTreeMap::new(),
                warm: None,
                predicted: None,
                cmd: AttitudeCommand::hover(&params),
                time_to_goal: None,
                trace: Vec::new(),
            }
        })
        .collect();
    let ref_ticks: Vec<usize> = agents.iter().map(|a| a.reference.len() - 1).collect();
    let max_ref_ticks = *ref_ticks.iter().max().unwrap();
    let timeout_ticks =
        ((TIMEOUT_FACTOR * max_ref_ticks as f64).ceil() as usize).max(max_ref_ticks + 1);

    let mut min_separation = f64::INFINITY;
    let mut collision_pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut solve_times = Vec::new();
    let mut timed_out = true;

    for tick in 0..timeout_ticks {
        let t = tick as f64 * dt;
        let snapshot = WorldSnapshot {
            agents: agents
                .iter()
                .map(|a| (a.qs.r, a.qs.v, (a.qs.phi, a.qs.theta)))
                .collect(),
            obstacles: scn
                .obstacles
                .iter()
                .map(|o| (Vec3::from(o.start) + Vec3::from(o.vel) * t, Vec3::from(o.vel), o.radius))
                .collect(),
        };

        let mut tick_solve = 0.0;
        for i in 0..n_agents {
            let elapsed = plan_agent(
                i, tick, t, &mut agents[i], &snapshot, scn, &params, &cfg, &model, &hcfg,
                &q_proc, &r_meas, method,
            )?;
            tick_solve += elapsed;
        }
        solve_times.push(tick_solve);

        // lockstep 1 kHz truth advance with collision screening
        for _ in 0..SUBSTEPS_PER_TICK {
            for (i, ag) in agents.iter_mut().enumerate() {
                ag.qs = dynamics::step_truth(&ag.qs, &ag.cmd, dt_sub, &params).map_err(|e| {
                    SimError::Abort {
                        agent: i,
                        t,
                        source: e,
                    }
                })?;
            }
            for i in 0..n_agents {
                let si = agent_snapshot(
                    i,
                    agents[i].qs.r,
                    agents[i].qs.v,
                    (agents[i].qs.phi, agents[i].qs.theta),
                );
                for j in (i + 1)..n_agents {
                    let sj = agent_snapshot(
                        j,
                        agents[j].qs.r,
                        agents[j].qs.v,
                        (agents[j].qs.phi, agents[j].qs.theta),
                    );
                    min_separation = min_separation.min((sj.r - si.r).norm());
                    if detect_collision(&si, &sj) {
                        collision_pairs.insert((i, j));
                    }
                }
                for (k, ob) in snapshot.obstacles.iter().enumerate() {
                    let so = NeighborSnapshot {
                        id: n_agents + k,
                        r: ob.0,
                        v: ob.1,
                        attitude: (0.0, 0.0),
                        volume: BoundingVolume::Sphere { radius: ob.2 },
                        pos_cov: Matrix3::zeros(),
                        vel_cov: Matrix3::zeros(),
                        is_agent: false,
                    };
                    if detect_collision(&si, &so) {
                        collision_pairs.insert((i, n_agents + k));
                    }
                }
            }
        }

        let t_next = (tick + 1) as f64 * dt;
        for (i, ag) in agents.iter_mut().enumerate() {
            if ag.time_to_goal.is_none()
                && tick + 1 >= ref_ticks[i]
                && (ag.qs.r - ag.goal).norm() < GOAL_POS_TOL
                && ag.qs.v.norm() < GOAL_SPEED_TOL
            {
                ag.time_to_goal = Some(t_next);
            }
        }
        if agents.iter().all(|a| a.time_to_goal.is_some()) {
            timed_out = false;
            break;
        }
    }

    let path_lengths = agents
        .iter()
        .map(|a| {
            a.trace
                .windows(2)
                .map(|w| (w[1].state.r - w[0].state.r).norm())
                .sum::<f64>()
        })
        .collect();
    let jerk_rms = agents
        .iter()
        .map(|a| {
            let diffs: Vec<f64> = a
                .trace
                .windows(2)
                .map(|w| ((w[1].accel - w[0].accel) / dt).norm_squared())
                .collect();
            if diffs.is_empty() {
                0.0
            } else {
                (diffs.iter().sum::<f64>() / diffs.len() as f64).sqrt()
            }
        })
        .collect();
    Ok(EpisodeResult {
        collided: !collision_pairs.is_empty(),
        collision_pairs: collision_pairs.into_iter().collect(),
        path_lengths,
        times_to_goal: agents.iter().map(|a| a.time_to_goal).collect(),
        min_separation,
        jerk_rms,
        solve_times,
        timed_out,
        trajectories: agents.into_iter().map(|a| a.trace).collect(),
    })
}

/// One agent's estimation + planning cycle against the frozen snapshot.
/// Returns the planner compute time (s). Mutates only that agent.
#[allow(clippy::too_many_arguments)]
fn plan_agent(
    i: usize,
    tick: usize,
    t: f64,
    ag: &mut AgentRuntime,
    snapshot: &WorldSnapshot,
    scn: &Scenario,
    params: &VehicleParams,
    cfg: &MpcConfig,
    model: &mpc::FlatModel,
    hcfg: &HorizonConfig,
    q_proc: &nalgebra::Matrix6<f64>,
    r_meas: &nalgebra::Matrix6<f64>,
    method: Method,
) -> Result<f64, SimError> {
    let started = Instant::now();
    let n_agents = snapshot.agents.len();

    // measure every visible target and run it through the filter
    let mut neighbors = Vec::new();
    let mut targets: Vec<(usize, Vec3, Vec3, (f64, f64), BoundingVolume, bool)> = Vec::new();
    for (j, (r, v, att)) in snapshot.agents.iter().enumerate() {
        if j != i {
            targets.push((j, *r, *v, *att, BoundingVolume::default_agent_ellipsoid(), true));
        }
    }
    for (k, (r, v, radius)) in snapshot.obstacles.iter().enumerate() {
        targets.push((
            n_agents + k,
            *r,
            *v,
            (0.0, 0.0),
            BoundingVolume::Sphere { radius: *radius },
            false,
        ));
    }
    for (id, r, v, att, vol, is_agent) in targets {
        let (zr, zv) = if scn.noise.enabled {
            let mut rng = noise_rng(scn.seed, tick, i, id);
            (
                r + gaussian3(&mut rng, scn.noise.sigma_p),
                v + gaussian3(&mut rng, scn.noise.sigma_v),
            )
        } else {
            (r, v)
        };
        let z = Measurement { r: zr, v: zv };
        let track = ag.tracks.entry(id).or_insert_with(|| {
            KalmanTrack::from_first_measurement(&z, *q_proc, *r_meas, t)
        });
        if track.last_update < t {
            track.predict(t - track.last_update);
            if track.update(&z, t).is_err() {
                // ill-conditioned filter: restart from the measurement
                *track = KalmanTrack::from_first_measurement(&z, *q_proc, *r_meas, t);
            }
        }
        neighbors.push(NeighborSnapshot {
            id,
            r: track.position(),
            v: track.velocity(),
            attitude: att,
            volume: vol,
            pos_cov: track.pos_cov(),
            vel_cov: track.vel_cov(),
            is_agent,
        });
    }

    let fs0 = dynamics::flat_from_quad(&ag.qs, ag.thrust, params);
    let self_snap = agent_snapshot(i, fs0.r, fs0.v, (ag.qs.phi, ag.qs.theta));

    match method {
        Method::Dcad => {
            let self_pred: Vec<FlatState> = match &ag.predicted {
                Some(p) => {
                    let mut shifted: Vec<FlatState> = p[1..].to_vec();
                    let last = *shifted.last().unwrap();
                    shifted.push(FlatState {
                        r: last.r + last.v * cfg.dt,
                        ..last
                    });
                    shifted
                }
                None => (0..=cfg.n)
                    .map(|k| FlatState {
                        r: fs0.r + fs0.v * (k as f64 * cfg.dt),
                        ..fs0
                    })
                    .collect(),
            };
            let planes = constraints_for_horizon(&self_snap, &self_pred, &neighbors, hcfg);
            let jerk = mpc::jerk_bounds(&fs0, (ag.qs.phi, ag.qs.theta), ag.thrust, params, cfg)
                .map_err(|e| SimError::Planner {
                    agent: i,
                    t,
                    source: e,
                })?;
            let last = ag.reference.len() - 1;
            let ref_window: Vec<FlatState> = (0..=cfg.n)
                .map(|k| ag.reference[(tick + k).min(last)])
                .collect();
            let sol = mpc::build_and_solve(
                &ref_window,
                &fs0,
                &planes,
                &jerk,
                cfg,
                model,
                ag.warm.as_ref(),
            )
            .map_err(|e| SimError::Planner {
                agent: i,
                t,
                source: e,
            })?;
            if std::env::var_os("DCAD_DEBUG").is_some() && i == 0 {
                eprintln!(
                    "t={t:.1} status={:?} v0=({:.2},{:.2},{:.2}) v1=({:.2},{:.2},{:.2}) a1=({:.2},{:.2},{:.2})",
                    sol.status,
                    fs0.v.x, fs0.v.y, fs0.v.z,
                    sol.predicted[1].v.x, sol.predicted[1].v.y, sol.predicted[1].v.z,
                    sol.predicted[1].a.x, sol.predicted[1].a.y, sol.predicted[1].a.z,
                );
                for pl in &planes[0] {
                    eprintln!(
                        "  plane n=({:.3},{:.3},{:.3}) b={:.3} viol0={:.3} viol1={:.3}",
                        pl.n.x, pl.n.y, pl.n.z, pl.b,
                        pl.n.dot(&fs0.v) - pl.b,
                        pl.n.dot(&sol.predicted[1].v) - pl.b,
                    );
                }
            }
            // command the planned next state: thrust sustains the planned
            // acceleration, rates feed forward the planned jerk; saturate
            // to the acceleration box first, since an unconverged QP
            // iterate can overshoot it (and a_z < -g has no attitude)
            let mut fs_cmd = sol.predicted[1];
            for ax in 0..3 {
                fs_cmd.a[ax] = fs_cmd.a[ax].clamp(-cfg.a_max[ax], cfg.a_max[ax]);
            }
            let nu_cmd = sol.inputs[1.min(sol.inputs.len() - 1)];
            let cmd = dynamics::nonlinear_map(&fs_cmd, &nu_cmd, params).map_err(|e| {
                SimError::Abort {
                    agent: i,
                    t,
                    source: e,
                }
            })?;
            let slack_active = sol.status == MpcStatus::InfeasibleRelaxed;
            ag.warm = Some(sol.raw);
            ag.predicted = Some(sol.predicted);
            ag.cmd = cmd;
            ag.thrust = cmd.thrust;
            let elapsed = started.elapsed().as_secs_f64();
            ag.trace.push(TraceSample {
                t,
                state: ag.qs,
                accel: fs0.a,
                thrust: cmd.thrust,
                solve_ms: elapsed * 1e3,
                slack_active,
            });
            Ok(elapsed)
        }
        Method::OrcaBaseline => {
            let one_step = HorizonConfig { n_steps: 1, ..*hcfg };
            let self_pred = vec![
                fs0,
                FlatState {
                    r: fs0.r + fs0.v * cfg.dt,
                    ..fs0
                },
            ];
            let planes = constraints_for_horizon(&self_snap, &self_pred, &neighbors, &one_step);
            let last = ag.reference.len() - 1;
            let target = ag.reference[(tick + 1).min(last)];
            let mut v_pref = target.v + (target.r - fs0.r) * 1.0;
            for k in 0..3 {
                v_pref[k] = v_pref[k].clamp(-cfg.v_max[k], cfg.v_max[k]);
            }
            let v_cmd = project_velocity(&v_pref, &planes[0], &cfg.v_max);
            let mut a_des = (v_cmd - fs0.v) / cfg.dt;
            for k in 0..3 {
                a_des[k] = a_des[k].clamp(-cfg.a_max[k], cfg.a_max[k]);
            }
            let fs_cmd = FlatState {
                r: fs0.r,
                v: fs0.v,
                a: a_des,
                psi: 0.0,
            };
            let cmd = dynamics::nonlinear_map(&fs_cmd, &crate::dynamics::FlatInput::default(), params)
                .map_err(|e| SimError::Abort {
                    agent: i,
                    t,
                    source: e,
                })?;
            ag.cmd = cmd;
            ag.thrust = cmd.thrust;
            let elapsed = started.elapsed().as_secs_f64();
            ag.trace.push(TraceSample {
                t,
                state: ag.qs,
                accel: fs0.a,
                thrust: cmd.thrust,
                solve_ms: elapsed * 1e3,
                slack_active: false,
            });
            Ok(elapsed)
        }
    }
}

/// Projects the preferred velocity onto the ORCA half-planes and the
/// velocity box (small QP); falls back to v_pref when the QP fails.
fn project_velocity(v_pref: &Vec3, planes: &[crate::orca::HalfPlane], v_max: &Vec3) -> Vec3 {
    let mut a_in = DMatrix::<f64>::zeros(planes.len(), 3);
    let mut b_in = DVector::<f64>::zeros(planes.len());
    for (r, p) in planes.iter().enumerate() {
        for c in 0..3 {
            a_in[(r, c)] = p.n[c];
        }
        b_in[r] = p.b;
    }
    let qp = QuadProgram {
        h: DMatrix::identity(3, 3),
        f: DVector::from_iterator(3, (0..3).map(|k| -v_pref[k])),
        a_eq: DMatrix::zeros(0, 3),
        b_eq: DVector::zeros(0),
        a_rg: DMatrix::identity(3, 3),
        rg_lo: DVector::from_iterator(3, (0..3).map(|k| -v_max[k])),
        rg_hi: DVector::from_iterator(3, (0..3).map(|k| v_max[k])),
        a_in,
        b_in,
    };
    let sol = qp::solve(&qp, None);
    match sol.status {
        qp::QpStatus::Optimal | qp::QpStatus::MaxIter => Vec3::new(sol.x[0], sol.x[1], sol.x[2]),
        qp::QpStatus::PrimalInfeasible => *v_pref,
    }
}
