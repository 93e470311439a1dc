//! Planner timing sweeps: per-agent solve time vs neighbor cap, and total
//! per-tick planning time vs agent count. Synthetic converging
//! configurations exercise the planner without running full episodes.

use std::time::Instant;

use dcad::dynamics::FlatState;
use dcad::mpc::{self, JerkBounds, MpcConfig};
use dcad::orca::{constraints_for_horizon, BoundingVolume, HorizonConfig, NeighborSnapshot};
use nalgebra::{Matrix3, Vector3};

use crate::{output, BenchArgs, CliError};

type Vec3 = Vector3<f64>;

fn snapshot(id: usize, r: Vec3, v: Vec3) -> NeighborSnapshot {
    NeighborSnapshot {
        id,
        r,
        v,
        attitude: (0.0, 0.0),
        volume: BoundingVolume::default_agent_ellipsoid(),
        pos_cov: Matrix3::identity() * 0.01,
        vel_cov: Matrix3::identity() * 0.04,
        is_agent: true,
    }
}

fn const_vel_prediction(fs0: &FlatState, n: usize, dt: f64) -> Vec<FlatState> {
    (0..=n)
        .map(|k| {
            let mut fs = *fs0;
            fs.r += fs0.v * (k as f64 * dt);
            fs
        })
        .collect()
}

/// Time one planning cycle (constraint generation + QP) for an agent at
/// the origin with `k` converging neighbors in sensing range.
pub fn plan_time_with_neighbors(k: usize, cfg: &MpcConfig) -> f64 {
    let model = mpc::discretize(cfg.dt);
    let fs0 = {
        let mut fs = FlatState::hover(Vec3::zeros());
        fs.v = Vec3::new(2.0, 0.0, 0.0);
        fs
    };
    let self_snap = snapshot(usize::MAX, fs0.r, fs0.v);
    let neighbors: Vec<NeighborSnapshot> = (0..k)
        .map(|i| {
            let ang = 2.0 * std::f64::consts::PI * i as f64 / k.max(1) as f64;
            let r = Vec3::new(4.0 * ang.cos(), 4.0 * ang.sin(), 0.1 * (i as f64 % 3.0 - 1.0));
            snapshot(i, r, -r.normalize())
        })
        .collect();
    let hcfg = HorizonConfig {
        n_steps: cfg.n,
        dt: cfg.dt,
        neighbor_cap: k.max(1),
        ..HorizonConfig::default()
    };
    let self_pred = const_vel_prediction(&fs0, cfg.n, cfg.dt);
    let reference: Vec<FlatState> = (0..=cfg.n)
        .map(|i| {
            let mut fs = fs0;
            fs.r.x += 2.0 * i as f64 * cfg.dt;
            fs
        })
        .collect();
    let jerk = JerkBounds::wide(cfg.jerk_z_max);

    let start = Instant::now();
    let planes = constraints_for_horizon(&self_snap, &self_pred, &neighbors, &hcfg);
    let sol = mpc::build_and_solve(&reference, &fs0, &planes, &jerk, cfg, &model, None)
        .expect("bench QP solvable");
    std::hint::black_box(&sol.raw);
    start.elapsed().as_secs_f64()
}

/// Time one synchronous planning tick for `n` agents converging on a
/// 40 m circle (the congested mid-exchange configuration).
pub fn tick_time_with_agents(n: usize, cap: usize, cfg: &MpcConfig) -> f64 {
    let model = mpc::discretize(cfg.dt);
    let radius = 8.0;
    let states: Vec<FlatState> = (0..n)
        .map(|i| {
            let ang = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let mut fs = FlatState::hover(Vec3::new(
                radius * ang.cos(),
                radius * ang.sin(),
                2.0 + 0.05 * (i % 5) as f64,
            ));
            fs.v = -fs.r.xy().push(0.0).normalize() * 2.0;
            fs
        })
        .collect();
    let snaps: Vec<NeighborSnapshot> = states
        .iter()
        .enumerate()
        .map(|(i, fs)| snapshot(i, fs.r, fs.v))
        .collect();
    let hcfg = HorizonConfig {
        n_steps: cfg.n,
        dt: cfg.dt,
        neighbor_cap: cap,
        ..HorizonConfig::default()
    };
    let jerk = JerkBounds::wide(cfg.jerk_z_max);

    let start = Instant::now();
    for (i, fs0) in states.iter().enumerate() {
        let neighbors: Vec<NeighborSnapshot> = snaps
            .iter()
            .filter(|s| s.id != i)
            .cloned()
            .collect();
        let self_pred = const_vel_prediction(fs0, cfg.n, cfg.dt);
        let reference: Vec<FlatState> = (0..=cfg.n)
            .map(|k| {
                let mut fs = *fs0;
                fs.r += fs0.v * (k as f64 * cfg.dt);
                fs
            })
            .collect();
        let planes = constraints_for_horizon(&snaps[i], &self_pred, &neighbors, &hcfg);
        let sol = mpc::build_and_solve(&reference, fs0, &planes, &jerk, cfg, &model, None)
            .expect("bench QP solvable");
        std::hint::black_box(&sol.raw);
    }
    start.elapsed().as_secs_f64()
}

fn median_p95(mut times_ms: Vec<f64>) -> (f64, f64) {
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (
        output::percentile(&times_ms, 50.0),
        output::percentile(&times_ms, 95.0),
    )
}

pub fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    if args.agents.is_empty() || args.neighbors.is_empty() || args.reps == 0 {
        return Err(CliError::Config("sweeps and reps must be non-empty".into()));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out.display())))?;
    let cfg = MpcConfig::default();

    let mut neigh_csv = String::from("neighbor_cap,median_ms,p95_ms\n");
    for &cap in &args.neighbors {
        plan_time_with_neighbors(cap, &cfg); // warm-up
        let times: Vec<f64> = (0..args.reps)
            .map(|_| plan_time_with_neighbors(cap, &cfg) * 1e3)
            .collect();
        let (med, p95) = median_p95(times);
        println!("neighbors {cap:>3}: median {med:7.3} ms  p95 {p95:7.3} ms");
        neigh_csv.push_str(&format!("{cap},{med},{p95}\n"));
    }
    output::write_atomic(&args.out.join("bench_neighbors.csv"), neigh_csv.as_bytes())?;

    let reps = args.reps.min(10).max(3);
    let mut agent_csv = String::from("agents,total_tick_median_ms,total_tick_p95_ms\n");
    for &n in &args.agents {
        if n == 0 {
            return Err(CliError::Config("--agents entries must be >= 1".into()));
        }
        tick_time_with_agents(n, 10, &cfg); // warm-up
        let times: Vec<f64> = (0..reps)
            .map(|_| tick_time_with_agents(n, 10, &cfg) * 1e3)
            .collect();
        let (med, p95) = median_p95(times);
        println!("agents {n:>3}: tick median {med:8.3} ms  p95 {p95:8.3} ms");
        agent_csv.push_str(&format!("{n},{med},{p95}\n"));
    }
    output::write_atomic(&args.out.join("bench_agents.csv"), agent_csv.as_bytes())?;
    Ok(())
}
