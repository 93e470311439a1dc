//! CSV/JSON artifact emission. Episode files are written atomically
//! (temp file + rename) so partially written artifacts never appear
//! under their final names.

use std::path::Path;

use dcad::sim::{EpisodeResult, Method, MetricsSummary};
use serde::Serialize;

use crate::CliError;

pub const CSV_HEADER: &str =
    "t,agent_id,x,y,z,vx,vy,vz,ax,ay,az,phi,theta,psi,thrust,solve_ms,slack_active";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io_err = |e: std::io::Error| CliError::Io(format!("writing {}: {e}", path.display()));
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    if let Some(dir) = dir {
        // directory fsync is best-effort; renames are already ordered
        let _ = std::fs::File::open(dir).and_then(|d| d.sync_all());
    }
    Ok(())
}

/// Trajectory CSV: one row per (tick, agent), time-major.
pub fn write_episode_csv(path: &Path, result: &EpisodeResult) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(CSV_HEADER.split(','))
        .map_err(|e| CliError::Io(format!("csv: {e}")))?;
    let ticks = result
        .trajectories
        .iter()
        .map(|t| t.len())
        .max()
        .unwrap_or(0);
    for k in 0..ticks {
        for (agent_id, traj) in result.trajectories.iter().enumerate() {
            let Some(s) = traj.get(k) else { continue };
            let fields = [
                s.t.to_string(),
                agent_id.to_string(),
                s.state.r.x.to_string(),
                s.state.r.y.to_string(),
                s.state.r.z.to_string(),
                s.state.v.x.to_string(),
                s.state.v.y.to_string(),
                s.state.v.z.to_string(),
                s.accel.x.to_string(),
                s.accel.y.to_string(),
                s.accel.z.to_string(),
                s.state.phi.to_string(),
                s.state.theta.to_string(),
                s.state.psi.to_string(),
                s.thrust.to_string(),
                s.solve_ms.to_string(),
                (s.slack_active as u8).to_string(),
            ];
            wtr.write_record(&fields)
                .map_err(|e| CliError::Io(format!("csv: {e}")))?;
        }
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| CliError::Io(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub collided: bool,
    pub collision_pairs: usize,
    pub timed_out: bool,
    pub metrics: MetricsSummary,
    #[serde(skip)]
    pub solve_times_s: Vec<f64>,
}

impl EpisodeSummary {
    pub fn new(seed: u64, result: &EpisodeResult) -> Self {
        Self {
            seed,
            collided: result.collided,
            collision_pairs: result.collision_pairs.len(),
            timed_out: result.timed_out,
            metrics: dcad::sim::metrics(result),
            solve_times_s: result.solve_times.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    fn over(values: impl Iterator<Item = f64>) -> Stats {
        let vals: Vec<f64> = values.filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            return Stats {
                mean: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        Stats {
            mean: vals.iter().sum::<f64>() / vals.len() as f64,
            min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
            max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub method: Method,
    pub episodes: usize,
    pub seed_base: u64,
    pub collision_episodes: usize,
    pub timeout_episodes: usize,
    /// Stats over per-episode mean path lengths (m).
    pub path_length: Stats,
    /// Stats over per-episode mean times to goal (s).
    pub time_to_goal: Stats,
    pub min_separation: f64,
    /// Percentiles over all per-tick total planner times, pooled (ms).
    pub solve_ms_p50: f64,
    pub solve_ms_p95: f64,
    pub solve_ms_p99: f64,
    pub per_episode: Vec<EpisodeSummary>,
}

pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

pub fn aggregate(
    scenario: &str,
    method: Method,
    seed_base: u64,
    episodes: Vec<EpisodeSummary>,
) -> RunSummary {
    let mut pooled_ms: Vec<f64> = episodes
        .iter()
        .flat_map(|e| e.solve_times_s.iter().map(|s| s * 1e3))
        .collect();
    pooled_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    RunSummary {
        scenario: scenario.to_string(),
        method,
        episodes: episodes.len(),
        seed_base,
        collision_episodes: episodes.iter().filter(|e| e.collided).count(),
        timeout_episodes: episodes.iter().filter(|e| e.timed_out).count(),
        path_length: Stats::over(episodes.iter().map(|e| e.metrics.mean_path_length)),
        time_to_goal: Stats::over(episodes.iter().map(|e| e.metrics.mean_time_to_goal)),
        min_separation: episodes
            .iter()
            .map(|e| e.metrics.min_separation)
            .fold(f64::INFINITY, f64::min),
        solve_ms_p50: percentile(&pooled_ms, 50.0),
        solve_ms_p95: percentile(&pooled_ms, 95.0),
        solve_ms_p99: percentile(&pooled_ms, 99.0),
        per_episode: episodes,
    }
}

pub fn write_summary_json(path: &Path, summary: &RunSummary) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(summary)
        .map_err(|e| CliError::Io(format!("json: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
