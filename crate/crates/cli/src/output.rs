//! Run artifacts. Floats are written with Rust's shortest round-trip
//! formatting ('.' decimal, no locale); non-finite values become empty CSV
//! cells and `null` in JSON.

use std::io::Write;
use std::path::Path;

use safexp::explore::{EpisodeRecord, EpisodeStatus, ExperimentConfig, ExperimentResult};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const EPISODES_FILE: &str = "episodes.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

pub const EPISODE_COLUMNS: [&str; 20] = [
    "episode",
    "status",
    "params",
    "chosen_cost",
    "sigma_max",
    "eps_m",
    "rho",
    "margin",
    "safe_count",
    "tracking_rms",
    "realized_cost",
    "touchdown_speed",
    "w_hat",
    "w_alarm",
    "violation",
    "dataset_size",
    "retrained",
    "moment_residual",
    "fit_converged",
    "clamp_count",
];

pub const TRAJECTORY_COLUMNS: [&str; 8] = [
    "episode",
    "t",
    "q_desired",
    "qdot_desired",
    "q_actual",
    "qdot_actual",
    "tube_lower",
    "tube_upper",
];

pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn episode_row(r: &EpisodeRecord) -> Vec<String> {
    vec![
        r.episode.to_string(),
        r.status.name().to_string(),
        r.params.map(|p| p.label()).unwrap_or_default(),
        num(r.chosen_cost),
        num(r.sigma_max),
        num(r.eps_m),
        num(r.rho),
        num(r.margin),
        r.safe_count.to_string(),
        num(r.tracking_rms),
        num(r.realized_cost),
        num(r.touchdown_speed),
        num(r.w_hat),
        r.w_alarm.to_string(),
        r.violation.to_string(),
        r.dataset_size.to_string(),
        r.retrained.to_string(),
        r.moment_residual.map(num).unwrap_or_default(),
        r.fit_converged.map(|c| c.to_string()).unwrap_or_default(),
        r.clamp_count.to_string(),
    ]
}

pub fn write_episodes<W: Write>(w: W, records: &[EpisodeRecord]) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(EPISODE_COLUMNS)?;
    for r in records {
        out.write_record(episode_row(r))?;
    }
    out.flush().map_err(|e| CliError::io("csv output", e))?;
    Ok(())
}

/// Desired vs actual position and velocity of every tracked episode, with the
/// tube `q_g ± ρ` around the desired position.
pub fn write_trajectories<W: Write>(w: W, result: &ExperimentResult) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRAJECTORY_COLUMNS)?;
    for ep in &result.tracked {
        for (t, x) in ep.rollout.times.iter().zip(&ep.rollout.states) {
            let d = ep.desired.desired_at(*t);
            out.write_record([
                ep.episode.to_string(),
                num(*t),
                num(d.q),
                num(d.qdot),
                num(x.q),
                num(x.qdot),
                num(d.q - ep.rho),
                num(d.q + ep.rho),
            ])?;
        }
    }
    out.flush().map_err(|e| CliError::io("csv output", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub status: EpisodeStatus,
    pub sigma_max: Option<f64>,
    pub eps_m: Option<f64>,
    pub w_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub model: String,
    pub seed: u64,
    pub episodes: usize,
    /// Planned cost of the last tracked candidate.
    pub final_cost: Option<f64>,
    /// Realized cost of the last tracked episode.
    pub final_realized_cost: Option<f64>,
    pub violation_count: usize,
    pub no_safe_candidate_count: usize,
    pub diverged_count: usize,
    pub w_alarm_count: usize,
    pub per_episode: Vec<EpisodeSummary>,
}

impl Summary {
    pub fn from_result(cfg: &ExperimentConfig, result: &ExperimentResult) -> Self {
        let last = result.records.iter().rev().find(|r| r.params.is_some());
        let count = |s: EpisodeStatus| result.records.iter().filter(|r| r.status == s).count();
        Self {
            task: cfg.task.name().to_string(),
            model: cfg.model.name().to_string(),
            seed: cfg.seed,
            episodes: result.records.len(),
            final_cost: last.and_then(|r| finite(r.chosen_cost)),
            final_realized_cost: last.and_then(|r| finite(r.realized_cost)),
            violation_count: result.violations(),
            no_safe_candidate_count: count(EpisodeStatus::NoSafeCandidate),
            diverged_count: count(EpisodeStatus::Diverged),
            w_alarm_count: result.records.iter().filter(|r| r.w_alarm).count(),
            per_episode: result
                .records
                .iter()
                .map(|r| EpisodeSummary {
                    episode: r.episode,
                    status: r.status,
                    sigma_max: finite(r.sigma_max),
                    eps_m: finite(r.eps_m),
                    w_hat: finite(r.w_hat),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub episodes: String,
    pub trajectories: String,
    pub summary: String,
    pub config: String,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        let p = |f: &str| dir.join(f).display().to_string();
        Self {
            episodes: p(EPISODES_FILE),
            trajectories: p(TRAJECTORIES_FILE),
            summary: p(SUMMARY_FILE),
            config: p(CONFIG_FILE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_path: String,
    /// The input config file, verbatim.
    pub config_snapshot: String,
    pub seed: u64,
    pub model: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: OutputPaths,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("summary types serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_numbers_are_blank() {
        assert_eq!(num(f64::INFINITY), "");
        assert_eq!(num(f64::NAN), "");
        assert_eq!(num(0.1), "0.1");
        assert_eq!(num(-2.5e-12), "-0.0000000000025");
    }
}
