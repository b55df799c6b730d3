//! Experiment runner behind the `safexp` binary.
//!
//! `run` executes one seeded experiment and writes its artifacts to a
//! directory; `compare` aligns the episode logs of several runs of one task.

pub mod config;
pub mod output;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use safexp::explore::{run_experiment, ModelKind};
use thiserror::Error;

pub use config::parse_config;
use output::{
    write_episodes, write_json, write_trajectories, OutputPaths, RunManifest, Summary, CONFIG_FILE,
    EPISODES_FILE, MANIFEST_FILE, SUMMARY_FILE, TRAJECTORIES_FILE,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config {origin}: {message}")]
    Config { origin: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Usage(String),

    #[error("experiment failed: {0}")]
    Experiment(#[from] safexp::Error),
}

impl CliError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for numerical divergence, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Experiment(
                safexp::Error::SimulationDiverged { .. } | safexp::Error::TrainingDiverged { .. },
            ) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub model: Option<ModelKind>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: Summary,
    pub out: PathBuf,
}

impl RunReport {
    /// Process exit code: 2 when any rollout diverged.
    pub fn exit_code(&self) -> u8 {
        if self.summary.diverged_count > 0 {
            2
        } else {
            0
        }
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path.display().to_string(), e))
}

pub fn run(opts: &RunOptions) -> Result<RunReport, CliError> {
    let started_at = now();
    let origin = opts.config.display().to_string();
    let text = fs::read_to_string(&opts.config).map_err(|e| CliError::io(origin.clone(), e))?;
    let mut cfg = parse_config(&text, &origin)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(model) = opts.model {
        cfg.model = model;
    }
    fs::create_dir_all(&opts.out).map_err(|e| CliError::io(opts.out.display().to_string(), e))?;

    let result = run_experiment(&cfg)?;
    let dir = opts.out.as_path();
    write_episodes(create(&dir.join(EPISODES_FILE))?, &result.records)?;
    write_trajectories(create(&dir.join(TRAJECTORIES_FILE))?, &result)?;
    let summary = Summary::from_result(&cfg, &result);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    let snapshot = dir.join(CONFIG_FILE);
    fs::write(&snapshot, &text).map_err(|e| CliError::io(snapshot.display().to_string(), e))?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_path: origin,
        config_snapshot: text,
        seed: cfg.seed,
        model: cfg.model.name().to_string(),
        started_at,
        finished_at: now(),
        outputs: OutputPaths::in_dir(dir),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RunReport {
        summary,
        out: opts.out.clone(),
    })
}

struct RunLog {
    label: String,
    costs: Vec<String>,
    violations: Vec<String>,
}

fn read_run(dir: &Path) -> Result<(Summary, RunLog), CliError> {
    let path = dir.join(SUMMARY_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let summary: Summary = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let path = dir.join(EPISODES_FILE);
    let mut reader = csv::Reader::from_path(&path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("{}: missing column `{name}`", path.display())))
    };
    let (cost_col, viol_col) = (col("chosen_cost")?, col("violation")?);
    let mut log = RunLog {
        label: dir.file_name().map_or_else(
            || dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        ),
        costs: Vec::new(),
        violations: Vec::new(),
    };
    for row in reader.records() {
        let row = row?;
        log.costs
            .push(row.get(cost_col).unwrap_or_default().to_string());
        log.violations
            .push(row.get(viol_col).unwrap_or_default().to_string());
    }
    Ok((summary, log))
}

/// Per-episode table with `<run>_cost` and `<run>_violation` columns for each
/// run directory, written as CSV to `out`.
pub fn compare<W: std::io::Write>(dirs: &[PathBuf], out: W) -> Result<(), CliError> {
    if dirs.len() < 2 {
        return Err(CliError::Usage(
            "compare needs at least two run directories".into(),
        ));
    }
    let mut runs = Vec::with_capacity(dirs.len());
    let mut task: Option<String> = None;
    for dir in dirs {
        let (summary, mut log) = read_run(dir)?;
        match &task {
            Some(t) if *t != summary.task => {
                return Err(CliError::Usage(format!(
                    "task mismatch: {} is `{}`, expected `{t}`",
                    dir.display(),
                    summary.task
                )))
            }
            _ => task = Some(summary.task.clone()),
        }
        let taken = runs
            .iter()
            .filter(|r: &&RunLog| r.label == log.label)
            .count();
        if taken > 0 {
            log.label = format!("{}#{}", log.label, taken + 1);
        }
        runs.push(log);
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["episode".to_string()];
    for r in &runs {
        header.push(format!("{}_cost", r.label));
        header.push(format!("{}_violation", r.label));
    }
    w.write_record(&header)?;
    let rows = runs.iter().map(|r| r.costs.len()).max().unwrap_or(0);
    for i in 0..rows {
        let mut rec = vec![(i + 1).to_string()];
        for r in &runs {
            rec.push(r.costs.get(i).cloned().unwrap_or_default());
            rec.push(r.violations.get(i).cloned().unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io("csv output", e))?;
    Ok(())
}
