//! The episodic safe-exploration loop.
//!
//! Each episode scores every pool candidate: fit a KDE on the candidate's
//! grid, take `σ_m = max σ(x_g(t))` under the current model with ratios
//! `r̂ = P̂_src / P̂_trg`, set `ε_m = β σ_m` and keep the candidate if its
//! tube of radius `γ ε_m` fits in the safety set. The cheapest safe
//! candidate is tracked with `d̂ = μ(x)`, the rollout is sampled into the
//! dataset, and the model is retrained.
//!
//! All randomness comes from one generator seeded with `seed`. Draws happen
//! in this order per episode: label noise for the new samples, then the
//! network initialization of a cold fit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{certify_trajectory, eps_m_from_sigma, gamma, Certification, TubeParams};
use crate::controller::{simulate_closed_loop, ControllerGains, Rollout, RolloutStatus};
use crate::density_ratio::{
    max_ratio_on_traj, ratio_profile, Bandwidth, KdeModel, RatioConfig, ShiftContext,
};
use crate::domain::{
    landing_pool, pendulum_pool, Dataset, DesiredTrajectory, PoolParams, SafetySet, State,
    TOUCHDOWN_THRESHOLD,
};
use crate::dynamics::{DroneParams, MixedModel, PendulumParams, Plant};
use crate::error::{invalid, Error, Result};
use crate::gp_baseline::{gp_fit, GpHyper, GpModel, KernelKind};
use crate::robust_regression::{
    fit, BaseDistribution, FitReport, Gaussian, RobustModel, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pendulum,
    Landing,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Pendulum => "pendulum",
            Task::Landing => "landing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Robust,
    GpRbf,
    GpMatern,
    /// Ground-truth residual with zero variance (diagnostic).
    Oracle,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Robust => "robust",
            ModelKind::GpRbf => "gp_rbf",
            ModelKind::GpMatern => "gp_matern",
            ModelKind::Oracle => "oracle",
        }
    }
}

/// Candidate pool description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolSpec {
    Pendulum {
        amplitudes: Vec<f64>,
    },
    /// Candidates ordered by hover height ascending, then rate descending.
    Landing {
        rates: Vec<f64>,
        hover_heights: Vec<f64>,
    },
}

impl PoolSpec {
    pub fn build(&self, dt: f64, horizon: f64) -> Result<Vec<DesiredTrajectory>> {
        match self {
            PoolSpec::Pendulum { amplitudes } => pendulum_pool(amplitudes, dt, horizon),
            PoolSpec::Landing {
                rates,
                hover_heights,
            } => {
                let mut hs = hover_heights.clone();
                hs.sort_by(f64::total_cmp);
                let mut cs = rates.clone();
                cs.sort_by(|a, b| b.total_cmp(a));
                let pairs: Vec<(f64, f64)> = hs
                    .iter()
                    .flat_map(|h| cs.iter().map(move |c| (*c, *h)))
                    .collect();
                landing_pool(&pairs, dt, horizon)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    pub episodes: usize,
    pub seed: u64,
    pub beta: f64,
    pub base: BaseDistribution,
    pub gains: ControllerGains,
    pub plant: Plant,
    pub safety: SafetySet,
    pub pool: PoolSpec,
    /// Candidate grid step (s).
    pub dt_grid: f64,
    /// Integrator step (s); must divide `dt_grid`.
    pub dt_sim: f64,
    pub horizon: f64,
    pub ratio: RatioConfig,
    /// Alarm threshold on the logged `Ŵ`.
    pub w_max: f64,
    pub train: TrainConfig,
    pub gp: GpHyper,
    /// Rate at which rollouts are sampled into the dataset (Hz).
    pub sample_hz: f64,
    /// Standard deviation of Gaussian noise added to residual labels.
    pub label_noise_std: f64,
    /// Evenly strided cap on samples used for training and the source KDE.
    pub max_train_points: usize,
    /// Evenly strided cap on candidate grid points used for the target KDE.
    pub max_target_points: usize,
    /// Cap on GP training points.
    pub max_gp_points: usize,
    pub warm_start: bool,
    /// Track the largest-margin candidate when none is certified (ablation only).
    pub track_safest_when_none: bool,
}

impl ExperimentConfig {
    pub fn defaults(task: Task) -> Self {
        let common = |plant, safety, pool, gains, beta, sigma0_sq, horizon| Self {
            task,
            model: ModelKind::Robust,
            episodes: 15,
            seed: 0,
            beta,
            base: BaseDistribution {
                mu0: 0.0,
                sigma0_sq,
            },
            gains,
            plant,
            safety,
            pool,
            dt_grid: 0.01,
            dt_sim: 0.01,
            horizon,
            ratio: RatioConfig::default(),
            w_max: 50.0,
            train: TrainConfig {
                epochs: 600,
                warm_epochs: 100,
                ..TrainConfig::default()
            },
            gp: GpHyper::default(),
            sample_hz: 50.0,
            label_noise_std: 0.0,
            max_train_points: 300,
            max_target_points: 150,
            max_gp_points: 100,
            warm_start: true,
            track_safest_when_none: false,
        };
        match task {
            Task::Pendulum => common(
                Plant::Pendulum(PendulumParams::default()),
                SafetySet::StateBox { q_abs_max: 1.5 },
                PoolSpec::Pendulum {
                    amplitudes: (1..=10).map(|i| i as f64 / 10.0).collect(),
                },
                ControllerGains {
                    k: 1.0,
                    lambda: 3.0,
                },
                0.5,
                0.5,
                20.0,
            ),
            Task::Landing => common(
                Plant::Drone(DroneParams::default()),
                SafetySet::TouchdownSpeed {
                    qdot_min_at_ground: -1.0,
                    ground: 0.0,
                },
                PoolSpec::Landing {
                    rates: (1..=12).map(|i| i as f64 * 0.25).collect(),
                    hover_heights: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                },
                ControllerGains {
                    k: 4.0,
                    lambda: 3.0,
                },
                1.0,
                1.0,
                10.0,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(invalid("episodes", "must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta", "must be positive"));
        }
        self.base.validate()?;
        self.gains.validate()?;
        self.plant.validate()?;
        self.safety.validate()?;
        self.ratio.validate()?;
        self.train.validate()?;
        self.gp.validate()?;
        match (self.task, &self.plant, &self.safety, &self.pool) {
            (
                Task::Pendulum,
                Plant::Pendulum(_),
                SafetySet::StateBox { .. },
                PoolSpec::Pendulum { .. },
            )
            | (
                Task::Landing,
                Plant::Drone(_),
                SafetySet::TouchdownSpeed { .. },
                PoolSpec::Landing { .. },
            ) => {}
            _ => {
                return Err(invalid(
                    "task",
                    "plant, safety set and pool must all match the task",
                ))
            }
        }
        for (field, v) in [
            ("dt_grid", self.dt_grid),
            ("dt_sim", self.dt_sim),
            ("horizon", self.horizon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, "must be positive"));
            }
        }
        let ratio = self.dt_grid / self.dt_sim;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio || ratio.round() < 1.0 {
            return Err(invalid("dt_sim", "must divide dt_grid"));
        }
        if !(self.w_max > 0.0) {
            return Err(invalid("w_max", "must be positive"));
        }
        if !(self.sample_hz > 0.0 && self.sample_hz * self.dt_sim <= 1.0) {
            return Err(invalid(
                "sample_hz",
                "must be positive and at most 1/dt_sim",
            ));
        }
        if !(self.label_noise_std >= 0.0 && self.label_noise_std.is_finite()) {
            return Err(invalid("label_noise_std", "must be nonnegative"));
        }
        if self.max_train_points < 2 || self.max_target_points < 2 || self.max_gp_points < 1 {
            return Err(invalid("max_train_points", "subsample caps too small"));
        }
        Ok(())
    }

    pub fn tube(&self) -> Result<TubeParams> {
        TubeParams::scalar(self.plant.mass(0.0), self.gains.k, self.gains.lambda)
    }
}

/// The residual model in use, exposing `(μ, σ²)` of the residual.
#[derive(Debug, Clone)]
pub enum Learner {
    /// Untrained model `N(μ0, σ0²)`.
    Prior(BaseDistribution),
    Robust(Box<RobustModel>),
    Gp(Box<GpModel>),
    /// Ground truth with zero variance.
    Oracle(Plant),
}

impl Learner {
    pub fn predict(&self, x: [f64; 2], shift: &ShiftContext) -> Gaussian {
        let r = if self.uses_ratio() {
            shift.ratio(&x)
        } else {
            1.0
        };
        self.predict_with_ratio(x, r)
    }

    /// Prediction with the ratio supplied by the caller.
    pub fn predict_with_ratio(&self, x: [f64; 2], r: f64) -> Gaussian {
        match self {
            Learner::Prior(b) => Gaussian {
                mean: b.mu0,
                var: b.sigma0_sq,
            },
            Learner::Robust(m) => m.predict_dim(x, r, 0),
            Learner::Gp(g) => {
                let (mean, var) = g.predict_dim(x, 0);
                Gaussian { mean, var }
            }
            Learner::Oracle(p) => Gaussian {
                mean: p.true_residual(State::new(x[0], x[1])),
                var: 0.0,
            },
        }
    }

    /// Whether predictions depend on the density ratio.
    fn uses_ratio(&self) -> bool {
        matches!(self, Learner::Robust(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Tracked,
    NoSafeCandidate,
    /// Ablation mode: no candidate certified, the largest-margin one was tracked.
    TrackedUncertified,
    Diverged,
}

impl EpisodeStatus {
    pub fn name(&self) -> &'static str {
        match self {
            EpisodeStatus::Tracked => "tracked",
            EpisodeStatus::NoSafeCandidate => "no_safe_candidate",
            EpisodeStatus::TrackedUncertified => "tracked_uncertified",
            EpisodeStatus::Diverged => "diverged",
        }
    }
}

/// Certification result for one pool candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateEval {
    pub sigma_max: f64,
    pub eps_m: f64,
    pub rho: f64,
    pub certification: Certification,
    /// Unclipped `max_t P̂_trg / P̂_src` on the candidate; 1 without source data.
    pub w_hat: f64,
}

/// Per-episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// 1-based.
    pub episode: usize,
    pub status: EpisodeStatus,
    pub params: Option<PoolParams>,
    /// Planned cost of the chosen candidate.
    pub chosen_cost: f64,
    pub sigma_max: f64,
    pub eps_m: f64,
    /// Tube radius `γ ε_m`.
    pub rho: f64,
    pub margin: f64,
    pub safe_count: usize,
    pub tracking_rms: f64,
    /// Pendulum: `−max |q|`; landing: first time `q ≤ ground + 0.01` (or `+inf`).
    pub realized_cost: f64,
    /// Landing only: rate at ground contact (0 when there was none).
    pub touchdown_speed: f64,
    pub w_hat: f64,
    pub w_alarm: bool,
    pub violation: bool,
    /// Dataset size after this episode.
    pub dataset_size: usize,
    pub retrained: bool,
    /// `mean(y² − μ² − σ²)` of the fit after this episode (robust model only).
    pub moment_residual: Option<f64>,
    pub fit_converged: Option<bool>,
    pub clamp_count: usize,
}

/// A tracked episode's reference, rollout and tube radius.
#[derive(Debug, Clone)]
pub struct TrackedEpisode {
    pub episode: usize,
    pub desired: DesiredTrajectory,
    pub rollout: Rollout,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<EpisodeRecord>,
    pub learner: Learner,
    pub tracked: Vec<TrackedEpisode>,
    pub dataset: Dataset,
    pub fit_reports: Vec<FitReport>,
}

impl ExperimentResult {
    pub fn violations(&self) -> usize {
        self.records.iter().filter(|r| r.violation).count()
    }

    pub fn last_tracked(&self) -> Option<&TrackedEpisode> {
        self.tracked.last()
    }
}

fn fit_kde(points: &[[f64; 2]], cap: usize) -> Result<KdeModel> {
    let n = points.len();
    let sub: Vec<[f64; 2]> = if n <= cap {
        points.to_vec()
    } else {
        (0..cap).map(|j| points[j * n / cap]).collect()
    };
    KdeModel::fit(&sub, Bandwidth::Silverman)
}

/// Scores every candidate under `learner` with source KDE `src`.
///
/// `w_hat` is filled in only when the learner needs ratios (it comes for
/// free then); otherwise it is NaN and [`candidate_w_hat`] computes it.
pub fn evaluate_candidates(
    cfg: &ExperimentConfig,
    pool: &[DesiredTrajectory],
    learner: &Learner,
    src: Option<&KdeModel>,
    gamma_val: f64,
) -> Result<Vec<CandidateEval>> {
    pool.par_iter()
        .map(|traj| {
            let xs = traj.inputs();
            if xs.is_empty() {
                return Err(Error::Empty("candidate trajectory"));
            }
            let (ratios, w_hat) = match src {
                Some(s) if learner.uses_ratio() => {
                    let trg = fit_kde(&xs, cfg.max_target_points)?;
                    ratio_profile(s, &trg, &xs, &cfg.ratio)?
                }
                Some(_) => (vec![1.0; xs.len()], f64::NAN),
                None => (
                    vec![1.0_f64.clamp(cfg.ratio.r_lo, cfg.ratio.r_hi); xs.len()],
                    1.0,
                ),
            };
            let sigma_max = xs
                .iter()
                .zip(&ratios)
                .map(|(x, r)| learner.predict_with_ratio(*x, *r).var.max(0.0).sqrt())
                .fold(0.0, f64::max);
            let eps_m = eps_m_from_sigma(sigma_max, cfg.beta);
            let certification = certify_trajectory(traj, gamma_val, eps_m, &cfg.safety);
            Ok(CandidateEval {
                sigma_max,
                eps_m,
                rho: gamma_val * eps_m,
                certification,
                w_hat,
            })
        })
        .collect()
}

/// Unclipped `Ŵ` of one candidate against the source KDE (1 without one).
pub fn candidate_w_hat(
    cfg: &ExperimentConfig,
    traj: &DesiredTrajectory,
    src: Option<&KdeModel>,
) -> Result<f64> {
    match src {
        Some(s) => {
            let xs = traj.inputs();
            max_ratio_on_traj(&fit_kde(&xs, cfg.max_target_points)?, s, &xs)
        }
        None => Ok(1.0),
    }
}

/// Index of the lowest-cost certified candidate; ties go to pool order.
pub fn choose_candidate(pool: &[DesiredTrajectory], evals: &[CandidateEval]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (t, e)) in pool.iter().zip(evals).enumerate() {
        if !e.certification.is_safe() {
            continue;
        }
        if best.is_none_or(|b| t.cost < pool[b].cost) {
            best = Some(i);
        }
    }
    best
}

/// Outcome of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub status: EpisodeStatus,
    pub evals: Vec<CandidateEval>,
    pub chosen: Option<usize>,
    pub rollout: Option<Rollout>,
    /// Shift context of the chosen candidate (used for `d̂` and retraining).
    pub shift: Option<ShiftContext>,
    pub new_data: Dataset,
}

/// One pass of the loop body: certify, choose, track, sample.
pub fn run_episode(
    cfg: &ExperimentConfig,
    pool: &[DesiredTrajectory],
    learner: &Learner,
    src: Option<&KdeModel>,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome> {
    if pool.is_empty() {
        return Err(Error::Empty("candidate pool"));
    }
    let gamma_val = gamma(&cfg.tube()?);
    let evals = evaluate_candidates(cfg, pool, learner, src, gamma_val)?;
    let mut status = EpisodeStatus::Tracked;
    let chosen = match choose_candidate(pool, &evals) {
        Some(i) => i,
        None if cfg.track_safest_when_none => {
            status = EpisodeStatus::TrackedUncertified;
            (0..pool.len())
                .max_by(|a, b| {
                    evals[*a]
                        .certification
                        .margin()
                        .total_cmp(&evals[*b].certification.margin())
                        .then(b.cmp(a))
                })
                .expect("pool is non-empty")
        }
        None => {
            return Ok(EpisodeOutcome {
                status: EpisodeStatus::NoSafeCandidate,
                evals,
                chosen: None,
                rollout: None,
                shift: None,
                new_data: Dataset::new(1),
            })
        }
    };
    let traj = &pool[chosen];
    let shift = match (src, learner.uses_ratio()) {
        (Some(s), true) => ShiftContext {
            src: Some(s.clone()),
            trg: Some(fit_kde(&traj.inputs(), cfg.max_target_points)?),
            cfg: cfg.ratio,
        },
        _ => ShiftContext::uniform(cfg.ratio),
    };
    let plant = cfg.plant;
    let d_hat = |x: State| learner.predict([x.q, x.qdot], &shift).mean;
    let truth = |_t: f64, x: State| plant.true_residual(x);
    let x0 = traj.points()[0].state();
    let rollout = simulate_closed_loop(&plant, &cfg.gains, &d_hat, &truth, traj, cfg.dt_sim, x0)?;
    if rollout.is_diverged() {
        status = EpisodeStatus::Diverged;
    }
    let new_data = if status == EpisodeStatus::Diverged {
        Dataset::new(1)
    } else {
        sample_rollout(cfg, &rollout, rng)?
    };
    Ok(EpisodeOutcome {
        status,
        evals,
        chosen: Some(chosen),
        rollout: Some(rollout),
        shift: Some(shift),
        new_data,
    })
}

/// Residual labels at `sample_hz` along the rollout.
fn sample_rollout(
    cfg: &ExperimentConfig,
    rollout: &Rollout,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let stride = ((1.0 / cfg.sample_hz) / cfg.dt_sim).round().max(1.0) as usize;
    let noise = (cfg.label_noise_std > 0.0)
        .then(|| {
            Normal::new(0.0, cfg.label_noise_std)
                .map_err(|e| invalid("label_noise_std", e.to_string()))
        })
        .transpose()?;
    let mut data = Dataset::new(1);
    for x in rollout.states.iter().step_by(stride) {
        let mut y = cfg.plant.true_residual(*x);
        if let Some(n) = &noise {
            y += n.sample(rng);
        }
        data.push([x.q, x.qdot], vec![y])?;
    }
    Ok(data)
}

fn realized_cost(cfg: &ExperimentConfig, rollout: &Rollout) -> f64 {
    match cfg.task {
        Task::Pendulum => -rollout.max_abs_q(),
        Task::Landing => {
            let ground = match cfg.safety {
                SafetySet::TouchdownSpeed { ground, .. } => ground,
                SafetySet::StateBox { .. } => 0.0,
            };
            rollout
                .states
                .iter()
                .zip(&rollout.times)
                .find(|(x, _)| x.q <= ground + TOUCHDOWN_THRESHOLD)
                .map_or(f64::INFINITY, |(_, t)| *t)
        }
    }
}

fn violates(set: &SafetySet, rollout: &Rollout) -> bool {
    rollout
        .times
        .iter()
        .zip(&rollout.states)
        .any(|(t, x)| !set.contains(*t, x.q, x.qdot))
}

/// Trains the configured learner on `data` with ratios toward `shift`.
fn retrain(
    cfg: &ExperimentConfig,
    data: &Dataset,
    shift: &ShiftContext,
    previous: &Learner,
    rng: &mut ChaCha8Rng,
) -> Result<(Learner, Option<FitReport>)> {
    match cfg.model {
        ModelKind::Robust => {
            let sub = data.strided(cfg.max_train_points);
            let warm = match previous {
                Learner::Robust(m) if cfg.warm_start => Some(m.as_ref()),
                _ => None,
            };
            let out = fit(&sub, shift, &cfg.train, cfg.base, warm, rng)?;
            Ok((Learner::Robust(Box::new(out.model)), Some(out.report)))
        }
        ModelKind::GpRbf | ModelKind::GpMatern => {
            let kind = if cfg.model == ModelKind::GpRbf {
                KernelKind::Rbf
            } else {
                KernelKind::Matern52
            };
            let sub = data.strided(cfg.max_gp_points);
            Ok((Learner::Gp(Box::new(gp_fit(&sub, kind, &cfg.gp)?)), None))
        }
        ModelKind::Oracle => Ok((Learner::Oracle(cfg.plant), None)),
    }
}

/// Runs all episodes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let pool = cfg.pool.build(cfg.dt_grid, cfg.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut learner = match cfg.model {
        ModelKind::Oracle => Learner::Oracle(cfg.plant),
        _ => Learner::Prior(cfg.base),
    };
    let mut data = Dataset::new(1);
    let mut src: Option<KdeModel> = None;
    let mut records = Vec::with_capacity(cfg.episodes);
    let mut tracked = Vec::new();
    let mut fit_reports = Vec::new();

    for episode in 1..=cfg.episodes {
        let out = run_episode(cfg, &pool, &learner, src.as_ref(), &mut rng)?;
        let safe_count = out
            .evals
            .iter()
            .filter(|e| e.certification.is_safe())
            .count();
        // Logged candidate: the chosen one, else the one closest to certification.
        let logged = out.chosen.unwrap_or_else(|| {
            (0..pool.len())
                .max_by(|a, b| {
                    out.evals[*a]
                        .certification
                        .margin()
                        .total_cmp(&out.evals[*b].certification.margin())
                        .then(b.cmp(a))
                })
                .expect("pool is non-empty")
        });
        let mut ev = out.evals[logged];
        if ev.w_hat.is_nan() {
            ev.w_hat = candidate_w_hat(cfg, &pool[logged], src.as_ref())?;
        }
        let mut rec = EpisodeRecord {
            episode,
            status: out.status,
            params: out.chosen.map(|i| pool[i].params),
            chosen_cost: out.chosen.map_or(f64::NAN, |i| pool[i].cost),
            sigma_max: ev.sigma_max,
            eps_m: ev.eps_m,
            rho: ev.rho,
            margin: ev.certification.margin(),
            safe_count,
            tracking_rms: f64::NAN,
            realized_cost: f64::NAN,
            touchdown_speed: 0.0,
            w_hat: ev.w_hat,
            w_alarm: ev.w_hat > cfg.w_max,
            violation: false,
            dataset_size: data.len(),
            retrained: false,
            moment_residual: None,
            fit_converged: None,
            clamp_count: 0,
        };
        if let (Some(i), Some(rollout)) = (out.chosen, out.rollout) {
            rec.tracking_rms = rollout.tracking_rms();
            rec.realized_cost = realized_cost(cfg, &rollout);
            rec.violation = violates(&cfg.safety, &rollout);
            rec.clamp_count = rollout.clamp_count;
            if let RolloutStatus::Touchdown { speed, .. } = rollout.status {
                rec.touchdown_speed = speed;
            }
            if !out.new_data.is_empty() {
                data.extend(&out.new_data)?;
                let sub = data.strided(cfg.max_train_points);
                let s = fit_kde(sub.inputs(), cfg.max_train_points)?;
                let shift = ShiftContext {
                    src: Some(s.clone()),
                    trg: Some(fit_kde(&pool[i].inputs(), cfg.max_target_points)?),
                    cfg: cfg.ratio,
                };
                let (next, report) = retrain(cfg, &data, &shift, &learner, &mut rng)?;
                learner = next;
                src = Some(s);
                rec.retrained = true;
                if let Some(r) = report {
                    rec.moment_residual = Some(r.moment_residual[0]);
                    rec.fit_converged = Some(r.converged);
                    fit_reports.push(r);
                }
            }
            rec.dataset_size = data.len();
            tracked.push(TrackedEpisode {
                episode,
                desired: pool[i].clone(),
                rollout,
                rho: ev.rho,
            });
        }
        records.push(rec);
    }
    Ok(ExperimentResult {
        records,
        learner,
        tracked,
        dataset: data,
        fit_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::Certification;

    fn pend(c: f64) -> DesiredTrajectory {
        DesiredTrajectory::sample(PoolParams::Pendulum { amplitude: c }, 0.01, 7.0).unwrap()
    }

    fn eval_with(traj: &DesiredTrajectory, gamma_val: f64, eps_m: f64) -> CandidateEval {
        CandidateEval {
            sigma_max: eps_m,
            eps_m,
            rho: gamma_val * eps_m,
            certification: certify_trajectory(
                traj,
                gamma_val,
                eps_m,
                &SafetySet::StateBox { q_abs_max: 1.5 },
            ),
            w_hat: 1.0,
        }
    }

    #[test]
    fn singleton_safe_is_chosen() {
        let pool = vec![pend(0.4)];
        let evals = vec![eval_with(&pool[0], 0.2, 0.1)];
        assert_eq!(choose_candidate(&pool, &evals), Some(0));
    }

    #[test]
    fn oversized_tubes_leave_nothing() {
        let pool = vec![pend(0.2), pend(0.5)];
        let evals: Vec<_> = pool.iter().map(|t| eval_with(t, 0.2, 50.0)).collect();
        assert_eq!(choose_candidate(&pool, &evals), None);
    }

    #[test]
    fn three_candidate_hand_example() {
        let pool = vec![pend(0.2), pend(0.6), pend(1.0)];
        let evals: Vec<_> = pool
            .iter()
            .zip([0.1, 0.5, 4.0])
            .map(|(t, e)| eval_with(t, 0.2, e))
            .collect();
        let safe: Vec<bool> = evals.iter().map(|e| e.certification.is_safe()).collect();
        assert_eq!(safe, [true, true, false]);
        assert_eq!(choose_candidate(&pool, &evals), Some(1));
    }

    #[test]
    fn ties_follow_pool_order() {
        let pool = vec![pend(0.5), pend(0.5)];
        let evals: Vec<_> = pool.iter().map(|t| eval_with(t, 0.2, 0.1)).collect();
        assert_eq!(choose_candidate(&pool, &evals), Some(0));
        let mut evals = evals;
        evals[0].certification = Certification::Unsafe { margin: -1.0 };
        assert_eq!(choose_candidate(&pool, &evals), Some(1));
    }

    #[test]
    fn landing_pool_order() {
        let spec = PoolSpec::Landing {
            rates: vec![0.5, 1.0],
            hover_heights: vec![0.5, 0.0],
        };
        let pool = spec.build(0.01, 1.0).unwrap();
        let params: Vec<_> = pool
            .iter()
            .map(|t| (t.params.rate(), t.params.hover_height().unwrap()))
            .collect();
        assert_eq!(params, [(1.0, 0.0), (0.5, 0.0), (1.0, 0.5), (0.5, 0.5)]);
    }

    #[test]
    fn defaults_validate() {
        for task in [Task::Pendulum, Task::Landing] {
            ExperimentConfig::defaults(task).validate().unwrap();
        }
        let mut bad = ExperimentConfig::defaults(Task::Pendulum);
        bad.plant = Plant::Drone(DroneParams::default());
        assert!(bad.validate().is_err());
        let mut bad = ExperimentConfig::defaults(Task::Landing);
        bad.dt_sim = 0.003;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn no_safe_candidate_collects_nothing() {
        let mut cfg = ExperimentConfig::defaults(Task::Pendulum);
        cfg.beta = 1e3;
        cfg.episodes = 2;
        let res = run_experiment(&cfg).unwrap();
        assert!(res
            .records
            .iter()
            .all(|r| r.status == EpisodeStatus::NoSafeCandidate));
        assert!(res.dataset.is_empty() && res.tracked.is_empty());
        assert!(res.records.iter().all(|r| !r.retrained));
    }

    #[test]
    fn safest_fallback_tracks_when_enabled() {
        let mut cfg = ExperimentConfig::defaults(Task::Pendulum);
        cfg.beta = 1e3;
        cfg.episodes = 1;
        cfg.model = ModelKind::GpRbf;
        cfg.track_safest_when_none = true;
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.records[0].status, EpisodeStatus::TrackedUncertified);
        assert_eq!(
            res.records[0].params,
            Some(PoolParams::Pendulum { amplitude: 0.1 })
        );
    }
}
