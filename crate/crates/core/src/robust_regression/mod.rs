//! Robust regression under covariate shift with learned features.
//!
//! The predictive distribution is `P(y|x) ∝ P₀(y|x) exp(r(x) θᵀΦ(x, y))` with
//! base `P₀ = N(μ0, σ0²)` and sufficient statistics `Φ(x, y) = [φ(x) y; −y²]`.
//! Completing the square in `y` gives a Gaussian with
//!
//! ```text
//! σ²(x) = (σ0⁻² + 2 r(x) θ_y)⁻¹
//! μ(x)  = σ²(x) (μ0 / σ0² + r(x) θ_φᵀ φ(x))
//! ```
//!
//! so the variance shrinks only where the density ratio `r` is large, i.e.
//! where the training data covers the target region.
//!
//! Training minimizes the target-domain log-loss estimated on source samples,
//! each sample's conditional NLL weighted by `1/r(x_i)`, plus the L1 slack
//! penalty `λ(‖θ_φ‖₁ + |θ_y|)` ([`robust_objective`]). The feature network is
//! trained with Adam (gradient clipping, spectral normalization after each
//! step). For fixed features the objective is convex in the natural
//! parameters `(θ_φ, θ_y)`, so the heads are periodically solved with a
//! damped Newton method; at the solution the `θ_y` stationarity condition
//! `mean(y² − μ² − σ²) = −λ` holds to solver precision.

mod checkpoint;
pub mod net;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density_ratio::ShiftContext;
use crate::domain::Dataset;
use crate::error::{invalid, Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_HEADER};
pub use net::{spectral_norm, Dense, FeatureNet};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Base distribution `N(μ0, σ0²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseDistribution {
    pub mu0: f64,
    pub sigma0_sq: f64,
}

impl BaseDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0_sq > 0.0 && self.sigma0_sq.is_finite()) || !self.mu0.is_finite() {
            return Err(invalid("base.sigma0_sq", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs for a cold start.
    pub epochs: usize,
    /// Epochs when continuing from a previous model.
    pub warm_epochs: usize,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// L1 slack penalty `λ`.
    pub lambda: f64,
    /// Floor `B` on `θ_y`.
    pub theta_y_floor: f64,
    pub hidden: Vec<usize>,
    pub features: usize,
    pub spectral_cap: f64,
    /// Newton head re-solve period in epochs.
    pub head_refresh: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 2000,
            warm_epochs: 2000,
            grad_clip: 10.0,
            lambda: 1e-3,
            theta_y_floor: 1e-2,
            hidden: vec![32, 32],
            features: 16,
            spectral_cap: 2.0,
            head_refresh: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid("train.learning_rate", "must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(invalid("train.grad_clip", "must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid("train.lambda", "must be nonnegative"));
        }
        if !(self.theta_y_floor > 0.0) {
            return Err(invalid("train.theta_y_floor", "must be positive"));
        }
        if !(self.spectral_cap > 0.0) {
            return Err(invalid("train.spectral_cap", "must be positive"));
        }
        if self.features == 0 || self.hidden.contains(&0) {
            return Err(invalid("train.hidden", "layer widths must be positive"));
        }
        if self.head_refresh == 0 {
            return Err(invalid("train.head_refresh", "must be positive"));
        }
        Ok(())
    }
}

/// Natural parameters of one output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub theta_phi: Vec<f64>,
    pub theta_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustModel {
    pub net: FeatureNet,
    pub heads: Vec<Head>,
    pub base: BaseDistribution,
    pub lambda: f64,
    pub theta_y_floor: f64,
}

impl RobustModel {
    pub fn new<R: Rng + ?Sized>(
        outputs: usize,
        base: BaseDistribution,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![2];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(cfg.features);
        let mut net = FeatureNet::new(&sizes, cfg.spectral_cap, rng);
        net.spectral_normalize(cfg.spectral_cap);
        let heads = (0..outputs)
            .map(|_| Head {
                theta_phi: vec![0.0; cfg.features],
                theta_y: 1.0_f64.max(cfg.theta_y_floor),
            })
            .collect();
        Self {
            net,
            heads,
            base,
            lambda: cfg.lambda,
            theta_y_floor: cfg.theta_y_floor,
        }
    }

    pub fn outputs(&self) -> usize {
        self.heads.len()
    }

    /// Gaussian for one head given features and ratio.
    fn head_gaussian(&self, head: &Head, phi: &[f64], r: f64) -> Gaussian {
        let inv_s0 = 1.0 / self.base.sigma0_sq;
        let s: f64 = head.theta_phi.iter().zip(phi).map(|(a, b)| a * b).sum();
        let tau = inv_s0 + 2.0 * r * head.theta_y;
        let var = 1.0 / tau;
        Gaussian {
            mean: var * (self.base.mu0 * inv_s0 + r * s),
            var,
        }
    }

    /// Predictions for every output dimension at `x` with ratio `r`.
    pub fn predict_with_ratio(&self, x: [f64; 2], r: f64) -> Vec<Gaussian> {
        let phi = self.net.features(&x);
        self.heads
            .iter()
            .map(|h| self.head_gaussian(h, &phi, r))
            .collect()
    }

    pub fn predict_dim(&self, x: [f64; 2], r: f64, dim: usize) -> Gaussian {
        let phi = self.net.features(&x);
        self.head_gaussian(&self.heads[dim], &phi, r)
    }

    /// Predictions with the ratio taken from a source/target context.
    pub fn predict(&self, x: [f64; 2], shift: &ShiftContext) -> Vec<Gaussian> {
        self.predict_with_ratio(x, shift.ratio(&x))
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
            + self
                .heads
                .iter()
                .map(|h| h.theta_phi.len() + 1)
                .sum::<usize>()
    }

    /// Flat parameter vector: network layers (`W`, `b`), then each head's
    /// `θ_φ` followed by `θ_y`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        self.net.write_params(&mut p);
        for h in &self.heads {
            p.extend_from_slice(&h.theta_phi);
            p.push(h.theta_y);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut off = self.net.read_params(p);
        for h in &mut self.heads {
            let k = h.theta_phi.len();
            h.theta_phi.copy_from_slice(&p[off..off + k]);
            h.theta_y = p[off + k];
            off += k + 1;
        }
    }

    fn head_offsets(&self) -> Vec<usize> {
        let mut off = self.net.param_count();
        self.heads
            .iter()
            .map(|h| {
                let o = off;
                off += h.theta_phi.len() + 1;
                o
            })
            .collect()
    }

    fn penalty(&self) -> f64 {
        self.lambda
            * self
                .heads
                .iter()
                .map(|h| h.theta_phi.iter().map(|v| v.abs()).sum::<f64>() + h.theta_y.abs())
                .sum::<f64>()
    }
}

fn check_data(model: &RobustModel, data: &Dataset, ratios: &[f64]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if ratios.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: ratios.len(),
        });
    }
    if data.outputs() != model.outputs() {
        return Err(Error::DimensionMismatch {
            expected: model.outputs(),
            got: data.outputs(),
        });
    }
    Ok(())
}

/// Mean conditional NLL over samples (summed over output dimensions) plus the
/// L1 penalty.
pub fn nll_loss(model: &RobustModel, data: &Dataset, ratios: &[f64]) -> Result<f64> {
    check_data(model, data, ratios)?;
    Ok(weighted_loss(model, data, ratios, |_| 1.0))
}

/// Gradient of [`nll_loss`] with respect to [`RobustModel::params`].
pub fn loss_and_grad(
    model: &RobustModel,
    data: &Dataset,
    ratios: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_data(model, data, ratios)?;
    Ok(weighted_loss_and_grad(model, data, ratios, |_| 1.0))
}

/// The training objective: the target-domain log-loss estimated on source
/// samples by importance weights `1/r̂(x_i) = P̂_trg/P̂_src`, plus the L1
/// penalty. Its stationarity in `θ` is the source moment-matching condition
/// `mean(Φ(x_i, y_i)) − mean(E_P[Φ | x_i]) = ±λ`.
pub fn robust_objective(model: &RobustModel, data: &Dataset, ratios: &[f64]) -> Result<f64> {
    check_data(model, data, ratios)?;
    check_ratios(ratios)?;
    Ok(weighted_loss(model, data, ratios, |r| 1.0 / r))
}

/// Gradient of [`robust_objective`].
pub fn robust_objective_and_grad(
    model: &RobustModel,
    data: &Dataset,
    ratios: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_data(model, data, ratios)?;
    check_ratios(ratios)?;
    Ok(weighted_loss_and_grad(model, data, ratios, |r| 1.0 / r))
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.iter().all(|r| *r > 0.0 && r.is_finite()) {
        Ok(())
    } else {
        Err(invalid(
            "ratios",
            "training ratios must be positive and finite",
        ))
    }
}

fn weighted_loss(
    model: &RobustModel,
    data: &Dataset,
    ratios: &[f64],
    weight: impl Fn(f64) -> f64,
) -> f64 {
    let mut total = 0.0;
    for (i, (x, y)) in data.inputs().iter().zip(data.targets()).enumerate() {
        let phi = model.net.features(x);
        let w = weight(ratios[i]);
        for (h, &yj) in model.heads.iter().zip(y) {
            let g = model.head_gaussian(h, &phi, ratios[i]);
            total += w * (0.5 * (LN_2PI + g.var.ln()) + 0.5 * (yj - g.mean).powi(2) / g.var);
        }
    }
    total / data.len() as f64 + model.penalty()
}

fn weighted_loss_and_grad(
    model: &RobustModel,
    data: &Dataset,
    ratios: &[f64],
    weight: impl Fn(f64) -> f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.param_count()];
    let head_off = model.head_offsets();
    let k = model.net.feature_dim();
    let mut total = 0.0;
    let mut d_phi = vec![0.0; k];
    for (i, (x, y)) in data.inputs().iter().zip(data.targets()).enumerate() {
        let r = ratios[i];
        let w = weight(r);
        let trace = model.net.trace(x);
        let phi = trace.features();
        d_phi.iter_mut().for_each(|v| *v = 0.0);
        for ((h, &yj), &off) in model.heads.iter().zip(y).zip(&head_off) {
            let g = model.head_gaussian(h, phi, r);
            total += w * (0.5 * (LN_2PI + g.var.ln()) + 0.5 * (yj - g.mean).powi(2) / g.var);
            // ∂/∂η = μ − y, ∂/∂τ = (y² − μ² − σ²)/2 with η = μ0/σ0² + r θ_φᵀφ,
            // τ = σ0⁻² + 2 r θ_y.
            let d_eta = w * (g.mean - yj);
            let d_tau = w * 0.5 * (yj * yj - g.mean * g.mean - g.var);
            for c in 0..k {
                grad[off + c] += d_eta * r * phi[c];
                d_phi[c] += d_eta * r * h.theta_phi[c];
            }
            grad[off + k] += d_tau * 2.0 * r;
        }
        model.net.backward(&trace, &d_phi, &mut grad);
    }
    let n = data.len() as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    for (h, &off) in model.heads.iter().zip(&head_off) {
        for c in 0..k {
            grad[off + c] += model.lambda * sign(h.theta_phi[c]);
        }
        grad[off + k] += model.lambda * sign(h.theta_y);
    }
    (total / n + model.penalty(), grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Diagnostics of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub epochs: usize,
    /// Per output dimension: `mean(y² − μ² − σ²)` on the training set.
    pub moment_residual: Vec<f64>,
    /// Per output dimension: `mean(y² − μ² − σ²) + λ`, the `θ_y` component of
    /// the objective's gradient (zero at an interior optimum).
    pub stationarity_gap: Vec<f64>,
    /// Per output dimension: largest per-sample `|y² − μ² − σ²|` (logged only).
    pub max_sample_residual: Vec<f64>,
    /// True when every head solve reached stationarity.
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: RobustModel,
    pub report: FitReport,
}

/// Trains a model on `data` with training ratios `r̂(x_i)` from `shift`.
///
/// Starts from `warm` when given (keeping its architecture), otherwise from
/// a fresh initialization drawn from `rng`.
pub fn fit<R: Rng + ?Sized>(
    data: &Dataset,
    shift: &ShiftContext,
    cfg: &TrainConfig,
    base: BaseDistribution,
    warm: Option<&RobustModel>,
    rng: &mut R,
) -> Result<FitOutcome> {
    cfg.validate()?;
    base.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let ratios: Vec<f64> = data.inputs().iter().map(|x| shift.ratio(x)).collect();
    check_ratios(&ratios)?;
    let (mut model, epochs) = match warm {
        Some(m) if m.outputs() == data.outputs() => {
            let mut m = m.clone();
            m.base = base;
            m.lambda = cfg.lambda;
            m.theta_y_floor = cfg.theta_y_floor;
            (m, cfg.warm_epochs)
        }
        _ => (RobustModel::new(data.outputs(), base, cfg, rng), cfg.epochs),
    };
    fit_heads(&mut model, data, &ratios)?;
    train_features(&mut model, data, &ratios, cfg, epochs)?;
    let converged = fit_heads(&mut model, data, &ratios)?;
    let final_loss = robust_objective(&model, data, &ratios)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: epochs });
    }
    let report = moment_report(&model, data, &ratios, final_loss, epochs, converged);
    Ok(FitOutcome { model, report })
}

/// Adam over all parameters with cosine-decayed step size.
fn train_features(
    model: &mut RobustModel,
    data: &Dataset,
    ratios: &[f64],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<()> {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let np = model.param_count();
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let head_off = model.head_offsets();
    let k = model.net.feature_dim();
    for epoch in 0..epochs {
        let (loss, mut g) = robust_objective_and_grad(model, data, ratios)?;
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            g.iter_mut().for_each(|x| *x *= s);
        }
        let lr = 0.5
            * cfg.learning_rate
            * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos());
        let t = epoch as i32 + 1;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let mut p = model.params();
        for i in 0..np {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        for &off in &head_off {
            p[off + k] = p[off + k].max(model.theta_y_floor);
        }
        model.set_params(&p);
        model.net.spectral_normalize(model.net.spectral_cap);
        if (epoch + 1) % cfg.head_refresh == 0 && epoch + 1 < epochs {
            fit_heads(model, data, ratios)?;
        }
    }
    Ok(())
}

/// Minimizes [`robust_objective`] over every head exactly for the current
/// (frozen) features. Returns whether all solves reached stationarity.
pub fn fit_heads(model: &mut RobustModel, data: &Dataset, ratios: &[f64]) -> Result<bool> {
    check_data(model, data, ratios)?;
    check_ratios(ratios)?;
    let feats: Vec<Vec<f64>> = data
        .inputs()
        .iter()
        .map(|x| model.net.features(x))
        .collect();
    let mut all = true;
    for dim in 0..model.outputs() {
        let y = data.target_column(dim);
        let mut head = model.heads[dim].clone();
        all &= solve_head(
            &feats,
            ratios,
            &y,
            &mut head,
            model.base,
            model.lambda,
            model.theta_y_floor,
        );
        model.heads[dim] = head;
    }
    Ok(all)
}

struct HeadEval {
    /// Penalized loss.
    loss: f64,
    /// Gradient of the smooth (unpenalized) part.
    grad: DVector<f64>,
    hess: Option<DMatrix<f64>>,
}

fn eval_head(
    feats: &[Vec<f64>],
    ratios: &[f64],
    y: &[f64],
    p: &DVector<f64>,
    base: BaseDistribution,
    lambda: f64,
    with_hess: bool,
) -> HeadEval {
    let k = p.len() - 1;
    let n = feats.len() as f64;
    let inv_s0 = 1.0 / base.sigma0_sq;
    let theta_y = p[k];
    let mut loss = 0.0;
    let mut grad = DVector::zeros(k + 1);
    let mut hess = with_hess.then(|| DMatrix::zeros(k + 1, k + 1));
    for ((phi, &r), &yi) in feats.iter().zip(ratios).zip(y) {
        // Importance weight 1/r: the chain-rule factor r cancels.
        let s: f64 = (0..k).map(|c| p[c] * phi[c]).sum();
        let tau = inv_s0 + 2.0 * r * theta_y;
        let var = 1.0 / tau;
        let mu = var * (base.mu0 * inv_s0 + r * s);
        loss += (0.5 * (LN_2PI + var.ln()) + 0.5 * (yi - mu).powi(2) * tau) / r;
        let d_eta = mu - yi;
        let d_tau = 0.5 * (yi * yi - mu * mu - var);
        for c in 0..k {
            grad[c] += d_eta * phi[c];
        }
        grad[k] += 2.0 * d_tau;
        if let Some(h) = hess.as_mut() {
            // Hessian of the log-partition in (η, τ): [[σ², −μσ²], [−μσ², μ²σ² + σ⁴/2]].
            let a = var * r;
            let b = -mu * var * 2.0 * r;
            let c_yy = (mu * mu * var + 0.5 * var * var) * 4.0 * r;
            for i in 0..k {
                for j in 0..=i {
                    h[(i, j)] += a * phi[i] * phi[j];
                }
                h[(k, i)] += b * phi[i];
            }
            h[(k, k)] += c_yy;
        }
    }
    loss /= n;
    grad /= n;
    if let Some(h) = hess.as_mut() {
        *h /= n;
        for i in 0..=k {
            for j in 0..i {
                h[(j, i)] = h[(i, j)];
            }
        }
    }
    loss += lambda * p.iter().map(|v| v.abs()).sum::<f64>();
    HeadEval { loss, grad, hess }
}

/// Minimum-norm subgradient of the penalized objective, with the `θ_y`
/// component zeroed when the floor blocks descent.
fn pseudo_gradient(
    p: &DVector<f64>,
    smooth: &DVector<f64>,
    lambda: f64,
    floor: f64,
) -> DVector<f64> {
    let k = p.len() - 1;
    let mut pg = smooth.clone();
    for c in 0..k {
        pg[c] = if p[c] != 0.0 {
            smooth[c] + lambda * sign(p[c])
        } else if smooth[c] + lambda < 0.0 {
            smooth[c] + lambda
        } else if smooth[c] - lambda > 0.0 {
            smooth[c] - lambda
        } else {
            0.0
        };
    }
    pg[k] = smooth[k] + lambda * sign(p[k]);
    if p[k] <= floor && pg[k] > 0.0 {
        pg[k] = 0.0;
    }
    pg
}

/// Minimizes the local quadratic model plus the L1 penalty by coordinate
/// descent, subject to `θ_y ≥ floor`. Returns the model minimizer.
fn prox_newton_point(
    p: &DVector<f64>,
    grad: &DVector<f64>,
    hess: &DMatrix<f64>,
    lambda: f64,
    floor: f64,
) -> DVector<f64> {
    let k = p.len() - 1;
    let mut z = p.clone();
    // hd = H (z − p), kept current as coordinates move.
    let mut hd = DVector::<f64>::zeros(k + 1);
    for _ in 0..5000 {
        let mut biggest: f64 = 0.0;
        for j in 0..=k {
            let a = hess[(j, j)];
            if !(a > 0.0) {
                continue;
            }
            let u = z[j] - (grad[j] + hd[j]) / a;
            let next = if j < k {
                sign(u) * (u.abs() - lambda / a).max(0.0)
            } else {
                (u - lambda / a).max(floor)
            };
            let delta = next - z[j];
            if delta != 0.0 {
                z[j] = next;
                for i in 0..=k {
                    hd[i] += hess[(i, j)] * delta;
                }
                biggest = biggest.max(delta.abs());
            }
        }
        if biggest <= 1e-15 * (1.0 + z.amax()) {
            break;
        }
    }
    z
}

/// Proximal Newton on one head with backtracking on the true objective.
/// Returns whether the optimality residual reached tolerance.
fn solve_head(
    feats: &[Vec<f64>],
    ratios: &[f64],
    y: &[f64],
    head: &mut Head,
    base: BaseDistribution,
    lambda: f64,
    floor: f64,
) -> bool {
    const TOL: f64 = 1e-9;
    let k = head.theta_phi.len();
    let mut p = DVector::from_iterator(
        k + 1,
        head.theta_phi
            .iter()
            .copied()
            .chain([head.theta_y.max(floor)]),
    );
    let l1 = |v: &DVector<f64>| lambda * v.iter().map(|x| x.abs()).sum::<f64>();
    let mut converged = false;
    for _ in 0..100 {
        let ev = eval_head(feats, ratios, y, &p, base, lambda, true);
        let residual = pseudo_gradient(&p, &ev.grad, lambda, floor).amax();
        if residual <= TOL * (1.0 + ev.loss.abs()) {
            converged = true;
            break;
        }
        let mut h = ev.hess.expect("hessian requested");
        let scale = (0..=k).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-300);
        for i in 0..=k {
            h[(i, i)] += 1e-12 * scale;
        }
        let z = prox_newton_point(&p, &ev.grad, &h, lambda, floor);
        let dir = &z - &p;
        // Predicted decrease of the penalized model (nonpositive).
        let predicted = ev.grad.dot(&dir) + l1(&z) - l1(&p);
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..50 {
            let cand = &p + alpha * &dir;
            let f = eval_head(feats, ratios, y, &cand, base, lambda, false).loss;
            if f.is_finite() && f <= ev.loss + 1e-4 * alpha * predicted.min(0.0) {
                p = cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || dir.amax() <= 1e-13 * (1.0 + p.amax()) {
            // No representable descent step remains.
            converged = residual <= 1e-6 * (1.0 + ev.loss.abs());
            break;
        }
    }
    head.theta_phi.copy_from_slice(&p.as_slice()[..k]);
    head.theta_y = p[k];
    converged
}

fn moment_report(
    model: &RobustModel,
    data: &Dataset,
    ratios: &[f64],
    final_loss: f64,
    epochs: usize,
    converged: bool,
) -> FitReport {
    let d = model.outputs();
    let n = data.len() as f64;
    let mut moment = vec![0.0; d];
    let mut gap = vec![0.0; d];
    let mut worst = vec![0.0f64; d];
    for (i, (x, y)) in data.inputs().iter().zip(data.targets()).enumerate() {
        for (j, g) in model
            .predict_with_ratio(*x, ratios[i])
            .into_iter()
            .enumerate()
        {
            let res = y[j] * y[j] - g.mean * g.mean - g.var;
            moment[j] += res / n;
            gap[j] += res / n;
            worst[j] = worst[j].max(res.abs());
        }
    }
    gap.iter_mut().for_each(|g| *g += model.lambda);
    FitReport {
        final_loss,
        epochs,
        moment_residual: moment,
        stationarity_gap: gap,
        max_sample_residual: worst,
        converged,
    }
}

/// `max_t σ(x_t)` over query points for one output dimension.
pub fn sigma_max_on_traj(
    model: &RobustModel,
    xs: &[[f64; 2]],
    shift: &ShiftContext,
    dim: usize,
) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    Ok(xs
        .iter()
        .map(|x| model.predict_dim(*x, shift.ratio(x), dim).std())
        .fold(0.0, f64::max))
}

/// `sup σ² · r_hi · ‖θ_φ‖₂ · Π ‖W_l‖₂` from its factors.
pub fn lipschitz_from_parts(sup_var: f64, r_hi: f64, theta_norm: f64, layer_norms: &[f64]) -> f64 {
    sup_var * r_hi * theta_norm * layer_norms.iter().product::<f64>()
}

/// Lipschitz bound on the mean of output `dim`, treating the ratio as a
/// constant in `[r_lo, r_hi]` (the variance is largest at `r_lo`).
pub fn lipschitz_bound(model: &RobustModel, r_lo: f64, r_hi: f64, dim: usize) -> f64 {
    let head = &model.heads[dim];
    let sup_var = 1.0 / (1.0 / model.base.sigma0_sq + 2.0 * r_lo * head.theta_y);
    let theta_norm = head.theta_phi.iter().map(|v| v * v).sum::<f64>().sqrt();
    lipschitz_from_parts(sup_var, r_hi, theta_norm, &model.net.layer_norms())
}
