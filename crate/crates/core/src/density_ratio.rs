//! Gaussian kernel density estimates and clipped source/target density
//! ratios `r̂(x) = p̂_src(x) / p̂_trg(x)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Smallest per-dimension spread used by the Silverman rule.
pub const MIN_SPREAD: f64 = 1e-3;
/// Denominator floor for ratios.
pub const DENSITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Silverman,
    Fixed(f64),
}

/// Product-Gaussian KDE with a diagonal bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    samples: Vec<f64>,
    dim: usize,
    bandwidth: Vec<f64>,
    inv_two_h_sq: Vec<f64>,
    norm: f64,
}

impl KdeModel {
    pub fn fit<P: AsRef<[f64]>>(samples: &[P], rule: Bandwidth) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("kde samples"))?;
        let dim = first.as_ref().len();
        if dim == 0 {
            return Err(Error::Empty("kde sample dimension"));
        }
        let mut flat = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            let s = s.as_ref();
            if s.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.len(),
                });
            }
            flat.extend_from_slice(s);
        }
        let n = samples.len();
        let bandwidth = match rule {
            Bandwidth::Fixed(h) => {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(invalid("bandwidth", "must be positive"));
                }
                vec![h; dim]
            }
            Bandwidth::Silverman => {
                let factor = (4.0 / ((dim as f64 + 2.0) * n as f64)).powf(1.0 / (dim as f64 + 4.0));
                (0..dim)
                    .map(|j| sample_std(&flat, dim, j).max(MIN_SPREAD) * factor)
                    .collect()
            }
        };
        Ok(Self::from_parts(flat, dim, bandwidth))
    }

    fn from_parts(samples: Vec<f64>, dim: usize, bandwidth: Vec<f64>) -> Self {
        let inv_two_h_sq = bandwidth.iter().map(|h| 0.5 / (h * h)).collect();
        let prod_h: f64 = bandwidth.iter().product();
        let n = samples.len() / dim;
        let norm = 1.0 / (n as f64 * prod_h * (2.0 * PI).powf(dim as f64 / 2.0));
        Self {
            samples,
            dim,
            bandwidth,
            inv_two_h_sq,
            norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    /// `p̂(x) = (1/n) Σ_i Π_j N(x_j; x_ij, h_j²)`.
    pub fn density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let mut acc = 0.0;
        for s in self.samples.chunks_exact(self.dim) {
            let mut e = 0.0;
            for j in 0..self.dim {
                let d = x[j] - s[j];
                e += d * d * self.inv_two_h_sq[j];
            }
            acc += (-e).exp();
        }
        acc * self.norm
    }
}

fn sample_std(flat: &[f64], dim: usize, j: usize) -> f64 {
    let n = flat.len() / dim;
    if n < 2 {
        return 0.0;
    }
    let mean = flat.iter().skip(j).step_by(dim).sum::<f64>() / n as f64;
    let ss: f64 = flat
        .iter()
        .skip(j)
        .step_by(dim)
        .map(|v| (v - mean) * (v - mean))
        .sum();
    (ss / (n as f64 - 1.0)).sqrt()
}

pub fn kde_fit<P: AsRef<[f64]>>(samples: &[P], rule: Bandwidth) -> Result<KdeModel> {
    KdeModel::fit(samples, rule)
}

pub fn kde_density(model: &KdeModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            got: x.len(),
        });
    }
    Ok(model.density(x))
}

/// Clipping bounds for `r̂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatioConfig {
    pub r_lo: f64,
    pub r_hi: f64,
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self {
            r_lo: 0.1,
            r_hi: 10.0,
        }
    }
}

impl RatioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_lo > 0.0 && self.r_lo <= self.r_hi && self.r_hi.is_finite()) {
            return Err(invalid("ratio", "require 0 < r_lo <= r_hi < inf"));
        }
        Ok(())
    }
}

/// `clip(p̂_src(x) / max(p̂_trg(x), 1e-12), r_lo, r_hi)`.
pub fn density_ratio(src: &KdeModel, trg: &KdeModel, x: &[f64], cfg: &RatioConfig) -> f64 {
    let num = src.density(x);
    let den = trg.density(x).max(DENSITY_FLOOR);
    (num / den).clamp(cfg.r_lo, cfg.r_hi)
}

/// Unclipped `max_t p̂_trg(x_t) / p̂_src(x_t)` along a trajectory.
pub fn max_ratio_on_traj<P: AsRef<[f64]>>(
    trg: &KdeModel,
    src: &KdeModel,
    traj: &[P],
) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    Ok(traj
        .iter()
        .map(|x| {
            let x = x.as_ref();
            trg.density(x) / src.density(x).max(DENSITY_FLOOR)
        })
        .fold(0.0, f64::max))
}

/// Clipped ratios `r̂(x_t)` at every point together with the unclipped
/// `max_t p̂_trg / p̂_src`, evaluating each density once per point.
pub fn ratio_profile<P: AsRef<[f64]>>(
    src: &KdeModel,
    trg: &KdeModel,
    traj: &[P],
    cfg: &RatioConfig,
) -> Result<(Vec<f64>, f64)> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let mut w_hat: f64 = 0.0;
    let ratios = traj
        .iter()
        .map(|x| {
            let x = x.as_ref();
            let (ps, pt) = (src.density(x), trg.density(x));
            w_hat = w_hat.max(pt / ps.max(DENSITY_FLOOR));
            (ps / pt.max(DENSITY_FLOOR)).clamp(cfg.r_lo, cfg.r_hi)
        })
        .collect();
    Ok((ratios, w_hat))
}

/// Source/target pair used to reweight predictions toward a target set.
/// Without a source (no data yet) the ratio is identically one.
#[derive(Debug, Clone)]
pub struct ShiftContext {
    pub src: Option<KdeModel>,
    pub trg: Option<KdeModel>,
    pub cfg: RatioConfig,
}

impl ShiftContext {
    /// Cold start: `r̂ ≡ 1`.
    pub fn uniform(cfg: RatioConfig) -> Self {
        Self {
            src: None,
            trg: None,
            cfg,
        }
    }

    pub fn ratio(&self, x: &[f64]) -> f64 {
        match (&self.src, &self.trg) {
            (Some(s), Some(t)) => density_ratio(s, t, x, &self.cfg),
            _ => 1.0_f64.clamp(self.cfg.r_lo, self.cfg.r_hi),
        }
    }
}
