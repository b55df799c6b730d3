//! Exact Gaussian-process regression, one independent GP per output.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::domain::Dataset;
use crate::error::{invalid, Error, Result};

/// Largest diagonal jitter tried before giving up on a factorization.
pub const MAX_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Rbf,
    Matern52,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpHyper {
    pub signal_var: f64,
    /// One lengthscale per input dimension.
    pub lengthscale: Vec<f64>,
    pub noise_var: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        Self {
            signal_var: 1.0,
            lengthscale: vec![0.5, 0.5],
            noise_var: 1e-4,
        }
    }
}

impl GpHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal_var > 0.0 && self.signal_var.is_finite()) {
            return Err(invalid("gp.signal_var", "must be positive"));
        }
        if self.lengthscale.is_empty()
            || self
                .lengthscale
                .iter()
                .any(|l| !(*l > 0.0 && l.is_finite()))
        {
            return Err(invalid("gp.lengthscale", "must be positive"));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(invalid("gp.noise_var", "must be positive"));
        }
        Ok(())
    }
}

/// Scaled distance `sqrt(Σ ((x_i − x'_i)/ℓ_i)²)`.
fn scaled_dist(x: &[f64], xp: &[f64], ell: &[f64]) -> f64 {
    x.iter()
        .zip(xp)
        .zip(ell)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Kernel value for a single lengthscale-normalized distance `d/ℓ`.
fn kernel_of_dist(kind: KernelKind, signal_var: f64, r: f64) -> f64 {
    match kind {
        KernelKind::Rbf => signal_var * (-0.5 * r * r).exp(),
        KernelKind::Matern52 => {
            let a = 5f64.sqrt() * r;
            signal_var * (1.0 + a + 5.0 * r * r / 3.0) * (-a).exp()
        }
    }
}

/// `k(x, x')` with an isotropic lengthscale.
pub fn kernel_eval(
    kind: KernelKind,
    x: &[f64],
    xp: &[f64],
    signal_var: f64,
    lengthscale: f64,
) -> Result<f64> {
    if x.len() != xp.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: xp.len(),
        });
    }
    if !(lengthscale > 0.0) {
        return Err(invalid("lengthscale", "must be positive"));
    }
    let ell = vec![lengthscale; x.len()];
    Ok(kernel_of_dist(kind, signal_var, scaled_dist(x, xp, &ell)))
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub kind: KernelKind,
    pub hyper: GpHyper,
    inputs: Vec<[f64; 2]>,
    chol: Cholesky<f64, Dyn>,
    /// `(K + σ_n² I)⁻¹ y`, one column per output.
    alpha: Vec<DVector<f64>>,
    /// Jitter that was added on top of the noise variance.
    pub jitter: f64,
}

impl GpModel {
    fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        kernel_of_dist(
            self.kind,
            self.hyper.signal_var,
            scaled_dist(a, b, &self.hyper.lengthscale),
        )
    }

    pub fn outputs(&self) -> usize {
        self.alpha.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn alpha(&self, dim: usize) -> &DVector<f64> {
        &self.alpha[dim]
    }

    /// Posterior mean per output and the shared posterior variance.
    pub fn predict(&self, x: [f64; 2]) -> (Vec<f64>, f64) {
        let ks = DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| self.k(&x, xi)),
        );
        let means = self.alpha.iter().map(|a| ks.dot(a)).collect();
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&ks)
            .expect("factor is nonsingular");
        let var = (self.k(&x, &x) - v.norm_squared()).max(0.0);
        (means, var)
    }

    pub fn predict_dim(&self, x: [f64; 2], dim: usize) -> (f64, f64) {
        let (m, v) = self.predict(x);
        (m[dim], v)
    }
}

/// Fits one GP per output dimension; the inputs and kernel matrix are shared.
pub fn gp_fit(data: &Dataset, kind: KernelKind, hyper: &GpHyper) -> Result<GpModel> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("GP training data"));
    }
    if hyper.lengthscale.len() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: hyper.lengthscale.len(),
        });
    }
    let n = data.len();
    let xs = data.inputs();
    let mut kmat = DMatrix::from_fn(n, n, |i, j| {
        kernel_of_dist(
            kind,
            hyper.signal_var,
            scaled_dist(&xs[i], &xs[j], &hyper.lengthscale),
        )
    });
    for i in 0..n {
        kmat[(i, i)] += hyper.noise_var;
    }
    let mut jitter = 0.0;
    let chol = loop {
        let mut m = kmat.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            break c;
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > MAX_JITTER {
            return Err(Error::Factorization { jitter: MAX_JITTER });
        }
    };
    let alpha = (0..data.outputs())
        .map(|d| chol.solve(&DVector::from_vec(data.target_column(d))))
        .collect();
    Ok(GpModel {
        kind,
        hyper: hyper.clone(),
        inputs: xs.to_vec(),
        chol,
        alpha,
        jitter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hyper(ell: f64, noise: f64) -> GpHyper {
        GpHyper {
            signal_var: 1.0,
            lengthscale: vec![ell, ell],
            noise_var: noise,
        }
    }

    #[test]
    fn kernel_values() {
        for kind in [KernelKind::Rbf, KernelKind::Matern52] {
            assert_eq!(
                kernel_eval(kind, &[0.3, 0.1], &[0.3, 0.1], 2.5, 0.7).unwrap(),
                2.5
            );
        }
        let rbf = kernel_eval(KernelKind::Rbf, &[0.0], &[1.0], 1.0, 1.0).unwrap();
        assert!((rbf - (-0.5f64).exp()).abs() < 1e-15);
        assert!((rbf - 0.60653).abs() < 1e-5);
        let s5 = 5f64.sqrt();
        let mat = kernel_eval(KernelKind::Matern52, &[0.0], &[1.0], 1.0, 1.0).unwrap();
        assert!((mat - (1.0 + s5 + 5.0 / 3.0) * (-s5).exp()).abs() < 1e-15);
        assert!((mat - 0.52399).abs() < 1e-5);
        assert!(kernel_eval(KernelKind::Rbf, &[0.0], &[1.0, 2.0], 1.0, 1.0).is_err());
        assert!(kernel_eval(KernelKind::Rbf, &[0.0], &[1.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn single_point_alpha() {
        let data = Dataset::from_parts(vec![[0.2, 0.4]], vec![vec![1.7]]).unwrap();
        let gp = gp_fit(&data, KernelKind::Rbf, &hyper(0.5, 0.01)).unwrap();
        assert!((gp.alpha(0)[0] - 1.7 / 1.01).abs() < 1e-14);
    }

    #[test]
    fn duplicate_points_factorize() {
        let data = Dataset::from_parts(vec![[0.2, 0.4]; 3], vec![vec![1.0], vec![1.1], vec![0.9]])
            .unwrap();
        for kind in [KernelKind::Rbf, KernelKind::Matern52] {
            let gp = gp_fit(&data, kind, &hyper(0.5, 1e-4)).unwrap();
            assert!(gp.predict([0.2, 0.4]).0[0].is_finite());
        }
    }

    #[test]
    fn two_point_explicit_inverse() {
        let xs = [[0.0, 0.0], [0.6, -0.3]];
        let ys = [0.5, -1.2];
        let h = hyper(0.8, 0.05);
        let data = Dataset::from_parts(xs.to_vec(), ys.iter().map(|y| vec![*y]).collect()).unwrap();
        let gp = gp_fit(&data, KernelKind::Matern52, &h).unwrap();
        let k = |a: &[f64], b: &[f64]| kernel_eval(KernelKind::Matern52, a, b, 1.0, 0.8).unwrap();
        let a = k(&xs[0], &xs[0]) + 0.05;
        let b = k(&xs[0], &xs[1]);
        let d = k(&xs[1], &xs[1]) + 0.05;
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let xt = [0.3, 0.2];
        let ks = [k(&xt, &xs[0]), k(&xt, &xs[1])];
        let w = [
            inv[0][0] * ks[0] + inv[0][1] * ks[1],
            inv[1][0] * ks[0] + inv[1][1] * ks[1],
        ];
        let mean = w[0] * ys[0] + w[1] * ys[1];
        let var = k(&xt, &xt) - (w[0] * ks[0] + w[1] * ks[1]);
        let (m, v) = gp.predict_dim(xt, 0);
        assert!((m - mean).abs() < 1e-10 && (v - var).abs() < 1e-10);
    }

    #[test]
    fn interpolates_with_tiny_noise() {
        let data =
            Dataset::from_parts(vec![[0.0, 0.0], [1.0, 0.5]], vec![vec![0.3], vec![-0.4]]).unwrap();
        let gp = gp_fit(&data, KernelKind::Rbf, &hyper(0.5, 1e-10)).unwrap();
        let (m, v) = gp.predict_dim([1.0, 0.5], 0);
        assert!((m + 0.4).abs() < 1e-6 && v < 1e-6);
    }

    #[test]
    fn far_point_recovers_prior() {
        let data =
            Dataset::from_parts(vec![[0.0, 0.0], [0.1, 0.2]], vec![vec![2.0], vec![1.0]]).unwrap();
        for kind in [KernelKind::Rbf, KernelKind::Matern52] {
            let gp = gp_fit(&data, kind, &hyper(0.5, 1e-4)).unwrap();
            let (m, v) = gp.predict_dim([50.0, -40.0], 0);
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn posterior_variance_below_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<[f64; 2]> = (0..20)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let ys = xs.iter().map(|x| vec![x[0].sin() + x[1]]).collect();
        let data = Dataset::from_parts(xs, ys).unwrap();
        let gp = gp_fit(&data, KernelKind::Matern52, &hyper(0.5, 1e-4)).unwrap();
        for i in 0..21 {
            for j in 0..21 {
                let x = [-1.5 + 0.15 * i as f64, -1.5 + 0.15 * j as f64];
                let (_, v) = gp.predict_dim(x, 0);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let data = Dataset::from_parts(vec![[0.0, 0.0]], vec![vec![1.0]]).unwrap();
        assert!(gp_fit(&data, KernelKind::Rbf, &hyper(0.5, 0.0)).is_err());
        assert!(gp_fit(&data, KernelKind::Rbf, &hyper(-1.0, 1e-4)).is_err());
        assert!(gp_fit(&Dataset::new(1), KernelKind::Rbf, &hyper(0.5, 1e-4)).is_err());
    }
}
