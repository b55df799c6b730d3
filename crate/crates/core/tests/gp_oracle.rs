//! GP posterior against a dense LU solve of `(K + σ_n² I)`.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safexp::domain::Dataset;
use safexp::gp_baseline::{gp_fit, GpHyper, KernelKind};

fn kernel(kind: KernelKind, h: &GpHyper, a: [f64; 2], b: [f64; 2]) -> f64 {
    let d2: f64 = (0..2)
        .map(|i| ((a[i] - b[i]) / h.lengthscale[i]).powi(2))
        .sum();
    let d = d2.sqrt();
    match kind {
        KernelKind::Rbf => h.signal_var * (-0.5 * d2).exp(),
        KernelKind::Matern52 => {
            let s = 5f64.sqrt() * d;
            h.signal_var * (1.0 + s + 5.0 * d2 / 3.0) * (-s).exp()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn posterior_matches_dense_solve(seed in any::<u64>(), n in 1usize..=50, matern in any::<bool>(), outputs in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if matern { KernelKind::Matern52 } else { KernelKind::Rbf };
        let hyper = GpHyper {
            signal_var: rng.random_range(0.3..3.0),
            lengthscale: vec![rng.random_range(0.2..1.5), rng.random_range(0.2..1.5)],
            noise_var: 10f64.powf(rng.random_range(-4.0..-1.0)),
        };
        let xs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| (0..outputs).map(|j| (x[0] + j as f64).sin() * x[1]).collect())
            .collect();
        let gp = gp_fit(&Dataset::from_parts(xs.clone(), ys.clone()).unwrap(), kind, &hyper).unwrap();

        let lu = DMatrix::from_fn(n, n, |i, j| {
            kernel(kind, &hyper, xs[i], xs[j]) + if i == j { hyper.noise_var + gp.jitter } else { 0.0 }
        })
        .lu();
        for j in 0..outputs {
            let alpha = lu.solve(&DVector::from_iterator(n, ys.iter().map(|y| y[j]))).unwrap();
            prop_assert!((gp.alpha(j) - &alpha).amax() <= 1e-8 * (1.0 + alpha.amax()));
        }
        for _ in 0..10 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let ks = DVector::from_iterator(n, xs.iter().map(|xi| kernel(kind, &hyper, x, *xi)));
            let var = (kernel(kind, &hyper, x, x) - ks.dot(&lu.solve(&ks).unwrap())).max(0.0);
            let (means, v) = gp.predict(x);
            prop_assert!((v - var).abs() <= 1e-8, "var {v} vs {var}");
            for j in 0..outputs {
                let alpha = lu.solve(&DVector::from_iterator(n, ys.iter().map(|y| y[j]))).unwrap();
                let mu = ks.dot(&alpha);
                prop_assert!((means[j] - mu).abs() <= 1e-8, "mean {} vs {mu}", means[j]);
            }
        }
    }
}
