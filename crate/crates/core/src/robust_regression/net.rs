//! Small dense ReLU network producing the feature vector `φ(x)`, with
//! manual backpropagation and spectral-norm capping.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One affine layer `y = W x + b`, `W` stored row-major (`rows = out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            *o = self.b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// ReLU on every layer except the last, which is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    pub layers: Vec<Dense>,
    pub spectral_cap: f64,
    /// Warm-start vectors for power iteration, one per layer.
    power_vecs: Vec<Vec<f64>>,
}

/// Activations kept for the backward pass of one sample.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`
    /// (post-activation for hidden layers).
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn features(&self) -> &[f64] {
        self.acts.last().expect("trace has an output layer")
    }
}

impl FeatureNet {
    /// He-normal initialization; `sizes = [input, hidden.., features]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], spectral_cap: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "network needs at least one layer");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let std = (2.0 / cols as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                let mut d = Dense::zeros(rows, cols);
                for v in d.w.iter_mut() {
                    *v = normal.sample(rng);
                }
                for v in d.b.iter_mut() {
                    *v = 0.1 * normal.sample(rng);
                }
                d
            })
            .collect();
        Self::from_layers(layers, spectral_cap)
    }

    pub fn from_layers(layers: Vec<Dense>, spectral_cap: f64) -> Self {
        let power_vecs = layers
            .iter()
            .map(|l| vec![1.0 / (l.cols as f64).sqrt(); l.cols])
            .collect();
        Self {
            layers,
            spectral_cap,
            power_vecs,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.rows];
            layer.forward_into(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = next;
        }
        cur
    }

    pub fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.rows];
            layer.forward_into(acts.last().unwrap(), &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(next);
        }
        Trace { acts }
    }

    /// Accumulates `∂L/∂params` into `grad` (flat, same order as
    /// [`FeatureNet::write_params`]) given `∂L/∂φ` for one sample.
    pub fn backward(&self, trace: &Trace, d_features: &[f64], grad: &mut [f64]) {
        let offsets = self.offsets();
        let mut delta = d_features.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.acts[l];
            let (w_off, b_off) = offsets[l];
            for (r, &d) in delta.iter().enumerate().take(layer.rows) {
                if d == 0.0 {
                    continue;
                }
                grad[b_off + r] += d;
                let g = &mut grad[w_off + r * layer.cols..w_off + (r + 1) * layer.cols];
                for (gv, iv) in g.iter_mut().zip(input) {
                    *gv += d * iv;
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.cols];
            for (r, &d) in delta.iter().enumerate().take(layer.rows) {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                for (p, wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            // ReLU gate of the previous hidden layer.
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = off;
                let b = w + l.w.len();
                off = b + l.b.len();
                (w, b)
            })
            .collect()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
    }

    /// Reads parameters written by [`FeatureNet::write_params`]; returns the
    /// number consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&src[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&src[off..off + nb]);
            off += nb;
        }
        off
    }

    /// Spectral norm of every layer.
    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| spectral_norm(&l.w, l.rows, l.cols, None, POWER_ITERS, POWER_TOL))
            .collect()
    }

    /// Rescales layers whose spectral norm exceeds `cap`.
    pub fn spectral_normalize(&mut self, cap: f64) {
        for (layer, v) in self.layers.iter_mut().zip(self.power_vecs.iter_mut()) {
            let s = spectral_norm(
                &layer.w,
                layer.rows,
                layer.cols,
                Some(v),
                POWER_ITERS,
                POWER_TOL,
            );
            if s > cap {
                let scale = cap / s;
                layer.w.iter_mut().for_each(|w| *w *= scale);
            }
        }
    }
}

/// Power-iteration budget per call.
pub const POWER_ITERS: usize = 30;
/// Eigen-residual at which power iteration stops.
pub const POWER_TOL: f64 = 1e-6;

/// Largest singular value of a row-major `rows × cols` matrix by power
/// iteration on `WᵀW`.
///
/// Runs at least `iters` iterations and keeps going (up to 50× that) until
/// the eigen-residual `‖WᵀW v − σ² v‖ / σ²` drops below `tol`. `warm` carries
/// the right singular vector between calls.
pub fn spectral_norm(
    w: &[f64],
    rows: usize,
    cols: usize,
    warm: Option<&mut Vec<f64>>,
    iters: usize,
    tol: f64,
) -> f64 {
    let mut local;
    let v: &mut Vec<f64> = match warm {
        Some(v) => v,
        None => {
            local = (0..cols).map(|i| 1.0 + 0.01 * i as f64).collect::<Vec<_>>();
            &mut local
        }
    };
    if v.iter().all(|x| *x == 0.0) {
        v.iter_mut().for_each(|x| *x = 1.0);
    }
    let mut u = vec![0.0; rows];
    let mut next_v = vec![0.0; cols];
    let mut sigma = 0.0;
    let max_iters = iters.max(1) * 50;
    for it in 0..max_iters {
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= vn);
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v.iter())
                .map(|(a, b)| a * b)
                .sum();
        }
        let sq = u.iter().map(|x| x * x).sum::<f64>();
        sigma = sq.sqrt();
        if sq == 0.0 {
            return 0.0;
        }
        // next_v ← Wᵀ u = WᵀW v
        next_v.iter_mut().for_each(|x| *x = 0.0);
        for (r, ur) in u.iter().enumerate() {
            for (c, vc) in next_v.iter_mut().enumerate() {
                *vc += w[r * cols + c] * ur;
            }
        }
        let residual = next_v
            .iter()
            .zip(v.iter())
            .map(|(a, b)| (a - sq * b).powi(2))
            .sum::<f64>()
            .sqrt()
            / sq;
        v.copy_from_slice(&next_v);
        if it + 1 >= iters && residual <= tol {
            break;
        }
    }
    sigma
}
