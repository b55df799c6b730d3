//! Plain-text checkpoint: a versioned header, scalars, then each layer's
//! shape and row-major values, then each head.
//!
//! ```text
//! safexp-robust-model v1
//! base <mu0> <sigma0_sq>
//! lambda <lambda>
//! theta_y_floor <floor>
//! spectral_cap <cap>
//! layers <count>
//! layer <rows> <cols>
//! <rows lines of cols values>
//! bias <rows values>
//! heads <count>
//! head <theta_y> <theta_phi values>
//! ```

use std::fmt::Write as _;

use super::{BaseDistribution, Dense, FeatureNet, Head, RobustModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "safexp-robust-model v1";

fn join(vals: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        // Display for f64 is the shortest round-trip representation.
        let _ = write!(s, "{v}");
    }
    s
}

pub fn save_checkpoint(model: &RobustModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_HEADER}");
    let _ = writeln!(out, "base {} {}", model.base.mu0, model.base.sigma0_sq);
    let _ = writeln!(out, "lambda {}", model.lambda);
    let _ = writeln!(out, "theta_y_floor {}", model.theta_y_floor);
    let _ = writeln!(out, "spectral_cap {}", model.net.spectral_cap);
    let _ = writeln!(out, "layers {}", model.net.layers.len());
    for l in &model.net.layers {
        let _ = writeln!(out, "layer {} {}", l.rows, l.cols);
        for r in 0..l.rows {
            let _ = writeln!(out, "{}", join(&l.w[r * l.cols..(r + 1) * l.cols]));
        }
        let _ = writeln!(out, "bias {}", join(&l.b));
    }
    let _ = writeln!(out, "heads {}", model.heads.len());
    for h in &model.heads {
        let _ = writeln!(out, "head {} {}", h.theta_y, join(&h.theta_phi));
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))
    }

    /// Next line, which must start with `tag`; returns the remaining tokens.
    fn tagged(&mut self, tag: &str) -> Result<(usize, Vec<&'a str>)> {
        let (no, line) = self.next()?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some(t) if t == tag => Ok((no, toks.collect())),
            _ => Err(Error::Checkpoint(format!("line {no}: expected `{tag}`"))),
        }
    }
}

fn nums(no: usize, toks: &[&str]) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Checkpoint(format!("line {no}: bad number `{t}`")))
        })
        .collect()
}

fn count(no: usize, toks: &[&str], want: usize) -> Result<Vec<usize>> {
    if toks.len() != want {
        return Err(Error::Checkpoint(format!(
            "line {no}: expected {want} fields"
        )));
    }
    toks.iter()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("line {no}: bad count `{t}`")))
        })
        .collect()
}

fn scalar(lines: &mut Lines<'_>, tag: &str) -> Result<f64> {
    let (no, toks) = lines.tagged(tag)?;
    match nums(no, &toks)?.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::Checkpoint(format!("line {no}: expected one value"))),
    }
}

pub fn load_checkpoint(text: &str) -> Result<RobustModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, header) = lines.next()?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint(format!("unsupported header `{header}`")));
    }
    let (no, toks) = lines.tagged("base")?;
    let base = match nums(no, &toks)?.as_slice() {
        [mu0, s] => BaseDistribution {
            mu0: *mu0,
            sigma0_sq: *s,
        },
        _ => {
            return Err(Error::Checkpoint(format!(
                "line {no}: expected mu0 sigma0_sq"
            )))
        }
    };
    base.validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let lambda = scalar(&mut lines, "lambda")?;
    let theta_y_floor = scalar(&mut lines, "theta_y_floor")?;
    let cap = scalar(&mut lines, "spectral_cap")?;
    let (no, toks) = lines.tagged("layers")?;
    let n_layers = count(no, &toks, 1)?[0];
    if n_layers == 0 {
        return Err(Error::Checkpoint("network has no layers".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (no, toks) = lines.tagged("layer")?;
        let shape = count(no, &toks, 2)?;
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(prev) = layers.last() {
            let prev: &Dense = prev;
            if prev.rows != cols {
                return Err(Error::Checkpoint(format!(
                    "line {no}: layer shape mismatch"
                )));
            }
        }
        let mut d = Dense::zeros(rows, cols);
        for r in 0..rows {
            let (no, line) = lines.next()?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let row = nums(no, &toks)?;
            if row.len() != cols {
                return Err(Error::Checkpoint(format!(
                    "line {no}: expected {cols} values"
                )));
            }
            d.w[r * cols..(r + 1) * cols].copy_from_slice(&row);
        }
        let (no, toks) = lines.tagged("bias")?;
        let b = nums(no, &toks)?;
        if b.len() != rows {
            return Err(Error::Checkpoint(format!(
                "line {no}: expected {rows} bias values"
            )));
        }
        d.b = b;
        layers.push(d);
    }
    let k = layers.last().map_or(0, |l| l.rows);
    let (no, toks) = lines.tagged("heads")?;
    let n_heads = count(no, &toks, 1)?[0];
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let (no, toks) = lines.tagged("head")?;
        let v = nums(no, &toks)?;
        if v.len() != k + 1 {
            return Err(Error::Checkpoint(format!(
                "line {no}: expected {} values",
                k + 1
            )));
        }
        heads.push(Head {
            theta_y: v[0],
            theta_phi: v[1..].to_vec(),
        });
    }
    Ok(RobustModel {
        net: FeatureNet::from_layers(layers, cap),
        heads,
        base,
        lambda,
        theta_y_floor,
    })
}
