//! Shared domain types: states, desired trajectories and their candidate
//! pools, safety sets, and the residual dataset.
//!
//! Trajectories are sampled on a uniform grid. Certification and the
//! uncertainty scan both walk the grid, while the closed-loop simulator
//! queries [`PoolParams::evaluate`] directly so the reference is exact at
//! every integrator step.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Initial altitude of every landing trajectory (m).
pub const LANDING_START_HEIGHT: f64 = 1.5;
/// Altitude above ground at which a desired landing trajectory counts as landed (m).
pub const TOUCHDOWN_THRESHOLD: f64 = 0.01;

/// Generalized coordinate and its rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: f64,
    pub qdot: f64,
}

impl State {
    pub fn new(q: f64, qdot: f64) -> Self {
        Self { q, qdot }
    }

    pub fn is_finite(&self) -> bool {
        self.q.is_finite() && self.qdot.is_finite()
    }

    pub fn as_input(&self) -> [f64; 2] {
        [self.q, self.qdot]
    }
}

/// Desired coordinate and its first two time derivatives at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesiredPoint {
    pub t: f64,
    pub q: f64,
    pub qdot: f64,
    pub qddot: f64,
}

impl DesiredPoint {
    pub fn state(&self) -> State {
        State::new(self.q, self.qdot)
    }
}

/// Parameters identifying one member of a trajectory pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pool", rename_all = "snake_case")]
pub enum PoolParams {
    /// `q_g(t) = C sin t`.
    Pendulum { amplitude: f64 },
    /// `q_g(t) = e^{-Ct} (1 + Ct) (1.5 - h_g) + h_g`.
    Landing { rate: f64, hover_height: f64 },
}

impl PoolParams {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PoolParams::Pendulum { amplitude } => {
                if !(amplitude > 0.0 && amplitude <= 1.0) {
                    return Err(Error::RejectedCandidate(format!(
                        "pendulum amplitude {amplitude} outside (0, 1]"
                    )));
                }
            }
            PoolParams::Landing { rate, hover_height } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(Error::RejectedCandidate(format!(
                        "landing rate {rate} must be positive"
                    )));
                }
                if !(0.0..LANDING_START_HEIGHT).contains(&hover_height) {
                    return Err(Error::RejectedCandidate(format!(
                        "landing hover height {hover_height} outside [0, 1.5)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Closed-form desired point at time `t`.
    pub fn evaluate(&self, t: f64) -> DesiredPoint {
        match *self {
            PoolParams::Pendulum { amplitude: c } => {
                let (s, co) = t.sin_cos();
                DesiredPoint {
                    t,
                    q: c * s,
                    qdot: c * co,
                    qddot: -c * s,
                }
            }
            PoolParams::Landing {
                rate: c,
                hover_height: h,
            } => {
                let span = LANDING_START_HEIGHT - h;
                let decay = (-c * t).exp();
                DesiredPoint {
                    t,
                    q: decay * (1.0 + c * t) * span + h,
                    qdot: -span * c * c * t * decay,
                    qddot: -span * c * c * decay * (1.0 - c * t),
                }
            }
        }
    }

    /// Short label used in logs and CSV output.
    pub fn label(&self) -> String {
        match *self {
            PoolParams::Pendulum { amplitude } => format!("C={amplitude}"),
            PoolParams::Landing { rate, hover_height } => format!("C={rate};h_g={hover_height}"),
        }
    }

    /// `C` for both pools.
    pub fn rate(&self) -> f64 {
        match *self {
            PoolParams::Pendulum { amplitude } => amplitude,
            PoolParams::Landing { rate, .. } => rate,
        }
    }

    pub fn hover_height(&self) -> Option<f64> {
        match *self {
            PoolParams::Pendulum { .. } => None,
            PoolParams::Landing { hover_height, .. } => Some(hover_height),
        }
    }
}

/// A sampled candidate trajectory with its pool parameters and cost.
#[derive(Debug, Clone, PartialEq)]
pub struct DesiredTrajectory {
    points: Vec<DesiredPoint>,
    pub params: PoolParams,
    pub cost: f64,
    pub horizon: f64,
    dt: f64,
}

impl DesiredTrajectory {
    /// Sample `params` on `[0, horizon]` with step `dt`.
    pub fn sample(params: PoolParams, dt: f64, horizon: f64) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(invalid(
                "horizon",
                format!("must be nonnegative, got {horizon}"),
            ));
        }
        let steps = (horizon / dt).round() as usize;
        let points: Vec<DesiredPoint> = (0..=steps)
            .map(|i| params.evaluate(i as f64 * dt))
            .collect();
        let cost = match params {
            PoolParams::Pendulum { amplitude } => -amplitude,
            PoolParams::Landing { .. } => landing_time(&points, 0.0),
        };
        Ok(Self {
            points,
            params,
            cost,
            horizon,
            dt,
        })
    }

    pub fn points(&self) -> &[DesiredPoint] {
        &self.points
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact reference at an arbitrary time (not restricted to the grid).
    pub fn desired_at(&self, t: f64) -> DesiredPoint {
        self.params.evaluate(t)
    }

    pub fn max_abs_q(&self) -> f64 {
        self.points.iter().fold(0.0, |m, p| m.max(p.q.abs()))
    }

    /// Grid points as learner inputs `(q, qdot)`.
    pub fn inputs(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p.q, p.qdot]).collect()
    }
}

/// First time the sampled trajectory comes within the touchdown threshold of
/// `ground`, linearly interpolated between grid points; `+inf` if never.
pub fn landing_time(points: &[DesiredPoint], ground: f64) -> f64 {
    let threshold = ground + TOUCHDOWN_THRESHOLD;
    match points.iter().position(|p| p.q <= threshold) {
        None => f64::INFINITY,
        Some(0) => points[0].t,
        Some(k) => {
            let (a, b) = (points[k - 1], points[k]);
            let frac = (a.q - threshold) / (a.q - b.q);
            a.t + frac * (b.t - a.t)
        }
    }
}

/// Pendulum pool `q_g = C sin t`; cost `-C` (larger amplitude is cheaper).
pub fn pendulum_pool(c_values: &[f64], dt: f64, horizon: f64) -> Result<Vec<DesiredTrajectory>> {
    c_values
        .iter()
        .map(|&c| DesiredTrajectory::sample(PoolParams::Pendulum { amplitude: c }, dt, horizon))
        .collect()
}

/// Landing pool over `(C, h_g)` pairs; cost is the landing time.
pub fn landing_pool(
    params: &[(f64, f64)],
    dt: f64,
    horizon: f64,
) -> Result<Vec<DesiredTrajectory>> {
    params
        .iter()
        .map(|&(c, h)| {
            DesiredTrajectory::sample(
                PoolParams::Landing {
                    rate: c,
                    hover_height: h,
                },
                dt,
                horizon,
            )
        })
        .collect()
}

/// Region of the state space that actual trajectories must never leave.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SafetySet {
    /// `|q| < q_abs_max`.
    StateBox { q_abs_max: f64 },
    /// At or below `ground`, the rate must stay above `qdot_min_at_ground`.
    TouchdownSpeed {
        qdot_min_at_ground: f64,
        ground: f64,
    },
}

impl SafetySet {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SafetySet::StateBox { q_abs_max } if !(q_abs_max > 0.0) => {
                Err(invalid("q_abs_max", "must be positive"))
            }
            SafetySet::TouchdownSpeed {
                qdot_min_at_ground, ..
            } if !(qdot_min_at_ground < 0.0) => {
                Err(invalid("qdot_min_at_ground", "must be negative"))
            }
            _ => Ok(()),
        }
    }

    /// Strict membership test.
    pub fn contains(&self, _t: f64, q: f64, qdot: f64) -> bool {
        match *self {
            SafetySet::StateBox { q_abs_max } => q.abs() < q_abs_max,
            SafetySet::TouchdownSpeed {
                qdot_min_at_ground,
                ground,
            } => q > ground || qdot > qdot_min_at_ground,
        }
    }
}

/// Residual samples `{(q, qdot) -> d}` with one or more output dimensions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    inputs: Vec<[f64; 2]>,
    targets: Vec<Vec<f64>>,
    outputs: usize,
}

impl Dataset {
    pub fn new(outputs: usize) -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            outputs,
        }
    }

    pub fn from_parts(inputs: Vec<[f64; 2]>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        let outputs = targets.first().map_or(1, Vec::len);
        let mut ds = Self::new(outputs);
        for (x, y) in inputs.into_iter().zip(targets) {
            ds.push(x, y)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, input: [f64; 2], target: Vec<f64>) -> Result<()> {
        if target.len() != self.outputs {
            return Err(Error::DimensionMismatch {
                expected: self.outputs,
                got: target.len(),
            });
        }
        if !input.iter().chain(target.iter()).all(|v| v.is_finite()) {
            return Err(invalid("dataset", "non-finite sample"));
        }
        self.inputs.push(input);
        self.targets.push(target);
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        for (x, y) in other.inputs.iter().zip(&other.targets) {
            self.push(*x, y.clone())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn inputs(&self) -> &[[f64; 2]] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    /// Column of targets for one output dimension.
    pub fn target_column(&self, dim: usize) -> Vec<f64> {
        self.targets.iter().map(|y| y[dim]).collect()
    }

    /// Deterministic, evenly strided subset of at most `cap` samples.
    pub fn strided(&self, cap: usize) -> Dataset {
        let n = self.len();
        if cap == 0 || n <= cap {
            return self.clone();
        }
        let mut out = Dataset::new(self.outputs);
        for j in 0..cap {
            let i = j * n / cap;
            out.inputs.push(self.inputs[i]);
            out.targets.push(self.targets[i].clone());
        }
        out
    }
}
