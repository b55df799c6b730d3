//! Composite-variable tracking controller and closed-loop rollout.
//!
//! With `q̃ = q − q_g`, `q̇_r = q̇_g − Λ q̃` and `s = q̇ − q̇_r`, the law
//! `u = B†(M q̈_r + C q̇_r − K s + G − d̂)` leaves the closed loop
//! `M ṡ + (C + K) s = d − d̂`.

use serde::{Deserialize, Serialize};

use crate::domain::{DesiredPoint, DesiredTrajectory, State};
use crate::dynamics::{forward_dynamics, step_rk4, MixedModel, Plant, StateRate};
use crate::error::{invalid, Error, Result};

/// Norm of `(q, q̇)` beyond which a rollout is declared diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    /// Feedback gain on the composite variable.
    pub k: f64,
    /// Composite-variable gain.
    pub lambda: f64,
}

impl ControllerGains {
    pub fn new(k: f64, lambda: f64) -> Result<Self> {
        let g = Self { k, lambda };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(invalid("gains.k", "must be positive"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid("gains.lambda", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeVars {
    pub q_err: f64,
    pub qdot_r: f64,
    pub qddot_r: f64,
    pub s: f64,
}

pub fn composite_vars(state: State, desired: &DesiredPoint, lambda: f64) -> CompositeVars {
    let q_err = state.q - desired.q;
    let qdot_r = desired.qdot - lambda * q_err;
    let qddot_r = desired.qddot - lambda * (state.qdot - desired.qdot);
    CompositeVars {
        q_err,
        qdot_r,
        qddot_r,
        s: state.qdot - qdot_r,
    }
}

/// Generalized-force command of the tracking law.
pub fn control_law<M: MixedModel + ?Sized>(
    model: &M,
    state: State,
    desired: &DesiredPoint,
    gains: &ControllerGains,
    d_hat: f64,
) -> f64 {
    let cv = composite_vars(state, desired, gains.lambda);
    let force = model.mass(state.q) * cv.qddot_r + model.coriolis(state.q, state.qdot) * cv.qdot_r
        - gains.k * cv.s
        + model.gravity(state.q)
        - d_hat;
    // Scalar pseudoinverse.
    let b = model.actuation();
    if b == 0.0 {
        0.0
    } else {
        force / b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RolloutStatus {
    Completed,
    Diverged {
        t: f64,
    },
    /// Ground contact: the rollout is truncated at the crossing.
    Touchdown {
        t: f64,
        speed: f64,
    },
}

/// Time series of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    /// Actuator command at each recorded time.
    pub controls: Vec<f64>,
    pub s: Vec<f64>,
    /// `x̃ = x − x_g` as `(q̃, q̇̃)`.
    pub tracking_errors: Vec<[f64; 2]>,
    /// `ε = d − d̂` at each recorded time.
    pub eps: Vec<f64>,
    pub clamp_count: usize,
    pub status: RolloutStatus,
}

impl Rollout {
    fn with_capacity(n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
            controls: Vec::with_capacity(n),
            s: Vec::with_capacity(n),
            tracking_errors: Vec::with_capacity(n),
            eps: Vec::with_capacity(n),
            clamp_count: 0,
            status: RolloutStatus::Completed,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// RMS of the Euclidean tracking error `‖x̃‖`.
    pub fn tracking_rms(&self) -> f64 {
        if self.tracking_errors.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .tracking_errors
            .iter()
            .map(|e| e[0] * e[0] + e[1] * e[1])
            .sum();
        (sum / self.tracking_errors.len() as f64).sqrt()
    }

    pub fn max_abs_q(&self) -> f64 {
        self.states.iter().fold(0.0, |m, s| m.max(s.q.abs()))
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self.status, RolloutStatus::Diverged { .. })
    }
}

/// Closed-loop tracking of `traj` from `x0`.
///
/// The control law is applied continuously (at every integrator stage) with
/// `d̂ = d_hat(x)` queried at the actual state; the plant integrates with
/// `true_residual(t, x)`. Logged controls are those at the grid instants.
/// Drone rollouts stop at the first ground contact.
pub fn simulate_closed_loop(
    plant: &Plant,
    gains: &ControllerGains,
    d_hat: &dyn Fn(State) -> f64,
    true_residual: &dyn Fn(f64, State) -> f64,
    traj: &DesiredTrajectory,
    dt: f64,
    x0: State,
) -> Result<Rollout> {
    gains.validate()?;
    if !(dt > 0.0) {
        return Err(invalid("dt", "must be positive"));
    }
    let ratio = traj.dt() / dt;
    if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
        return Err(invalid("dt", "must divide the trajectory grid step"));
    }
    if !x0.is_finite() {
        return Err(invalid("x0", "must be finite"));
    }
    let ground = match plant {
        Plant::Drone(_) => Some(0.0),
        Plant::Pendulum(_) => None,
    };
    let steps = (traj.horizon / dt).round() as usize;
    let mut out = Rollout::with_capacity(steps + 1);
    let mut state = x0;

    for k in 0..=steps {
        let t = k as f64 * dt;
        let desired = traj.desired_at(t);
        let cv = composite_vars(state, &desired, gains.lambda);
        let dh = d_hat(state);
        let demand = control_law(plant, state, &desired, gains, dh);
        let act = plant.actuate(demand);
        if act.clamped {
            out.clamp_count += 1;
        }
        out.times.push(t);
        out.states.push(state);
        out.controls.push(act.command);
        out.s.push(cv.s);
        out.tracking_errors
            .push([cv.q_err, state.qdot - desired.qdot]);
        out.eps.push(true_residual(t, state) - dh);
        if k == steps {
            break;
        }

        // Feedback is re-evaluated at every stage, so RK4 integrates the
        // closed-loop vector field itself.
        let rhs = |tau: f64, x: State, _u: f64| {
            let demand = control_law(plant, x, &traj.desired_at(tau), gains, d_hat(x));
            StateRate {
                dq: x.qdot,
                dqdot: forward_dynamics(
                    plant,
                    x,
                    plant.actuate(demand).force,
                    true_residual(tau, x),
                )
                .unwrap_or(f64::NAN),
            }
        };
        let next = match step_rk4(rhs, t, state, act.force, dt) {
            Ok(n) if n.q.hypot(n.qdot) <= DIVERGENCE_NORM => n,
            Ok(_) | Err(Error::SimulationDiverged { .. }) => {
                out.status = RolloutStatus::Diverged { t: t + dt };
                return Ok(out);
            }
            Err(e) => return Err(e),
        };

        if let Some(g) = ground {
            if next.q <= g {
                let frac = if state.q > next.q {
                    ((state.q - g) / (state.q - next.q)).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let tc = t + frac * dt;
                let speed = state.qdot + frac * (next.qdot - state.qdot);
                let contact = State::new(g, speed);
                let desired = traj.desired_at(tc);
                let cv = composite_vars(contact, &desired, gains.lambda);
                let dh = d_hat(contact);
                out.times.push(tc);
                out.states.push(contact);
                out.controls.push(act.command);
                out.s.push(cv.s);
                out.tracking_errors
                    .push([cv.q_err, contact.qdot - desired.qdot]);
                out.eps.push(true_residual(tc, contact) - dh);
                out.status = RolloutStatus::Touchdown { t: tc, speed };
                return Ok(out);
            }
        }
        state = next;
    }
    Ok(out)
}
