//! Mixed rigid-body dynamics `M(q) q̈ + C(q, q̇) q̇ + G(q) − B u = d(q, q̇)`
//! for single-degree-of-freedom plants, the ground-truth residuals of the two
//! benchmark tasks, and a fixed-step RK4 integrator.

use serde::{Deserialize, Serialize};

use crate::domain::State;
use crate::error::{invalid, Error, Result};

/// Altitude below which the ground-effect surrogate stops growing (m).
pub const GROUND_EFFECT_CLAMP: f64 = 0.05;

/// Terms of the mixed model for a 1-DOF system.
pub trait MixedModel {
    fn mass(&self, q: f64) -> f64;
    fn coriolis(&self, q: f64, qdot: f64) -> f64;
    fn gravity(&self, q: f64) -> f64;
    fn actuation(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub m: f64,
    pub l: f64,
    pub g: f64,
    /// Quadratic drag coefficient (N·s²/m²).
    pub c_d: f64,
    /// Horizontal wind speed (m/s).
    pub v_w: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            l: 1.0,
            g: 9.81,
            c_d: 0.1,
            v_w: 2.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.l > 0.0 && self.g > 0.0) {
            return Err(invalid("pendulum", "m, l, g must be positive"));
        }
        if !(self.c_d >= 0.0) {
            return Err(invalid("pendulum.c_d", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DroneParams {
    pub m: f64,
    pub g: f64,
    /// Thrust coefficient: force = c_T · u².
    pub c_t: f64,
    /// Ground-effect magnitude at zero altitude (N).
    pub ge_a: f64,
    /// Ground-effect decay rate (1/m).
    pub ge_b: f64,
    /// Ground-effect velocity coupling (N·s/m).
    pub ge_c: f64,
}

impl Default for DroneParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            g: 9.81,
            c_t: 1.0,
            ge_a: 2.0,
            ge_b: 3.0,
            ge_c: 0.5,
        }
    }
}

impl DroneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.g > 0.0 && self.c_t > 0.0) {
            return Err(invalid("drone", "m, g, c_t must be positive"));
        }
        if !(self.ge_b > 0.0) {
            return Err(invalid("drone.ge_b", "must be positive"));
        }
        Ok(())
    }
}

/// Signed quadratic drag torque from a constant horizontal wind acting on
/// the pendulum tip: `d = −c_d · l · v_rel · |v_rel|`, `v_rel = l q̇ − v_w`.
pub fn true_residual_pendulum(p: &PendulumParams, _q: f64, qdot: f64) -> f64 {
    let v_rel = p.l * qdot - p.v_w;
    -p.c_d * p.l * v_rel * v_rel.abs()
}

/// Analytic ground-effect surrogate: `d = (a − c q̇) e^{−b q}`, altitude
/// clamped below at [`GROUND_EFFECT_CLAMP`].
pub fn true_residual_drone(p: &DroneParams, q: f64, qdot: f64) -> f64 {
    let decay = (-p.ge_b * q.max(GROUND_EFFECT_CLAMP)).exp();
    (p.ge_a - p.ge_c * qdot) * decay
}

/// One of the two benchmark plants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plant", rename_all = "snake_case")]
pub enum Plant {
    Pendulum(PendulumParams),
    Drone(DroneParams),
}

/// Result of pushing a generalized-force demand through the actuator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Actuation {
    /// Raw actuator command (torque for the pendulum, rotor input for the drone).
    pub command: f64,
    /// Generalized force actually delivered.
    pub force: f64,
    pub clamped: bool,
}

impl Plant {
    pub fn validate(&self) -> Result<()> {
        match self {
            Plant::Pendulum(p) => p.validate(),
            Plant::Drone(p) => p.validate(),
        }
    }

    pub fn true_residual(&self, state: State) -> f64 {
        match self {
            Plant::Pendulum(p) => true_residual_pendulum(p, state.q, state.qdot),
            Plant::Drone(p) => true_residual_drone(p, state.q, state.qdot),
        }
    }

    /// Map a demanded generalized force to the delivered one.
    pub fn actuate(&self, demand: f64) -> Actuation {
        match self {
            Plant::Pendulum(_) => Actuation {
                command: demand,
                force: demand,
                clamped: false,
            },
            Plant::Drone(p) => {
                let (command, clamped) = drone_actuator_invert(demand, p.c_t);
                Actuation {
                    command,
                    force: p.c_t * command * command,
                    clamped,
                }
            }
        }
    }
}

impl MixedModel for Plant {
    fn mass(&self, _q: f64) -> f64 {
        match self {
            Plant::Pendulum(p) => p.m * p.l * p.l,
            Plant::Drone(p) => p.m,
        }
    }

    fn coriolis(&self, _q: f64, _qdot: f64) -> f64 {
        0.0
    }

    fn gravity(&self, q: f64) -> f64 {
        match self {
            // Inverted convention: m l² q̈ − m l g sin q − u = d.
            Plant::Pendulum(p) => -p.m * p.l * p.g * q.sin(),
            Plant::Drone(p) => p.m * p.g,
        }
    }

    fn actuation(&self) -> f64 {
        1.0
    }
}

/// Rotor command for a thrust demand; negative demands clamp to zero.
pub fn drone_actuator_invert(force: f64, c_t: f64) -> (f64, bool) {
    if force < 0.0 {
        (0.0, true)
    } else {
        ((force / c_t).sqrt(), false)
    }
}

/// `q̈ = M⁻¹ (B u − C q̇ − G + d)`.
pub fn forward_dynamics<M: MixedModel + ?Sized>(
    model: &M,
    state: State,
    u: f64,
    d: f64,
) -> Result<f64> {
    let mass = model.mass(state.q);
    if mass.abs() < 1e-12 || !mass.is_finite() {
        return Err(Error::SingularMass(state.q));
    }
    let rhs = model.actuation() * u
        - model.coriolis(state.q, state.qdot) * state.qdot
        - model.gravity(state.q)
        + d;
    Ok(rhs / mass)
}

/// Time derivative of a state: `(q̇, q̈)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateRate {
    pub dq: f64,
    pub dqdot: f64,
}

/// Classical RK4 step with the input `u` held over the step.
pub fn step_rk4<F>(derivative: F, t: f64, state: State, u: f64, dt: f64) -> Result<State>
where
    F: Fn(f64, State, f64) -> StateRate,
{
    if !(dt > 0.0) {
        return Err(invalid("dt", "must be positive"));
    }
    let shift = |s: State, k: StateRate, h: f64| State::new(s.q + h * k.dq, s.qdot + h * k.dqdot);
    let k1 = derivative(t, state, u);
    let k2 = derivative(t + 0.5 * dt, shift(state, k1, 0.5 * dt), u);
    let k3 = derivative(t + 0.5 * dt, shift(state, k2, 0.5 * dt), u);
    let k4 = derivative(t + dt, shift(state, k3, dt), u);
    let next = State::new(
        state.q + dt / 6.0 * (k1.dq + 2.0 * k2.dq + 2.0 * k3.dq + k4.dq),
        state.qdot + dt / 6.0 * (k1.dqdot + 2.0 * k2.dqdot + 2.0 * k3.dqdot + k4.dqdot),
    );
    if !next.is_finite() {
        return Err(Error::SimulationDiverged { t: t + dt });
    }
    Ok(next)
}

/// Checks that `Ṁ − 2C` is skew-symmetric at `(q, q̇)`: the symmetric part
/// `(Ṁ − 2C) + (Ṁ − 2C)ᵀ` must vanish within `tol`. `Ṁ = (dM/dq) q̇` by
/// central differences.
pub fn skew_check<M: MixedModel + ?Sized>(model: &M, q: f64, qdot: f64, tol: f64) -> bool {
    let h = 1e-6;
    let m_dot = (model.mass(q + h) - model.mass(q - h)) / (2.0 * h) * qdot;
    let n = m_dot - 2.0 * model.coriolis(q, qdot);
    (n + n).abs() <= tol
}
