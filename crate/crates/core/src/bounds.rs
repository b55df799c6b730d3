//! Learning and tracking bounds, and tube-based certification of desired
//! trajectories.
//!
//! * [`generalization_bound`] / [`perturbation_bound`]: squared-error bounds
//!   for the robust estimator under covariate shift (expected error on the
//!   target distribution, and worst case inside a perturbation ball).
//! * [`gamma`]: gain from a uniform residual error bound `ε_m` to the
//!   asymptotic tracking-error radius `‖x̃‖ → γ ε_m`.
//! * [`tracking_envelope`]: comparison-lemma envelope on `‖s(t)‖`.
//! * [`certify_trajectory`]: checks that the tube of radius `γ ε_m` around a
//!   desired trajectory stays inside the safety set.
//!
//! Tightened inputs (a smaller density-ratio bound or perturbation radius
//! obtained by constraining the target set) go through the same evaluators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{DesiredTrajectory, SafetySet};
use crate::error::{invalid, Error, Result};

/// Inputs of the generalization and perturbation bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Upper bound on the true target/source density ratio.
    pub w: f64,
    /// Lower bound of `r̂` on the training set.
    pub r: f64,
    /// Lower bound of `θ_y`.
    pub b: f64,
    pub sigma0_sq: f64,
    /// Largest slack over the statistic dimensions.
    pub lambda_bar: f64,
    /// Diameter of the regression function class.
    pub f_diam: f64,
    /// Empirical Rademacher complexity; caller supplied, diagnostic when zero.
    pub rademacher: f64,
    pub delta: f64,
    pub n: usize,
    /// Lipschitz constant of the true residual.
    pub l_true: f64,
    /// Lipschitz constant of the learned mean.
    pub l_hat: f64,
    /// Radius of the perturbation ball around the training data.
    pub eps_ball: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("w", self.w),
            ("r", self.r),
            ("b", self.b),
            ("lambda_bar", self.lambda_bar),
            ("f_diam", self.f_diam),
            ("rademacher", self.rademacher),
            ("l_true", self.l_true),
            ("l_hat", self.l_hat),
            ("eps_ball", self.eps_ball),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    field: "bound_inputs",
                    reason: format!("{name} must be finite and nonnegative, got {v}"),
                });
            }
        }
        if !(self.sigma0_sq > 0.0) {
            return Err(invalid("bound_inputs.sigma0_sq", "must be positive"));
        }
        if self.n < 1 {
            return Err(invalid("bound_inputs.n", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("bound_inputs.delta", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `(2RB + σ0⁻²)⁻¹`, the largest predictive variance once `r ≥ R`, `θ_y ≥ B`.
    pub fn variance_cap(&self) -> f64 {
        variance_cap(self.r, self.b, self.sigma0_sq)
    }
}

pub fn variance_cap(r: f64, b: f64, sigma0_sq: f64) -> f64 {
    1.0 / (2.0 * r * b + 1.0 / sigma0_sq)
}

/// `W [(2RB + σ0⁻²)⁻¹ + λ̄ + 4 M R̂_S + 3 M² √(log(2/δ) / 2n)]`.
pub fn generalization_bound(inp: &BoundInputs) -> f64 {
    let conf = ((2.0 / inp.delta).ln() / (2.0 * inp.n as f64)).sqrt();
    inp.w
        * (inp.variance_cap()
            + inp.lambda_bar
            + 4.0 * inp.f_diam * inp.rademacher
            + 3.0 * inp.f_diam * inp.f_diam * conf)
}

/// `((2RB + σ0⁻²)^{-1/2} + √λ̄ + (L + L̂) ε)²`.
pub fn perturbation_bound(inp: &BoundInputs) -> f64 {
    let root =
        inp.variance_cap().sqrt() + inp.lambda_bar.sqrt() + (inp.l_true + inp.l_hat) * inp.eps_ball;
    root * root
}

/// Eigenvalue bounds of `M`, `K`, `Λ` over the operating set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeParams {
    pub m_min: f64,
    pub m_max: f64,
    pub k_min: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl TubeParams {
    /// Scalar (1-DOF) case: each quantity is its own min and max eigenvalue.
    pub fn scalar(m: f64, k: f64, lambda: f64) -> Result<Self> {
        let t = Self {
            m_min: m,
            m_max: m,
            k_min: k,
            lambda_min: lambda,
            lambda_max: lambda,
        };
        t.validate()?;
        Ok(t)
    }

    /// Eigenvalue extremes of symmetric matrices.
    pub fn from_matrices(
        m: &DMatrix<f64>,
        k: &DMatrix<f64>,
        lambda: &DMatrix<f64>,
    ) -> Result<Self> {
        let ext = |a: &DMatrix<f64>, name: &'static str| -> Result<(f64, f64)> {
            if !a.is_square() || a.nrows() == 0 {
                return Err(invalid(name, "must be a non-empty square matrix"));
            }
            let ev = a.clone().symmetric_eigen().eigenvalues;
            Ok((ev.min(), ev.max()))
        };
        let (m_min, m_max) = ext(m, "tube.m")?;
        let (k_min, _) = ext(k, "tube.k")?;
        let (lambda_min, lambda_max) = ext(lambda, "tube.lambda")?;
        let t = Self {
            m_min,
            m_max,
            k_min,
            lambda_min,
            lambda_max,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.m_min,
            self.m_max,
            self.k_min,
            self.lambda_min,
            self.lambda_max,
        ];
        if !all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(invalid(
                "tube",
                "eigenvalue bounds must be strictly positive",
            ));
        }
        if self.m_min > self.m_max || self.lambda_min > self.lambda_max {
            return Err(invalid("tube", "min eigenvalue exceeds max"));
        }
        Ok(())
    }

    /// Asymptotic bound on `‖s‖` per unit `ε_m`.
    pub fn s_gain(&self) -> f64 {
        self.m_max / (self.k_min * self.m_min)
    }
}

/// `γ = λmax(M) / (λmin(K) λmin(M)) · √((1/λmin(Λ))² + (1 + λmax(Λ)/λmin(Λ))²)`.
pub fn gamma(tube: &TubeParams) -> f64 {
    let a = 1.0 / tube.lambda_min;
    let b = 1.0 + tube.lambda_max / tube.lambda_min;
    tube.s_gain() * (a * a + b * b).sqrt()
}

/// Comparison-lemma envelope on `‖s(t)‖` under a disturbance bounded by `eps_m`.
pub fn tracking_envelope(t: f64, s0_norm: f64, tube: &TubeParams, eps_m: f64) -> f64 {
    let decay = (-tube.k_min * t.max(0.0) / tube.m_max).exp();
    (tube.m_max / tube.m_min).sqrt() * decay * s0_norm + tube.s_gain() * (1.0 - decay) * eps_m
}

/// `ε_m = β σ_max`.
pub fn eps_m_from_sigma(sigma_max: f64, beta: f64) -> f64 {
    beta * sigma_max
}

/// `β = 2 ln(n / δ)`: the smallest β with `1 − n e^{−β/2} ≥ 1 − δ`.
pub fn beta_for_confidence(delta: f64, n: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta", "must lie in (0, 1)"));
    }
    if n < 1 {
        return Err(invalid("n", "must be at least 1"));
    }
    Ok(2.0 * (n as f64 / delta).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Certification {
    Safe { margin: f64 },
    Unsafe { margin: f64 },
}

impl Certification {
    pub fn is_safe(&self) -> bool {
        matches!(self, Certification::Safe { .. })
    }

    pub fn margin(&self) -> f64 {
        match *self {
            Certification::Safe { margin } | Certification::Unsafe { margin } => margin,
        }
    }
}

/// Tube check with radius `ρ = γ ε_m`, projected onto each coordinate.
///
/// * State box: safe iff `max_t |q_g| + ρ < q_abs_max`.
/// * Touchdown speed: at every grid time where the tube can reach the ground
///   (`q_g − ρ ≤ ground`), the slowest admissible rate `q̇_g − ρ` must stay above
///   the limit. If the tube never reaches the ground the margin is the
///   smallest clearance.
pub fn certify_trajectory(
    traj: &DesiredTrajectory,
    gamma_val: f64,
    eps_m: f64,
    set: &SafetySet,
) -> Certification {
    let rho = gamma_val * eps_m;
    let margin = match *set {
        SafetySet::StateBox { q_abs_max } => q_abs_max - (traj.max_abs_q() + rho),
        SafetySet::TouchdownSpeed {
            qdot_min_at_ground,
            ground,
        } => {
            let mut contact: Option<f64> = None;
            let mut clearance = f64::INFINITY;
            for p in traj.points() {
                let low = p.q - rho;
                if low <= ground {
                    let m = p.qdot - rho - qdot_min_at_ground;
                    contact = Some(contact.map_or(m, |c: f64| c.min(m)));
                } else {
                    clearance = clearance.min(low - ground);
                }
            }
            contact.unwrap_or(clearance)
        }
    };
    if margin > 0.0 {
        Certification::Safe { margin }
    } else {
        Certification::Unsafe { margin }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PoolParams;

    fn base_inputs() -> BoundInputs {
        BoundInputs {
            w: 1.0,
            r: 1.0,
            b: 0.5,
            sigma0_sq: 1.0,
            lambda_bar: 0.0,
            f_diam: 0.0,
            rademacher: 0.0,
            delta: 0.05,
            n: 10,
            l_true: 0.0,
            l_hat: 0.0,
            eps_ball: 0.0,
        }
    }

    #[test]
    fn generalization_examples() {
        let mut inp = base_inputs();
        assert!((generalization_bound(&inp) - 0.5).abs() < 1e-15);
        let one = generalization_bound(&BoundInputs {
            f_diam: 1.3,
            rademacher: 0.2,
            ..inp
        });
        inp.w = 0.0;
        assert_eq!(generalization_bound(&inp), 0.0);
        let two = generalization_bound(&BoundInputs {
            w: 2.0,
            f_diam: 1.3,
            rademacher: 0.2,
            ..base_inputs()
        });
        assert!((two - 2.0 * one).abs() < 1e-14);
    }

    #[test]
    fn perturbation_examples() {
        let inp = base_inputs();
        assert!((perturbation_bound(&inp) - inp.variance_cap()).abs() < 1e-15);
        let inp = BoundInputs {
            lambda_bar: 0.04,
            l_true: 1.0,
            l_hat: 1.0,
            eps_ball: 0.1,
            ..base_inputs()
        };
        let expect = (0.5f64.sqrt() + 0.2 + 0.2).powi(2);
        assert!((perturbation_bound(&inp) - expect).abs() < 1e-14);
        assert!((perturbation_bound(&inp) - 1.225_69).abs() < 1e-5);
        let mut last = 0.0;
        for i in 0..50 {
            let v = perturbation_bound(&BoundInputs {
                eps_ball: i as f64 * 0.05,
                ..inp
            });
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn bound_input_validation() {
        assert!(base_inputs().validate().is_ok());
        assert!(BoundInputs {
            delta: 1.0,
            ..base_inputs()
        }
        .validate()
        .is_err());
        assert!(BoundInputs {
            n: 0,
            ..base_inputs()
        }
        .validate()
        .is_err());
        assert!(BoundInputs {
            w: -1.0,
            ..base_inputs()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn gamma_examples() {
        let t = TubeParams::scalar(1.0, 1.0, 1.0).unwrap();
        assert!((gamma(&t) - 5f64.sqrt()).abs() < 1e-15);
        for c in [0.5, 2.0, 7.0] {
            let tc = TubeParams::scalar(1.0, c, 1.0).unwrap();
            assert!((gamma(&tc) - gamma(&t) / c).abs() < 1e-14);
        }
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]));
        let k = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 4.0]));
        let l = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 2.0]));
        let g = gamma(&TubeParams::from_matrices(&m, &k, &l).unwrap());
        assert!((g - 2.0 / 3.0 * (0.25f64 + 4.0).sqrt()).abs() < 1e-12);
        assert!((g - 1.37437).abs() < 1e-5);
        assert!(TubeParams::scalar(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn envelope_examples() {
        let t = TubeParams::scalar(1.0, 1.0, 1.0).unwrap();
        assert!((tracking_envelope(0.0, 2.0, &t, 0.7) - 2.0).abs() < 1e-15);
        assert!((tracking_envelope(1e3, 2.0, &t, 0.7) - 0.7).abs() < 1e-12);
        assert!((tracking_envelope(1.0, 1.0, &t, 0.0) - (-1.0f64).exp()).abs() < 1e-15);
        let t2 = TubeParams::scalar(2.0, 3.0, 1.5).unwrap();
        assert!((tracking_envelope(1e4, 0.0, &t2, 1.0) - t2.s_gain()).abs() < 1e-12);
    }

    #[test]
    fn envelope_monotonicity_and_gamma_identity() {
        let t = TubeParams {
            m_min: 1.0,
            m_max: 2.0,
            k_min: 3.0,
            lambda_min: 1.5,
            lambda_max: 2.5,
        };
        let eps = 0.4;
        let asym = t.s_gain() * eps;
        for (s0, decreasing) in [(5.0, true), (0.0, false)] {
            let mut last = tracking_envelope(0.0, s0, &t, eps);
            for i in 1..200 {
                let v = tracking_envelope(i as f64 * 0.05, s0, &t, eps);
                if decreasing {
                    assert!(v <= last + 1e-15);
                } else {
                    assert!(v >= last - 1e-15);
                }
                last = v;
            }
        }
        // |q̃| → asym/λmin, |q̇̃| → asym(1 + λmax/λmin); their Euclidean norm is γ ε.
        let q = asym / t.lambda_min;
        let qd = asym * (1.0 + t.lambda_max / t.lambda_min);
        assert!((q.hypot(qd) - gamma(&t) * eps).abs() < 1e-12);
    }

    #[test]
    fn eps_and_beta() {
        assert!((eps_m_from_sigma(0.2, 0.5) - 0.1).abs() < 1e-15);
        assert_eq!(eps_m_from_sigma(0.3, 1.0), 0.3);
        assert_eq!(eps_m_from_sigma(0.0, 0.5), 0.0);
        assert!((beta_for_confidence((-2.0f64).exp(), 1).unwrap() - 4.0).abs() < 1e-12);
        let b = beta_for_confidence(0.05, 100).unwrap();
        assert!((b - 2.0 * 2000f64.ln()).abs() < 1e-12);
        assert!((b - 15.2018).abs() < 1e-4);
        assert!(beta_for_confidence(0.05, 200).unwrap() > b);
        assert!(beta_for_confidence(0.01, 100).unwrap() > b);
        assert!(beta_for_confidence(0.0, 1).is_err());
    }

    fn pend(c: f64) -> DesiredTrajectory {
        DesiredTrajectory::sample(PoolParams::Pendulum { amplitude: c }, 0.01, 20.0).unwrap()
    }

    #[test]
    fn certify_state_box() {
        let set = SafetySet::StateBox { q_abs_max: 1.5 };
        assert!(certify_trajectory(&pend(1.0), 0.2, 0.0, &set).is_safe());
        assert!(!certify_trajectory(&pend(0.1), 1.0, 2.0, &set).is_safe());
        let c = certify_trajectory(&pend(0.9), 0.2, 0.5, &set);
        assert!(c.is_safe());
        assert!((c.margin() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn certify_touchdown() {
        let set = SafetySet::TouchdownSpeed {
            qdot_min_at_ground: -1.0,
            ground: 0.0,
        };
        let land = |c: f64, h: f64| {
            DesiredTrajectory::sample(
                PoolParams::Landing {
                    rate: c,
                    hover_height: h,
                },
                0.01,
                10.0,
            )
            .unwrap()
        };
        assert!(certify_trajectory(&land(3.0, 0.0), 0.5, 0.0, &set).is_safe());
        // Tube never reaches the ground: margin is the clearance.
        let c = certify_trajectory(&land(2.0, 1.0), 0.5, 1.0, &set);
        assert!(c.is_safe() && (c.margin() - 0.5).abs() < 1e-3);
        // Radius larger than the start height touches down at t = 0 with zero velocity.
        let c = certify_trajectory(&land(1.0, 0.0), 1.0, 1.6, &set);
        assert!(!c.is_safe());
        assert!(!certify_trajectory(&land(3.0, 0.0), 0.5, 1.0, &set).is_safe());
        assert!(certify_trajectory(&land(0.75, 0.0), 0.5, 1.0, &set).is_safe());
    }

    #[test]
    fn certification_monotone_in_eps() {
        let set = SafetySet::StateBox { q_abs_max: 1.5 };
        for c in [0.3, 0.7, 1.0] {
            let mut was_safe = false;
            for i in (0..100).rev() {
                let safe = certify_trajectory(&pend(c), 0.5, i as f64 * 0.03, &set).is_safe();
                assert!(!(was_safe && !safe));
                was_safe = safe;
            }
        }
    }
}
