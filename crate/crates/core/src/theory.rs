//! Parameter selection and explicit convergence bounds for the two-point
//! feedback controller.
//!
//! With `ξ = η/2 − 4Lη²(p+4)` the averaged squared gradient norm after `T`
//! updates is bounded by
//!
//! ```text
//! 4(Φ̃_δ(u₀) − Φ̃_low) / (Tη(1 − 8Lη(p+4)))
//!   + 12L³ηδ²(p+4)³ / (1 − 8Lη(p+4))
//!   + 8M_Φ²μp(2Lη + 1) / (δ²(1 − 8Lη(p+4)))
//!   + δ²L²(p+6)³ / 2
//! ```
//!
//! for `η < 1/(8L(p+4))`. Fixing `η = 1/(16L(p+4))` and minimizing over `δ`
//! yields the selection rule in [`select_parameters`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem constants feeding the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Smoothness constant `L` of `Φ̃`.
    pub smoothness: f64,
    /// Lipschitz constant `M_Φ` of `Φ` in `y` (local estimate).
    pub output_lipschitz: f64,
    /// Lipschitz constant `M` of `Φ̃`. Reported, not used by any bound.
    pub input_lipschitz: Option<f64>,
    pub p: usize,
    /// Plant-speed bound `μ`.
    pub mu: f64,
    /// Target stationarity accuracy `ε`.
    pub eps: f64,
    /// Smoothing precision target `ε_Φ`.
    pub eps_phi: f64,
    /// `Φ̃(u₀)`. The smoothed value is bounded above by `Φ̃(u₀) + δ²Lp/2`.
    pub phi_u0: f64,
    /// Lower bound `Φ̃_low`.
    pub phi_low: f64,
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("smoothness", self.smoothness),
            ("output_lipschitz", self.output_lipschitz),
            ("mu", self.mu),
            ("eps", self.eps),
            ("eps_phi", self.eps_phi),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::invalid(name, format!("{value} must be finite and > 0")));
            }
        }
        if self.p == 0 {
            return Err(Error::invalid("p", "must be >= 1"));
        }
        if !(self.phi_u0.is_finite() && self.phi_low.is_finite()) || self.phi_u0 < self.phi_low {
            return Err(Error::invalid(
                "phi_u0",
                format!("need finite phi_u0 >= phi_low, got {} < {}", self.phi_u0, self.phi_low),
            ));
        }
        Ok(())
    }

    fn p(&self) -> f64 {
        self.p as f64
    }

    /// Upper estimate of `Φ̃_δ(u₀) − Φ̃_low` using the smoothing-gap envelope.
    pub fn smoothed_initial_gap(&self, delta: f64) -> f64 {
        self.phi_u0 + smoothing_gap_bound(self.smoothness, self.p, delta) - self.phi_low
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Threshold {
    /// Stationarity threshold `μ₁`.
    Accuracy,
    /// Smoothing-precision threshold `μ₂`.
    Smoothing,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Feasibility {
    Feasible,
    Infeasible { binding: Threshold },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedParameters {
    pub eta: f64,
    pub delta: f64,
    pub delta_sq: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// Minimum number of controller updates, `⌈2c₁/ε⌉`.
    pub t_min: u64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub feasibility: Feasibility,
}

/// `c₂ = (p+6)³ + (p+4)²`.
pub fn c2(p: usize) -> f64 {
    let p = p as f64;
    (p + 6.0).powi(3) + (p + 4.0).powi(2)
}

/// `c₃ = 2M_Φ² p (8p+33) / (p+4)`.
pub fn c3(output_lipschitz: f64, p: usize) -> f64 {
    let p = p as f64;
    2.0 * output_lipschitz.powi(2) * p * (8.0 * p + 33.0) / (p + 4.0)
}

/// Stepsize `η = 1/(16L(p+4))`.
pub fn selected_stepsize(smoothness: f64, p: usize) -> f64 {
    1.0 / (16.0 * smoothness * (p as f64 + 4.0))
}

/// Largest admissible stepsize (exclusive), `1/(8L(p+4))`.
pub fn max_stepsize(smoothness: f64, p: usize) -> f64 {
    1.0 / (8.0 * smoothness * (p as f64 + 4.0))
}

/// Largest smoothing parameter keeping `|Φ̃_δ − Φ̃| ≤ ε_Φ`: `√(2ε_Φ/(Lp))`.
pub fn max_smoothing(smoothness: f64, p: usize, eps_phi: f64) -> f64 {
    (2.0 * eps_phi / (smoothness * p as f64)).sqrt()
}

pub fn select_parameters(tc: &TheoryConstants) -> Result<SelectedParameters> {
    tc.validate()?;
    let l = tc.smoothness;
    let m2 = tc.output_lipschitz.powi(2);
    let p = tc.p();
    let c2 = c2(tc.p);
    let c3 = c3(tc.output_lipschitz, tc.p);
    let eta = selected_stepsize(l, tc.p);

    let delta_sq = (4.0 * m2 * tc.mu * p * (8.0 * p + 33.0) / (l * l * (p + 4.0) * c2)).sqrt();
    let delta = delta_sq.sqrt();

    let mu1 = (p + 4.0) * tc.eps.powi(2) / (16.0 * l * l * m2 * p * (8.0 * p + 33.0) * c2);
    let mu2 = (p + 4.0) * c2 * tc.eps_phi.powi(2) / (m2 * p.powi(3) * (8.0 * p + 33.0));

    let c1 = 128.0 * l * (p + 4.0) * tc.smoothed_initial_gap(delta);
    let t_min = (2.0 * c1 / tc.eps).ceil() as u64;

    let feasibility = match (tc.mu > mu1, tc.mu > mu2) {
        (false, false) => Feasibility::Feasible,
        (true, false) => Feasibility::Infeasible {
            binding: Threshold::Accuracy,
        },
        (false, true) => Feasibility::Infeasible {
            binding: Threshold::Smoothing,
        },
        (true, true) => Feasibility::Infeasible {
            binding: Threshold::Both,
        },
    };

    Ok(SelectedParameters {
        eta,
        delta,
        delta_sq,
        mu1,
        mu2,
        t_min,
        c1,
        c2,
        c3,
        feasibility,
    })
}

/// The four terms of the averaged-gradient bound, in order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub initial_gap: f64,
    pub estimator_variance: f64,
    pub plant_transient: f64,
    pub smoothing_bias: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.initial_gap + self.estimator_variance + self.plant_transient + self.smoothing_bias
    }
}

pub fn theorem1_terms(tc: &TheoryConstants, eta: f64, delta: f64, updates: u64) -> Result<BoundTerms> {
    let l = tc.smoothness;
    let p = tc.p();
    if !(eta > 0.0 && eta < max_stepsize(l, tc.p)) {
        return Err(Error::invalid(
            "eta",
            format!("{eta} outside (0, {})", max_stepsize(l, tc.p)),
        ));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta", format!("{delta} must be finite and > 0")));
    }
    if updates == 0 {
        return Err(Error::invalid("updates", "must be >= 1"));
    }
    if !(l > 0.0 && tc.mu >= 0.0 && tc.output_lipschitz >= 0.0) {
        return Err(Error::invalid("constants", "need L > 0, mu >= 0, M_phi >= 0"));
    }
    let t = updates as f64;
    let d2 = delta * delta;
    let slack = 1.0 - 8.0 * l * eta * (p + 4.0);
    Ok(BoundTerms {
        initial_gap: 4.0 * tc.smoothed_initial_gap(delta) / (t * eta * slack),
        estimator_variance: 12.0 * l.powi(3) * eta * d2 * (p + 4.0).powi(3) / slack,
        plant_transient: 8.0 * tc.output_lipschitz.powi(2) * tc.mu * p * (2.0 * l * eta + 1.0) / (d2 * slack),
        smoothing_bias: d2 * l * l * (p + 6.0).powi(3) / 2.0,
    })
}

/// Right-hand side of the averaged-gradient bound after `updates` controller updates.
pub fn theorem1_bound(tc: &TheoryConstants, eta: f64, delta: f64, updates: u64) -> Result<f64> {
    theorem1_terms(tc, eta, delta, updates).map(|t| t.total())
}

/// Bound on the mean squared error between feedback and ideal two-point
/// estimates: `4M_Φ²μp/δ²`.
pub fn lemma2_bound(output_lipschitz: f64, mu: f64, p: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta", format!("{delta} must be finite and > 0")));
    }
    Ok(4.0 * output_lipschitz.powi(2) * mu * p as f64 / (delta * delta))
}

/// Gaussian smoothing gap envelope `δ²Lp/2`.
pub fn smoothing_gap_bound(smoothness: f64, p: usize, delta: f64) -> f64 {
    delta * delta * smoothness * p as f64 / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constants(l: f64, m: f64, mu: f64, p: usize) -> TheoryConstants {
        TheoryConstants {
            smoothness: l,
            output_lipschitz: m,
            input_lipschitz: None,
            p,
            mu,
            eps: 1e-2,
            eps_phi: 1e-3,
            phi_u0: 10.0,
            phi_low: 1.0,
        }
    }

    #[test]
    fn stepsize_substitution() {
        let sel = select_parameters(&constants(1.0, 1.0, 1e-12, 4)).unwrap();
        assert_eq!(sel.eta, 1.0 / 128.0);
        assert_eq!(sel.eta, 0.0078125);
    }

    #[test]
    fn c2_arithmetic() {
        assert_eq!(c2(4), 1064.0);
    }

    #[test]
    fn lemma2_arithmetic() {
        assert_eq!(lemma2_bound(1.0, 0.0, 3, 0.1).unwrap(), 0.0);
        assert_eq!(lemma2_bound(1.0, 1.0, 1, 1.0).unwrap(), 4.0);
        assert!(lemma2_bound(1.0, 1.0, 1, 0.0).is_err());
    }

    #[test]
    fn smoothing_gap_arithmetic() {
        assert_eq!(smoothing_gap_bound(1.0, 5, 0.0), 0.0);
        assert_eq!(smoothing_gap_bound(2.0, 3, 1.0), 3.0);
    }

    #[test]
    fn infeasible_mu_is_reported() {
        let sel = select_parameters(&constants(1.0, 1.0, 1.0, 5)).unwrap();
        assert_eq!(
            sel.feasibility,
            Feasibility::Infeasible {
                binding: Threshold::Both
            }
        );
        let tiny = select_parameters(&constants(1.0, 1.0, 1e-14, 5)).unwrap();
        assert!(tiny.feasibility.is_feasible());
    }

    #[test]
    fn invalid_constants_rejected() {
        assert!(select_parameters(&constants(0.0, 1.0, 1e-6, 5)).is_err());
        assert!(select_parameters(&constants(1.0, -1.0, 1e-6, 5)).is_err());
        assert!(select_parameters(&constants(1.0, 1.0, 0.0, 5)).is_err());
        assert!(select_parameters(&constants(1.0, 1.0, 1e-6, 0)).is_err());
    }

    #[test]
    fn bound_rejects_large_stepsize() {
        let tc = constants(1.0, 1.0, 1e-6, 4);
        assert!(theorem1_bound(&tc, max_stepsize(1.0, 4), 0.1, 10).is_err());
        assert!(theorem1_bound(&tc, 0.5 * max_stepsize(1.0, 4), 0.1, 10).is_ok());
        assert!(theorem1_bound(&tc, 0.5 * max_stepsize(1.0, 4), 0.1, 0).is_err());
    }

    #[test]
    fn bound_terms_vanish_in_the_limit() {
        let mut tc = constants(2.0, 1.0, 1e-6, 3);
        tc.mu = 0.0;
        let eta = selected_stepsize(2.0, 3);
        let coarse = theorem1_terms(&tc, eta, 1e-1, 10).unwrap();
        let fine = theorem1_terms(&tc, eta, 1e-4, 10_000_000).unwrap();
        assert_eq!(fine.plant_transient, 0.0);
        assert!(fine.total() < 1e-3 * coarse.total());
    }

    #[test]
    fn theorem2_parameters_meet_target() {
        // At the selected parameters, with mu <= min(mu1, mu2) and T >= T_min,
        // the c-form splits as c1/T <= eps/2 and L sqrt(2 c2 c3 mu) <= eps/2.
        let mut tc = constants(3.0, 2.0, 1.0, 5);
        let probe = select_parameters(&tc).unwrap();
        tc.mu = 0.5 * probe.mu1.min(probe.mu2);
        let sel = select_parameters(&tc).unwrap();
        assert!(sel.feasibility.is_feasible());
        let l = tc.smoothness;
        assert!(sel.c1 / sel.t_min as f64 <= tc.eps / 2.0 * (1.0 + 1e-12));
        assert!(l * (2.0 * sel.c2 * sel.c3 * tc.mu).sqrt() <= tc.eps / 2.0);
        let bound = theorem1_bound(&tc, sel.eta, sel.delta, sel.t_min).unwrap();
        let p = tc.p as f64;
        let slack = l * l * sel.delta_sq * (p + 4.0).powi(2);
        assert!(bound <= tc.eps + slack, "{bound} > {} + {slack}", tc.eps);
    }

    proptest! {
        #[test]
        fn feasible_selection_meets_preconditions(
            l in 0.1f64..1e3,
            m in 0.1f64..50.0,
            log_mu in -20.0f64..0.0,
            p in 1usize..30,
            eps in 1e-4f64..10.0,
            eps_phi in 1e-5f64..1.0,
        ) {
            let tc = TheoryConstants { eps, eps_phi, ..constants(l, m, 10f64.powf(log_mu), p) };
            let sel = select_parameters(&tc).unwrap();
            prop_assert!(sel.eta < max_stepsize(l, p));
            if sel.feasibility.is_feasible() {
                prop_assert!(sel.delta <= max_smoothing(l, p, eps_phi) * (1.0 + 1e-12));
            }
        }

        #[test]
        fn thresholds_decrease_and_delta_increases(
            l in 0.1f64..1e3,
            m in 0.1f64..50.0,
            log_mu in -20.0f64..0.0,
            p in 1usize..30,
            factor in 1.01f64..10.0,
        ) {
            let base = select_parameters(&constants(l, m, 10f64.powf(log_mu), p)).unwrap();
            let larger_l = select_parameters(&constants(l * factor, m, 10f64.powf(log_mu), p)).unwrap();
            let larger_m = select_parameters(&constants(l, m * factor, 10f64.powf(log_mu), p)).unwrap();
            let larger_mu = select_parameters(&constants(l, m, 10f64.powf(log_mu) * factor, p)).unwrap();
            prop_assert!(larger_l.mu1 < base.mu1);
            prop_assert!(larger_m.mu1 < base.mu1);
            prop_assert!(larger_m.mu2 < base.mu2);
            // mu2 does not depend on L
            prop_assert_eq!(larger_l.mu2, base.mu2);
            prop_assert!(larger_mu.delta_sq > base.delta_sq);
        }

        #[test]
        fn bound_terms_nonnegative(
            l in 0.1f64..100.0,
            m in 0.0f64..10.0,
            mu in 0.0f64..1.0,
            p in 1usize..20,
            frac in 0.01f64..0.99,
            delta in 1e-6f64..1.0,
            t in 1u64..100_000,
        ) {
            let mut tc = constants(l, m.max(1e-9), mu.max(1e-12), p);
            tc.output_lipschitz = m;
            tc.mu = mu;
            let eta = frac * max_stepsize(l, p);
            let terms = theorem1_terms(&tc, eta, delta, t).unwrap();
            prop_assert!(terms.initial_gap >= 0.0);
            prop_assert!(terms.estimator_variance >= 0.0);
            prop_assert!(terms.plant_transient >= 0.0);
            prop_assert!(terms.smoothing_bias >= 0.0);
        }
    }
}
