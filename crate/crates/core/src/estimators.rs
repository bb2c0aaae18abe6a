//! Zeroth-order gradient estimators.
//!
//! All estimators share the form `g = (v / δ) · (φ₊ − φ₀)`; they differ only in
//! where the two function values come from:
//!
//! * [`two_point_oracle`]: both values from a static function, `f(u + δv)` and `f(u)`.
//! * [`feedback_two_point_estimate`]: two plant measurements taken two steps apart,
//!   before and after the perturbed input is applied.
//! * [`one_point_residual_estimate`]: the current measurement minus the one
//!   taken at the previous iteration.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, standard_normal_vector};

/// Where a perturbation came from in its seeded stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedPosition {
    pub seed: u64,
    pub stream: u64,
    pub index: u64,
}

/// Exploration direction `v ~ N(0, I_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub v: DVector<f64>,
    /// `None` for directions injected by hand.
    pub position: Option<SeedPosition>,
}

impl Perturbation {
    pub fn fixed(v: DVector<f64>) -> Self {
        Self { v, position: None }
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// Source of exploration directions indexed by controller iteration.
pub trait DirectionSource {
    fn draw(&mut self, iteration: u64, dim: usize) -> Perturbation;
}

/// Counter-based Gaussian stream: `(seed, stream, iteration) → v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbationStream {
    pub seed: u64,
    pub stream: u64,
}

impl PerturbationStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn at(&self, index: u64, dim: usize) -> Perturbation {
        let mut rng = keyed_rng(self.seed, self.stream, index);
        Perturbation {
            v: standard_normal_vector(&mut rng, dim),
            position: Some(SeedPosition {
                seed: self.seed,
                stream: self.stream,
                index,
            }),
        }
    }
}

impl DirectionSource for PerturbationStream {
    fn draw(&mut self, iteration: u64, dim: usize) -> Perturbation {
        self.at(iteration, dim)
    }
}

/// Replays a fixed list of directions (cycling). Mostly for tests.
#[derive(Debug, Clone)]
pub struct ScriptedDirections(pub Vec<DVector<f64>>);

impl DirectionSource for ScriptedDirections {
    fn draw(&mut self, iteration: u64, dim: usize) -> Perturbation {
        let v = self.0[iteration as usize % self.0.len()].clone();
        assert_eq!(v.len(), dim, "scripted direction has wrong dimension");
        Perturbation::fixed(v)
    }
}

/// A two-value gradient estimate. Invariant: `g = (v / δ) (phi_plus − phi_base)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub g: DVector<f64>,
    pub phi_plus: f64,
    pub phi_base: f64,
    pub delta: f64,
    pub v: Perturbation,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta", format!("{delta} must be finite and > 0")));
    }
    Ok(())
}

fn assemble(phi_base: f64, phi_plus: f64, v: &Perturbation, delta: f64) -> Result<GradientEstimate> {
    check_delta(delta)?;
    let g = &v.v * ((phi_plus - phi_base) / delta);
    Ok(GradientEstimate {
        g,
        phi_plus,
        phi_base,
        delta,
        v: v.clone(),
    })
}

/// Static two-point oracle `(v / δ)(f(u + δv) − f(u))`.
pub fn two_point_oracle<F>(f: F, u: &DVector<f64>, v: &Perturbation, delta: f64) -> Result<GradientEstimate>
where
    F: Fn(&DVector<f64>) -> f64,
{
    check_delta(delta)?;
    crate::error::check_len("perturbation", u.len(), v.dim())?;
    let phi_base = f(u);
    let phi_plus = f(&(u + &v.v * delta));
    assemble(phi_base, phi_plus, v, delta)
}

/// Two-point estimate from plant measurements: `phi_base` is measured under
/// the unperturbed input, `phi_plus` one plant step later under `u + δv`.
pub fn feedback_two_point_estimate(phi_base: f64, phi_plus: f64, v: &Perturbation, delta: f64) -> Result<GradientEstimate> {
    assemble(phi_base, phi_plus, v, delta)
}

/// Residual-feedback estimate `(v_now / δ)(φ_now − φ_prev)`.
pub fn one_point_residual_estimate(phi_now: f64, phi_prev: f64, v_now: &Perturbation, delta: f64) -> Result<GradientEstimate> {
    assemble(phi_prev, phi_now, v_now, delta)
}

/// Difference between a feedback estimate and the ideal one built with the
/// same direction and smoothing parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorError {
    pub e: DVector<f64>,
    pub norm_sq: f64,
}

pub fn estimator_error(g_feedback: &GradientEstimate, g_ideal: &GradientEstimate) -> Result<EstimatorError> {
    if g_feedback.v.v != g_ideal.v.v {
        return Err(Error::InvalidComparison("estimates use different directions".into()));
    }
    if g_feedback.delta != g_ideal.delta {
        return Err(Error::InvalidComparison(format!(
            "estimates use different smoothing parameters ({} vs {})",
            g_feedback.delta, g_ideal.delta
        )));
    }
    let e = &g_feedback.g - &g_ideal.g;
    let norm_sq = e.norm_squared();
    Ok(EstimatorError { e, norm_sq })
}
