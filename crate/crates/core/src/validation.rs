//! Property checks of the estimator lemmas, the convergence bounds and the
//! plant model, each reported with the measured value, the bound it is held
//! to and the remaining margin.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::controllers::{run_closed_loop, run_closed_loop_with, ControllerConfig, Method, MetricSeries, RunOptions};
use crate::error::{Error, Result};
use crate::estimators::{estimator_error, two_point_oracle, PerturbationStream};
use crate::experiments::TheoryTargets;
use crate::linalg::{symmetric_lambda_max, symmetric_lambda_min};
use crate::objective::{gaussian_smoothed_value, ReducedObjective};
use crate::plant::{generate_random_plant, Dims};
use crate::problem::Problem;
use crate::rng::{keyed_rng, standard_normal_vector, streams};
use crate::stats::RunningStats;
use crate::theory::{
    lemma2_bound, select_parameters, selected_stepsize, smoothing_gap_bound, theorem1_bound, SelectedParameters,
    TheoryConstants,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Lemmas,
    Bounds,
    Plant,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemmas" => Ok(Suite::Lemmas),
            "bounds" => Ok(Suite::Bounds),
            "plant" => Ok(Suite::Plant),
            other => Err(Error::Config(format!("unknown suite `{other}` (lemmas|bounds|plant)"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Lemmas => "lemmas",
            Suite::Bounds => "bounds",
            Suite::Plant => "plant",
        })
    }
}

/// Outcome of one check. `margin` is positive when the check passes with room
/// to spare and negative when it fails.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
}

impl CheckOutcome {
    /// `measured ≤ bound`.
    pub fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured <= bound,
            measured,
            bound,
            margin: bound - measured,
        }
    }

    /// `|measured − target| ≤ tolerance`; `bound` holds the tolerance.
    pub fn within(name: impl Into<String>, measured: f64, target: f64, tolerance: f64) -> Self {
        let dev = (measured - target).abs();
        Self {
            name: name.into(),
            passed: dev <= tolerance,
            measured,
            bound: tolerance,
            margin: tolerance - dev,
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<48} measured={:.6e} bound={:.6e} margin={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.bound,
            self.margin
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationOptions {
    pub samples: u64,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &ValidationOptions) -> Result<Vec<CheckOutcome>> {
    if opts.samples == 0 {
        return Err(Error::invalid("samples", "must be >= 1"));
    }
    match suite {
        Suite::Lemmas => lemmas_suite(opts),
        Suite::Bounds => bounds_suite(opts),
        Suite::Plant => plant_suite(opts),
    }
}

/// Empirical `‖v‖`, `‖v‖²`, `‖v‖⁴` moments of `v ~ N(0, I_p)`.
pub fn gaussian_norm_moments(p: usize, samples: u64, seed: u64) -> [RunningStats; 3] {
    let stream = PerturbationStream::new(seed, streams::VALIDATION);
    let mut out = [RunningStats::default(), RunningStats::default(), RunningStats::default()];
    for i in 0..samples {
        let n2 = stream.at(i, p).v.norm_squared();
        out[0].push(n2.sqrt());
        out[1].push(n2);
        out[2].push(n2 * n2);
    }
    out
}

/// Random positive-definite `Q` and linear term for a test quadratic `uᵀQu + bᵀu`.
pub fn random_quadratic(p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = keyed_rng(seed, streams::VALIDATION, u64::MAX);
    let r = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>());
    let q = r.transpose() * &r + DMatrix::identity(p, p) * 0.1;
    let b = standard_normal_vector(&mut rng, p);
    (q, b)
}

fn lemmas_suite(opts: &ValidationOptions) -> Result<Vec<CheckOutcome>> {
    let mut checks = Vec::new();
    for p in [1usize, 5, 20] {
        let [n1, n2, n4] = gaussian_norm_moments(p, opts.samples, opts.seed.wrapping_add(p as u64));
        let pf = p as f64;
        checks.push(CheckOutcome::at_most(
            format!("moments p={p}: E|v| <= sqrt(p)"),
            n1.mean(),
            pf.sqrt() + 3.0 * n1.std_error(),
        ));
        checks.push(CheckOutcome::within(
            format!("moments p={p}: E|v|^2 = p"),
            n2.mean(),
            pf,
            3.0 * n2.std_error(),
        ));
        checks.push(CheckOutcome::at_most(
            format!("moments p={p}: E|v|^4 <= (p+4)^2"),
            n4.mean(),
            (pf + 4.0).powi(2) + 3.0 * n4.std_error(),
        ));
    }

    let p = 3;
    let (q, b) = random_quadratic(p, opts.seed);
    let f = |u: &DVector<f64>| (&q * u).dot(u) + b.dot(u);
    let l = 2.0 * symmetric_lambda_max(&q);

    let delta = 0.1;
    let u = DVector::from_element(p, 0.5);
    let smoothed = gaussian_smoothed_value(f, &u, delta, opts.samples as usize, opts.seed)?;
    let gap = smoothed.mean - f(&u);
    checks.push(CheckOutcome::within(
        "smoothing gap = delta^2 tr(Q)",
        gap,
        delta * delta * q.trace(),
        3.0 * smoothed.std_error,
    ));
    checks.push(CheckOutcome::at_most(
        "smoothing gap <= delta^2 L p / 2",
        gap.abs(),
        smoothing_gap_bound(l, p, delta),
    ));

    let delta = 1e-3;
    let stream = PerturbationStream::new(opts.seed, streams::VALIDATION + 1);
    let mut rng = keyed_rng(opts.seed, streams::VALIDATION, u64::MAX - 1);
    for point in 0..2 {
        let u = standard_normal_vector(&mut rng, p);
        let grad = &q * &u * 2.0 + &b;
        let mut coords = vec![RunningStats::default(); p];
        let mut second = RunningStats::default();
        for i in 0..opts.samples {
            let v = stream.at(point * opts.samples + i, p);
            let est = two_point_oracle(f, &u, &v, delta)?;
            for (c, g) in coords.iter_mut().zip(est.g.iter()) {
                c.push(*g);
            }
            second.push(est.g.norm_squared());
        }
        for (i, c) in coords.iter().enumerate() {
            checks.push(CheckOutcome::within(
                format!("oracle unbiased point {point} coord {i}"),
                c.mean(),
                grad[i],
                3.0 * c.std_error(),
            ));
        }
        let pf = p as f64;
        checks.push(CheckOutcome::at_most(
            format!("oracle second moment point {point}"),
            second.mean(),
            4.0 * (pf + 4.0) * grad.norm_squared() + 3.0 * delta * delta * l * l * (pf + 4.0).powi(3),
        ));
    }
    Ok(checks)
}

/// Theorem-2 stepsize with a smoothing parameter consistent with the plant
/// speed it induces: `δ` is recomputed from the measured `μ̂` until it moves by
/// less than 1% (at most `max_rounds` runs).
#[derive(Debug, Clone, PartialEq)]
pub struct TunedParameters {
    pub eta: f64,
    pub delta: f64,
    pub rounds: usize,
    pub selected: SelectedParameters,
}

pub fn tune_two_point(
    reduced: &ReducedObjective<'_>,
    seed: u64,
    budget: u64,
    targets: TheoryTargets,
    delta_start: f64,
    max_rounds: usize,
) -> Result<TunedParameters> {
    let p = reduced.plant().dims().p;
    let smoothness = reduced.smoothness();
    let eta = selected_stepsize(smoothness, p);
    let phi_u0 = reduced.tilde_phi(&DVector::zeros(p))?;
    let phi_low = reduced.analytic_minimizer()?.value;
    let mut delta = delta_start;
    let mut last = None;
    for round in 1..=max_rounds.max(1) {
        let cfg = ControllerConfig::new(Method::TwoPointRgf, eta, delta, seed);
        let series = run_closed_loop(&cfg, reduced, &RunOptions::with_budget(budget))?;
        if let Some(k) = series.diverged_at {
            return Err(Error::invalid("delta", format!("run diverged at update {k} with delta {delta}")));
        }
        let selected = select_parameters(&TheoryConstants {
            smoothness,
            output_lipschitz: series.output_lipschitz(),
            input_lipschitz: None,
            p,
            mu: series.mu_hat,
            eps: targets.eps,
            eps_phi: targets.eps_phi,
            phi_u0,
            phi_low,
        })?;
        let settled = (selected.delta - delta).abs() <= 0.01 * delta;
        delta = selected.delta;
        last = Some((round, selected));
        if settled {
            break;
        }
    }
    let (rounds, selected) = last.expect("at least one round");
    Ok(TunedParameters {
        eta,
        delta,
        rounds,
        selected,
    })
}

/// Theory constants for one finished run, using its own `μ̂` and `M_Φ`.
pub fn run_constants(reduced: &ReducedObjective<'_>, series: &MetricSeries, targets: TheoryTargets) -> Result<TheoryConstants> {
    let p = reduced.plant().dims().p;
    Ok(TheoryConstants {
        smoothness: reduced.smoothness(),
        output_lipschitz: series.output_lipschitz(),
        input_lipschitz: None,
        p,
        mu: series.mu_hat,
        eps: targets.eps,
        eps_phi: targets.eps_phi,
        phi_u0: reduced.tilde_phi(&DVector::zeros(p))?,
        phi_low: reduced.analytic_minimizer()?.value,
    })
}

/// Mean squared feedback-vs-ideal estimator error over a run, with the run's series.
pub fn paired_estimator_error(
    cfg: &ControllerConfig,
    reduced: &ReducedObjective<'_>,
    updates: u64,
) -> Result<(RunningStats, MetricSeries)> {
    let mut errors = RunningStats::default();
    let mut failure = None;
    let source = PerturbationStream::new(cfg.seed, cfg.method.stream_id());
    let opts = RunOptions::with_budget(updates * cfg.method.steps_per_update());
    let series = run_closed_loop_with(cfg, reduced, &opts, source, |rec| {
        let Some(est) = &rec.estimate else { return };
        let ideal = two_point_oracle(|u| reduced.tilde_phi(u).unwrap_or(f64::NAN), &rec.u_before, &est.v, est.delta);
        match ideal.and_then(|ideal| estimator_error(est, &ideal)) {
            Ok(e) => errors.push(e.norm_sq),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((errors, series))
}

/// Neither target enters the explicit bound; they only feed the feasibility report.
pub const BOUND_TARGETS: TheoryTargets = TheoryTargets { eps: 1.0, eps_phi: 1.0 };
pub const BOUND_BUDGET: u64 = 10_000;
/// Starting smoothing for the fixed-point search; must keep the loop stable.
pub const TUNING_START: f64 = 1e-2;
pub const TUNING_ROUNDS: usize = 10;

fn bounds_suite(opts: &ValidationOptions) -> Result<Vec<CheckOutcome>> {
    let problem = Problem::generate(opts.seed, opts.seed, Dims::default(), 0.05, 0.01)?;
    let reduced = ReducedObjective::new(&problem.objective, &problem.plant)?;
    let p = problem.plant.dims().p;
    let tuned = tune_two_point(&reduced, opts.seed, BOUND_BUDGET, BOUND_TARGETS, TUNING_START, TUNING_ROUNDS)?;
    let mut checks = Vec::new();

    let cfg = ControllerConfig::new(Method::TwoPointRgf, tuned.eta, tuned.delta, opts.seed);
    let (errors, series) = paired_estimator_error(&cfg, &reduced, opts.samples)?;
    checks.push(CheckOutcome::at_most(
        "estimator error <= 4 M^2 mu p / delta^2",
        errors.mean(),
        lemma2_bound(series.output_lipschitz(), series.mu_hat, p, tuned.delta)?,
    ));

    for k in 0..10u64 {
        let seed = opts.seed.wrapping_add(k);
        let cfg = ControllerConfig::new(Method::TwoPointRgf, tuned.eta, tuned.delta, seed);
        let series = run_closed_loop(&cfg, &reduced, &RunOptions::with_budget(BOUND_BUDGET))?;
        let t = series.total_updates;
        let avg = series.grad_norm_sq[..t as usize].iter().sum::<f64>() / t as f64;
        let tc = run_constants(&reduced, &series, BOUND_TARGETS)?;
        checks.push(CheckOutcome::at_most(
            format!("averaged gradient bound seed {seed}"),
            avg,
            theorem1_bound(&tc, tuned.eta, tuned.delta, t)?,
        ));
    }
    Ok(checks)
}

/// Number of exact-gradient updates after which the linearised iteration
/// `u ← u − η(2Qu + b)` has contracted `initial` down to `tol/10`.
pub fn exact_gradient_steps(reduced: &ReducedObjective<'_>, eta: f64, initial: f64, tol: f64) -> u64 {
    let q2 = reduced.half_hessian() * 2.0;
    let lo = symmetric_lambda_min(&q2);
    let hi = symmetric_lambda_max(&q2);
    let rate = (1.0 - eta * lo).abs().max((1.0 - eta * hi).abs());
    if rate >= 1.0 || initial <= tol {
        return 0;
    }
    ((10.0 * initial / tol).ln() / -rate.ln()).ceil() as u64
}

fn plant_suite(opts: &ValidationOptions) -> Result<Vec<CheckOutcome>> {
    let mut checks = Vec::new();
    let dims = Dims::default();
    let mut worst_settle: f64 = 0.0;
    let mut worst_map: f64 = 0.0;
    for k in 0..20u64 {
        let seed = opts.seed.wrapping_add(k);
        let plant = generate_random_plant(seed, dims, 0.05, 0.01)?;
        let mut rng = keyed_rng(seed, streams::VALIDATION, 0);
        let u = standard_normal_vector(&mut rng, dims.p);
        let mut state = plant.initial_state(standard_normal_vector(&mut rng, dims.n))?;
        for _ in 0..1000 {
            plant.advance(&mut state, &u)?;
        }
        let x_ss = plant.steady_state_state(&u)?;
        worst_settle = worst_settle.max((&state.x - &x_ss).norm());
        let via_map = plant.sensitivity() * &u + plant.output_offset_at_rest();
        worst_map = worst_map.max((plant.steady_state_output(&u)? - via_map).norm());
    }
    checks.push(CheckOutcome::at_most("constant input settles (20 plants)", worst_settle, 1e-8));
    checks.push(CheckOutcome::at_most("steady-state output = G u + H", worst_map, 1e-10));

    let problem = Problem::generate(opts.seed, opts.seed, dims, 0.05, 0.01)?;
    let reduced = ReducedObjective::new(&problem.objective, &problem.plant)?;
    let min = reduced.analytic_minimizer()?;
    let eta = 1e-3;
    let tol = 1e-6;
    let steps = exact_gradient_steps(&reduced, eta, min.u.norm(), tol);
    let opts = RunOptions {
        record_stride: steps.max(1),
        record_inputs: true,
        ..RunOptions::with_budget(steps.max(1))
    };
    let series = run_closed_loop(&ControllerConfig::new(Method::ExactGradient, eta, 1.0, 0), &reduced, &opts)?;
    let u_final = series.inputs.as_ref().and_then(|u| u.last()).expect("inputs recorded");
    checks.push(CheckOutcome::at_most(
        format!("exact gradient reaches minimizer ({steps} steps)"),
        (u_final - &min.u).norm(),
        tol,
    ));
    Ok(checks)
}
