//! Model-free feedback optimization of simulated discrete-time plants.
//!
//! The crate couples a nonlinear plant with a quadratic performance objective
//! and drives the plant input with zeroth-order controllers that only observe
//! scalar objective values. Around that loop it provides analytic references
//! (the reduced steady-state objective and its minimizer), the parameter
//! selection rules and convergence bounds for the two-point controller, and an
//! experiment harness with CSV/SVG output.

pub mod cli;
pub mod controllers;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod linalg;
pub mod objective;
pub mod plant;
pub mod plot;
pub mod problem;
pub mod rng;
pub mod stats;
pub mod theory;
pub mod validation;

pub use controllers::{
    run_closed_loop, run_closed_loop_with, Controller, ControllerConfig, Method, MetricSeries, RunOptions,
};
pub use error::{Error, Result};
pub use estimators::{
    estimator_error, feedback_two_point_estimate, one_point_residual_estimate, two_point_oracle, GradientEstimate,
    Perturbation, PerturbationStream,
};
pub use experiments::{run_comparison, sweep, ExperimentConfig, MethodSettings};
pub use objective::{QuadraticObjective, ReducedObjective};
pub use plant::{generate_random_plant, Dims, PlantModel, PlantState};
pub use problem::Problem;
pub use theory::{select_parameters, theorem1_bound, SelectedParameters, TheoryConstants};
