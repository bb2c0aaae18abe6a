//! Command-line front end.
//!
//! Exit codes: 0 success, 1 run failure, 2 usage error, 3 infeasible
//! parameters, 4 validation failure, 5 I/O error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::controllers::Method;
use crate::error::{Error, Result};
use crate::experiments::{
    export_csv, run_comparison, save_record, sweep, sweep_aggregates, ComparisonResult, ExperimentConfig,
    MethodSettings, SweepParameter,
};
use crate::linalg::spectral_norm;
use crate::objective::ReducedObjective;
use crate::plant::Dims;
use crate::plot::{emit_plot, Axis, PlotMetric, PlotOptions};
use crate::problem::Problem;
use crate::theory::{select_parameters, Feasibility, TheoryConstants};
use crate::validation::{run_suite, Suite, ValidationOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "zofo", version, about = "Zeroth-order feedback optimization of simulated plants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a random plant and objective and write them to a problem file.
    GenPlant(GenPlantArgs),
    /// Print the theory-selected stepsize, smoothing and plant-speed thresholds.
    SelectParams(SelectParamsArgs),
    /// Run a single controller on one instance.
    Run(RunArgs),
    /// Compare methods across seeds.
    Compare(CompareArgs),
    /// Sweep the stepsize or smoothing parameter of the two-point controller.
    Sweep(SweepArgs),
    /// Run a property-check suite.
    Validate(ValidateArgs),
    /// Plot a CSV produced by `run` or `compare`.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct GenPlantArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the objective; defaults to the plant seed.
    #[arg(long)]
    objective_seed: Option<u64>,
    #[arg(long, default_value_t = Dims::default())]
    dims: Dims,
    #[arg(long, default_value_t = 0.05)]
    a_norm: f64,
    #[arg(long, default_value_t = 0.01)]
    f_norm: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SelectParamsArgs {
    /// Smoothness constant of the reduced objective.
    #[arg(long = "L")]
    smoothness: f64,
    /// Lipschitz constant of the objective in the output.
    #[arg(long = "Mphi")]
    output_lipschitz: f64,
    /// Plant-speed bound.
    #[arg(long)]
    mu: f64,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    eps: f64,
    #[arg(long = "eps-phi")]
    eps_phi: f64,
    /// Reduced objective at the initial input (enters the update count only).
    #[arg(long = "phi-u0", default_value_t = 1.0)]
    phi_u0: f64,
    /// Lower bound of the reduced objective.
    #[arg(long = "phi-low", default_value_t = 0.0)]
    phi_low: f64,
}

/// Flags shared by every experiment subcommand; each overrides the
/// corresponding key of `--config`.
#[derive(Debug, Args, Clone, Default)]
struct ExperimentFlags {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem file from `gen-plant`, used instead of the seeds.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long)]
    plant_seed: Option<u64>,
    #[arg(long)]
    objective_seed: Option<u64>,
    #[arg(long)]
    dims: Option<Dims>,
    #[arg(long)]
    a_norm: Option<f64>,
    #[arg(long)]
    f_norm: Option<f64>,
    /// Plant-step budget shared by all methods.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    record_stride: Option<u64>,
}

impl ExperimentFlags {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.problem {
            cfg.problem_file = Some(v.clone());
        }
        if let Some(v) = self.plant_seed {
            cfg.plant_seed = v;
        }
        if let Some(v) = self.objective_seed {
            cfg.objective_seed = v;
        }
        if let Some(v) = self.dims {
            cfg.dims = v;
        }
        if let Some(v) = self.a_norm {
            cfg.a_norm = v;
        }
        if let Some(v) = self.f_norm {
            cfg.f_norm = v;
        }
        if let Some(v) = self.budget {
            cfg.plant_step_budget = v;
        }
        if let Some(v) = self.record_stride {
            cfg.record_stride = v;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args, Clone)]
struct PlotFlags {
    /// x axis of the plot: updates or plant-steps.
    #[arg(long, default_value = "plant-steps")]
    axis: Axis,
    /// Plotted metric: grad or gap.
    #[arg(long, default_value = "grad")]
    metric: PlotMetric,
    /// Use a linear instead of a logarithmic y axis.
    #[arg(long)]
    linear_y: bool,
    #[arg(long)]
    title: Option<String>,
}

impl PlotFlags {
    fn options(&self) -> PlotOptions {
        PlotOptions {
            log_y: !self.linear_y,
            axis: self.axis,
            metric: self.metric,
            title: self.title.clone(),
            ..PlotOptions::default()
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentFlags,
    #[arg(long, default_value = "two-point-rgf")]
    method: Method,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Controller seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_plot: Option<PathBuf>,
    #[command(flatten)]
    plot: PlotFlags,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    experiment: ExperimentFlags,
    /// Use controller seeds 0..k.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_plot: Option<PathBuf>,
    /// Experiment record (config, constants, empirical plant speed) as TOML.
    #[arg(long)]
    out_record: Option<PathBuf>,
    #[command(flatten)]
    plot: PlotFlags,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentFlags,
    /// Parameter to sweep: eta or delta.
    #[arg(long)]
    param: SweepParameter,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Stepsize of the two-point controller when sweeping delta.
    #[arg(long)]
    eta: Option<f64>,
    /// Smoothing of the two-point controller when sweeping eta.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seeds: Option<u64>,
    /// Directory receiving one CSV per swept value.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    out_plot: Option<PathBuf>,
    #[command(flatten)]
    plot: PlotFlags,
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    /// lemmas, bounds or plant.
    #[arg(long)]
    #[serde(serialize_with = "display")]
    suite: Suite,
    #[arg(long, default_value_t = 100_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    plot: PlotFlags,
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Runs the binary with process arguments and returns the exit code.
pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Csv { .. } => EXIT_IO,
        Error::Config(_)
        | Error::InvalidParameter { .. }
        | Error::Dimension { .. }
        | Error::ModelInvalid(_)
        | Error::Parse { .. } => EXIT_USAGE,
        Error::Run { source, .. } => exit_code(source),
        _ => EXIT_RUN,
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenPlant(a) => gen_plant(a, out),
        Command::SelectParams(a) => select_params(a, out),
        Command::Run(a) => run_single(a, out),
        Command::Compare(a) => compare(a, out),
        Command::Sweep(a) => run_sweep(a, out),
        Command::Validate(a) => validate(a, out),
        Command::Plot(a) => plot(a, out),
    }
}

fn echo<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(format!("cannot render configuration: {e}")))?;
    w(out, "# resolved configuration")?;
    for line in text.lines() {
        w(out, &format!("#   {line}"))?;
    }
    Ok(())
}

fn w(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

#[derive(Serialize)]
struct GenPlantEcho {
    seed: u64,
    objective_seed: u64,
    dims: String,
    a_norm: f64,
    f_norm: f64,
    out: PathBuf,
}

fn gen_plant(a: GenPlantArgs, out: &mut dyn Write) -> Result<i32> {
    let objective_seed = a.objective_seed.unwrap_or(a.seed);
    echo(
        out,
        &GenPlantEcho {
            seed: a.seed,
            objective_seed,
            dims: a.dims.to_string(),
            a_norm: a.a_norm,
            f_norm: a.f_norm,
            out: a.out.clone(),
        },
    )?;
    let problem = Problem::generate(a.seed, objective_seed, a.dims, a.a_norm, a.f_norm)?;
    let reduced = ReducedObjective::new(&problem.objective, &problem.plant)?;
    problem.save(&a.out)?;
    w(out, &format!("wrote {}", a.out.display()))?;
    w(out, &format!("norm_G = {:.12e}", spectral_norm(reduced.sensitivity())))?;
    w(out, &format!("L = {:.12e}", reduced.smoothness()))?;
    if let Ok(min) = reduced.analytic_minimizer() {
        w(out, &format!("phi_low = {:.12e}", min.value))?;
    }
    Ok(EXIT_OK)
}

fn select_params(a: SelectParamsArgs, out: &mut dyn Write) -> Result<i32> {
    echo(out, &a)?;
    let sel = select_parameters(&TheoryConstants {
        smoothness: a.smoothness,
        output_lipschitz: a.output_lipschitz,
        input_lipschitz: None,
        p: a.p,
        mu: a.mu,
        eps: a.eps,
        eps_phi: a.eps_phi,
        phi_u0: a.phi_u0,
        phi_low: a.phi_low,
    })?;
    for (name, value) in [
        ("eta", sel.eta),
        ("delta", sel.delta),
        ("delta_sq", sel.delta_sq),
        ("mu1", sel.mu1),
        ("mu2", sel.mu2),
        ("c1", sel.c1),
        ("c2", sel.c2),
        ("c3", sel.c3),
    ] {
        w(out, &format!("{name} = {value:.17e}"))?;
    }
    w(out, &format!("t_min = {}", sel.t_min))?;
    match sel.feasibility {
        Feasibility::Feasible => {
            w(out, "verdict = feasible")?;
            Ok(EXIT_OK)
        }
        Feasibility::Infeasible { binding } => {
            let binding = match binding {
                crate::theory::Threshold::Accuracy => "mu1",
                crate::theory::Threshold::Smoothing => "mu2",
                crate::theory::Threshold::Both => "mu1,mu2",
            };
            w(out, "verdict = infeasible")?;
            w(
                out,
                &format!("binding = {binding} (mu = {:e} > min(mu1, mu2) = {:e})", a.mu, sel.mu1.min(sel.mu2)),
            )?;
            Ok(EXIT_INFEASIBLE)
        }
    }
}

fn print_table(out: &mut dyn Write, res: &ComparisonResult) -> Result<()> {
    w(
        out,
        &format!(
            "{:<40} {:>10} {:>10} {:>16} {:>16} {:>9}",
            "method", "eta", "delta", "final_grad_sq", "final_gap", "diverged"
        ),
    )?;
    for (agg, rec) in res.aggregates.iter().zip(&res.record.methods) {
        let gap = agg.final_mean_gap().map(|g| format!("{g:.6e}")).unwrap_or_else(|| "-".into());
        w(
            out,
            &format!(
                "{:<40} {:>10.3e} {:>10.3e} {:>16.6e} {:>16} {:>9}",
                agg.label,
                rec.eta,
                rec.delta,
                agg.final_mean_grad(),
                gap,
                rec.diverged_seeds.len()
            ),
        )?;
    }
    Ok(())
}

fn write_outputs(
    out: &mut dyn Write,
    res: &ComparisonResult,
    csv: Option<&Path>,
    plot_path: Option<&Path>,
    plot: &PlotFlags,
) -> Result<()> {
    if let Some(path) = csv {
        export_csv(path, &res.csv_series())?;
        w(out, &format!("wrote {}", path.display()))?;
    }
    if let Some(path) = plot_path {
        let summary = emit_plot(&res.aggregates, path, &plot.options())?;
        w(
            out,
            &format!(
                "wrote {} ({} curves, {} envelopes)",
                path.display(),
                summary.curves,
                summary.envelopes
            ),
        )?;
    }
    Ok(())
}

fn run_single(a: RunArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = a.experiment.resolve()?;
    let base = cfg
        .methods
        .iter()
        .find(|m| m.method == a.method)
        .copied()
        .unwrap_or_else(|| {
            let d = ExperimentConfig::default();
            *d.methods.iter().find(|m| m.method == a.method).expect("defaults cover every method")
        });
    cfg.methods = vec![MethodSettings::new(
        a.method,
        a.eta.unwrap_or(base.eta),
        a.delta.unwrap_or(base.delta),
    )];
    cfg.controller_seeds = vec![a.seed];
    echo(out, &cfg)?;
    let res = run_comparison(&cfg)?;
    print_table(out, &res)?;
    let run = &res.runs[0];
    w(out, &format!("mu_hat = {:.6e}", run.mu_hat))?;
    w(out, &format!("output_lipschitz = {:.6e}", run.output_lipschitz()))?;
    if let Some(k) = run.diverged_at {
        w(out, &format!("diverged at update {k}"))?;
    }
    write_outputs(out, &res, a.out_csv.as_deref(), a.out_plot.as_deref(), &a.plot)?;
    Ok(EXIT_OK)
}

fn compare(a: CompareArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = a.experiment.resolve()?;
    if let Some(k) = a.seeds {
        cfg.controller_seeds = (0..k).collect();
    }
    echo(out, &cfg)?;
    let res = run_comparison(&cfg)?;
    print_table(out, &res)?;
    write_outputs(out, &res, a.out_csv.as_deref(), a.out_plot.as_deref(), &a.plot)?;
    if let Some(path) = &a.out_record {
        save_record(path, &res.record)?;
        w(out, &format!("wrote {}", path.display()))?;
    }
    Ok(EXIT_OK)
}

fn run_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = a.experiment.resolve()?;
    if let Some(k) = a.seeds {
        cfg.controller_seeds = (0..k).collect();
    }
    let mut base = cfg
        .methods
        .iter()
        .find(|m| m.method == Method::TwoPointRgf)
        .copied()
        .unwrap_or(ExperimentConfig::default().methods[0]);
    if let Some(eta) = a.eta {
        base.eta = eta;
    }
    if let Some(delta) = a.delta {
        base.delta = delta;
    }
    cfg.methods = vec![base];
    echo(out, &cfg)?;
    w(
        out,
        &format!(
            "#   sweep {} = {:?}",
            match a.param {
                SweepParameter::Eta => "eta",
                SweepParameter::Delta => "delta",
            },
            a.values
        ),
    )?;
    let points = sweep(a.param, &a.values, &cfg)?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for (i, pt) in points.iter().enumerate() {
        w(out, &format!("-- value {} --", pt.value))?;
        print_table(out, &pt.result)?;
        if let Some(dir) = &a.out_dir {
            let path = dir.join(format!("sweep-{i}.csv"));
            export_csv(&path, &pt.result.csv_series())?;
            w(out, &format!("wrote {}", path.display()))?;
        }
    }
    if let Some(path) = &a.out_plot {
        let aggs = sweep_aggregates(a.param, &points);
        let summary = emit_plot(&aggs, path, &a.plot.options())?;
        w(out, &format!("wrote {} ({} curves)", path.display(), summary.curves))?;
    }
    Ok(EXIT_OK)
}

fn validate(a: ValidateArgs, out: &mut dyn Write) -> Result<i32> {
    echo(out, &a)?;
    let checks = run_suite(
        a.suite,
        &ValidationOptions {
            samples: a.samples,
            seed: a.seed,
        },
    )?;
    let mut failed = 0;
    for c in &checks {
        w(out, &c.to_string())?;
        failed += usize::from(!c.passed);
    }
    w(out, &format!("{} checks, {} failed", checks.len(), failed))?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VALIDATION })
}

fn plot(a: PlotArgs, out: &mut dyn Write) -> Result<i32> {
    #[derive(Serialize)]
    struct Echo<'a> {
        csv: &'a Path,
        out: &'a Path,
        log_y: bool,
        axis: String,
        metric: String,
    }
    echo(
        out,
        &Echo {
            csv: &a.csv,
            out: &a.out,
            log_y: !a.plot.linear_y,
            axis: format!("{:?}", a.plot.axis),
            metric: format!("{:?}", a.plot.metric),
        },
    )?;
    let series = crate::experiments::import_csv(&a.csv)?;
    let aggs = crate::experiments::aggregate(&series)?;
    let summary = emit_plot(&aggs, &a.out, &a.plot.options())?;
    w(
        out,
        &format!(
            "wrote {} ({} curves, {} envelopes)",
            a.out.display(),
            summary.curves,
            summary.envelopes
        ),
    )?;
    Ok(EXIT_OK)
}
