//! Multi-seed, multi-method comparisons and their persisted outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{run_closed_loop, ControllerConfig, Method, MetricSeries, RunOptions};
use crate::error::{Error, Result};
use crate::objective::ReducedObjective;
use crate::plant::Dims;
use crate::problem::Problem;
use crate::theory::{select_parameters, SelectedParameters, TheoryConstants};

/// Stepsize and smoothing for one method in a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    pub method: Method,
    pub eta: f64,
    pub delta: f64,
}

impl MethodSettings {
    pub fn new(method: Method, eta: f64, delta: f64) -> Self {
        Self { method, eta, delta }
    }
}

/// Accuracy targets used to attach theory-selected parameters to a record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryTargets {
    pub eps: f64,
    pub eps_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub plant_seed: u64,
    pub objective_seed: u64,
    pub controller_seeds: Vec<u64>,
    pub methods: Vec<MethodSettings>,
    pub plant_step_budget: u64,
    pub dims: Dims,
    pub a_norm: f64,
    pub f_norm: f64,
    pub record_stride: u64,
    /// Saved instance to use instead of generating one from the seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryTargets>,
}

pub const PAPER_DELTA: f64 = 5e-5;

impl Default for ExperimentConfig {
    /// Four methods at the published stepsizes, ten seeds, 10⁴ plant steps.
    fn default() -> Self {
        Self {
            plant_seed: 0,
            objective_seed: 0,
            controller_seeds: (0..10).collect(),
            methods: vec![
                MethodSettings::new(Method::TwoPointRgf, 40e-5, PAPER_DELTA),
                MethodSettings::new(Method::IdealizedTwoPoint, 40e-5, PAPER_DELTA),
                MethodSettings::new(Method::OnePointResidual, 2.5e-5, PAPER_DELTA),
                MethodSettings::new(Method::ExactGradient, 100e-5, PAPER_DELTA),
            ],
            plant_step_budget: 10_000,
            dims: Dims::default(),
            a_norm: 0.05,
            f_norm: 0.01,
            record_stride: 1,
            problem_file: None,
            theory: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.controller_seeds.is_empty() {
            return Err(Error::Config("at least one controller seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.plant_step_budget < 2 {
            return Err(Error::Config("plant step budget must be >= 2".into()));
        }
        if self.record_stride == 0 {
            return Err(Error::Config("record stride must be >= 1".into()));
        }
        for m in &self.methods {
            ControllerConfig::new(m.method, m.eta, m.delta, 0).validate()?;
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<Problem> {
        match &self.problem_file {
            Some(path) => Problem::load(path),
            None => Problem::generate(self.plant_seed, self.objective_seed, self.dims, self.a_norm, self.f_norm),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::problem::read_toml(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::problem::write_toml(path, self)
    }
}

/// Mean and min/max envelope across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Envelope {
    fn from_columns(columns: &[&[f64]]) -> Self {
        let len = columns[0].len();
        let n = columns.len() as f64;
        let mut env = Envelope {
            mean: Vec::with_capacity(len),
            min: Vec::with_capacity(len),
            max: Vec::with_capacity(len),
        };
        for i in 0..len {
            let mut sum = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for col in columns {
                let v = col[i];
                sum += v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            // rounding in the sum can push the mean one ulp outside the envelope
            let mean = (sum / n).clamp(lo, hi);
            env.mean.push(if (sum / n).is_nan() { f64::NAN } else { mean });
            env.min.push(lo);
            env.max.push(hi);
        }
        env
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSeries {
    pub label: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub update_index: Vec<u64>,
    pub plant_step: Vec<u64>,
    pub grad_norm_sq: Envelope,
    pub optimality_gap: Option<Envelope>,
}

impl AggregateSeries {
    pub fn final_mean_grad(&self) -> f64 {
        *self.grad_norm_sq.mean.last().expect("non-empty")
    }

    pub fn final_mean_gap(&self) -> Option<f64> {
        self.optimality_gap.as_ref().map(|g| *g.mean.last().expect("non-empty"))
    }
}

/// Per-seed series in the CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSeries {
    pub method: Method,
    pub seed: u64,
    pub update_index: Vec<u64>,
    pub plant_step: Vec<u64>,
    pub grad_norm_sq: Vec<f64>,
    pub optimality_gap: Option<Vec<f64>>,
}

impl From<&MetricSeries> for CsvSeries {
    fn from(s: &MetricSeries) -> Self {
        Self {
            method: s.method,
            seed: s.seed,
            update_index: s.update_index.clone(),
            plant_step: s.plant_step.clone(),
            grad_norm_sq: s.grad_norm_sq.clone(),
            optimality_gap: s.optimality_gap.clone(),
        }
    }
}

/// Groups series by method (first-appearance order) and aggregates across seeds.
pub fn aggregate(series: &[CsvSeries]) -> Result<Vec<AggregateSeries>> {
    let mut methods: Vec<Method> = Vec::new();
    for s in series {
        if !methods.contains(&s.method) {
            methods.push(s.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let group: Vec<&CsvSeries> = series.iter().filter(|s| s.method == method).collect();
            aggregate_group(method.name().to_string(), &group)
        })
        .collect()
}

fn aggregate_group(label: String, group: &[&CsvSeries]) -> Result<AggregateSeries> {
    let first = group[0];
    for s in group {
        if s.update_index != first.update_index {
            return Err(Error::InvalidComparison(format!(
                "{label}: seed {} has a different record index than seed {}",
                s.seed, first.seed
            )));
        }
    }
    if first.update_index.is_empty() {
        return Err(Error::EmptySeries(label));
    }
    let grads: Vec<&[f64]> = group.iter().map(|s| s.grad_norm_sq.as_slice()).collect();
    let gaps: Option<Vec<&[f64]>> = group.iter().map(|s| s.optimality_gap.as_deref()).collect();
    Ok(AggregateSeries {
        label,
        method: first.method,
        seeds: group.iter().map(|s| s.seed).collect(),
        update_index: first.update_index.clone(),
        plant_step: first.plant_step.clone(),
        grad_norm_sq: Envelope::from_columns(&grads),
        optimality_gap: gaps.map(|g| Envelope::from_columns(&g)),
    })
}

/// Per-method provenance attached to a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    pub eta: f64,
    pub delta: f64,
    /// Largest `‖y_{t+1} − h(u_t)‖²` seen across seeds.
    pub mu_hat: f64,
    /// Local Lipschitz estimate `2 max ‖y‖` across seeds.
    pub output_lipschitz: f64,
    pub final_mean_grad_norm_sq: f64,
    pub final_mean_gap: Option<f64>,
    pub diverged_seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<SelectedParameters>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub smoothness: f64,
    pub phi_low: Option<f64>,
    pub methods: Vec<MethodRecord>,
}

#[derive(Debug, Clone)]
pub struct ComparisonResult {
    pub config: ExperimentConfig,
    /// Ordered by (method, seed) as listed in the config.
    pub runs: Vec<MetricSeries>,
    pub aggregates: Vec<AggregateSeries>,
    pub record: ExperimentRecord,
}

impl ComparisonResult {
    pub fn csv_series(&self) -> Vec<CsvSeries> {
        self.runs.iter().map(CsvSeries::from).collect()
    }

    pub fn aggregate_for(&self, method: Method) -> Option<&AggregateSeries> {
        self.aggregates.iter().find(|a| a.method == method)
    }
}

pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ComparisonResult> {
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    let reduced = ReducedObjective::new(&problem.objective, &problem.plant)?;
    let opts = RunOptions {
        record_stride: cfg.record_stride,
        ..RunOptions::with_budget(cfg.plant_step_budget)
    };

    let tasks: Vec<ControllerConfig> = cfg
        .methods
        .iter()
        .flat_map(|m| {
            cfg.controller_seeds
                .iter()
                .map(move |&seed| ControllerConfig::new(m.method, m.eta, m.delta, seed))
        })
        .collect();

    // collect() on an indexed parallel iterator keeps task order
    let runs: Vec<MetricSeries> = tasks
        .par_iter()
        .map(|c| {
            run_closed_loop(c, &reduced, &opts).map_err(|e| Error::Run {
                method: c.method.to_string(),
                seed: c.seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let csv: Vec<CsvSeries> = runs.iter().map(CsvSeries::from).collect();
    let mut aggregates = Vec::with_capacity(cfg.methods.len());
    for (i, m) in cfg.methods.iter().enumerate() {
        let group: Vec<&CsvSeries> = csv
            .iter()
            .skip(i * cfg.controller_seeds.len())
            .take(cfg.controller_seeds.len())
            .collect();
        let label = if cfg.methods.iter().filter(|o| o.method == m.method).count() > 1 {
            format!("{} (eta={}, delta={})", m.method, m.eta, m.delta)
        } else {
            m.method.to_string()
        };
        aggregates.push(aggregate_group(label, &group)?);
    }

    let smoothness = reduced.smoothness();
    let minimizer = reduced.analytic_minimizer().ok();
    let phi_u0 = reduced.tilde_phi(&nalgebra::DVector::zeros(cfg.dims_p(&problem)))?;
    let methods = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let group = &runs[i * cfg.controller_seeds.len()..(i + 1) * cfg.controller_seeds.len()];
            let agg = &aggregates[i];
            let mu_hat = group.iter().map(|s| s.mu_hat).fold(0.0, f64::max);
            let output_lipschitz = group.iter().map(|s| s.output_lipschitz()).fold(0.0, f64::max);
            let selected = match (cfg.theory, &minimizer) {
                (Some(t), Some(min)) if mu_hat > 0.0 && output_lipschitz > 0.0 => select_parameters(&TheoryConstants {
                    smoothness,
                    output_lipschitz,
                    input_lipschitz: None,
                    p: problem.plant.dims().p,
                    mu: mu_hat,
                    eps: t.eps,
                    eps_phi: t.eps_phi,
                    phi_u0,
                    phi_low: min.value,
                })
                .ok(),
                _ => None,
            };
            MethodRecord {
                method: m.method,
                eta: m.eta,
                delta: m.delta,
                mu_hat,
                output_lipschitz,
                final_mean_grad_norm_sq: agg.final_mean_grad(),
                final_mean_gap: agg.final_mean_gap(),
                diverged_seeds: group.iter().filter(|s| s.diverged_at.is_some()).map(|s| s.seed).collect(),
                selected,
            }
        })
        .collect();

    Ok(ComparisonResult {
        config: cfg.clone(),
        record: ExperimentRecord {
            config: cfg.clone(),
            smoothness,
            phi_low: minimizer.map(|m| m.value),
            methods,
        },
        runs,
        aggregates,
    })
}

impl ExperimentConfig {
    fn dims_p(&self, problem: &Problem) -> usize {
        problem.plant.dims().p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    Eta,
    Delta,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(SweepParameter::Eta),
            "delta" => Ok(SweepParameter::Delta),
            other => Err(Error::Config(format!("unknown sweep parameter `{other}` (eta|delta)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub result: ComparisonResult,
}

/// Runs the two-point feedback controller once per value of `parameter`,
/// keeping everything else from `base`.
pub fn sweep(parameter: SweepParameter, values: &[f64], base: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let settings = base
        .methods
        .iter()
        .find(|m| m.method == Method::TwoPointRgf)
        .copied()
        .ok_or_else(|| Error::Config("base config has no two-point-rgf method to sweep".into()))?;
    values
        .iter()
        .map(|&value| {
            let mut s = settings;
            match parameter {
                SweepParameter::Eta => s.eta = value,
                SweepParameter::Delta => s.delta = value,
            }
            let cfg = ExperimentConfig {
                methods: vec![s],
                ..base.clone()
            };
            Ok(SweepPoint {
                value,
                result: run_comparison(&cfg)?,
            })
        })
        .collect()
}

/// Relabels the sweep aggregates as `two-point-rgf eta=…` / `delta=…`.
pub fn sweep_aggregates(parameter: SweepParameter, points: &[SweepPoint]) -> Vec<AggregateSeries> {
    let name = match parameter {
        SweepParameter::Eta => "eta",
        SweepParameter::Delta => "delta",
    };
    points
        .iter()
        .flat_map(|pt| {
            pt.result.aggregates.iter().map(move |a| AggregateSeries {
                label: format!("{} {name}={}", a.method, pt.value),
                ..a.clone()
            })
        })
        .collect()
}

pub const CSV_HEADER: [&str; 6] = [
    "method",
    "seed",
    "update_index",
    "plant_step",
    "grad_norm_sq",
    "optimality_gap",
];

/// Writes series in the CSV schema; row order follows the slice, then the index.
pub fn write_csv<W: Write>(writer: W, series: &[CsvSeries]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for s in series {
        for i in 0..s.update_index.len() {
            let gap = s
                .optimality_gap
                .as_ref()
                .map(|g| g[i].to_string())
                .unwrap_or_default();
            w.write_record([
                s.method.name().to_string(),
                s.seed.to_string(),
                s.update_index[i].to_string(),
                s.plant_step[i].to_string(),
                s.grad_norm_sq[i].to_string(),
                gap,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(path: &Path, series: &[CsvSeries]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), series).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}

pub fn import_csv(path: &Path) -> Result<Vec<CsvSeries>> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let header = reader
        .headers()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse_err(format!("unexpected header {:?}", header)));
    }
    let mut out: Vec<CsvSeries> = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let bad = |what: &str, i: usize| parse_err(format!("row {}: bad {what} `{}`", line + 2, field(i)));
        let method: Method = field(0).parse().map_err(|_| bad("method", 0))?;
        let seed: u64 = field(1).parse().map_err(|_| bad("seed", 1))?;
        let k: u64 = field(2).parse().map_err(|_| bad("update_index", 2))?;
        let step: u64 = field(3).parse().map_err(|_| bad("plant_step", 3))?;
        let grad: f64 = field(4).parse().map_err(|_| bad("grad_norm_sq", 4))?;
        let gap: Option<f64> = match field(5) {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("optimality_gap", 5))?),
        };

        let start_new = out.last().is_none_or(|s| s.method != method || s.seed != seed);
        if start_new {
            out.push(CsvSeries {
                method,
                seed,
                update_index: Vec::new(),
                plant_step: Vec::new(),
                grad_norm_sq: Vec::new(),
                optimality_gap: gap.map(|_| Vec::new()),
            });
        }
        let s = out.last_mut().expect("just pushed");
        if s.optimality_gap.is_some() != gap.is_some() {
            return Err(parse_err(format!("row {}: optimality_gap present on some rows only", line + 2)));
        }
        s.update_index.push(k);
        s.plant_step.push(step);
        s.grad_norm_sq.push(grad);
        if let (Some(gaps), Some(g)) = (s.optimality_gap.as_mut(), gap) {
            gaps.push(g);
        }
    }
    Ok(out)
}

pub fn save_record(path: &Path, record: &ExperimentRecord) -> Result<()> {
    crate::problem::write_toml(path, record)
}
