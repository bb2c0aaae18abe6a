//! Standalone SVG plots of aggregated series: one mean polyline per series and
//! a shaded min/max envelope when more than one seed contributed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::{AggregateSeries, Envelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Axis {
    #[default]
    Updates,
    PlantSteps,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "updates" => Ok(Axis::Updates),
            "plant-steps" | "plant_steps" => Ok(Axis::PlantSteps),
            other => Err(Error::Config(format!("unknown axis `{other}` (updates|plant-steps)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlotMetric {
    #[default]
    GradNormSq,
    OptimalityGap,
}

impl std::str::FromStr for PlotMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" | "grad-norm-sq" | "grad_norm_sq" => Ok(PlotMetric::GradNormSq),
            "gap" | "optimality-gap" | "optimality_gap" => Ok(PlotMetric::OptimalityGap),
            other => Err(Error::Config(format!("unknown metric `{other}` (grad|gap)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOptions {
    pub log_y: bool,
    pub axis: Axis,
    pub metric: PlotMetric,
    pub title: Option<String>,
    pub width: f64,
    pub height: f64,
    /// Polylines are decimated to at most this many vertices.
    pub max_points: usize,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            log_y: true,
            axis: Axis::Updates,
            metric: PlotMetric::GradNormSq,
            title: None,
            width: 800.0,
            height: 500.0,
            max_points: 2000,
        }
    }
}

/// What ended up in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlotSummary {
    pub curves: usize,
    pub envelopes: usize,
    /// Non-positive values raised to the smallest positive value (log scale only).
    pub clamped: usize,
    /// Non-finite values left out of the drawing.
    pub omitted: usize,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 190.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

struct Prepared<'a> {
    label: &'a str,
    x: Vec<f64>,
    mean: Vec<f64>,
    band: Option<(Vec<f64>, Vec<f64>)>,
}

fn metric_envelope(s: &AggregateSeries, metric: PlotMetric) -> Result<&Envelope> {
    match metric {
        PlotMetric::GradNormSq => Ok(&s.grad_norm_sq),
        PlotMetric::OptimalityGap => s
            .optimality_gap
            .as_ref()
            .ok_or_else(|| Error::Config(format!("series `{}` has no optimality gap", s.label))),
    }
}

fn decimate(len: usize, max_points: usize) -> Vec<usize> {
    if len <= max_points.max(2) {
        return (0..len).collect();
    }
    let m = max_points.max(2);
    let mut idx: Vec<usize> = (0..m - 1).map(|i| i * (len - 1) / (m - 1)).collect();
    idx.push(len - 1);
    idx.dedup();
    idx
}

/// Renders the SVG document and reports element counts.
pub fn render_svg(series: &[AggregateSeries], opts: &PlotOptions) -> Result<(String, PlotSummary)> {
    if series.is_empty() {
        return Err(Error::EmptySeries("nothing to plot".into()));
    }
    let mut summary = PlotSummary::default();
    let mut prepared = Vec::with_capacity(series.len());
    for s in series {
        let env = metric_envelope(s, opts.metric)?;
        if env.mean.is_empty() {
            return Err(Error::EmptySeries(s.label.clone()));
        }
        let idx = decimate(env.mean.len(), opts.max_points);
        let axis: &[u64] = match opts.axis {
            Axis::Updates => &s.update_index,
            Axis::PlantSteps => &s.plant_step,
        };
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let band = (s.seeds.len() > 1).then(|| (pick(&env.min), pick(&env.max)));
        prepared.push(Prepared {
            label: &s.label,
            x: idx.iter().map(|&i| axis[i] as f64).collect(),
            mean: pick(&env.mean),
            band,
        });
    }

    if opts.log_y {
        let global_floor = prepared
            .iter()
            .flat_map(|p| all_values(p))
            .filter(|v| *v > 0.0 && v.is_finite())
            .fold(f64::INFINITY, f64::min);
        for p in &mut prepared {
            let floor = all_values(p)
                .filter(|v| *v > 0.0 && v.is_finite())
                .fold(f64::INFINITY, f64::min);
            let floor = if floor.is_finite() {
                floor
            } else if global_floor.is_finite() {
                global_floor
            } else {
                1.0
            };
            let mut clamp = |v: &mut f64| {
                if *v <= 0.0 {
                    *v = floor;
                    summary.clamped += 1;
                }
            };
            p.mean.iter_mut().for_each(&mut clamp);
            if let Some((lo, hi)) = &mut p.band {
                lo.iter_mut().for_each(&mut clamp);
                hi.iter_mut().for_each(&mut clamp);
            }
        }
    }

    let ty = |v: f64| if opts.log_y { v.log10() } else { v };
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut x_hi: f64 = 0.0;
    for p in &prepared {
        for v in all_values(p).filter(|v| v.is_finite()) {
            y_lo = y_lo.min(ty(v));
            y_hi = y_hi.max(ty(v));
        }
        x_hi = x_hi.max(p.x.iter().copied().fold(0.0, f64::max));
    }
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    if y_hi - y_lo <= f64::EPSILON * y_hi.abs().max(1.0) {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    if x_hi <= 0.0 {
        x_hi = 1.0;
    }

    let plot_w = opts.width - MARGIN_LEFT - MARGIN_RIGHT;
    // widen the canvas rather than clip long legend labels
    let longest = prepared.iter().map(|p| p.label.chars().count()).max().unwrap_or(0) as f64;
    let canvas_w = opts.width + (60.0 + 7.0 * longest - MARGIN_RIGHT).max(0.0);
    let plot_h = opts.height - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + x / x_hi * plot_w;
    let sy = |v: f64| MARGIN_TOP + (y_hi - ty(v)) / (y_hi - y_lo) * plot_h;

    let mut body = String::new();
    let mut omitted = 0usize;
    for (i, p) in prepared.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some((lo, hi)) = &p.band {
            let keep: Vec<usize> = (0..p.x.len()).filter(|&j| lo[j].is_finite() && hi[j].is_finite()).collect();
            omitted += 2 * (p.x.len() - keep.len());
            let mut pts = String::new();
            for &j in &keep {
                let _ = write!(pts, "{:.2},{:.2} ", sx(p.x[j]), sy(hi[j]));
            }
            for &j in keep.iter().rev() {
                let _ = write!(pts, "{:.2},{:.2} ", sx(p.x[j]), sy(lo[j]));
            }
            let _ = writeln!(
                body,
                r#"<polygon class="envelope" data-label="{}" fill="{color}" fill-opacity="0.2" stroke="none" points="{}"/>"#,
                escape(p.label),
                pts.trim_end()
            );
            summary.envelopes += 1;
        }
        let mut pts = String::new();
        for (j, &v) in p.mean.iter().enumerate() {
            if v.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", sx(p.x[j]), sy(v));
            } else {
                omitted += 1;
            }
        }
        let _ = writeln!(
            body,
            r#"<polyline class="curve" data-label="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(p.label),
            pts.trim_end()
        );
        summary.curves += 1;
    }
    summary.omitted = omitted;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = canvas_w,
        h = opts.height
    );
    let metric_name = match opts.metric {
        PlotMetric::GradNormSq => "grad_norm_sq",
        PlotMetric::OptimalityGap => "optimality_gap",
    };
    let axis_name = match opts.axis {
        Axis::Updates => "updates",
        Axis::PlantSteps => "plant_steps",
    };
    let _ = writeln!(
        svg,
        "<metadata>metric={metric_name}; axis={axis_name}; log_y={}; curves={}; envelopes={}; clamped_nonpositive={}; omitted_nonfinite={}</metadata>",
        opts.log_y, summary.curves, summary.envelopes, summary.clamped, summary.omitted
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(title) = &opts.title {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            escape(title)
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect class="frame" x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
    );

    for k in 0..=4 {
        let x = x_hi * k as f64 / 4.0;
        let px = sx(x);
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{y1:.2}" stroke="black"/><text x="{px:.2}" y="{ty:.2}" text-anchor="middle">{}</text>"#,
            fmt_tick(x),
            y0 = MARGIN_TOP + plot_h,
            y1 = MARGIN_TOP + plot_h + 5.0,
            ty = MARGIN_TOP + plot_h + 18.0
        );
    }
    for (pos, label) in y_ticks(y_lo, y_hi, opts.log_y) {
        let py = MARGIN_TOP + (y_hi - pos) / (y_hi - y_lo) * plot_h;
        let _ = writeln!(
            svg,
            r#"<line x1="{x0:.2}" y1="{py:.2}" x2="{MARGIN_LEFT}" y2="{py:.2}" stroke="black"/><text x="{tx:.2}" y="{ly:.2}" text-anchor="end">{label}</text>"#,
            x0 = MARGIN_LEFT - 5.0,
            tx = MARGIN_LEFT - 8.0,
            ly = py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        opts.height - 10.0,
        match opts.axis {
            Axis::Updates => "controller updates",
            Axis::PlantSteps => "plant steps",
        }
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{y:.2}" text-anchor="middle" transform="rotate(-90 16 {y:.2})">{}</text>"#,
        match opts.metric {
            PlotMetric::GradNormSq => "squared gradient norm",
            PlotMetric::OptimalityGap => "optimality gap",
        },
        y = MARGIN_TOP + plot_h / 2.0
    );

    svg.push_str(&body);

    for (i, p) in prepared.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_TOP + 10.0 + 20.0 * i as f64;
        let x = MARGIN_LEFT + plot_w + 15.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{x:.2}" y1="{y:.2}" x2="{x2:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/><text x="{tx:.2}" y="{ty:.2}">{}</text></g>"#,
            escape(p.label),
            x2 = x + 20.0,
            tx = x + 26.0,
            ty = y + 4.0
        );
    }
    svg.push_str("</svg>\n");
    Ok((svg, summary))
}

pub fn emit_plot(series: &[AggregateSeries], path: &Path, opts: &PlotOptions) -> Result<PlotSummary> {
    let (svg, summary) = render_svg(series, opts)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))?;
    Ok(summary)
}

fn all_values<'a>(p: &'a Prepared<'_>) -> impl Iterator<Item = f64> + 'a {
    let band = p.band.iter().flat_map(|(lo, hi)| lo.iter().chain(hi.iter()));
    p.mean.iter().chain(band).copied()
}

fn y_ticks(lo: f64, hi: f64, log: bool) -> Vec<(f64, String)> {
    if log {
        let first = lo.ceil() as i64;
        let last = hi.floor() as i64;
        if last >= first {
            let step = ((last - first) / 6 + 1).max(1);
            return (first..=last)
                .step_by(step as usize)
                .map(|k| (k as f64, format!("1e{k}")))
                .collect();
        }
        return vec![(lo, format!("{:.2e}", 10f64.powf(lo))), (hi, format!("{:.2e}", 10f64.powf(hi)))];
    }
    (0..=4)
        .map(|k| {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            (v, format!("{v:.3e}"))
        })
        .collect()
}

fn fmt_tick(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e9 {
        format!("{}", x as i64)
    } else {
        format!("{x:.1}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
