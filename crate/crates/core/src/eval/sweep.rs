//! One-dimensional sweeps over a head setting, with lambda re-tuned on the
//! dev split at every point and perplexity reported on the test split.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{better, extended, interp_perplexity, lm_target_probs, tune_lambda, write_text, HeadProbs};
use crate::ann::Regime;
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadModels};
use crate::store::{subsample, ContextDump};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    /// Fraction of the datastore kept by seeded subsampling.
    Fraction,
    K,
    NProbe,
    /// Fixed lambda; no tuning.
    Lambda,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Tau,
        SweepAxis::Fraction,
        SweepAxis::K,
        SweepAxis::NProbe,
        SweepAxis::Lambda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Tau => "tau",
            SweepAxis::Fraction => "fraction",
            SweepAxis::K => "k",
            SweepAxis::NProbe => "n_probe",
            SweepAxis::Lambda => "lambda",
        }
    }

    fn check(self, x: f64) -> Result<()> {
        let ok = match self {
            SweepAxis::Tau => x.is_finite() && x > 0.0,
            SweepAxis::Fraction => x > 0.0 && x <= 1.0,
            SweepAxis::Lambda => (0.0..=1.0).contains(&x),
            SweepAxis::K | SweepAxis::NProbe => x >= 1.0 && x.fract() == 0.0 && x <= u32::MAX as f64,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("{x} is not a valid {} value", self.name())))
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "nprobe" && *a == SweepAxis::NProbe))
            .ok_or_else(|| Error::param(format!("unknown sweep axis `{s}`")))
    }
}

/// Everything a sweep needs: the models, a dev split for tuning and a test
/// split for reporting.
#[derive(Debug, Clone, Copy)]
pub struct Experiment<'a> {
    pub models: HeadModels<'a>,
    pub dev: &'a ContextDump,
    pub test: &'a ContextDump,
    pub base: HeadConfig,
    /// Seed for datastore subsampling on the fraction axis.
    pub subsample_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    /// Test perplexity at each grid value.
    #[serde(with = "extended::vec")]
    pub interp_ppl: Vec<f64>,
    pub lambda_star: Vec<f64>,
    /// Dev perplexity at the tuned lambda.
    #[serde(with = "extended::vec")]
    pub dev_ppl: Vec<f64>,
    /// Index into `grid` of the smallest test perplexity.
    pub argmin: usize,
}

impl SweepResult {
    pub fn best_value(&self) -> f64 {
        self.grid[self.argmin]
    }

    pub fn best_ppl(&self) -> f64 {
        self.interp_ppl[self.argmin]
    }

    /// The base configuration with the winning grid value (and its lambda).
    pub fn best_config(&self, base: &HeadConfig) -> HeadConfig {
        HeadConfig {
            lambda: self.lambda_star[self.argmin],
            ..apply(base, self.axis, self.best_value())
        }
    }

    /// CSV with columns `axis_value,interp_ppl,lambda_star`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("axis_value,interp_ppl,lambda_star\n");
        for i in 0..self.grid.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.grid[i],
                extended::cell(self.interp_ppl[i]),
                self.lambda_star[i]
            ));
        }
        write_text(path, &out)
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        let series = Series {
            name: "interpolated perplexity".into(),
            points: self.grid.iter().copied().zip(self.interp_ppl.iter().copied()).collect(),
        };
        write_svg(
            path,
            &format!("interpolated perplexity vs {}", self.axis),
            self.axis.name(),
            "perplexity",
            &[series],
        )
    }
}

fn apply(base: &HeadConfig, axis: SweepAxis, x: f64) -> HeadConfig {
    let mut cfg = *base;
    match axis {
        SweepAxis::Tau => cfg.tau = x,
        SweepAxis::K => cfg.k = x as usize,
        SweepAxis::NProbe => cfg.n_probe = x as usize,
        SweepAxis::Lambda => cfg.lambda = x,
        SweepAxis::Fraction => {}
    }
    cfg
}

/// Sweeps `axis` over `grid`. Every point re-tunes lambda on `exp.dev`
/// (except the lambda axis) and reports perplexity on `exp.test`; the argmin
/// breaks ties towards the smaller grid value.
pub fn sweep(exp: &Experiment<'_>, axis: SweepAxis, grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::param("sweep grid is empty"));
    }
    for &x in grid {
        axis.check(x)?;
    }
    exp.base.validate()?;
    if axis == SweepAxis::Fraction && (exp.base.mask != Regime::Exact || exp.base.score != Regime::Exact) {
        return Err(Error::Config(
            "a fraction sweep subsamples the datastore and needs exact mask and score".into(),
        ));
    }
    let dev_lm = lm_target_probs(exp.dev, exp.models.output)?;
    let test_lm = lm_target_probs(exp.test, exp.models.output)?;

    // Retrieval does not depend on tau, so tau sweeps share one cache.
    let shared = if axis == SweepAxis::Tau {
        Some((
            HeadProbs::new(exp.dev, &exp.base, exp.models)?,
            HeadProbs::new(exp.test, &exp.base, exp.models)?,
        ))
    } else {
        None
    };

    let mut out = SweepResult {
        axis,
        grid: grid.to_vec(),
        interp_ppl: Vec::with_capacity(grid.len()),
        lambda_star: Vec::with_capacity(grid.len()),
        dev_ppl: Vec::with_capacity(grid.len()),
        argmin: 0,
    };
    for &x in grid {
        let cfg = apply(&exp.base, axis, x);
        let (dev_head, test_head) = match &shared {
            Some((d, t)) => (d.at(cfg.tau)?, t.at(cfg.tau)?),
            None if axis == SweepAxis::Fraction => {
                let sub = subsample(exp.models.datastore()?, x, exp.subsample_seed)?;
                let models = HeadModels {
                    datastore: Some(&sub),
                    index: None,
                    ..exp.models
                };
                (
                    HeadProbs::new(exp.dev, &cfg, models)?.at(cfg.tau)?,
                    HeadProbs::new(exp.test, &cfg, models)?.at(cfg.tau)?,
                )
            }
            None => (
                HeadProbs::new(exp.dev, &cfg, exp.models)?.at(cfg.tau)?,
                HeadProbs::new(exp.test, &cfg, exp.models)?.at(cfg.tau)?,
            ),
        };
        let (lambda, dev_ppl) = if axis == SweepAxis::Lambda {
            (x, interp_perplexity(&dev_lm, &dev_head, x)?)
        } else {
            let fit = tune_lambda(&dev_lm, &dev_head)?;
            (fit.lambda, fit.ppl)
        };
        out.interp_ppl.push(interp_perplexity(&test_lm, &test_head, lambda)?);
        out.lambda_star.push(lambda);
        out.dev_ppl.push(dev_ppl);
    }
    let mut best = 0;
    for i in 1..grid.len() {
        let (a, b) = (out.interp_ppl[i], out.interp_ppl[best]);
        if better(a, b) || (!better(b, a) && grid[i] < grid[best]) {
            best = i;
        }
    }
    out.argmin = best;
    Ok(out)
}

/// A named polyline for [`write_svg`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Standalone SVG line chart with axes, tick labels, a title and one
/// polyline per series. Non-finite points are skipped.
pub fn write_svg(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 55.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = span(all().map(|p| p.0));
    let (y0, y1) = span(all().map(|p| p.1));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{0}\" stroke=\"black\"/>\n",
        top + ph,
        left + pw
    ));
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            sx(xv),
            top + ph + 18.0,
            tick(xv),
            left - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text transform=\"translate(16 {:.1}) rotate(-90)\" text-anchor=\"middle\">{}</text>\n",
        left + pw / 2.0,
        h - 12.0,
        escape(x_label),
        top + ph / 2.0,
        escape(y_label)
    ));
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"><title>{}</title></polyline>\n",
            pts.join(" "),
            escape(&s.name)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{colour}\">{}</text>\n",
            left + pw - 150.0,
            top + 14.0 + 16.0 * i as f64,
            escape(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    write_text(path, &svg)
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}
