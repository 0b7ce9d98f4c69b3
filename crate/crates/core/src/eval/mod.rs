//! Evaluation protocol: per-token probabilities, interpolated and oracle
//! perplexity, lambda / temperature tuning, sweeps and token analyses.
//!
//! The base model always reads the ffn view; the head reads the view named
//! in its [`HeadConfig`]. Per-token work runs in parallel, every reduction
//! is sequential in token order.

mod analysis;
mod extended;
mod sweep;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::NeighborSet;
use crate::error::{Error, Result};
use crate::head::{generalized_predict, retrieve, HeadConfig, HeadKind, HeadModels};
use crate::kernels::{perplexity, softmax_with_temperature};
use crate::store::{ContextDump, OutputEmbedding, View};

pub use analysis::{
    bigram_entropy, knn_help_rate, spearman, token_stats, write_token_stats_csv, BigramEntropy, HelpRate,
    TokenStats,
};
pub use sweep::{sweep, write_svg, Experiment, Series, SweepAxis, SweepResult};

/// Relative tolerance under which two perplexities count as tied.
const TIE_RTOL: f64 = 1e-12;

/// The temperature grid `0.1, 0.2, ..., 3.0`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=30).map(|i| i as f64 / 10.0).collect()
}

/// Per-token log-probabilities of one evaluation run plus aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub targets: Vec<u32>,
    #[serde(with = "extended::vec")]
    pub log_lm: Vec<f64>,
    /// `-inf` where the head gives the target no mass.
    #[serde(with = "extended::vec")]
    pub log_head: Vec<f64>,
    pub lambda: f64,
    pub tau: f64,
    #[serde(with = "extended::scalar")]
    pub ppl_lm: f64,
    #[serde(with = "extended::scalar")]
    pub ppl_head: f64,
    #[serde(with = "extended::scalar")]
    pub ppl_interp: f64,
    #[serde(with = "extended::scalar")]
    pub ppl_oracle: f64,
    /// Echo of the configuration that produced the report.
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Builds a report from per-token target probabilities.
    pub fn from_probs(
        targets: Vec<u32>,
        p_lm: &[f64],
        p_head: &[f64],
        lambda: f64,
        tau: f64,
        config: serde_json::Value,
    ) -> Result<Self> {
        if p_lm.len() != targets.len() || p_head.len() != targets.len() {
            return Err(Error::shape("report streams", targets.len(), p_lm.len().min(p_head.len())));
        }
        let log_lm: Vec<f64> = p_lm.iter().map(|p| log_prob(*p)).collect();
        let log_head: Vec<f64> = p_head.iter().map(|p| log_prob(*p)).collect();
        let ppl_lm = perplexity(&log_lm)?;
        let ppl_head = perplexity(&log_head)?;
        let ppl_interp = interp_perplexity(p_lm, p_head, lambda)?;
        let mut report = EvalReport {
            targets,
            log_lm,
            log_head,
            lambda,
            tau,
            ppl_lm,
            ppl_head,
            ppl_interp,
            ppl_oracle: f64::NAN,
            config,
        };
        report.ppl_oracle = oracle_perplexity(&report);
        Ok(report)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn p_lm(&self) -> Vec<f64> {
        self.log_lm.iter().map(|l| l.exp()).collect()
    }

    pub fn p_head(&self) -> Vec<f64> {
        self.log_head.iter().map(|l| l.exp()).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })
    }

    /// CSV with columns `index,target,logp_lm,logp_head,logp_interp`.
    pub fn write_token_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("index,target,logp_lm,logp_head,logp_interp\n");
        for i in 0..self.len() {
            let interp = mix_log(self.log_lm[i].exp(), self.log_head[i].exp(), self.lambda);
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                self.targets[i],
                extended::cell(self.log_lm[i]),
                extended::cell(self.log_head[i]),
                extended::cell(interp)
            ));
        }
        write_text(path, &out)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// `ln p`, clamped at 0 against summation overshoot.
fn log_prob(p: f64) -> f64 {
    p.ln().min(0.0)
}

fn mix_log(a: f64, b: f64, lambda: f64) -> f64 {
    log_prob((1.0 - lambda) * a + lambda * b)
}

/// Perplexity of `(1 - lambda) p_lm + lambda p_head` over aligned target
/// probabilities.
pub fn interp_perplexity(p_lm: &[f64], p_head: &[f64], lambda: f64) -> Result<f64> {
    crate::kernels::check_lambda(lambda)?;
    if p_lm.len() != p_head.len() {
        return Err(Error::shape("interpolation streams", p_lm.len(), p_head.len()));
    }
    let logs: Vec<f64> = p_lm.iter().zip(p_head).map(|(a, b)| mix_log(*a, *b, lambda)).collect();
    perplexity(&logs)
}

/// Perplexity when every token takes the better of the two components.
pub fn oracle_perplexity(report: &EvalReport) -> f64 {
    let logs: Vec<f64> = report
        .log_lm
        .iter()
        .zip(&report.log_head)
        .map(|(a, b)| a.max(*b))
        .collect();
    perplexity(&logs).unwrap_or(f64::NAN)
}

/// Result of [`tune_lambda`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaFit {
    pub lambda: f64,
    #[serde(with = "extended::scalar")]
    pub ppl: f64,
    /// Best perplexity on the coarse grid alone.
    #[serde(with = "extended::scalar")]
    pub coarse_ppl: f64,
}

fn better(candidate: f64, best: f64) -> bool {
    if best.is_infinite() {
        return candidate < best;
    }
    candidate < best - TIE_RTOL * best.abs()
}

/// Coarse grid `0.00..=1.00` step 0.01, then step 0.001 within +-0.01 of the
/// coarse argmin. Ties (relative 1e-12) go to the smaller lambda.
pub fn tune_lambda(p_lm: &[f64], p_head: &[f64]) -> Result<LambdaFit> {
    if p_lm.is_empty() {
        return Err(Error::param("cannot tune lambda on an empty stream"));
    }
    let scan = |lambdas: &mut dyn Iterator<Item = f64>| -> Result<(f64, f64)> {
        let mut best = (f64::NAN, f64::INFINITY);
        for l in lambdas {
            let ppl = interp_perplexity(p_lm, p_head, l)?;
            if best.0.is_nan() || better(ppl, best.1) {
                best = (l, ppl);
            }
        }
        Ok(best)
    };
    let (coarse, coarse_ppl) = scan(&mut (0..=100).map(|i| i as f64 / 100.0))?;
    let centre = (coarse * 100.0).round() as i64 * 10;
    let (lambda, ppl) = scan(
        &mut (centre - 10..=centre + 10)
            .filter(|m| (0..=1000).contains(m))
            .map(|m| m as f64 / 1000.0),
    )?;
    Ok(LambdaFit {
        lambda,
        ppl,
        coarse_ppl,
    })
}

/// Base-model probability of every target (ffn view).
pub fn lm_target_probs(dump: &ContextDump, w_sm: &OutputEmbedding) -> Result<Vec<f64>> {
    let targets = dump.targets();
    (0..dump.len())
        .into_par_iter()
        .map(|i| {
            let y = target(targets[i], w_sm.vocab_size())?;
            Ok(w_sm.predict(&dump.vector(View::Ffn, i)?)?[y])
        })
        .collect()
}

fn target(t: u32, vocab: usize) -> Result<usize> {
    if (t as usize) < vocab {
        Ok(t as usize)
    } else {
        Err(Error::input(format!("target {t} outside vocabulary of size {vocab}")))
    }
}

/// Retrieved neighbors of every token, reusable across temperatures.
#[derive(Debug, Clone)]
pub struct NeighborCache {
    sets: Vec<NeighborSet>,
}

impl NeighborCache {
    pub fn build(dump: &ContextDump, cfg: &HeadConfig, models: &HeadModels<'_>) -> Result<Self> {
        cfg.validate()?;
        dump.require_view(cfg.view)?;
        let sets = (0..dump.len())
            .into_par_iter()
            .map(|i| retrieve(cfg, models, &dump.vector(cfg.view, i)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(NeighborCache { sets })
    }

    pub fn sets(&self) -> &[NeighborSet] {
        &self.sets
    }

    /// `p_kNN(target)` at temperature `tau`; bitwise equal to the target
    /// entry of the full kNN distribution. Empty sets give 0.
    pub fn target_probs(&self, values: &[u32], targets: &[u32], tau: f64) -> Result<Vec<f64>> {
        if targets.len() != self.sets.len() {
            return Err(Error::shape("neighbor cache", self.sets.len(), targets.len()));
        }
        self.sets
            .par_iter()
            .zip(targets)
            .map(|(ns, &y)| {
                if ns.is_empty() {
                    return Ok(0.0);
                }
                let w = softmax_with_temperature(&ns.scores(), tau)?;
                let mut p = 0.0;
                for (n, wi) in ns.entries().iter().zip(w.iter()) {
                    if values[n.row] == y {
                        p += wi;
                    }
                }
                Ok(p)
            })
            .collect()
    }
}

/// Head probability of every target under `cfg`, through the generalized
/// predictor.
pub fn head_target_probs(dump: &ContextDump, cfg: &HeadConfig, models: &HeadModels<'_>) -> Result<Vec<f64>> {
    let targets = dump.targets();
    let v = models.output.vocab_size();
    (0..dump.len())
        .into_par_iter()
        .map(|i| {
            let y = target(targets[i], v)?;
            let h_sm = dump.vector(View::Ffn, i)?;
            let h_ds = dump.vector(cfg.view, i)?;
            Ok(generalized_predict(&h_sm, &h_ds, cfg, models)?.head_prob(y))
        })
        .collect()
}

fn config_echo(cfg: &HeadConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Runs the generalized predictor over every token of `dump` with the
/// configured lambda and tau.
pub fn evaluate(dump: &ContextDump, cfg: &HeadConfig, models: &HeadModels<'_>) -> Result<EvalReport> {
    cfg.validate()?;
    if dump.is_empty() {
        return Err(Error::param("cannot evaluate an empty dump"));
    }
    let targets = dump.targets();
    let v = models.output.vocab_size();
    let pairs = (0..dump.len())
        .into_par_iter()
        .map(|i| {
            let y = target(targets[i], v)?;
            let h_sm = dump.vector(View::Ffn, i)?;
            let h_ds = dump.vector(cfg.view, i)?;
            let p = generalized_predict(&h_sm, &h_ds, cfg, models)?;
            Ok((p.lm_prob(y), p.head_prob(y)))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (p_lm, p_head): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    EvalReport::from_probs(targets.to_vec(), &p_lm, &p_head, cfg.lambda, cfg.tau, config_echo(cfg))
}

/// Target probabilities of a head on one split as a function of tau.
pub(crate) struct HeadProbs<'a> {
    dump: &'a ContextDump,
    cfg: HeadConfig,
    models: HeadModels<'a>,
    cache: Option<NeighborCache>,
}

impl<'a> HeadProbs<'a> {
    pub(crate) fn new(dump: &'a ContextDump, cfg: &HeadConfig, models: HeadModels<'a>) -> Result<Self> {
        let cache = if cfg.kind == HeadKind::Knn {
            Some(NeighborCache::build(dump, cfg, &models)?)
        } else {
            None
        };
        Ok(HeadProbs {
            dump,
            cfg: *cfg,
            models,
            cache,
        })
    }

    pub(crate) fn at(&self, tau: f64) -> Result<Vec<f64>> {
        match &self.cache {
            Some(c) => c.target_probs(self.models.datastore()?.values(), self.dump.targets(), tau),
            None => head_target_probs(self.dump, &HeadConfig { tau, ..self.cfg }, &self.models),
        }
    }
}

/// Outcome of tuning on a dev split and scoring a test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuned {
    pub tau: f64,
    pub lambda: f64,
    #[serde(with = "extended::scalar")]
    pub dev_ppl: f64,
    /// Dev perplexity of the best lambda at each candidate tau.
    #[serde(with = "extended::vec")]
    pub dev_ppl_by_tau: Vec<f64>,
    pub test: EvalReport,
}

/// Picks tau from `tau_grid` and lambda (per tau) by dev perplexity, with
/// smaller values winning ties, then evaluates the test split with both
/// frozen.
pub fn tune_and_evaluate(
    dev: &ContextDump,
    test: &ContextDump,
    cfg: &HeadConfig,
    models: &HeadModels<'_>,
    tau_grid: &[f64],
) -> Result<Tuned> {
    if tau_grid.is_empty() {
        return Err(Error::param("temperature grid is empty"));
    }
    let dev_lm = lm_target_probs(dev, models.output)?;
    let head = HeadProbs::new(dev, cfg, *models)?;
    let mut by_tau = Vec::with_capacity(tau_grid.len());
    let mut best: Option<(f64, LambdaFit)> = None;
    let mut order: Vec<f64> = tau_grid.to_vec();
    order.sort_by(f64::total_cmp);
    for &tau in &order {
        let fit = tune_lambda(&dev_lm, &head.at(tau)?)?;
        by_tau.push(fit.ppl);
        if best.as_ref().is_none_or(|(_, b)| better(fit.ppl, b.ppl)) {
            best = Some((tau, fit));
        }
    }
    let (tau, fit) = best.expect("non-empty grid");
    let frozen = HeadConfig {
        tau,
        lambda: fit.lambda,
        ..*cfg
    };
    Ok(Tuned {
        tau,
        lambda: fit.lambda,
        dev_ppl: fit.ppl,
        dev_ppl_by_tau: by_tau,
        test: evaluate(test, &frozen, models)?,
    })
}
