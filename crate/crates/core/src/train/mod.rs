//! Gradient training of parametric heads on frozen features.
//!
//! Every loss has a closed-form gradient (see [`grad`](self)); minibatches
//! are split into fixed chunks whose gradients are summed in chunk order, so
//! results do not depend on the worker count.

mod grad;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{learned_head_predict, mos_predict, LearnedHead, MoSHead};
use crate::kernels::{check_lambda, perplexity};
use crate::store::{ContextDump, OutputEmbedding, View};

pub use grad::{interpolated_loss_grad, learned_head_loss_grad, mos_loss_grad, MoSGrad};

/// Examples per parallel gradient chunk.
const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to 0 over all steps.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LossKind {
    #[default]
    Standard,
    /// Cross-entropy of the interpolation with the frozen base model.
    Interpolated { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub loss: LossKind,
    /// Softmax temperature of the head during training.
    pub tau: f64,
    /// Epochs without dev improvement before stopping; needs a dev dump.
    pub patience: Option<usize>,
    /// Scale of the random perturbation added to MoS identity projections.
    pub init_noise: f64,
    /// Train a copy of the output embedding inside a MoS head.
    pub finetune_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 512,
            lr: 1e-3,
            schedule: Schedule::Constant,
            optimizer: Optimizer::Adam,
            seed: 0,
            loss: LossKind::Standard,
            tau: 1.0,
            patience: Some(3),
            init_noise: 0.1,
            finetune_output: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::param(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::param(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.patience == Some(0) {
            return Err(Error::param("patience must be at least 1"));
        }
        if !(self.init_noise.is_finite() && self.init_noise >= 0.0) {
            return Err(Error::param("init noise must be >= 0"));
        }
        if let LossKind::Interpolated { lambda } = self.loss {
            check_lambda(lambda)?;
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean training loss of every completed epoch.
    pub loss: Vec<f64>,
    /// Dev perplexity after every epoch, when a dev dump was supplied.
    pub dev_ppl: Vec<f64>,
    /// Dev perplexity of the returned parameters.
    pub final_dev_ppl: Option<f64>,
    /// Epoch (1-based) whose parameters were returned; 0 is the initialization.
    pub best_epoch: usize,
}

impl TrainTrace {
    /// CSV with columns `epoch,loss,dev_ppl` (dev column empty without dev data).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,loss,dev_ppl\n");
        for (e, l) in self.loss.iter().enumerate() {
            let dev = self.dev_ppl.get(e).map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{l},{dev}\n", e + 1));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Loss sum and gradient sum over a set of example ids.
type BatchGrad<'a> = dyn Fn(&[f64], &[usize]) -> (f64, Vec<f64>) + Sync + 'a;
type DevEval<'a> = dyn Fn(&[f64]) -> Result<f64> + 'a;

fn optimize(
    params: &mut Vec<f64>,
    n_examples: usize,
    cfg: &TrainConfig,
    grad: &BatchGrad<'_>,
    dev: Option<&DevEval<'_>>,
) -> Result<TrainTrace> {
    let mut trace = TrainTrace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(params.len());
    let steps_per_epoch = n_examples.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut best = match dev {
        Some(d) => Some((d(params)?, params.clone(), 0usize)),
        None => None,
    };
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|ids| grad(params, ids))
                .collect();
            let mut g = vec![0.0; params.len()];
            for (l, pg) in parts {
                loss_sum += l;
                for (a, b) in g.iter_mut().zip(pg) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for x in &mut g {
                *x *= scale;
            }
            let lr = cfg.lr_at(step, total_steps);
            match cfg.optimizer {
                Optimizer::Adam => adam.step(params, &g, lr),
                Optimizer::Sgd => {
                    for (p, gi) in params.iter_mut().zip(&g) {
                        *p -= lr * gi;
                    }
                }
            }
            step += 1;
        }
        let mean = loss_sum / n_examples as f64;
        if !mean.is_finite() {
            return Err(Error::Degenerate(format!("training loss diverged at epoch {epoch}")));
        }
        trace.loss.push(mean);
        if let (Some(d), Some(b)) = (dev, best.as_mut()) {
            let ppl = d(params)?;
            trace.dev_ppl.push(ppl);
            if ppl < b.0 {
                *b = (ppl, params.clone(), epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    match best {
        Some((ppl, p, epoch)) => {
            *params = p;
            trace.final_dev_ppl = Some(ppl);
            trace.best_epoch = epoch;
        }
        None => trace.best_epoch = trace.loss.len(),
    }
    Ok(trace)
}

/// Frozen training features: `n x dim` in f64 plus targets.
struct Features {
    dim: usize,
    h: Vec<f64>,
    y: Vec<usize>,
}

impl Features {
    fn from_dump(dump: &ContextDump, view: View) -> Result<Self> {
        let raw = dump.require_view(view)?;
        Ok(Features {
            dim: dump.dim(),
            h: raw.iter().map(|x| *x as f64).collect(),
            y: dump.targets().iter().map(|t| *t as usize).collect(),
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.h[i * self.dim..(i + 1) * self.dim]
    }

    fn len(&self) -> usize {
        self.y.len()
    }

    fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.y.iter().find(|y| **y >= vocab) {
            Some(y) => Err(Error::Config(format!(
                "target {y} outside the head's vocabulary of size {vocab}"
            ))),
            None => Ok(()),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn init_learned(dim: usize, allocation: &[usize], seed: u64) -> Result<LearnedHead> {
    let n: usize = allocation.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = gaussian(&mut rng, n * dim, 1.0 / (dim as f64).sqrt());
    LearnedHead::from_allocation(dim, allocation.to_vec(), emb)
}

fn head_perplexity(dev: &Features, predict: impl Fn(&[f64], usize) -> Result<f64> + Sync) -> Result<f64> {
    let logs = (0..dev.len())
        .into_par_iter()
        .map(|i| predict(dev.row(i), dev.y[i]).map(f64::ln))
        .collect::<Result<Vec<f64>>>()?;
    perplexity(&logs)
}

/// Trains a multi-embedding head with `allocation[v]` rows per type by
/// cross-entropy on the dump's `view` features.
pub fn train_learned_head(
    dump: &ContextDump,
    view: View,
    allocation: &[usize],
    cfg: &TrainConfig,
    dev: Option<&ContextDump>,
) -> Result<(LearnedHead, TrainTrace)> {
    cfg.validate()?;
    if let LossKind::Interpolated { .. } = cfg.loss {
        return Err(Error::Config(
            "the interpolated loss needs the base model; use train_interpolated".into(),
        ));
    }
    let feats = Features::from_dump(dump, view)?;
    feats.check_vocab(allocation.len())?;
    let head = init_learned(feats.dim, allocation, cfg.seed).map_err(as_config)?;
    let dev_feats = dev.map(|d| Features::from_dump(d, view)).transpose()?;
    let mut params = head.embeddings().to_vec();
    let (dim, map, metric, tau) = (head.dim(), head.map().clone(), head.metric(), cfg.tau);
    let grad = |p: &[f64], ids: &[usize]| {
        let mut g = vec![0.0; p.len()];
        let mut loss = 0.0;
        for &i in ids {
            loss += grad::learned_loss_grad_raw(p, dim, &map, metric, feats.row(i), feats.y[i], tau, &mut g);
        }
        (loss, g)
    };
    let dev_eval = |p: &[f64]| -> Result<f64> {
        let hd = head.with_embeddings(p.to_vec())?;
        head_perplexity(dev_feats.as_ref().expect("dev present"), |h, y| {
            Ok(learned_head_predict(h, &hd, tau)?[y])
        })
    };
    let trace = optimize(
        &mut params,
        feats.len(),
        cfg,
        &grad,
        dev_feats.is_some().then_some(&dev_eval as &DevEval<'_>),
    )?;
    Ok((head.with_embeddings(params)?, trace))
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Base-model probability of each target, from the dump's ffn view.
fn base_target_probs(dump: &ContextDump, w_sm: &OutputEmbedding) -> Result<Vec<f64>> {
    let feats = Features::from_dump(dump, View::Ffn)?;
    feats.check_vocab(w_sm.vocab_size())?;
    (0..feats.len())
        .into_par_iter()
        .map(|i| Ok(w_sm.predict(feats.row(i))?[feats.y[i]]))
        .collect()
}

/// Trains a head through the interpolated objective
/// `-ln((1 - lambda) P_LM(y) + lambda P_head(y))`; the base model is frozen.
pub fn train_interpolated(
    dump: &ContextDump,
    view: View,
    w_sm: &OutputEmbedding,
    lambda: f64,
    allocation: &[usize],
    cfg: &TrainConfig,
    dev: Option<&ContextDump>,
) -> Result<(LearnedHead, TrainTrace)> {
    cfg.validate()?;
    check_lambda(lambda)?;
    if allocation.len() != w_sm.vocab_size() {
        return Err(Error::Config(format!(
            "allocation covers {} types but the vocabulary has {}",
            allocation.len(),
            w_sm.vocab_size()
        )));
    }
    let feats = Features::from_dump(dump, view)?;
    let p_lm = base_target_probs(dump, w_sm)?;
    let head = init_learned(feats.dim, allocation, cfg.seed).map_err(as_config)?;
    let dev_data = dev
        .map(|d| Ok::<_, Error>((Features::from_dump(d, view)?, base_target_probs(d, w_sm)?)))
        .transpose()?;
    let mut params = head.embeddings().to_vec();
    let (dim, map, metric, tau) = (head.dim(), head.map().clone(), head.metric(), cfg.tau);
    let grad = |p: &[f64], ids: &[usize]| {
        let mut g = vec![0.0; p.len()];
        let mut loss = 0.0;
        for &i in ids {
            loss += grad::interpolated_loss_grad_raw(
                p,
                dim,
                &map,
                metric,
                feats.row(i),
                feats.y[i],
                p_lm[i],
                lambda,
                tau,
                &mut g,
            );
        }
        (loss, g)
    };
    let dev_eval = |p: &[f64]| -> Result<f64> {
        let hd = head.with_embeddings(p.to_vec())?;
        let (df, dp) = dev_data.as_ref().expect("dev present");
        let logs = (0..df.len())
            .into_par_iter()
            .map(|i| {
                let ph = learned_head_predict(df.row(i), &hd, tau)?[df.y[i]];
                Ok(((1.0 - lambda) * dp[i] + lambda * ph).ln())
            })
            .collect::<Result<Vec<f64>>>()?;
        perplexity(&logs)
    };
    let trace = optimize(
        &mut params,
        feats.len(),
        cfg,
        &grad,
        dev_data.is_some().then_some(&dev_eval as &DevEval<'_>),
    )?;
    Ok((head.with_embeddings(params)?, trace))
}

/// Initial MoS head: identity projections perturbed by
/// `init_noise * N(0, 1/D)`, zero biases, perturbed prior projection.
pub fn init_mos(w_sm: &OutputEmbedding, components: usize, init_noise: f64, seed: u64) -> Result<MoSHead> {
    let base = MoSHead::identity(w_sm, components)?;
    if init_noise == 0.0 {
        return Ok(base);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = w_sm.dim();
    let sigma = init_noise / (d as f64).sqrt();
    let mut params = base.parameters(false);
    let np = components * d * d;
    let noise = gaussian(&mut rng, np, sigma);
    for (p, n) in params[..np].iter_mut().zip(noise) {
        *p += n;
    }
    let prior_at = np + components * d;
    let noise = gaussian(&mut rng, components * d, sigma);
    for (p, n) in params[prior_at..].iter_mut().zip(noise) {
        *p += n;
    }
    base.with_parameters(&params, false)
}

/// Trains projections, biases and the prior of an `R`-component mixture of
/// softmaxes on the dump's `view` features. `W_sm` itself is never modified;
/// with `finetune_output` a copy inside the head is trained.
pub fn train_mos(
    dump: &ContextDump,
    view: View,
    w_sm: &OutputEmbedding,
    components: usize,
    cfg: &TrainConfig,
    dev: Option<&ContextDump>,
) -> Result<(MoSHead, TrainTrace)> {
    cfg.validate()?;
    if components == 0 {
        return Err(Error::Config("a mixture needs at least one component".into()));
    }
    let feats = Features::from_dump(dump, view)?;
    if feats.dim != w_sm.dim() {
        return Err(Error::shape("MoS feature width", w_sm.dim(), feats.dim));
    }
    feats.check_vocab(w_sm.vocab_size())?;
    let dev_feats = dev.map(|d| Features::from_dump(d, view)).transpose()?;
    let mut head = init_mos(w_sm, components, cfg.init_noise, cfg.seed)?;
    head.set_finetuned(cfg.finetune_output);
    let fine = cfg.finetune_output;
    let mut params = head.parameters(fine);
    let grad = |p: &[f64], ids: &[usize]| {
        let hd = head.with_parameters(p, fine).expect("parameter layout");
        let mut g = vec![0.0; p.len()];
        let mut loss = 0.0;
        for &i in ids {
            let (l, gi) = mos_loss_grad(&hd, feats.row(i), feats.y[i], fine).expect("checked shapes");
            loss += l;
            for (a, b) in g.iter_mut().zip(gi.flatten()) {
                *a += b;
            }
        }
        (loss, g)
    };
    let dev_eval = |p: &[f64]| -> Result<f64> {
        let hd = head.with_parameters(p, fine)?;
        head_perplexity(dev_feats.as_ref().expect("dev present"), |h, y| Ok(mos_predict(h, &hd)?[y]))
    };
    let trace = optimize(
        &mut params,
        feats.len(),
        cfg,
        &grad,
        dev_feats.is_some().then_some(&dev_eval as &DevEval<'_>),
    )?;
    Ok((head.with_parameters(&params, fine)?, trace))
}
