//! Flags. Every flag overrides the matching config key; unset flags leave
//! the config (or its defaults) alone.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use knnlab_core::ann::Regime;
use knnlab_core::eval::SweepAxis;
use knnlab_core::head::AllocationScheme;
use knnlab_core::store::{Precision, View};
use knnlab_core::train::{Optimizer, Schedule};
use knnlab_core::{HeadKind, Metric};

use crate::config::{serde_enum, ExperimentConfig, HeadType};

#[derive(Debug, Parser)]
#[command(name = "knnlab", version, about = "Retrieval-augmented LM head experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set head.k=64` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, env = "KNNLAB_THREADS", global = true)]
    pub threads: Option<usize>,
    /// Master seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (output embedding, train/eval dumps, vocabulary).
    GenSynth(GenSynth),
    /// Build a datastore from a context dump.
    BuildDstore(BuildDstore),
    /// Keep a seeded random fraction of a datastore.
    Subsample(Subsample),
    /// Train an IVF(/PQ) index over a datastore.
    BuildIndex(BuildIndex),
    /// Nearest neighbors of every query in a dump.
    Search(Search),
    /// Evaluate a head configuration at fixed lambda and tau.
    Eval(Eval),
    /// Tune tau and lambda on dev, then evaluate test with both frozen.
    Tune(Tune),
    /// Sweep one setting with lambda re-tuned per point.
    Sweep(Sweep),
    /// Train (or build) a parametric head.
    TrainHead(TrainHead),
    /// Per-type help rates and bigram entropies from two reports.
    Analyze(Analyze),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::BuildDstore(_) => "build-dstore",
            Command::Subsample(_) => "subsample",
            Command::BuildIndex(_) => "build-index",
            Command::Search(_) => "search",
            Command::Eval(_) => "eval",
            Command::Tune(_) => "tune",
            Command::Sweep(_) => "sweep",
            Command::TrainHead(_) => "train-head",
            Command::Analyze(_) => "analyze",
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        match self {
            Command::GenSynth(a) => a.apply(cfg),
            Command::BuildDstore(a) => a.apply(cfg),
            Command::Subsample(a) => a.apply(cfg),
            Command::BuildIndex(a) => a.apply(cfg),
            Command::Search(a) => a.apply(cfg),
            Command::Eval(a) => a.apply(cfg),
            Command::Tune(a) => a.apply(cfg),
            Command::Sweep(a) => a.apply(cfg),
            Command::TrainHead(a) => a.apply(cfg),
            Command::Analyze(a) => a.apply(cfg),
        }
    }
}

macro_rules! set {
    ($target:expr, $flag:expr) => {
        if let Some(v) = $flag.clone() {
            $target = v;
        }
    };
    ($target:expr, $flag:expr, some) => {
        if let Some(v) = $flag.clone() {
            $target = Some(v);
        }
    };
}

#[derive(Debug, Args)]
pub struct GenSynth {
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
}

impl GenSynth {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.synth.n_train, self.n_train);
        set!(cfg.synth.n_eval, self.n_eval);
        set!(cfg.synth.vocab_size, self.vocab_size);
        set!(cfg.synth.dim, self.dim);
    }
}

#[derive(Debug, Args)]
pub struct BuildDstore {
    /// Context dump to index (usually the training split).
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long, value_parser = serde_enum::<View>)]
    pub view: Option<View>,
    #[arg(long, value_parser = serde_enum::<Precision>)]
    pub precision: Option<Precision>,
}

impl BuildDstore {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.paths.train, self.dump, some);
        set!(cfg.store.view, self.view);
        set!(cfg.store.precision, self.precision);
    }
}

#[derive(Debug, Args)]
pub struct Subsample {
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    #[arg(long)]
    pub fraction: Option<f64>,
}

impl Subsample {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.paths.datastore, self.datastore, some);
        set!(cfg.store.fraction, self.fraction);
    }
}

#[derive(Debug, Args)]
pub struct BuildIndex {
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    #[arg(long)]
    pub n_list: Option<usize>,
    /// PQ subquantizers (0 disables PQ).
    #[arg(long)]
    pub pq_m: Option<usize>,
    #[arg(long)]
    pub pq_nbits: Option<u8>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
}

impl BuildIndex {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.paths.datastore, self.datastore, some);
        set!(cfg.index.n_list, self.n_list);
        set!(cfg.index.pq_m, self.pq_m);
        set!(cfg.index.pq_nbits, self.pq_nbits);
        set!(cfg.index.kmeans_iters, self.kmeans_iters);
    }
}

/// Head configuration flags shared by the evaluation commands.
#[derive(Debug, Args)]
pub struct HeadFlags {
    #[arg(long, value_parser = serde_enum::<HeadKind>)]
    pub kind: Option<HeadKind>,
    #[arg(long, value_parser = serde_enum::<Metric>)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = serde_enum::<Regime>)]
    pub mask: Option<Regime>,
    #[arg(long, value_parser = serde_enum::<Regime>)]
    pub score: Option<Regime>,
    /// View the head reads (the base model always reads ffn).
    #[arg(long, value_parser = serde_enum::<View>)]
    pub view: Option<View>,
    #[arg(long)]
    pub n_probe: Option<usize>,
    #[arg(long)]
    pub shard_size: Option<usize>,
}

impl HeadFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let h = &mut cfg.head;
        set!(h.kind, self.kind);
        set!(h.metric, self.metric);
        set!(h.k, self.k);
        set!(h.tau, self.tau);
        set!(h.lambda, self.lambda);
        set!(h.mask, self.mask);
        set!(h.score, self.score);
        set!(h.view, self.view);
        set!(h.n_probe, self.n_probe);
        set!(h.shard_size, self.shard_size);
    }
}

/// Model and store inputs shared by the evaluation commands.
#[derive(Debug, Args)]
pub struct Inputs {
    /// Output embedding of the base model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Saved parametric head (learned, cluster or mixture).
    #[arg(long)]
    pub head: Option<PathBuf>,
}

impl Inputs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.paths.model, self.model, some);
        set!(cfg.paths.datastore, self.datastore, some);
        set!(cfg.paths.index, self.index, some);
        set!(cfg.paths.head, self.head, some);
    }
}

/// Dev/test inputs: explicit dumps, or one eval dump split in two.
#[derive(Debug, Args)]
pub struct Splits {
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Leading share of `--eval` used as dev when no dev/test is given.
    #[arg(long)]
    pub dev_fraction: Option<f64>,
}

impl Splits {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.paths.eval, self.eval, some);
        set!(cfg.paths.dev, self.dev, some);
        set!(cfg.paths.test, self.test, some);
        set!(cfg.eval.dev_fraction, self.dev_fraction);
    }
}

#[derive(Debug, Args)]
pub struct Search {
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Dump whose vectors are the queries.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Answer only the first N queries.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub head: HeadFlags,
}

impl Search {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.paths.datastore, self.datastore, some);
        set!(cfg.paths.index, self.index, some);
        set!(cfg.paths.eval, self.queries, some);
        set!(cfg.eval.limit, self.limit, some);
        self.head.apply(cfg);
    }
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Dump to evaluate.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[command(flatten)]
    pub head: HeadFlags,
}

impl Eval {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        self.inputs.apply(cfg);
        set!(cfg.paths.eval, self.eval, some);
        self.head.apply(cfg);
    }
}

#[derive(Debug, Args)]
pub struct Tune {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub splits: Splits,
    /// Temperature grid, `start:stop:step` or a comma list.
    #[arg(long)]
    pub tau_grid: Option<String>,
    #[command(flatten)]
    pub head: HeadFlags,
}

impl Tune {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        self.inputs.apply(cfg);
        self.splits.apply(cfg);
        set!(cfg.eval.tau_grid, self.tau_grid);
        self.head.apply(cfg);
    }
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub splits: Splits,
    /// tau | fraction | k | n_probe | lambda
    #[arg(long, value_parser = |s: &str| s.parse::<SweepAxis>().map_err(|e| e.to_string()))]
    pub axis: Option<SweepAxis>,
    /// `start:stop:step` (inclusive) or a comma list.
    #[arg(long)]
    pub grid: Option<String>,
    #[command(flatten)]
    pub head: HeadFlags,
}

impl Sweep {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        self.inputs.apply(cfg);
        self.splits.apply(cfg);
        set!(cfg.sweep.axis, self.axis, some);
        set!(cfg.sweep.grid, self.grid, some);
        self.head.apply(cfg);
    }
}

#[derive(Debug, Args)]
pub struct TrainHead {
    #[arg(long = "type", value_enum)]
    pub head_type: Option<HeadType>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Dev dump for early stopping.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Datastore to cluster (cluster heads).
    #[arg(long)]
    pub datastore: Option<PathBuf>,
    #[arg(long, value_parser = serde_enum::<View>)]
    pub view: Option<View>,
    #[arg(long, value_parser = serde_enum::<AllocationScheme>)]
    pub allocation: Option<AllocationScheme>,
    /// Total number of embeddings across the vocabulary.
    #[arg(long)]
    pub total: Option<usize>,
    /// Mixture components.
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub n_centroids: Option<usize>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    /// Interpolation weight of the interpolated loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = serde_enum::<Optimizer>)]
    pub optimizer: Option<Optimizer>,
    #[arg(long, value_parser = serde_enum::<Schedule>)]
    pub schedule: Option<Schedule>,
    /// Epochs without dev improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Head temperature during training.
    #[arg(long)]
    pub train_tau: Option<f64>,
    #[arg(long)]
    pub init_noise: Option<f64>,
    #[arg(long)]
    pub finetune_output: bool,
}

impl TrainHead {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.build.head_type, self.head_type);
        set!(cfg.paths.model, self.model, some);
        set!(cfg.paths.train, self.train, some);
        set!(cfg.paths.dev, self.dev, some);
        set!(cfg.paths.datastore, self.datastore, some);
        set!(cfg.store.view, self.view);
        set!(cfg.build.allocation, self.allocation);
        set!(cfg.build.total, self.total, some);
        set!(cfg.build.components, self.components);
        set!(cfg.build.n_centroids, self.n_centroids);
        set!(cfg.build.kmeans_iters, self.kmeans_iters);
        set!(cfg.head.lambda, self.lambda);
        let t = &mut cfg.train;
        set!(t.epochs, self.epochs);
        set!(t.batch_size, self.batch_size);
        set!(t.lr, self.lr);
        set!(t.optimizer, self.optimizer);
        set!(t.schedule, self.schedule);
        set!(t.patience, self.patience, some);
        set!(t.tau, self.train_tau);
        set!(t.init_noise, self.init_noise);
        if self.finetune_output {
            t.finetune_output = true;
        }
    }
}

#[derive(Debug, Args)]
pub struct Analyze {
    /// Report of the reference configuration.
    #[arg(long)]
    pub report_a: Option<PathBuf>,
    /// Report of the compared configuration.
    #[arg(long)]
    pub report_b: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Token stream for bigram entropies, one document per line; defaults
    /// to the reports' targets as a single document.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long)]
    pub min_occ: Option<usize>,
}

impl Analyze {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set!(cfg.paths.report_a, self.report_a, some);
        set!(cfg.paths.report_b, self.report_b, some);
        set!(cfg.paths.vocab, self.vocab, some);
        set!(cfg.paths.stream, self.stream, some);
        set!(cfg.eval.min_occ, self.min_occ);
    }
}
