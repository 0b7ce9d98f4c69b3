//! Subcommand bodies: load inputs, call the library, write artifacts and a
//! manifest, return a one-line summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use knnlab_core::ann::{approx_search, exact_search, train_index, AnnIndex, Regime};
use knnlab_core::eval::{
    bigram_entropy, evaluate, knn_help_rate, sweep, token_stats, tune_and_evaluate, write_token_stats_csv,
    BigramEntropy, EvalReport, Experiment,
};
use knnlab_core::head::{allocate_embeddings, cluster_head_from_datastore, AllocationScheme, SavedHead};
use knnlab_core::store::{
    build_datastore, generate_synthetic, subsample, ContextDump, Datastore, OutputEmbedding, Precision, View,
    Vocabulary,
};
use knnlab_core::train::{train_interpolated, train_learned_head, train_mos, TrainTrace};
use knnlab_core::{HeadKind, HeadModels, LearnedHead, MoSHead};
use rayon::prelude::*;

use crate::args::{Cli, Command};
use crate::config::{need, parse_grid, ExperimentConfig, HeadType};
use crate::{manifest, Failure};

type Run = Result<String, Failure>;

pub fn run(cli: Cli) -> Run {
    let mut cfg = ExperimentConfig::load(cli.global.config.as_deref(), &cli.global.sets)?;
    if let Some(s) = cli.global.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.global.out {
        cfg.out = Some(o.clone());
    }
    cli.command.apply(&mut cfg);
    // the master seed drives every stochastic component
    if let Some(s) = cfg.seed {
        cfg.synth.seed = s;
        cfg.index.seed = s;
        cfg.train.seed = s;
    }
    let name = cli.command.name();
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let (files, summary) = match &cli.command {
        Command::GenSynth(_) => gen_synth(&cfg, &out)?,
        Command::BuildDstore(_) => build_dstore(&cfg, &out)?,
        Command::Subsample(_) => subsample_cmd(&cfg, &out)?,
        Command::BuildIndex(_) => build_index(&cfg, &out)?,
        Command::Search(_) => search(&cfg, &out)?,
        Command::Eval(_) => eval_cmd(&cfg, &out)?,
        Command::Tune(_) => tune(&cfg, &out)?,
        Command::Sweep(_) => sweep_cmd(&cfg, &out)?,
        Command::TrainHead(_) => train_head(&cfg, &out)?,
        Command::Analyze(_) => analyze(&cfg, &out)?,
    };
    manifest::write(&out, name, &cfg, &files)?;
    Ok(format!("{name}: {summary} -> {}", out.display()))
}

type Outputs = (Vec<&'static str>, String);

fn read_dump(p: &Path) -> Result<ContextDump, Failure> {
    Ok(ContextDump::read(p)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn gen_synth(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    cfg.require_seed("gen-synth")?;
    let c = generate_synthetic(&cfg.synth)?;
    c.output.write(&out.join("output.bin"), Precision::F32)?;
    c.train.write(&out.join("train.dump"), Precision::F32)?;
    c.eval.write(&out.join("eval.dump"), Precision::F32)?;
    c.vocab.write(&out.join("vocab.txt"))?;
    write_json(&out.join("synth.json"), &cfg.synth)?;
    Ok((
        vec!["output.bin", "train.dump", "eval.dump", "vocab.txt", "synth.json"],
        format!(
            "{} train / {} eval tokens, V = {}, D = {}",
            c.train.len(),
            c.eval.len(),
            c.output.vocab_size(),
            c.output.dim()
        ),
    ))
}

fn build_dstore(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    let dump = read_dump(need(&cfg.paths.train, "dump")?)?;
    let ds = build_datastore(&dump, cfg.store.view, cfg.store.precision)?;
    ds.write(&out.join("datastore.bin"))?;
    Ok((
        vec!["datastore.bin"],
        format!("{} keys of width {} ({:?}, {} view)", ds.len(), ds.dim(), ds.precision(), cfg.store.view),
    ))
}

fn subsample_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    let seed = cfg.require_seed("subsample")?;
    let ds = Datastore::read(need(&cfg.paths.datastore, "datastore")?)?;
    let sub = subsample(&ds, cfg.store.fraction, seed)?;
    sub.write(&out.join("datastore.bin"))?;
    Ok((vec!["datastore.bin"], format!("kept {} of {} keys", sub.len(), ds.len())))
}

fn build_index(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    cfg.require_seed("build-index")?;
    let ds = Datastore::open(need(&cfg.paths.datastore, "datastore")?)?;
    let idx = train_index(&ds, &cfg.index)?;
    idx.write(&out.join("index.bin"))?;
    Ok((
        vec!["index.bin"],
        format!(
            "{} lists over {} keys, PQ {}",
            idx.n_list(),
            ds.len(),
            if cfg.index.pq_m == 0 {
                "off".to_string()
            } else {
                format!("{} x {} bits", cfg.index.pq_m, cfg.index.pq_nbits)
            }
        ),
    ))
}

fn load_index(cfg: &ExperimentConfig) -> Result<Option<AnnIndex>, Failure> {
    Ok(cfg.paths.index.as_deref().map(AnnIndex::read).transpose()?)
}

fn search(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    let ds = Datastore::open(need(&cfg.paths.datastore, "datastore")?)?;
    let queries = read_dump(need(&cfg.paths.eval, "queries")?)?;
    let index = load_index(cfg)?;
    let h = &cfg.head;
    if h.mask == Regime::Approx && index.is_none() {
        return Err(Failure::Usage("approximate search needs --index".into()));
    }
    let n = cfg.eval.limit.map_or(queries.len(), |l| l.min(queries.len()));
    let results = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = queries.vector(h.view, i)?;
            match (&index, h.mask) {
                (Some(idx), Regime::Approx) => approx_search(idx, &ds, &q, h.k, h.n_probe, h.metric),
                _ => exact_search(&ds, &q, h.k, h.metric, h.shard_size),
            }
        })
        .collect::<knnlab_core::Result<Vec<_>>>()?;
    let mut csv = String::from("query,rank,row,value,score\n");
    for (i, ns) in results.iter().enumerate() {
        for (r, nb) in ns.entries().iter().enumerate() {
            let _ = writeln!(csv, "{i},{r},{},{},{}", nb.row, ds.values()[nb.row], nb.score);
        }
    }
    let path = out.join("neighbors.csv");
    std::fs::write(&path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    Ok((
        vec!["neighbors.csv"],
        format!("{n} queries, k = {}, {:?} mask", h.k, h.mask),
    ))
}

/// Owned objects behind a [`HeadModels`].
pub struct Loaded {
    output: OutputEmbedding,
    datastore: Option<Datastore>,
    index: Option<AnnIndex>,
    learned: Option<LearnedHead>,
    mos: Option<MoSHead>,
}

impl Loaded {
    fn load(cfg: &ExperimentConfig) -> Result<Loaded, Failure> {
        let output = OutputEmbedding::read(need(&cfg.paths.model, "model")?)?;
        let datastore = cfg.paths.datastore.as_deref().map(Datastore::open).transpose()?;
        let index = load_index(cfg)?;
        let (mut learned, mut mos) = (None, None);
        if let Some(p) = cfg.paths.head.as_deref() {
            match SavedHead::read(p)? {
                SavedHead::Learned(h) => learned = Some(h),
                SavedHead::Mos(h) => mos = Some(h),
            }
        }
        Ok(Loaded {
            output,
            datastore,
            index,
            learned,
            mos,
        })
    }

    /// A learned head file serves as the cluster head when that kind is
    /// requested.
    fn models(&self, kind: HeadKind) -> HeadModels<'_> {
        let (learned, cluster) = if kind == HeadKind::Cluster {
            (None, self.learned.as_ref())
        } else {
            (self.learned.as_ref(), None)
        };
        HeadModels {
            datastore: self.datastore.as_ref(),
            index: self.index.as_ref(),
            learned,
            cluster,
            mos: self.mos.as_ref(),
            ..HeadModels::new(&self.output)
        }
    }
}

fn write_report(report: &EvalReport, out: &Path) -> Result<(), Failure> {
    report.write_json(&out.join("report.json"))?;
    report.write_token_csv(&out.join("tokens.csv"))?;
    Ok(())
}

fn eval_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    let loaded = Loaded::load(cfg)?;
    let dump = read_dump(need(&cfg.paths.eval, "eval")?)?;
    let report = evaluate(&dump, &cfg.head, &loaded.models(cfg.head.kind))?;
    write_report(&report, out)?;
    Ok((
        vec!["report.json", "tokens.csv"],
        format!(
            "{} tokens, ppl lm {:.4}, head {:.4}, interp {:.4} (lambda {}), oracle {:.4}",
            report.len(),
            report.ppl_lm,
            report.ppl_head,
            report.ppl_interp,
            report.lambda,
            report.ppl_oracle
        ),
    ))
}

/// Explicit dev and test dumps, or the eval dump split at `dev_fraction`.
fn dev_test(cfg: &ExperimentConfig) -> Result<(ContextDump, ContextDump), Failure> {
    match (&cfg.paths.dev, &cfg.paths.test) {
        (Some(d), Some(t)) => Ok((read_dump(d)?, read_dump(t)?)),
        (None, None) => {
            let dump = read_dump(need(&cfg.paths.eval, "eval")?)?;
            Ok(dump.split(cfg.eval.dev_fraction)?)
        }
        _ => Err(Failure::Usage("pass both --dev and --test, or --eval alone".into())),
    }
}

fn grid(spec: &str) -> Result<Vec<f64>, Failure> {
    parse_grid(spec).map_err(Failure::Usage)
}

fn tune(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    let loaded = Loaded::load(cfg)?;
    let (dev, test) = dev_test(cfg)?;
    let taus = grid(&cfg.eval.tau_grid)?;
    let tuned = tune_and_evaluate(&dev, &test, &cfg.head, &loaded.models(cfg.head.kind), &taus)?;
    write_json(&out.join("tuned.json"), &tuned)?;
    write_report(&tuned.test, out)?;
    Ok((
        vec!["tuned.json", "report.json", "tokens.csv"],
        format!(
            "tau* {} lambda* {}: test ppl lm {:.4} -> interp {:.4} (oracle {:.4})",
            tuned.tau, tuned.lambda, tuned.test.ppl_lm, tuned.test.ppl_interp, tuned.test.ppl_oracle
        ),
    ))
}

fn sweep_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    let axis = cfg
        .sweep
        .axis
        .ok_or_else(|| Failure::Usage("no sweep axis: pass --axis".into()))?;
    let values = grid(
        cfg.sweep
            .grid
            .as_deref()
            .ok_or_else(|| Failure::Usage("no sweep grid: pass --grid".into()))?,
    )?;
    let subsample_seed = match axis {
        knnlab_core::SweepAxis::Fraction => cfg.require_seed("a fraction sweep")?,
        _ => cfg.seed.unwrap_or(0),
    };
    let loaded = Loaded::load(cfg)?;
    let (dev, test) = dev_test(cfg)?;
    let exp = Experiment {
        models: loaded.models(cfg.head.kind),
        dev: &dev,
        test: &test,
        base: cfg.head,
        subsample_seed,
    };
    let result = sweep(&exp, axis, &values)?;
    result.write_csv(&out.join("sweep.csv"))?;
    result.write_svg(&out.join("sweep.svg"))?;
    write_json(&out.join("sweep.json"), &result)?;
    Ok((
        vec!["sweep.csv", "sweep.svg", "sweep.json"],
        format!(
            "{} points over {axis}; best {} = {} with interp ppl {:.4} (lambda* {})",
            values.len(),
            axis,
            result.best_value(),
            result.best_ppl(),
            result.lambda_star[result.argmin]
        ),
    ))
}

/// Per-type statistic for the allocation schemes: occurrence counts, or the
/// base model's summed negative log-likelihood.
fn allocation_stats(
    scheme: AllocationScheme,
    train: &ContextDump,
    output: &OutputEmbedding,
) -> Result<Vec<f64>, Failure> {
    let v = output.vocab_size();
    let mut stats = vec![0.0; v];
    match scheme {
        AllocationScheme::Equal | AllocationScheme::LogFrequency => {
            for &t in train.targets() {
                *stats
                    .get_mut(t as usize)
                    .ok_or_else(|| anyhow::anyhow!("target {t} outside vocabulary of size {v}"))? += 1.0;
            }
        }
        AllocationScheme::LogLoss => {
            let nll = (0..train.len())
                .into_par_iter()
                .map(|i| {
                    let p = output.predict(&train.vector(View::Ffn, i)?)?;
                    Ok(-p[train.targets()[i] as usize].ln())
                })
                .collect::<knnlab_core::Result<Vec<f64>>>()?;
            for (&t, l) in train.targets().iter().zip(nll) {
                stats[t as usize] += l;
            }
        }
    }
    Ok(stats)
}

fn train_head(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    cfg.require_seed("train-head")?;
    let b = &cfg.build;
    let output = OutputEmbedding::read(need(&cfg.paths.model, "model")?)?;
    let v = output.vocab_size();
    if b.head_type == HeadType::Cluster {
        let ds = Datastore::open(need(&cfg.paths.datastore, "datastore")?)?;
        let head = cluster_head_from_datastore(&ds, v, b.n_centroids, b.kmeans_iters, cfg.train.seed)?;
        SavedHead::Learned(head.clone()).write(&out.join("head.bin"))?;
        return Ok((
            vec!["head.bin"],
            format!("cluster head with {} non-empty clusters", head.n_total()),
        ));
    }
    let train = read_dump(need(&cfg.paths.train, "train")?)?;
    let dev = cfg.paths.dev.as_deref().map(read_dump).transpose()?;
    let view = cfg.store.view;
    let (saved, trace, what): (SavedHead, TrainTrace, String) = match b.head_type {
        HeadType::Learned | HeadType::Interpolated => {
            let total = b.total.unwrap_or(v);
            let alloc = allocate_embeddings(&allocation_stats(b.allocation, &train, &output)?, b.allocation, total)?;
            let (head, trace) = if b.head_type == HeadType::Learned {
                train_learned_head(&train, view, &alloc, &cfg.train, dev.as_ref())?
            } else {
                train_interpolated(&train, view, &output, cfg.head.lambda, &alloc, &cfg.train, dev.as_ref())?
            };
            let what = format!("{} head with {} embeddings", if b.head_type == HeadType::Learned { "learned" } else { "interpolated" }, head.n_total());
            (SavedHead::Learned(head), trace, what)
        }
        HeadType::Mos => {
            let (head, trace) = train_mos(&train, view, &output, b.components, &cfg.train, dev.as_ref())?;
            let what = format!("mixture of {} softmaxes", head.components());
            (SavedHead::Mos(head), trace, what)
        }
        HeadType::Cluster => unreachable!("handled above"),
    };
    saved.write(&out.join("head.bin"))?;
    trace.write_csv(&out.join("trace.csv"))?;
    let tail = match trace.final_dev_ppl {
        Some(p) => format!("; dev ppl {p:.4} at epoch {}", trace.best_epoch),
        None => String::new(),
    };
    Ok((
        vec!["head.bin", "trace.csv"],
        format!("{what}, {} epochs{tail}", trace.loss.len()),
    ))
}

/// One document per non-empty line of whitespace-separated ids.
fn read_stream(path: &Path) -> Result<Vec<Vec<u32>>, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read stream {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .with_context(|| format!("{}:{}: `{t}` is not a token id", path.display(), n + 1))
                        .map_err(Failure::Data)
                })
                .collect()
        })
        .collect()
}

fn analyze(cfg: &ExperimentConfig, out: &Path) -> Result<Outputs, Failure> {
    let a = EvalReport::read_json(need(&cfg.paths.report_a, "report-a")?)?;
    let b = EvalReport::read_json(need(&cfg.paths.report_b, "report-b")?)?;
    let vocab = cfg.paths.vocab.as_deref().map(Vocabulary::read).transpose()?;
    let max_id = a.targets.iter().max().map_or(0, |m| *m as usize + 1);
    let v = vocab.as_ref().map_or(max_id, |v| v.len());
    let docs = match cfg.paths.stream.as_deref() {
        Some(p) => read_stream(p)?,
        None => vec![a.targets.clone()],
    };
    let v = v.max(docs.iter().flatten().max().map_or(0, |m| *m as usize + 1));
    let rates = knn_help_rate(&a, &b, v, cfg.eval.min_occ)?;
    let entropy = bigram_entropy(&docs, v)?;
    let rows = token_stats(&rates, vocab.as_ref(), &entropy)?;
    write_token_stats_csv(&rows, &out.join("token_stats.csv"))?;
    let mut meta = BTreeMap::new();
    meta.insert("bigrams", serde_json::json!(BigramEntropy::BOUNDARY_RULE));
    meta.insert("help", serde_json::json!("occurrences with p_head > p_lm (strict)"));
    meta.insert("min_occ", serde_json::json!(cfg.eval.min_occ));
    meta.insert("documents", serde_json::json!(docs.len()));
    meta.insert("types_kept", serde_json::json!(rows.len()));
    write_json(&out.join("analysis.json"), &meta)?;
    let mean_delta = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.delta).sum::<f64>() / rows.len() as f64
    };
    Ok((
        vec!["token_stats.csv", "analysis.json"],
        format!("{} types with >= {} occurrences, mean help-rate delta {mean_delta:+.4}", rows.len(), cfg.eval.min_occ),
    ))
}
