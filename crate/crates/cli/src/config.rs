//! Experiment configuration: one JSON document, overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use knnlab_core::ann::IndexParams;
use knnlab_core::eval::SweepAxis;
use knnlab_core::head::AllocationScheme;
use knnlab_core::store::{Precision, SyntheticSpec, View};
use knnlab_core::train::TrainConfig;
use knnlab_core::HeadConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Output embedding `W_sm`.
    pub model: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub report_a: Option<PathBuf>,
    pub report_b: Option<PathBuf>,
    /// Token stream for bigram statistics: one document per line.
    pub stream: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSettings {
    pub view: View,
    pub precision: Precision,
    pub fraction: f64,
}

impl Default for StoreSettings {
    fn default() -> Self {
        StoreSettings {
            view: View::Att,
            precision: Precision::F16,
            fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum HeadType {
    /// Free embeddings trained with cross-entropy.
    #[default]
    Learned,
    /// Free embeddings trained through the interpolation with the base model.
    Interpolated,
    Mos,
    /// Built from datastore clusters; no training.
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadBuild {
    #[serde(rename = "type")]
    pub head_type: HeadType,
    pub allocation: AllocationScheme,
    /// Total embeddings; defaults to one per type.
    pub total: Option<usize>,
    pub components: usize,
    pub n_centroids: usize,
    pub kmeans_iters: usize,
}

impl Default for HeadBuild {
    fn default() -> Self {
        HeadBuild {
            head_type: HeadType::Learned,
            allocation: AllocationScheme::Equal,
            total: None,
            components: 2,
            n_centroids: 1024,
            kmeans_iters: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Share of the eval dump used as dev split when no dev/test is given.
    pub dev_fraction: f64,
    pub tau_grid: String,
    pub min_occ: usize,
    /// Queries answered by `search` (all when unset).
    pub limit: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            dev_fraction: 0.5,
            tau_grid: "0.1:3.0:0.1".into(),
            min_occ: 10,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub axis: Option<SweepAxis>,
    pub grid: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub index: IndexParams,
    pub store: StoreSettings,
    pub build: HeadBuild,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
    /// Master seed; stochastic steps refuse to run without it.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads the config file (if any), applies `--set key.path=value`
    /// overrides and deserializes.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, Failure> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config file {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("config file {} is not valid JSON", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            // bare words are strings; anything else is JSON
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value).map_err(Failure::Usage)?;
        }
        let what = path.map_or("overrides".into(), |p| format!("config file {}", p.display()));
        Ok(serde_json::from_value(doc).with_context(|| format!("invalid {what}"))?)
    }

    /// The master seed, required for stochastic steps.
    pub fn require_seed(&self, step: &str) -> Result<u64, Failure> {
        self.seed
            .ok_or_else(|| Failure::Usage(format!("{step} is stochastic: pass --seed or set `seed` in the config")))
    }

    pub fn out_dir(&self) -> Result<&Path, Failure> {
        self.out
            .as_deref()
            .ok_or_else(|| Failure::Usage("no output directory: pass --out or set `out`".into()))
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(format!("bad config key `{key}`"));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("config key `{key}` descends into a non-object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// A required path, or a usage error naming the flag.
pub fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::Usage(format!("missing input: pass --{flag}")))
}

/// `start:stop:step` (both ends inclusive within 1e-9) or a comma list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, String> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("`{s}` is not a number in grid `{spec}`"))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step <= 0.0 || stop < start {
                return Err(format!("grid `{spec}` needs step > 0 and start <= stop"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
            // rounding keeps CSV values like 0.3 instead of 0.30000000000000004
            Ok((0..n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect())
        }
        [_] => spec.split(',').map(num).collect(),
        _ => Err(format!("grid `{spec}` is neither start:stop:step nor a comma list")),
    }
}

/// clap value parser for any of the library's string-tagged enums.
pub fn serde_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("invalid value `{s}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        let g = parse_grid("0.1:3.0:0.1").unwrap();
        assert_eq!(g.len(), 30);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[2], 0.3);
        assert_eq!(g[29], 3.0);
        assert_eq!(parse_grid("1:4:1").unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(parse_grid("0:1:0.3").unwrap(), vec![0.0, 0.3, 0.6, 0.9]);
        assert_eq!(parse_grid("0.05,0.25,0.5,1.0").unwrap(), vec![0.05, 0.25, 0.5, 1.0]);
        assert_eq!(parse_grid("2").unwrap(), vec![2.0]);
        for bad in ["1:0:0.1", "0:1:0", "0:1", "a:b:c", "1,x"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::load(
            None,
            &["head.k=8".into(), "head.metric=ip".into(), "seed=3".into(), "paths.model=m.bin".into()],
        )
        .unwrap();
        assert_eq!(cfg.head.k, 8);
        assert_eq!(cfg.head.metric, knnlab_core::Metric::Ip);
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.paths.model.as_deref(), Some(Path::new("m.bin")));
        assert!(matches!(ExperimentConfig::load(None, &["nope".into()]), Err(Failure::Usage(_))));
        assert!(matches!(ExperimentConfig::load(None, &["paths.bogus=1".into()]), Err(Failure::Data(_))));
    }

    #[test]
    fn enums_parse_through_serde() {
        assert_eq!(serde_enum::<View>("ffn").unwrap(), View::Ffn);
        assert_eq!(serde_enum::<SweepAxis>("n_probe").unwrap(), SweepAxis::NProbe);
        assert!(serde_enum::<View>("mlp").is_err());
    }
}
