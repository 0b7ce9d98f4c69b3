//! End-to-end evaluation of `(1 - lambda) P_LM + lambda P_head` for any head.

use serde::{Deserialize, Serialize};

use super::{
    full_knn_distribution, knn_distribution, learned_head_predict, mos_predict, sparsify_distribution,
    LearnedHead, MoSHead,
};
use crate::ann::{approx_search, exact_search, rescore, AnnIndex, NeighborSet, Regime, DEFAULT_N_PROBE};
use crate::error::{Error, Result};
use crate::kernels::{check_lambda, softmax_with_temperature, Metric, ProbVector, ScoreVector};
use crate::store::{Datastore, OutputEmbedding, View};

/// Which realization supplies the right-hand term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    Knn,
    FullKnn,
    Learned,
    Mos,
    Cluster,
    Sparsify,
    LmEmbeddingAsDatastore,
}

impl HeadKind {
    pub const ALL: [HeadKind; 7] = [
        HeadKind::Knn,
        HeadKind::FullKnn,
        HeadKind::Learned,
        HeadKind::Mos,
        HeadKind::Cluster,
        HeadKind::Sparsify,
        HeadKind::LmEmbeddingAsDatastore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Knn => "knn",
            HeadKind::FullKnn => "full-knn",
            HeadKind::Learned => "learned",
            HeadKind::Mos => "mos",
            HeadKind::Cluster => "cluster",
            HeadKind::Sparsify => "sparsify",
            HeadKind::LmEmbeddingAsDatastore => "lm-embedding-as-datastore",
        }
    }

    /// Whether the head retrieves from a datastore.
    pub fn retrieves(self) -> bool {
        matches!(self, HeadKind::Knn | HeadKind::FullKnn)
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param(format!("unknown head kind `{s}`")))
    }
}

/// Design choices for one generalized prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub metric: Metric,
    pub k: usize,
    pub tau: f64,
    pub lambda: f64,
    pub mask: Regime,
    pub score: Regime,
    pub view: View,
    pub n_probe: usize,
    pub shard_size: usize,
}

impl Default for HeadConfig {
    /// The reference operating point: attention view, L2, k = 1024,
    /// lambda = 0.271.
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Knn,
            metric: Metric::L2,
            k: 1024,
            tau: 1.0,
            lambda: 0.271,
            mask: Regime::Exact,
            score: Regime::Exact,
            view: View::Att,
            n_probe: DEFAULT_N_PROBE,
            shard_size: 1 << 16,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::param(format!("tau must be > 0, got {}", self.tau)));
        }
        check_lambda(self.lambda)?;
        if self.k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        if self.n_probe == 0 {
            return Err(Error::param("n_probe must be at least 1"));
        }
        if self.shard_size == 0 {
            return Err(Error::param("shard size must be at least 1"));
        }
        Ok(())
    }

    /// Whether an index is needed to realize the mask/score regimes.
    pub fn needs_index(&self) -> bool {
        self.kind == HeadKind::Knn && (self.mask == Regime::Approx || self.score == Regime::Approx)
    }
}

/// Model objects a head may need; absent ones are configuration errors
/// only for heads that use them.
#[derive(Debug, Clone, Copy)]
pub struct HeadModels<'a> {
    pub output: &'a OutputEmbedding,
    pub datastore: Option<&'a Datastore>,
    pub index: Option<&'a AnnIndex>,
    pub learned: Option<&'a LearnedHead>,
    pub cluster: Option<&'a LearnedHead>,
    pub mos: Option<&'a MoSHead>,
}

impl<'a> HeadModels<'a> {
    pub fn new(output: &'a OutputEmbedding) -> Self {
        HeadModels {
            output,
            datastore: None,
            index: None,
            learned: None,
            cluster: None,
            mos: None,
        }
    }

    pub fn datastore(&self) -> Result<&'a Datastore> {
        self.datastore
            .ok_or_else(|| Error::Config("this head needs a datastore".into()))
    }

    pub fn index(&self) -> Result<&'a AnnIndex> {
        self.index
            .ok_or_else(|| Error::Config("approximate regimes need an index".into()))
    }
}

/// Neighbor set for `query` under the configured mask and score regimes.
pub fn retrieve(cfg: &HeadConfig, models: &HeadModels<'_>, query: &[f64]) -> Result<NeighborSet> {
    let ds = models.datastore()?;
    let ns = match cfg.mask {
        Regime::Exact => exact_search(ds, query, cfg.k, cfg.metric, cfg.shard_size)?,
        Regime::Approx => approx_search(models.index()?, ds, query, cfg.k, cfg.n_probe, cfg.metric)?,
    };
    match (cfg.score, ns.score_source()) {
        (Regime::Exact, Regime::Approx) => rescore(ds, query, &ns, cfg.metric),
        (Regime::Approx, Regime::Exact) => models.index()?.approx_rescore(ds, query, &ns, cfg.metric),
        _ => Ok(ns),
    }
}

/// Both component distributions and the mixing weight. `head` is `None`
/// when the head assigns no mass at all (empty neighbor set).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub lm: ProbVector,
    pub head: Option<ProbVector>,
    pub lambda: f64,
}

impl Prediction {
    pub fn lm_prob(&self, id: usize) -> f64 {
        self.lm[id]
    }

    pub fn head_prob(&self, id: usize) -> f64 {
        self.head.as_ref().map_or(0.0, |h| h[id])
    }

    pub fn interp_prob(&self, id: usize) -> f64 {
        (1.0 - self.lambda) * self.lm_prob(id) + self.lambda * self.head_prob(id)
    }

    /// The interpolated distribution. Without a head it only normalizes when
    /// `lambda` is 0.
    pub fn combined(&self) -> Result<ProbVector> {
        match &self.head {
            Some(h) => crate::kernels::interpolate(&self.lm, h, self.lambda),
            None if self.lambda == 0.0 => Ok(self.lm.clone()),
            None => Err(Error::Degenerate("the head assigns no probability mass".into())),
        }
    }
}

/// Evaluates the generalized formulation at one position.
pub fn generalized_predict(
    h_sm: &[f64],
    h_ds: &[f64],
    cfg: &HeadConfig,
    models: &HeadModels<'_>,
) -> Result<Prediction> {
    cfg.validate()?;
    let w = models.output;
    let lm = w.predict(h_sm)?;
    let v = w.vocab_size();
    let head = match cfg.kind {
        HeadKind::Knn => {
            let ns = retrieve(cfg, models, h_ds)?;
            if ns.is_empty() {
                None
            } else {
                Some(knn_distribution(&ns, models.datastore()?.values(), cfg.tau, v)?)
            }
        }
        HeadKind::FullKnn => Some(full_knn_distribution(models.datastore()?, h_ds, cfg.tau, cfg.metric, v)?),
        HeadKind::Learned => {
            let head = models
                .learned
                .ok_or_else(|| Error::Config("the learned head is missing".into()))?;
            Some(learned_head_predict(h_ds, head, cfg.tau)?)
        }
        HeadKind::Cluster => {
            let head = models
                .cluster
                .ok_or_else(|| Error::Config("the cluster head is missing".into()))?;
            Some(learned_head_predict(h_ds, head, cfg.tau)?)
        }
        HeadKind::Mos => {
            let head = models
                .mos
                .ok_or_else(|| Error::Config("the MoS head is missing".into()))?;
            Some(mos_predict(h_ds, head)?)
        }
        HeadKind::Sparsify => Some(sparsify_distribution(&lm, cfg.k, cfg.tau)?),
        HeadKind::LmEmbeddingAsDatastore => lm_embedding_head(cfg, models, h_ds)?,
    };
    Ok(Prediction {
        lm,
        head,
        lambda: cfg.lambda,
    })
}

/// Scores the rows of `W_sm` against `h_ds`. With a datastore, only ids
/// that are values of the retrieved neighbors compete; otherwise all `V`
/// rows, masked to the best `k`.
fn lm_embedding_head(cfg: &HeadConfig, models: &HeadModels<'_>, h_ds: &[f64]) -> Result<Option<ProbVector>> {
    let scores = models.output.scores(h_ds, cfg.metric)?;
    let masked = match models.datastore {
        Some(ds) => {
            let ns = retrieve(cfg, models, h_ds)?;
            if ns.is_empty() {
                return Ok(None);
            }
            let mut m = vec![f64::NEG_INFINITY; scores.len()];
            for row in ns.rows() {
                let id = ds.values()[row] as usize;
                if id >= m.len() {
                    return Err(Error::input(format!("value {id} outside the vocabulary")));
                }
                m[id] = scores[id];
            }
            m
        }
        None => ScoreVector::new(scores, cfg.metric).mask_to_k(cfg.k)?.entries().to_vec(),
    };
    Ok(Some(softmax_with_temperature(&masked, cfg.tau)?))
}
