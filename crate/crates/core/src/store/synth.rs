//! Seeded two-view synthetic corpus.
//!
//! Each token position draws a latent context `z` (width `L > D`). The
//! feed-forward view sees latent coordinates `0..D`, the attention view sees
//! `L-D..L`, and the next token is sampled from `softmax(U z)`. The base LM
//! head `W_sm` is the ridge regression of the true logits onto the ffn view,
//! so it is competent but blind to the coordinates only the att view carries.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ContextDump, OutputEmbedding, Vocabulary};
use crate::error::{Error, Result};
use crate::kernels::{self, ProbVector};

const RIDGE: f64 = 1e-3;

const STREAM_WORLD: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_VOCAB: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub latent_width: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Standard deviation of isotropic noise added to each view.
    pub ffn_noise: f64,
    pub att_noise: f64,
    /// Scale of the latent-to-logit map.
    pub logit_scale: f64,
    /// Number of latent context clusters; 0 draws `z ~ N(0, I)`.
    pub n_clusters: usize,
    /// Within-cluster standard deviation of `z`.
    pub cluster_spread: f64,
    /// Use the ffn projection for the att view as well.
    pub shared_views: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            latent_width: 24,
            dim: 16,
            vocab_size: 64,
            n_train: 50_000,
            n_eval: 5_000,
            ffn_noise: 0.1,
            att_noise: 0.1,
            logit_scale: 3.0,
            n_clusters: 512,
            cluster_spread: 0.35,
            shared_views: false,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::param(format!("synthetic spec: {m}")));
        if self.dim == 0 || self.vocab_size < 2 {
            return bad("need D >= 1 and V >= 2");
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return bad("train and eval sizes must be >= 1");
        }
        if self.latent_width < self.dim || (!self.shared_views && self.latent_width == self.dim) {
            return bad("latent width must exceed D (or equal it with shared views)");
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if ![self.ffn_noise, self.att_noise, self.logit_scale, self.cluster_spread]
            .into_iter()
            .all(finite_nonneg)
        {
            return bad("noise, logit and cluster scales must be finite and >= 0");
        }
        Ok(())
    }
}

/// The hidden generative parameters, kept for sanity checks.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    latent_width: usize,
    dim: usize,
    vocab_size: usize,
    ffn_map: DMatrix<f64>,
    att_map: DMatrix<f64>,
    logit_map: DMatrix<f64>,
    centers: Vec<Vec<f64>>,
    cluster_spread: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| normal(rng));
    g.qr().q()
}

impl SyntheticWorld {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(STREAM_WORLD);
        let (l, d, v) = (spec.latent_width, spec.dim, spec.vocab_size);
        let q_ffn = random_orthogonal(d, &mut rng);
        let q_att = random_orthogonal(d, &mut rng);
        let mut ffn_map = DMatrix::zeros(d, l);
        ffn_map.view_mut((0, 0), (d, d)).copy_from(&q_ffn);
        let att_map = if spec.shared_views {
            ffn_map.clone()
        } else {
            let mut m = DMatrix::zeros(d, l);
            m.view_mut((0, l - d), (d, d)).copy_from(&q_att);
            m
        };
        let scale = spec.logit_scale / (l as f64).sqrt();
        let logit_map = DMatrix::from_fn(v, l, |_, _| normal(&mut rng) * scale);
        let centers = (0..spec.n_clusters)
            .map(|_| (0..l).map(|_| normal(&mut rng)).collect())
            .collect();
        SyntheticWorld {
            latent_width: l,
            dim: d,
            vocab_size: v,
            ffn_map,
            att_map,
            logit_map,
            centers,
            cluster_spread: spec.cluster_spread,
        }
    }

    pub fn latent_width(&self) -> usize {
        self.latent_width
    }

    pub fn sample_latent(&self, rng: &mut impl Rng) -> Vec<f64> {
        if self.centers.is_empty() {
            (0..self.latent_width).map(|_| StandardNormal.sample(rng)).collect()
        } else {
            let c = &self.centers[rng.random_range(0..self.centers.len() as u32) as usize];
            c.iter()
                .map(|m| {
                    let eps: f64 = StandardNormal.sample(rng);
                    m + self.cluster_spread * eps
                })
                .collect()
        }
    }

    pub fn true_logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.vocab_size)
            .map(|r| (0..self.latent_width).fold(0.0, |acc, c| acc + self.logit_map[(r, c)] * z[c]))
            .collect()
    }

    pub fn true_distribution(&self, z: &[f64]) -> ProbVector {
        kernels::softmax_with_temperature(&self.true_logits(z), 1.0)
            .expect("finite logits")
    }

    pub fn sample_target(&self, z: &[f64], rng: &mut impl Rng) -> u32 {
        let p = self.true_distribution(z);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i as u32;
            }
        }
        (self.vocab_size - 1) as u32
    }

    fn project(&self, map: &DMatrix<f64>, z: &[f64], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dim)
            .map(|r| {
                let clean = (0..self.latent_width).fold(0.0, |acc, c| acc + map[(r, c)] * z[c]);
                let eps: f64 = StandardNormal.sample(rng);
                clean + noise * eps
            })
            .collect()
    }
}

struct Split {
    dump: ContextDump,
    logits: Vec<f64>,
}

fn sample_split(world: &SyntheticWorld, spec: &SyntheticSpec, n: usize, stream: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let d = spec.dim;
    let mut att = Vec::with_capacity(n * d);
    let mut ffn = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n * spec.vocab_size);
    for _ in 0..n {
        let z = world.sample_latent(&mut rng);
        let hf = world.project(&world.ffn_map, &z, spec.ffn_noise, &mut rng);
        let ha = world.project(&world.att_map, &z, spec.att_noise, &mut rng);
        ffn.extend(hf.iter().map(|x| *x as f32));
        att.extend(ha.iter().map(|x| *x as f32));
        targets.push(world.sample_target(&z, &mut rng));
        logits.extend(world.true_logits(&z));
    }
    Ok(Split {
        dump: ContextDump::new(d, Some(att), Some(ffn), targets)?,
        logits,
    })
}

/// Ridge regression of `logits` (n x V) onto the dump's ffn view.
fn fit_output_embedding(split: &Split, vocab_size: usize) -> Result<OutputEmbedding> {
    let d = split.dump.dim();
    let x = split.dump.require_view(super::View::Ffn)?;
    let mut gram = DMatrix::<f64>::identity(d, d) * RIDGE;
    let mut cross = DMatrix::<f64>::zeros(d, vocab_size);
    for (row, logit) in x.chunks_exact(d).zip(split.logits.chunks_exact(vocab_size)) {
        for a in 0..d {
            let xa = row[a] as f64;
            for b in 0..d {
                gram[(a, b)] += xa * row[b] as f64;
            }
            for v in 0..vocab_size {
                cross[(a, v)] += xa * logit[v];
            }
        }
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("ffn Gram matrix is not positive definite".into()))?;
    let w_t = chol.solve(&cross); // D x V
    let data = (0..vocab_size)
        .flat_map(|v| (0..d).map(move |a| (v, a)))
        .map(|(v, a)| w_t[(a, v)] as f32)
        .collect();
    OutputEmbedding::new(vocab_size, d, data)
}

fn pseudo_words(n: usize, seed: u64) -> Vocabulary {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_VOCAB);
    let mut seen = std::collections::HashSet::new();
    let tokens = (0..n)
        .map(|i| {
            let syllables = 1 + (rng.random::<u32>() % 4) as usize;
            let mut w: String = (0..syllables)
                .map(|_| {
                    let o = ONSETS[rng.random::<u32>() as usize % ONSETS.len()];
                    let v = NUCLEI[rng.random::<u32>() as usize % NUCLEI.len()];
                    format!("{o}{v}")
                })
                .collect();
            if !seen.insert(w.clone()) {
                w.push_str(&i.to_string());
                seen.insert(w.clone());
            }
            w
        })
        .collect();
    Vocabulary::new(tokens).expect("generated tokens are non-empty")
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub output: OutputEmbedding,
    pub train: ContextDump,
    pub eval: ContextDump,
    pub vocab: Vocabulary,
    pub world: SyntheticWorld,
}

/// Draws a corpus; bit-identical for identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let world = SyntheticWorld::new(spec);
    let train = sample_split(&world, spec, spec.n_train, STREAM_TRAIN)?;
    let eval = sample_split(&world, spec, spec.n_eval, STREAM_EVAL)?;
    let output = fit_output_embedding(&train, spec.vocab_size)?;
    Ok(SyntheticCorpus {
        output,
        train: train.dump,
        eval: eval.dump,
        vocab: pseudo_words(spec.vocab_size, spec.seed),
        world,
    })
}
