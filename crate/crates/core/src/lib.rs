//! Laboratory for generalized retrieval-augmented language-model heads.
//!
//! The next-token distribution studied here is
//!
//! ```text
//! P = (1 - lambda) * softmax(W_sm . h_sm) + lambda * M softmax(mask_to_k(W_ds (x) h_ds) / tau)
//! ```
//!
//! where the right-hand term is a kNN head over a datastore, or one of its
//! parametric replacements. Modules:
//!
//! - [`kernels`]: softmax with temperature, interpolation, perplexity, top-k.
//! - [`store`]: datastores, context dumps, file formats, synthetic corpora.
//! - [`ann`]: exact sharded search and IVF/PQ approximate search.
//! - [`head`]: kNN, learned, MoS, cluster and sparsified heads.
//! - [`train`]: closed-form-gradient training of parametric heads.
//! - [`eval`]: perplexity protocol, lambda/temperature tuning, sweeps, analyses.

pub mod ann;
mod binfmt;
pub mod error;
pub mod eval;
pub mod head;
pub mod kernels;
pub mod store;
pub mod train;

pub use ann::{exact_search, AnnIndex, Neighbor, NeighborSet, Regime};
pub use error::{Error, Result};
pub use eval::{evaluate, tune_and_evaluate, tune_lambda, EvalReport, SweepAxis, SweepResult};
pub use head::{generalized_predict, HeadConfig, HeadKind, HeadModels, LearnedHead, MoSHead, Prediction};
pub use kernels::{Metric, ProbVector, ScoreVector};
pub use store::{
    build_datastore, subsample, ContextDump, Datastore, OutputEmbedding, Precision, View,
    Vocabulary,
};
