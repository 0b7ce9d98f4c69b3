//! Shared fixtures for the benchmarks.

use knnlab_core::store::{build_datastore, generate_synthetic, Precision, SyntheticCorpus, SyntheticSpec, View};
use knnlab_core::Datastore;

pub struct Fixture {
    pub corpus: SyntheticCorpus,
    pub datastore: Datastore,
    /// A handful of eval queries on the att view.
    pub queries: Vec<Vec<f64>>,
}

/// A synthetic corpus with `n_train` datastore rows; deterministic for a given size.
pub fn fixture(n_train: usize) -> Fixture {
    let spec = SyntheticSpec {
        n_train,
        n_eval: 64,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic(&spec).expect("valid spec");
    let datastore = build_datastore(&corpus.train, View::Att, Precision::F16).expect("att view present");
    let queries = (0..corpus.eval.len())
        .map(|i| corpus.eval.vector(View::Att, i).expect("att view present"))
        .collect();
    Fixture {
        corpus,
        datastore,
        queries,
    }
}
