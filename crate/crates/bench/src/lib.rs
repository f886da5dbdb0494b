//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabbin_core::eval::VectorPool;
use tabbin_core::{generate_corpus, CorpusSpec, Featurizer, Table, VocabConfig, Vocabulary};

/// A small generated corpus and a featurizer built from it.
pub fn corpus(n_tables: usize, seed: u64) -> (Vec<Table>, Featurizer) {
    let spec = CorpusSpec {
        n_tables,
        seed,
        ..Default::default()
    };
    let (tables, _) = generate_corpus(&spec).expect("default spec is valid");
    let vocab = Vocabulary::build(tables.iter(), &VocabConfig::default());
    (tables, Featurizer::new(vocab))
}

/// `n` uniform random vectors of length `dim`, ids `v0000...`.
pub fn random_pool(n: usize, dim: usize, seed: u64) -> VectorPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (format!("v{i:04}"), (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
        .collect()
}
