//! Shared inputs for the criterion benches in `benches/`.

use hiret_core::ann::{HnswIndex, HnswParams};
use hiret_core::retrieval::PassageHit;
use hiret_core::synth::random_unit_store;
use hiret_core::EmbeddingStore;

/// A seeded unit-vector store, its index and a separate query set.
pub fn ann_fixture(
    n: usize,
    dim: usize,
    queries: usize,
) -> (EmbeddingStore, HnswIndex, EmbeddingStore) {
    let store = random_unit_store(n, dim, 1);
    let index = HnswIndex::build(&store, HnswParams::default()).expect("valid params");
    (store, index, random_unit_store(queries, dim, 2))
}

/// `count` passages of `words` whitespace tokens each.
pub fn passages(count: usize, words: usize) -> Vec<PassageHit> {
    (0..count)
        .map(|i| PassageHit {
            doc_id: format!("d{i}"),
            chunk_index: 0,
            score: 1.0 - i as f32 / count as f32,
            text: (0..words)
                .map(|w| format!("w{w}"))
                .collect::<Vec<_>>()
                .join(" "),
        })
        .collect()
}
