//! Hierarchical knowledge retrieval for retrieval-augmented multimodal
//! question answering.
//!
//! The pipeline has two stages. Stage 1 finds the `k` entities (documents)
//! whose title embeddings have the highest inner product with an image
//! embedding, using an HNSW graph ([`ann`]). Stage 2 ranks the chunks of
//! each retrieved document against a question embedding and keeps the top
//! `n`, giving up to `k·n` passages ([`retrieval`]). The passages are then
//! packed into a prompt under a token budget ([`context`]).
//!
//! [`eval`] measures entity recall@k and end-to-end answer accuracy across
//! `(k, n, oracle)` sweeps with pluggable answer providers, and [`synth`]
//! builds seeded synthetic corpora for exercising all of it at desk scale.

pub mod ann;
pub mod context;
pub mod embeddings;
pub mod eval;
pub mod jsonl;
pub mod kb;
pub mod retrieval;
pub mod synth;

pub use ann::{exact_search, HnswIndex, HnswParams, IndexError, NeighborSelection, SearchHit};
pub use context::{
    assemble_context, AssembledContext, ContextError, Tokenizer, WhitespaceTokenizer,
};
pub use embeddings::{
    inner_product, normalize, EmbeddingError, EmbeddingProvider, EmbeddingStore, EmbeddingVector,
    StoreKind, StoreProvider, TestEmbedder,
};
pub use eval::{
    match_answer, recall_at_k, run_experiment, AnswerProvider, EvalError, EvalRecord,
    ExperimentConfig, MetricsReport, QueryRecord,
};
pub use kb::{chunk_document, Chunk, Document, KbError, KnowledgeBase};
pub use retrieval::{Engine, EntityHit, PassageHit, Retrieval, RetrievalError, RetrievalQuery};

/// Version of every machine-readable JSON document the tools emit.
pub const SCHEMA_VERSION: u32 = 1;
