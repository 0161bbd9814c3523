//! Two-stage retrieval: entities by image embedding against title vectors,
//! then passages by question embedding inside each retrieved entity.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::{default_ef_search, HnswIndex, IndexError, SearchHit};
use crate::embeddings::{dot, EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::kb::{Chunk, KbError, KnowledgeBase};

pub type EntityHit = SearchHit;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("n must be at least 1")]
    InvalidN,
    #[error("query {0:?} has no oracle entity")]
    MissingOracle(String),
    #[error("question embedding has dimension {actual}, chunk embeddings have {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery {
    pub query_id: String,
    pub image_embedding: EmbeddingVector,
    pub question: String,
    pub question_embedding: EmbeddingVector,
    pub oracle_entity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageHit {
    pub doc_id: String,
    pub chunk_index: usize,
    pub score: f32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieval {
    pub entities: Vec<EntityHit>,
    /// Ordered by entity rank, then passage score.
    pub passages: Vec<PassageHit>,
}

impl Retrieval {
    pub fn contains_chunk(&self, doc_id: &str, chunk_index: usize) -> bool {
        self.passages
            .iter()
            .any(|p| p.doc_id == doc_id && p.chunk_index == chunk_index)
    }
}

pub fn retrieve_entities(
    index: &HnswIndex,
    image_embedding: &[f32],
    k: usize,
    ef_search: Option<usize>,
) -> Result<Vec<EntityHit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let ef = ef_search.unwrap_or_else(|| default_ef_search(k));
    Ok(index.search(image_embedding, k, ef)?)
}

fn embed_chunks(
    provider: &dyn EmbeddingProvider,
    chunks: &[Chunk],
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    chunks.iter().map(|c| provider.embed_chunk(c)).collect()
}

/// Top-`n` chunks of one document, score descending, ties by chunk index.
fn rank_chunks(
    chunks: &[Chunk],
    embeddings: &[EmbeddingVector],
    question: &[f32],
    n: usize,
) -> Result<Vec<PassageHit>, RetrievalError> {
    let mut scored = Vec::with_capacity(chunks.len());
    for (chunk, emb) in chunks.iter().zip(embeddings) {
        if emb.dim() != question.len() {
            return Err(RetrievalError::DimMismatch {
                expected: emb.dim(),
                actual: question.len(),
            });
        }
        scored.push((dot(question, emb.as_slice()), chunk));
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.chunk_index.cmp(&b.1.chunk_index))
    });
    Ok(scored
        .into_iter()
        .take(n)
        .map(|(score, c)| PassageHit {
            doc_id: c.doc_id.clone(),
            chunk_index: c.chunk_index,
            score,
            text: c.text.clone(),
        })
        .collect())
}

/// Unmemoized stage 2 for a single document.
pub fn retrieve_passages(
    kb: &KnowledgeBase,
    doc_id: &str,
    question_embedding: &[f32],
    n: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<PassageHit>, RetrievalError> {
    if n == 0 {
        return Err(RetrievalError::InvalidN);
    }
    let chunks = kb.chunks(doc_id)?;
    let embeddings = embed_chunks(provider, chunks)?;
    rank_chunks(chunks, &embeddings, question_embedding, n)
}

type Slot = Arc<Mutex<Option<Arc<Vec<EmbeddingVector>>>>>;

/// Per-document chunk embeddings, computed on first use. Concurrent
/// requests for one document wait on that document's slot, so each
/// document is embedded at most once (failed attempts are not cached).
#[derive(Default)]
struct ChunkMemo {
    slots: Mutex<HashMap<String, Slot>>,
    computed: AtomicUsize,
}

impl ChunkMemo {
    fn get_or_compute(
        &self,
        doc_id: &str,
        compute: impl FnOnce() -> Result<Vec<EmbeddingVector>, EmbeddingError>,
    ) -> Result<Arc<Vec<EmbeddingVector>>, EmbeddingError> {
        let slot = {
            let mut slots = self.slots.lock().unwrap();
            slots.entry(doc_id.to_string()).or_default().clone()
        };
        let mut guard = slot.lock().unwrap();
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = Arc::new(compute()?);
        self.computed.fetch_add(1, AtomicOrdering::Relaxed);
        *guard = Some(v.clone());
        Ok(v)
    }
}

/// Everything needed at query time. Immutable apart from the chunk memo,
/// and safe to share across threads.
pub struct Engine {
    kb: KnowledgeBase,
    index: HnswIndex,
    chunk_provider: Arc<dyn EmbeddingProvider>,
    ef_search: Option<usize>,
    memo: ChunkMemo,
}

impl Engine {
    pub fn new(
        kb: KnowledgeBase,
        index: HnswIndex,
        chunk_provider: Arc<dyn EmbeddingProvider>,
    ) -> Self {
        Self {
            kb,
            index,
            chunk_provider,
            ef_search: None,
            memo: ChunkMemo::default(),
        }
    }

    /// Overrides the default `max(64, 4k)` beam width.
    pub fn with_ef_search(mut self, ef: usize) -> Self {
        self.ef_search = Some(ef);
        self
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn index(&self) -> &HnswIndex {
        &self.index
    }

    /// Number of documents whose chunks have been embedded so far.
    pub fn embedded_documents(&self) -> usize {
        self.memo.computed.load(AtomicOrdering::Relaxed)
    }

    pub fn retrieve_entities(
        &self,
        image_embedding: &[f32],
        k: usize,
    ) -> Result<Vec<EntityHit>, RetrievalError> {
        retrieve_entities(&self.index, image_embedding, k, self.ef_search)
    }

    pub fn chunk_embeddings(
        &self,
        doc_id: &str,
    ) -> Result<Arc<Vec<EmbeddingVector>>, RetrievalError> {
        let chunks = self.kb.chunks(doc_id)?;
        Ok(self.memo.get_or_compute(doc_id, || {
            embed_chunks(self.chunk_provider.as_ref(), chunks)
        })?)
    }

    pub fn retrieve_passages(
        &self,
        doc_id: &str,
        question_embedding: &[f32],
        n: usize,
    ) -> Result<Vec<PassageHit>, RetrievalError> {
        if n == 0 {
            return Err(RetrievalError::InvalidN);
        }
        let chunks = self.kb.chunks(doc_id)?;
        let embeddings = self.chunk_embeddings(doc_id)?;
        rank_chunks(chunks, &embeddings, question_embedding, n)
    }

    /// Stage 1 then stage 2. In oracle mode the query's ground-truth entity
    /// replaces stage 1 and `k` is ignored.
    pub fn hierarchical_retrieve(
        &self,
        query: &RetrievalQuery,
        k: usize,
        n: usize,
        oracle: bool,
    ) -> Result<Retrieval, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if n == 0 {
            return Err(RetrievalError::InvalidN);
        }
        let entities = if oracle {
            let id = query
                .oracle_entity
                .as_ref()
                .ok_or_else(|| RetrievalError::MissingOracle(query.query_id.clone()))?;
            self.kb.get_document(id)?;
            let score = self
                .index
                .vector(id)
                .filter(|v| v.len() == query.image_embedding.dim())
                .map_or(0.0, |v| dot(query.image_embedding.as_slice(), v));
            vec![SearchHit {
                id: id.clone(),
                score,
                rank: 1,
            }]
        } else {
            self.retrieve_entities(query.image_embedding.as_slice(), k)?
        };
        let mut passages = Vec::with_capacity(entities.len() * n);
        for e in &entities {
            passages.extend(self.retrieve_passages(
                &e.id,
                query.question_embedding.as_slice(),
                n,
            )?);
        }
        Ok(Retrieval { entities, passages })
    }
}
