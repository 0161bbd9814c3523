//! Seeded synthetic corpora for tests, benchmarks and demos.
//!
//! A corpus has one document per entity, chunked at a fixed size, with a
//! planted "gold" chunk per query that states the query's answer. Image
//! queries are the entity's title vector plus Gaussian noise, so stage-1
//! recall is tunable; question embeddings are the gold chunk's vector plus
//! (smaller) noise, so the gold chunk is usually but not always ranked first.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ann::{HnswIndex, HnswParams, IndexError};
use crate::embeddings::{
    chunk_key, dot, EmbeddingProvider, EmbeddingStore, StoreKind, TestEmbedder,
};
use crate::eval::{EvalRecord, GoldAnswer, GoldChunk, QueryEmbeddings, QueryRecord};
use crate::jsonl::write_jsonl;
use crate::kb::{Document, KnowledgeBase};
use crate::retrieval::{Engine, RetrievalQuery};

/// `n` unit vectors with ids `v00000, v00001, ...`.
pub fn random_unit_store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = EmbeddingStore::new(dim, StoreKind::Title)
        .expect("dim > 0")
        .with_normalized(true);
    for i in 0..n {
        let v = random_unit(&mut rng, dim);
        store.insert(format!("v{i:05}"), &v).expect("fresh id");
    }
    store
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `normalize(base + noise · g / sqrt(dim))` with `g` standard normal.
fn perturb(rng: &mut ChaCha8Rng, base: &[f32], noise: f32) -> Vec<f32> {
    let scale = noise / (base.len() as f32).sqrt();
    let mut v: Vec<f32> = base
        .iter()
        .map(|&x| {
            let g: f64 = StandardNormal.sample(rng);
            x + scale * g as f32
        })
        .collect();
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub min_chunks: usize,
    pub max_chunks: usize,
    pub chunk_size: usize,
    pub dim: usize,
    pub queries: usize,
    /// Noise on image queries relative to the unit title vector.
    pub image_noise: f32,
    /// Noise on question embeddings relative to the gold chunk vector.
    pub question_noise: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            entities: 1000,
            min_chunks: 3,
            max_chunks: 8,
            chunk_size: 120,
            dim: 64,
            queries: 500,
            image_noise: 2.6,
            question_noise: 4.0,
            seed: 7,
        }
    }
}

pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub kb: KnowledgeBase,
    pub titles: EmbeddingStore,
    pub chunk_embedder: TestEmbedder,
    pub query_embeddings: QueryEmbeddings,
    pub queries: Vec<QueryRecord>,
    pub records: Vec<EvalRecord>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "su", "ra", "ti", "vo", "be", "du", "fa", "gi", "ho", "ju", "pe", "zo",
];

fn word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=4);
    (0..n)
        .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
        .collect()
}

/// Exactly `len` characters: `prefix` followed by random words.
fn filler(rng: &mut ChaCha8Rng, prefix: &str, len: usize) -> String {
    let mut s = String::from(prefix);
    while s.chars().count() < len {
        if !s.is_empty() && !s.ends_with(' ') {
            s.push(' ');
        }
        s.push_str(&word(rng));
    }
    s.chars().take(len).collect()
}

impl SyntheticCorpus {
    pub fn generate(config: SyntheticConfig) -> Self {
        assert!(
            config.entities > 0 && config.min_chunks >= 1 && config.max_chunks >= config.min_chunks
        );
        assert!(
            config.chunk_size >= 48,
            "chunk_size must fit the planted fact"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let doc_id = |i: usize| format!("E{i:05}");

        let chunk_counts: Vec<usize> = (0..config.entities)
            .map(|_| rng.random_range(config.min_chunks..=config.max_chunks))
            .collect();

        let mut order: Vec<usize> = (0..config.entities).collect();
        order.shuffle(&mut rng);
        // (entity, gold chunk index, answer) per query
        let mut planted: Vec<(usize, usize, String)> = Vec::with_capacity(config.queries);
        for q in 0..config.queries {
            let entity = order[q % config.entities];
            let gold = rng.random_range(0..chunk_counts[entity]);
            planted.push((entity, gold, word(&mut rng) + &word(&mut rng)));
        }
        let mut facts: Vec<Vec<Option<String>>> =
            chunk_counts.iter().map(|&c| vec![None; c]).collect();
        for (q, (entity, gold, answer)) in planted.iter().enumerate() {
            let slot = &mut facts[*entity][*gold];
            let fact = format!("fact q{q:05} answer {answer}.");
            *slot = Some(match slot.take() {
                Some(prev) => format!("{prev} {fact}"),
                None => fact,
            });
        }

        let mut docs = Vec::with_capacity(config.entities);
        for (i, slots) in facts.iter().enumerate() {
            let text: String = slots
                .iter()
                .map(|fact| filler(&mut rng, fact.as_deref().unwrap_or(""), config.chunk_size))
                .collect();
            let title = format!("Entity {i:05} {}", word(&mut rng));
            docs.push(Document::new(doc_id(i), title, text));
        }
        let (kb, rejected) = KnowledgeBase::ingest(docs, config.chunk_size).expect("unique ids");
        debug_assert!(rejected.is_empty());

        let title_embedder = TestEmbedder::new(config.seed ^ 0x7469_746c_6573, config.dim);
        let chunk_embedder = TestEmbedder::new(config.seed ^ 0x6368_756e_6b73, config.dim);
        let mut titles = EmbeddingStore::new(config.dim, StoreKind::Title)
            .unwrap()
            .with_normalized(true);
        for (id, title) in kb.list_titles() {
            titles
                .insert(id, title_embedder.embed_text(title).unwrap().as_slice())
                .unwrap();
        }

        let mut images = EmbeddingStore::new(config.dim, StoreKind::ImageQuery)
            .unwrap()
            .with_normalized(true);
        let mut questions = EmbeddingStore::new(config.dim, StoreKind::QuestionQuery)
            .unwrap()
            .with_normalized(true);
        let mut queries = Vec::with_capacity(config.queries);
        let mut records = Vec::with_capacity(config.queries);
        for (q, (entity, gold, answer)) in planted.into_iter().enumerate() {
            let query_id = format!("q{q:05}");
            let gt = doc_id(entity);
            let image = perturb(&mut rng, titles.get(&gt).unwrap(), config.image_noise);
            let gold_text = &kb.chunk(&gt, gold).unwrap().text;
            let gold_vec = chunk_embedder.embed_text(gold_text).unwrap();
            let question = perturb(&mut rng, gold_vec.as_slice(), config.question_noise);
            let image_id = format!("img:{query_id}");
            let question_id = format!("qst:{query_id}");
            images.insert(image_id.clone(), &image).unwrap();
            questions.insert(question_id.clone(), &question).unwrap();
            queries.push(QueryRecord {
                query_id: query_id.clone(),
                question: format!("What is the answer to {query_id}?"),
                gt_entity: Some(gt.clone()),
                gt_answers: Some(vec![GoldAnswer::Text(answer.clone())]),
                image_embedding_id: image_id,
                question_embedding_id: question_id,
            });
            records.push(EvalRecord {
                query_id,
                gt_entity: gt.clone(),
                gt_answers: vec![GoldAnswer::Text(answer)],
                gold_chunk: Some(GoldChunk {
                    doc_id: gt,
                    chunk_index: gold,
                }),
            });
        }

        Self {
            config,
            kb,
            titles,
            chunk_embedder,
            query_embeddings: QueryEmbeddings { images, questions },
            queries,
            records,
        }
    }

    pub fn build_index(&self, params: HnswParams) -> Result<HnswIndex, IndexError> {
        HnswIndex::build(&self.titles, params)
    }

    /// Engine over a fresh copy of the knowledge base, embedding chunks with
    /// the corpus's test embedder.
    pub fn engine(&self, params: HnswParams) -> Result<Engine, IndexError> {
        let index = self.build_index(params)?;
        Ok(Engine::new(
            self.kb.clone(),
            index,
            Arc::new(self.chunk_embedder.clone()),
        ))
    }

    pub fn retrieval_queries(&self) -> Vec<RetrievalQuery> {
        self.queries
            .iter()
            .map(|q| {
                self.query_embeddings
                    .resolve(q, None)
                    .expect("synthetic ids resolve")
            })
            .collect()
    }

    /// Every chunk's embedding keyed by [`chunk_key`].
    pub fn chunk_store(&self) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(self.config.dim, StoreKind::Chunk)
            .unwrap()
            .with_normalized(true);
        for doc in self.kb.documents() {
            for c in self.kb.chunks(&doc.doc_id).unwrap() {
                let v = self.chunk_embedder.embed_chunk(c).unwrap();
                store
                    .insert(chunk_key(&c.doc_id, c.chunk_index), v.as_slice())
                    .unwrap();
            }
        }
        store
    }

    /// Writes the raw inputs the CLI consumes: `documents.jsonl`,
    /// `titles.wemb`, `images.wemb`, `questions.wemb`, `chunks.wemb`,
    /// `queries.jsonl` and `eval.jsonl`.
    pub fn write_fixture(&self, dir: &Path) -> io::Result<()> {
        let to_io = |e: crate::embeddings::EmbeddingError| io::Error::other(e.to_string());
        fs::create_dir_all(dir)?;
        write_jsonl(dir.join("documents.jsonl"), self.kb.documents())?;
        self.titles.save(dir.join("titles.wemb")).map_err(to_io)?;
        self.query_embeddings
            .images
            .save(dir.join("images.wemb"))
            .map_err(to_io)?;
        self.query_embeddings
            .questions
            .save(dir.join("questions.wemb"))
            .map_err(to_io)?;
        self.chunk_store()
            .save(dir.join("chunks.wemb"))
            .map_err(to_io)?;
        write_jsonl(dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(dir.join("eval.jsonl"), &self.records)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            entities: 40,
            queries: 30,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = SyntheticCorpus::generate(small());
        let b = SyntheticCorpus::generate(small());
        assert_eq!(a.kb, b.kb);
        assert_eq!(a.records, b.records);
        assert_eq!(a.query_embeddings.images, b.query_embeddings.images);
    }

    #[test]
    fn gold_chunks_state_the_answer() {
        let c = SyntheticCorpus::generate(small());
        for r in &c.records {
            let gold = r.gold_chunk.as_ref().unwrap();
            let chunk = c.kb.chunk(&gold.doc_id, gold.chunk_index).unwrap();
            let GoldAnswer::Text(answer) = &r.gt_answers[0] else {
                unreachable!()
            };
            assert!(chunk
                .text
                .contains(&format!("fact {} answer {answer}.", r.query_id)));
        }
        for doc in c.kb.documents() {
            for ch in c.kb.chunks(&doc.doc_id).unwrap() {
                assert_eq!(ch.char_len(), c.config.chunk_size);
            }
        }
    }

    #[test]
    fn random_store_is_unit_norm() {
        let s = random_unit_store(50, 16, 1);
        assert_eq!(s.len(), 50);
        assert!(s.iter().all(|(_, v)| crate::embeddings::is_unit(v)));
    }
}
