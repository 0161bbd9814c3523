//! HNSW approximate nearest-neighbor search under inner-product scoring,
//! plus the exhaustive search used as its oracle.
//!
//! Inner product is not a metric, so the graph only gives empirical recall
//! guarantees. For unit-norm data it ranks identically to cosine similarity.
//!
//! Construction is single-threaded and fully deterministic: nodes are
//! inserted in ascending id order, each node's level is drawn from a ChaCha8
//! stream keyed by `(seed, insertion ordinal)`, and adjacency lists are kept
//! sorted by node index. The same store, parameters and seed always produce
//! a byte-identical index file.
//!
//! # Index file layout (`.whnw`, little-endian)
//!
//! ```text
//! magic            [u8; 4]  "WHNW"
//! version          u16      1
//! flags            u16      bit 0: vectors normalized, bit 1: simple neighbor selection
//! m                u32
//! m0               u32
//! ef_construction  u32
//! seed             u64
//! dim              u32
//! count            u64
//! entry_node       u32      u32::MAX when empty
//! max_level        u8
//! node table       count × { id_len u16, id [u8], level u8, vector [f32; dim] }
//! adjacency        for layer in 0..=max_level, for each node with level >= layer:
//!                  { degree u32, first neighbor u32, (degree - 1) × delta u32 }
//! checksum         u64      FNV-1a over every preceding byte
//! ```
//!
//! Neighbor lists are sorted ascending, so deltas are strictly positive.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{dot, EmbeddingStore};

pub const HNSW_MAGIC: [u8; 4] = *b"WHNW";
pub const HNSW_VERSION: u16 = 1;
pub const DEFAULT_M: usize = 32;
pub const DEFAULT_EF_CONSTRUCTION: usize = 200;
/// Corpora at or below this size are searched exhaustively by [`HnswIndex::search`].
pub const EXACT_FALLBACK_MAX: usize = 1024;
const MAX_LEVEL: u8 = 16;
const NO_ENTRY: u32 = u32::MAX;

const FLAG_NORMALIZED: u16 = 1;
const FLAG_SIMPLE_SELECTION: u16 = 1 << 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("query dimension {actual} does not match index dimension {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("not an index file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported index version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSelection {
    /// Keep a neighbor only if it is closer to the base node than to every
    /// neighbor already kept.
    Heuristic,
    /// Plain nearest-M. Useful when debugging graph quality.
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Max links per node on layers >= 1.
    pub m: usize,
    /// Max links per node on layer 0.
    pub m0: usize,
    pub ef_construction: usize,
    pub seed: u64,
    pub selection: NeighborSelection,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            m0: 2 * DEFAULT_M,
            ef_construction: DEFAULT_EF_CONSTRUCTION,
            seed: 0,
            selection: NeighborSelection::Heuristic,
        }
    }
}

impl HnswParams {
    /// Parameters with `m0 = 2·m`.
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            m0: 2 * m,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.m < 2 {
            return Err(IndexError::InvalidParams("m must be >= 2".into()));
        }
        if self.m0 < self.m {
            return Err(IndexError::InvalidParams("m0 must be >= m".into()));
        }
        if self.ef_construction == 0 {
            return Err(IndexError::InvalidParams(
                "ef_construction must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            self.m0
        } else {
            self.m
        }
    }
}

/// Default query beam width for a given `k`.
pub fn default_ef_search(k: usize) -> usize {
    64.max(4 * k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub score: f32,
    /// 1-based.
    pub rank: usize,
}

/// Score descending, then id ascending.
pub fn hit_order(a: (f32, &str), b: (f32, &str)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

fn ranked(mut scored: Vec<(f32, &str)>, k: usize) -> Vec<SearchHit> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, |a, b| hit_order(*a, *b));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|a, b| hit_order(*a, *b));
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, id))| SearchHit {
            id: id.to_string(),
            score,
            rank: i + 1,
        })
        .collect()
}

fn exact_over<'a>(
    rows: impl Iterator<Item = (&'a str, &'a [f32])>,
    dim: usize,
    query: &[f32],
    k: usize,
) -> Result<Vec<SearchHit>, IndexError> {
    if query.len() != dim {
        return Err(IndexError::DimMismatch {
            expected: dim,
            actual: query.len(),
        });
    }
    if k == 0 {
        return Err(IndexError::InvalidK);
    }
    let scored = rows.map(|(id, v)| (dot(query, v), id)).collect();
    Ok(ranked(scored, k))
}

/// Exhaustive top-k by inner product.
pub fn exact_search(
    store: &EmbeddingStore,
    query: &[f32],
    k: usize,
) -> Result<Vec<SearchHit>, IndexError> {
    exact_over(store.iter(), store.dim(), query, k)
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    score: f32,
    node: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Higher score is greater; among equal scores, the lower node index is greater.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .partial_cmp(&other.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            epoch: 0,
        }
    }

    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Returns true the first time `node` is seen in this epoch.
    fn insert(&mut self, node: u32) -> bool {
        let slot = &mut self.marks[node as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    params: HnswParams,
    dim: usize,
    normalized: bool,
    ids: Vec<String>,
    data: Vec<f32>,
    levels: Vec<u8>,
    /// `links[node][layer]`, each list sorted by node index.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<(u32, u8)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexStats {
    pub count: usize,
    pub dim: usize,
    pub m: usize,
    pub m0: usize,
    pub ef_construction: usize,
    pub seed: u64,
    pub selection: NeighborSelection,
    pub normalized: bool,
    pub max_level: usize,
    pub nodes_per_level: Vec<usize>,
    pub mean_degree_layer0: f64,
}

impl HnswIndex {
    pub fn build(store: &EmbeddingStore, params: HnswParams) -> Result<Self, IndexError> {
        params.validate()?;
        let mut order: Vec<usize> = (0..store.len()).collect();
        order.sort_by(|&a, &b| store.ids()[a].cmp(&store.ids()[b]));

        let dim = store.dim();
        let mut index = Self {
            params,
            dim,
            normalized: store.is_normalized(),
            ids: Vec::with_capacity(order.len()),
            data: Vec::with_capacity(order.len() * dim),
            levels: Vec::with_capacity(order.len()),
            links: Vec::with_capacity(order.len()),
            entry: None,
        };
        for &i in &order {
            index.ids.push(store.ids()[i].clone());
            index.data.extend_from_slice(store.row(i));
        }

        let level_mult = 1.0 / (params.m as f64).ln();
        let mut visited = Visited::new(order.len());
        for node in 0..order.len() {
            let level = draw_level(params.seed, node as u64, level_mult);
            index.insert(node as u32, level, &mut visited);
        }
        Ok(index)
    }

    fn vec_of(&self, node: u32) -> &[f32] {
        let i = node as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    fn insert(&mut self, node: u32, level: u8, visited: &mut Visited) {
        self.levels.push(level);
        self.links.push(vec![Vec::new(); level as usize + 1]);
        let Some((entry_node, top)) = self.entry else {
            self.entry = Some((node, level));
            return;
        };
        let query = self.vec_of(node).to_vec();
        let mut ep = Candidate {
            score: dot(&query, self.vec_of(entry_node)),
            node: entry_node,
        };
        for layer in ((level + 1)..=top).rev() {
            ep = self.greedy(&query, ep, layer as usize);
        }
        for layer in (0..=level.min(top) as usize).rev() {
            let found =
                self.search_layer(&query, &[ep], self.params.ef_construction, layer, visited);
            let cap = self.params.cap(layer);
            let chosen = self.select(&found, cap);
            ep = found[0];
            let mut own: Vec<u32> = chosen.iter().map(|c| c.node).collect();
            own.sort_unstable();
            self.links[node as usize][layer] = own;
            for c in chosen {
                self.link(c.node, node, layer);
            }
        }
        if level > top {
            self.entry = Some((node, level));
        }
    }

    /// Adds `to` to `from`'s neighbor list on `layer`, shrinking when over cap.
    fn link(&mut self, from: u32, to: u32, layer: usize) {
        let cap = self.params.cap(layer);
        let list = &self.links[from as usize][layer];
        if list.len() < cap {
            let pos = list.binary_search(&to).unwrap_or_else(|p| p);
            self.links[from as usize][layer].insert(pos, to);
            return;
        }
        let base = self.vec_of(from);
        let mut cands: Vec<Candidate> = list
            .iter()
            .chain(std::iter::once(&to))
            .map(|&n| Candidate {
                score: dot(base, self.vec_of(n)),
                node: n,
            })
            .collect();
        cands.sort_unstable_by(|a, b| b.cmp(a));
        let mut kept: Vec<u32> = self.select(&cands, cap).iter().map(|c| c.node).collect();
        kept.sort_unstable();
        self.links[from as usize][layer] = kept;
    }

    /// `candidates` sorted best-first, scored against the base node; returns
    /// at most `cap` of them.
    fn select(&self, candidates: &[Candidate], cap: usize) -> Vec<Candidate> {
        if candidates.len() <= cap || self.params.selection == NeighborSelection::Simple {
            return candidates.iter().take(cap).copied().collect();
        }
        let mut kept: Vec<Candidate> = Vec::with_capacity(cap);
        for &c in candidates {
            if kept.len() >= cap {
                break;
            }
            let cv = self.vec_of(c.node);
            let diverse = kept.iter().all(|k| dot(cv, self.vec_of(k.node)) < c.score);
            if diverse {
                kept.push(c);
            }
        }
        kept
    }

    fn greedy(&self, query: &[f32], mut best: Candidate, layer: usize) -> Candidate {
        loop {
            let mut improved = false;
            for &n in &self.links[best.node as usize][layer] {
                let c = Candidate {
                    score: dot(query, self.vec_of(n)),
                    node: n,
                };
                if c > best {
                    best = c;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Beam search on one layer; result sorted best-first.
    fn search_layer(
        &self,
        query: &[f32],
        entries: &[Candidate],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Candidate> {
        visited.reset(self.ids.len());
        let mut frontier: BinaryHeap<Candidate> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Candidate>> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.node) {
                frontier.push(e);
                results.push(Reverse(e));
            }
        }
        while let Some(current) = frontier.pop() {
            let worst = results.peek().map(|r| r.0);
            if let Some(w) = worst {
                if results.len() >= ef && current < w {
                    break;
                }
            }
            for &n in &self.links[current.node as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let c = Candidate {
                    score: dot(query, self.vec_of(n)),
                    node: n,
                };
                if results.len() < ef || c > results.peek().unwrap().0 {
                    frontier.push(c);
                    results.push(Reverse(c));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Candidate> = results.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<(), IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        Ok(())
    }

    /// Top-k search. Indexes of at most [`EXACT_FALLBACK_MAX`] nodes are
    /// scanned exhaustively; larger ones use the graph.
    pub fn search(
        &self,
        query: &[f32],
        k: usize,
        ef_search: usize,
    ) -> Result<Vec<SearchHit>, IndexError> {
        if self.len() <= EXACT_FALLBACK_MAX {
            self.exact(query, k)
        } else {
            self.search_graph(query, k, ef_search)
        }
    }

    /// Graph search regardless of index size. `ef_search` below `k` is raised to `k`.
    pub fn search_graph(
        &self,
        query: &[f32],
        k: usize,
        ef_search: usize,
    ) -> Result<Vec<SearchHit>, IndexError> {
        self.check_query(query, k)?;
        let Some((entry_node, top)) = self.entry else {
            return Ok(Vec::new());
        };
        let mut ep = Candidate {
            score: dot(query, self.vec_of(entry_node)),
            node: entry_node,
        };
        for layer in (1..=top as usize).rev() {
            ep = self.greedy(query, ep, layer);
        }
        let mut visited = Visited::new(self.ids.len());
        let found = self.search_layer(query, &[ep], ef_search.max(k), 0, &mut visited);
        // scores are recomputed from the stored vectors, not carried over from traversal
        let scored = found
            .iter()
            .map(|c| {
                (
                    dot(query, self.vec_of(c.node)),
                    self.ids[c.node as usize].as_str(),
                )
            })
            .collect();
        Ok(ranked(scored, k))
    }

    /// Exhaustive search over the indexed vectors.
    pub fn exact(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>, IndexError> {
        let rows = (0..self.ids.len()).map(|i| (self.ids[i].as_str(), self.vec_of(i as u32)));
        exact_over(rows, self.dim, query, k)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Indexed ids in ascending order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.ids
            .binary_search_by(|probe| probe.as_str().cmp(id))
            .ok()
            .map(|i| self.vec_of(i as u32))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vector(id).is_some()
    }

    pub fn stats(&self) -> IndexStats {
        let max_level = self.entry.map_or(0, |(_, l)| l as usize);
        let mut nodes_per_level = vec![0; if self.is_empty() { 0 } else { max_level + 1 }];
        for &l in &self.levels {
            for slot in nodes_per_level.iter_mut().take(l as usize + 1) {
                *slot += 1;
            }
        }
        let degree_sum: usize = self.links.iter().map(|l| l[0].len()).sum();
        IndexStats {
            count: self.len(),
            dim: self.dim,
            m: self.params.m,
            m0: self.params.m0,
            ef_construction: self.params.ef_construction,
            seed: self.params.seed,
            selection: self.params.selection,
            normalized: self.normalized,
            max_level,
            nodes_per_level,
            mean_degree_layer0: if self.is_empty() {
                0.0
            } else {
                degree_sum as f64 / self.len() as f64
            },
        }
    }

    pub(crate) fn check_structure(&self) -> Result<(), IndexError> {
        let n = self.ids.len() as u32;
        for (node, layers) in self.links.iter().enumerate() {
            if layers.len() != self.levels[node] as usize + 1 {
                return Err(IndexError::Corrupt(format!(
                    "node {node}: layer count mismatch"
                )));
            }
            for (layer, list) in layers.iter().enumerate() {
                if list.len() > self.params.cap(layer) {
                    return Err(IndexError::Corrupt(format!(
                        "node {node} layer {layer}: degree {} over cap",
                        list.len()
                    )));
                }
                for &nb in list {
                    if nb >= n || nb as usize == node || (self.levels[nb as usize] as usize) < layer
                    {
                        return Err(IndexError::Corrupt(format!(
                            "node {node} layer {layer}: invalid neighbor {nb}"
                        )));
                    }
                }
            }
        }
        match self.entry {
            None if n > 0 => Err(IndexError::Corrupt("missing entry point".into())),
            Some((e, l)) if e >= n || self.levels[e as usize] != l => {
                Err(IndexError::Corrupt("invalid entry point".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.data.len() * 4 + self.ids.len() * 16);
        let mut flags = 0u16;
        if self.normalized {
            flags |= FLAG_NORMALIZED;
        }
        if self.params.selection == NeighborSelection::Simple {
            flags |= FLAG_SIMPLE_SELECTION;
        }
        out.extend_from_slice(&HNSW_MAGIC);
        out.extend_from_slice(&HNSW_VERSION.to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.params.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.m0 as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.ef_construction as u32).to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        let (entry_node, max_level) = self.entry.unwrap_or((NO_ENTRY, 0));
        out.extend_from_slice(&entry_node.to_le_bytes());
        out.push(max_level);
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.push(self.levels[i]);
            for v in self.vec_of(i as u32) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if self.entry.is_some() {
            for layer in 0..=max_level {
                for (node, &level) in self.levels.iter().enumerate() {
                    if level < layer {
                        continue;
                    }
                    let list = &self.links[node][layer as usize];
                    out.extend_from_slice(&(list.len() as u32).to_le_bytes());
                    let mut prev = 0u32;
                    for (j, &nb) in list.iter().enumerate() {
                        let encoded = if j == 0 { nb } else { nb - prev };
                        out.extend_from_slice(&encoded.to_le_bytes());
                        prev = nb;
                    }
                }
            }
        }
        let checksum = fnv1a(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < 4 {
            return Err(IndexError::Corrupt("file shorter than magic".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != HNSW_MAGIC {
            return Err(IndexError::BadMagic(magic));
        }
        if bytes.len() < 6 + 8 {
            return Err(IndexError::Corrupt("truncated header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != HNSW_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(IndexError::Corrupt(
                "checksum mismatch (truncated or modified file)".into(),
            ));
        }

        let mut r = Cursor { buf: body, pos: 6 };
        let flags = r.u16("flags")?;
        let params = HnswParams {
            m: r.u32("m")? as usize,
            m0: r.u32("m0")? as usize,
            ef_construction: r.u32("ef_construction")? as usize,
            seed: r.u64("seed")?,
            selection: if flags & FLAG_SIMPLE_SELECTION != 0 {
                NeighborSelection::Simple
            } else {
                NeighborSelection::Heuristic
            },
        };
        params.validate()?;
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(IndexError::Corrupt("dim is zero".into()));
        }
        let count = r.u64("count")? as usize;
        let entry_node = r.u32("entry node")?;
        let max_level = r.u8("max level")?;

        let mut ids: Vec<String> = Vec::with_capacity(count.min(1 << 20));
        let mut levels = Vec::with_capacity(count.min(1 << 20));
        let mut data = Vec::with_capacity((count * dim).min(1 << 24));
        for i in 0..count {
            let what = format!("node {i}");
            let len = r.u16(&what)? as usize;
            let id = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| IndexError::Corrupt(format!("{what}: id is not UTF-8")))?
                .to_string();
            if let Some(prev) = ids.last() {
                if *prev >= id {
                    return Err(IndexError::Corrupt(format!(
                        "{what}: ids not strictly ascending"
                    )));
                }
            }
            ids.push(id);
            levels.push(r.u8(&what)?);
            for b in r.take(dim * 4, &what)?.chunks_exact(4) {
                data.push(f32::from_le_bytes(b.try_into().unwrap()));
            }
        }

        let entry = if count == 0 {
            if entry_node != NO_ENTRY {
                return Err(IndexError::Corrupt("entry point set on empty index".into()));
            }
            None
        } else {
            Some((entry_node, max_level))
        };
        let mut links: Vec<Vec<Vec<u32>>> = levels
            .iter()
            .map(|&l| vec![Vec::new(); l as usize + 1])
            .collect();
        if entry.is_some() {
            for layer in 0..=max_level {
                for node in 0..count {
                    if levels[node] < layer {
                        continue;
                    }
                    let what = format!("adjacency layer {layer} node {node}");
                    let degree = r.u32(&what)? as usize;
                    if degree > params.cap(layer as usize) {
                        return Err(IndexError::Corrupt(format!(
                            "{what}: degree {degree} over cap"
                        )));
                    }
                    let mut list = Vec::with_capacity(degree);
                    let mut prev = 0u32;
                    for j in 0..degree {
                        let v = r.u32(&what)?;
                        let nb = if j == 0 {
                            v
                        } else {
                            if v == 0 {
                                return Err(IndexError::Corrupt(format!("{what}: zero delta")));
                            }
                            prev.checked_add(v).ok_or_else(|| {
                                IndexError::Corrupt(format!("{what}: delta overflow"))
                            })?
                        };
                        list.push(nb);
                        prev = nb;
                    }
                    links[node][layer as usize] = list;
                }
            }
        }
        if r.pos != body.len() {
            return Err(IndexError::Corrupt(format!(
                "{} unexpected trailing bytes",
                body.len() - r.pos
            )));
        }
        let index = Self {
            params,
            dim,
            normalized: flags & FLAG_NORMALIZED != 0,
            ids,
            data,
            levels,
            links,
            entry,
        };
        index.check_structure()?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn draw_level(seed: u64, ordinal: u64, level_mult: f64) -> u8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ordinal);
    let u: f64 = rng.random();
    let level = (-(1.0 - u).ln() * level_mult).floor();
    level.min(MAX_LEVEL as f64) as u8
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IndexError> {
        if self.buf.len() - self.pos < n {
            return Err(IndexError::Corrupt(format!("truncated at {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, IndexError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::StoreKind;
    use crate::synth::random_unit_store;

    fn store_of(rows: &[(&str, &[f32])]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(rows[0].1.len(), StoreKind::Title).unwrap();
        for (id, v) in rows {
            s.insert(*id, v).unwrap();
        }
        s
    }

    #[test]
    fn exact_search_examples() {
        let s = store_of(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let hits = exact_search(&s, &[1.0, 0.0], 2).unwrap();
        assert_eq!(
            hits,
            vec![
                SearchHit {
                    id: "a".into(),
                    score: 1.0,
                    rank: 1
                },
                SearchHit {
                    id: "b".into(),
                    score: 0.0,
                    rank: 2
                },
            ]
        );
        let tied = store_of(&[("z", &[0.5, 0.5]), ("m", &[0.5, 0.5]), ("q", &[0.0, 0.9])]);
        let hits = exact_search(&tied, &[1.0, 1.0], 3).unwrap();
        assert_eq!(hits[0].id, "m");
        assert_eq!(hits[1].id, "z");
        assert!(matches!(
            exact_search(&s, &[1.0], 1),
            Err(IndexError::DimMismatch { .. })
        ));
        assert!(matches!(
            exact_search(&s, &[1.0, 0.0], 0),
            Err(IndexError::InvalidK)
        ));
    }

    #[test]
    fn exact_search_matches_full_sort() {
        let s = random_unit_store(300, 8, 11);
        let q = random_unit_store(1, 8, 12);
        let q = q.row(0);
        let mut all: Vec<(f32, &str)> = s.iter().map(|(id, v)| (dot(q, v), id)).collect();
        all.sort_by(|a, b| hit_order(*a, *b));
        let hits = exact_search(&s, q, 40).unwrap();
        for (h, (score, id)) in hits.iter().zip(&all) {
            assert_eq!((&h.id[..], h.score), (*id, *score));
        }
    }

    #[test]
    fn empty_and_singleton_indexes() {
        let empty = EmbeddingStore::new(4, StoreKind::Title).unwrap();
        let idx = HnswIndex::build(&empty, HnswParams::default()).unwrap();
        assert!(idx
            .search_graph(&[1.0, 0.0, 0.0, 0.0], 3, 10)
            .unwrap()
            .is_empty());
        assert!(idx.search(&[1.0, 0.0, 0.0, 0.0], 3, 10).unwrap().is_empty());

        let one = store_of(&[("only", &[0.0, 1.0])]);
        let idx = HnswIndex::build(&one, HnswParams::default()).unwrap();
        for q in [[1.0, 0.0], [0.0, -1.0], [0.3, 0.3]] {
            let hits = idx.search_graph(&q, 5, 10).unwrap();
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0].id, "only");
        }
    }

    #[test]
    fn search_clamps_and_validates() {
        let s = random_unit_store(3, 4, 1);
        let idx = HnswIndex::build(&s, HnswParams::default()).unwrap();
        assert_eq!(idx.search_graph(s.row(0), 5, 64).unwrap().len(), 3);
        assert!(matches!(
            idx.search(&[1.0], 1, 64),
            Err(IndexError::DimMismatch { .. })
        ));
        assert!(matches!(
            idx.search(s.row(0), 0, 64),
            Err(IndexError::InvalidK)
        ));
    }

    #[test]
    fn identity_query_ranks_itself_first() {
        let s = random_unit_store(2000, 32, 3);
        let idx = HnswIndex::build(&s, HnswParams::with_m(16)).unwrap();
        for i in (0..2000).step_by(97) {
            let hits = idx.search_graph(s.row(i), 1, 64).unwrap();
            assert_eq!(hits[0].id, s.ids()[i]);
            assert!((hits[0].score - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn structure_respects_caps() {
        let s = random_unit_store(1500, 16, 5);
        for selection in [NeighborSelection::Heuristic, NeighborSelection::Simple] {
            let params = HnswParams {
                m: 6,
                m0: 12,
                ef_construction: 40,
                seed: 9,
                selection,
            };
            let idx = HnswIndex::build(&s, params).unwrap();
            idx.check_structure().unwrap();
            assert_eq!(idx.len(), 1500);
            let stats = idx.stats();
            assert_eq!(stats.nodes_per_level[0], 1500);
            assert!(stats.mean_degree_layer0 > 3.0);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let s = random_unit_store(4, 4, 1);
        assert!(HnswIndex::build(&s, HnswParams::with_m(1)).is_err());
        let p = HnswParams {
            m0: 4,
            ..HnswParams::with_m(8)
        };
        assert!(HnswIndex::build(&s, p).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let s = random_unit_store(800, 16, 21);
        let p = HnswParams {
            seed: 4,
            ..HnswParams::with_m(8)
        };
        let a = HnswIndex::build(&s, p).unwrap().to_bytes();
        let b = HnswIndex::build(&s, p).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = HnswIndex::build(&s, HnswParams { seed: 5, ..p })
            .unwrap()
            .to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn serialization_round_trip_and_corruption() {
        let s = random_unit_store(500, 8, 2);
        let idx = HnswIndex::build(&s, HnswParams::with_m(8)).unwrap();
        let bytes = idx.to_bytes();
        let back = HnswIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);

        assert!(matches!(
            HnswIndex::from_bytes(&bytes[..bytes.len() / 2]),
            Err(IndexError::Corrupt(_))
        ));
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(
            HnswIndex::from_bytes(&flipped),
            Err(IndexError::Corrupt(_))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            HnswIndex::from_bytes(&magic),
            Err(IndexError::BadMagic(_))
        ));
        let mut version = bytes;
        version[4] = 7;
        assert!(matches!(
            HnswIndex::from_bytes(&version),
            Err(IndexError::UnsupportedVersion(7))
        ));

        let empty = HnswIndex::build(
            &EmbeddingStore::new(3, StoreKind::Title).unwrap(),
            HnswParams::default(),
        )
        .unwrap();
        let back = HnswIndex::from_bytes(&empty.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, empty);
    }

    #[test]
    fn m_is_recorded_in_params_block() {
        let s = random_unit_store(10, 4, 2);
        let bytes = HnswIndex::build(&s, HnswParams::with_m(16))
            .unwrap()
            .to_bytes();
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 32);
    }

    #[test]
    fn vector_lookup_by_id() {
        let s = store_of(&[("b", &[0.0, 1.0]), ("a", &[1.0, 0.0])]);
        let idx = HnswIndex::build(&s, HnswParams::default()).unwrap();
        assert_eq!(idx.ids(), &["a".to_string(), "b".to_string()]);
        assert_eq!(idx.vector("b"), Some(&[0.0f32, 1.0][..]));
        assert!(!idx.contains("c"));
    }
}
