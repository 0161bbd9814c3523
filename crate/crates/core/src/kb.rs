//! Knowledge base of documents and their fixed-size character chunks.
//!
//! On disk a knowledge base is a directory holding `documents.jsonl` (one
//! document per line, sorted by `doc_id`) and `kb.json` (the chunk size).
//! Chunks are never stored; they are recomputed when the base is loaded.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CHUNK_SIZE: usize = 600;
pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const MANIFEST_FILE: &str = "kb.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("duplicate doc_id {0:?}")]
    DuplicateId(String),
    #[error("document {0:?} not found")]
    NotFound(String),
    #[error("chunk {chunk_index} of document {doc_id:?} not found")]
    ChunkNotFound { doc_id: String, chunk_index: usize },
    #[error("chunk size must be at least 1")]
    InvalidChunkSize,
    #[error("{path}: line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub text: String,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: title.into(),
            url: None,
            text: text.into(),
        }
    }
}

/// A contiguous slice of a document. Offsets count unicode scalar values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

impl Chunk {
    pub fn char_len(&self) -> usize {
        self.char_end - self.char_start
    }
}

/// Splits `text` into consecutive pieces of `chunk_size` characters; the last
/// piece holds the remainder. No overlap.
pub fn chunk_document(doc_id: &str, text: &str, chunk_size: usize) -> Result<Vec<Chunk>, KbError> {
    if chunk_size == 0 {
        return Err(KbError::InvalidChunkSize);
    }
    let mut chunks = Vec::new();
    let mut chars = text.char_indices().peekable();
    let mut char_start = 0;
    while let Some(&(byte_start, _)) = chars.peek() {
        let mut taken = 0;
        let mut byte_end = text.len();
        while taken < chunk_size {
            match chars.next() {
                Some(_) => taken += 1,
                None => break,
            }
        }
        if let Some(&(b, _)) = chars.peek() {
            byte_end = b;
        }
        chunks.push(Chunk {
            doc_id: doc_id.to_string(),
            chunk_index: chunks.len(),
            char_start,
            char_end: char_start + taken,
            text: text[byte_start..byte_end].to_string(),
        });
        char_start += taken;
    }
    Ok(chunks)
}

/// A record that did not make it into the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// 1-based line number, when the record came from a file.
    pub line: Option<usize>,
    pub doc_id: Option<String>,
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub documents: usize,
    pub chunks: usize,
    pub rejected: usize,
}

impl std::fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "documents: {}, chunks: {}, rejected: {}",
            self.documents, self.chunks, self.rejected
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    chunk_size: usize,
    documents: BTreeMap<String, Document>,
    chunks: BTreeMap<String, Vec<Chunk>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    chunk_size: usize,
    documents: usize,
}

impl KnowledgeBase {
    pub fn empty(chunk_size: usize) -> Result<Self, KbError> {
        if chunk_size == 0 {
            return Err(KbError::InvalidChunkSize);
        }
        Ok(Self {
            chunk_size,
            documents: BTreeMap::new(),
            chunks: BTreeMap::new(),
        })
    }

    /// Ingests `documents`. Records with an empty title or doc_id are
    /// rejected individually; a repeated doc_id aborts ingestion.
    pub fn ingest<I>(documents: I, chunk_size: usize) -> Result<(Self, Vec<Rejection>), KbError>
    where
        I: IntoIterator<Item = Document>,
    {
        let mut kb = Self::empty(chunk_size)?;
        let mut rejected = Vec::new();
        for doc in documents {
            if let Some(reason) = validate(&doc) {
                rejected.push(Rejection {
                    line: None,
                    doc_id: Some(doc.doc_id),
                    reason,
                    raw: None,
                });
                continue;
            }
            kb.insert(doc)?;
        }
        Ok((kb, rejected))
    }

    fn insert(&mut self, doc: Document) -> Result<(), KbError> {
        if self.documents.contains_key(&doc.doc_id) {
            return Err(KbError::DuplicateId(doc.doc_id));
        }
        let chunks = chunk_document(&doc.doc_id, &doc.text, self.chunk_size)?;
        self.chunks.insert(doc.doc_id.clone(), chunks);
        self.documents.insert(doc.doc_id.clone(), doc);
        Ok(())
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.documents.contains_key(doc_id)
    }

    pub fn get_document(&self, doc_id: &str) -> Result<&Document, KbError> {
        self.documents
            .get(doc_id)
            .ok_or_else(|| KbError::NotFound(doc_id.to_string()))
    }

    pub fn chunks(&self, doc_id: &str) -> Result<&[Chunk], KbError> {
        self.chunks
            .get(doc_id)
            .map(Vec::as_slice)
            .ok_or_else(|| KbError::NotFound(doc_id.to_string()))
    }

    pub fn chunk(&self, doc_id: &str, chunk_index: usize) -> Result<&Chunk, KbError> {
        self.chunks(doc_id)?
            .get(chunk_index)
            .ok_or_else(|| KbError::ChunkNotFound {
                doc_id: doc_id.to_string(),
                chunk_index,
            })
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.values().map(Vec::len).sum()
    }

    /// `(doc_id, title)` pairs in ascending doc_id order.
    pub fn list_titles(&self) -> Vec<(&str, &str)> {
        self.documents
            .values()
            .map(|d| (d.doc_id.as_str(), d.title.as_str()))
            .collect()
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn summary(&self, rejected: usize) -> IngestSummary {
        IngestSummary {
            documents: self.len(),
            chunks: self.chunk_count(),
            rejected,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), KbError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(DOCUMENTS_FILE))?);
        for doc in self.documents.values() {
            serde_json::to_writer(&mut w, doc).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let manifest = Manifest {
            schema_version: MANIFEST_VERSION,
            chunk_size: self.chunk_size,
            documents: self.len(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(io::Error::from)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Loads a saved knowledge base. Unlike [`read_documents`], any bad line
    /// is an error: a saved base was validated when it was written.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, KbError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
            .map_err(|source| KbError::Manifest {
                path: manifest_path.display().to_string(),
                source,
            })?;
        let docs_path = dir.join(DOCUMENTS_FILE);
        let (docs, rejected) = read_documents(BufReader::new(File::open(&docs_path)?))?;
        if let Some(r) = rejected.first() {
            return Err(KbError::Corrupt {
                path: docs_path.display().to_string(),
                line: r.line.unwrap_or(0),
                message: r.reason.clone(),
            });
        }
        let mut kb = Self::empty(manifest.chunk_size)?;
        for doc in docs {
            kb.insert(doc)?;
        }
        Ok(kb)
    }
}

fn validate(doc: &Document) -> Option<String> {
    if doc.doc_id.is_empty() {
        Some("empty doc_id".into())
    } else if doc.title.trim().is_empty() {
        Some("empty title".into())
    } else {
        None
    }
}

/// Parses a JSON-lines document file. Malformed or invalid lines become
/// [`Rejection`]s; blank lines are skipped. Duplicate ids are left for
/// [`KnowledgeBase::ingest`] to report.
pub fn read_documents<R: BufRead>(reader: R) -> Result<(Vec<Document>, Vec<Rejection>), KbError> {
    let mut docs = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        match serde_json::from_str::<Document>(&line) {
            Ok(doc) => match validate(&doc) {
                Some(reason) => rejected.push(Rejection {
                    line: Some(lineno),
                    doc_id: Some(doc.doc_id),
                    reason,
                    raw: Some(line),
                }),
                None => {
                    docs.push(doc);
                }
            },
            Err(e) => rejected.push(Rejection {
                line: Some(lineno),
                doc_id: None,
                reason: e.to_string(),
                raw: Some(line),
            }),
        }
    }
    Ok((docs, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn text_of(n: usize) -> String {
        (0..n).map(|i| char::from(b'a' + (i % 26) as u8)).collect()
    }

    #[test]
    fn chunk_lengths() {
        let chunks = chunk_document("d", &text_of(1500), 600).unwrap();
        let lens: Vec<_> = chunks.iter().map(Chunk::char_len).collect();
        assert_eq!(lens, vec![600, 600, 300]);
        assert_eq!(chunks[2].char_start, 1200);
        assert_eq!(chunks[2].char_end, 1500);
    }

    #[test]
    fn chunk_empty_and_exact() {
        assert!(chunk_document("d", "", 600).unwrap().is_empty());
        let one = chunk_document("d", &text_of(600), 600).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].char_start, one[0].char_end), (0, 600));
        assert!(matches!(
            chunk_document("d", "x", 0),
            Err(KbError::InvalidChunkSize)
        ));
    }

    #[test]
    fn chunk_counts_scalar_values_not_bytes() {
        let chunks = chunk_document("d", "héllo wörld ✓", 4).unwrap();
        let texts: Vec<_> = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["héll", "o wö", "rld ", "✓"]);
    }

    #[test]
    fn ingest_counts_chunks() {
        let docs = vec![
            Document::new("Q1", "One", text_of(700)),
            Document::new("Q2", "Two", text_of(100)),
        ];
        let (kb, rejected) = KnowledgeBase::ingest(docs, 600).unwrap();
        assert!(rejected.is_empty());
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.chunk_count(), 3);
        assert_eq!(
            kb.summary(0).to_string(),
            "documents: 2, chunks: 3, rejected: 0"
        );
    }

    #[test]
    fn ingest_rejects_duplicates_and_empty_titles() {
        let docs = vec![Document::new("Q1", "a", "x"), Document::new("Q1", "b", "y")];
        match KnowledgeBase::ingest(docs, 600) {
            Err(KbError::DuplicateId(id)) => assert_eq!(id, "Q1"),
            other => panic!("expected duplicate error, got {other:?}"),
        }

        let docs = vec![
            Document::new("Q1", "  ", "x"),
            Document::new("Q2", "b", "y"),
        ];
        let (kb, rejected) = KnowledgeBase::ingest(docs, 600).unwrap();
        assert_eq!(kb.len(), 1);
        assert_eq!(rejected.len(), 1);
        assert_eq!(rejected[0].doc_id.as_deref(), Some("Q1"));

        let (kb, rejected) = KnowledgeBase::ingest(Vec::new(), 600).unwrap();
        assert!(kb.is_empty() && rejected.is_empty());
    }

    #[test]
    fn lookup_and_titles() {
        let q1 = Document {
            url: Some("https://example.org/q1".into()),
            ..Document::new("Q1", "Space Needle", "tower")
        };
        let docs = vec![
            Document::new("b", "Bee", "x"),
            q1.clone(),
            Document::new("a", "Ay", "y"),
        ];
        let (kb, _) = KnowledgeBase::ingest(docs, 600).unwrap();
        assert_eq!(kb.get_document("Q1").unwrap(), &q1);
        assert!(matches!(kb.get_document("Q999"), Err(KbError::NotFound(_))));
        let ids: Vec<_> = kb.list_titles().into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, vec!["Q1", "a", "b"]);
    }

    #[test]
    fn read_documents_rejects_per_line() {
        let input = concat!(
            r#"{"doc_id":"Q1","title":"One","text":"hello"}"#,
            "\n",
            "not json\n",
            "\n",
            r#"{"doc_id":"Q2","title":"","text":"x"}"#,
            "\n",
            r#"{"doc_id":"Q3","title":"Three","url":"u","text":"bye"}"#,
            "\n",
        );
        let (docs, rejected) = read_documents(input.as_bytes()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1].url.as_deref(), Some("u"));
        assert_eq!(
            rejected.iter().map(|r| r.line).collect::<Vec<_>>(),
            vec![Some(2), Some(4)]
        );
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let docs = vec![
            Document::new("Q2", "Two", "ünïcödé ".repeat(40)),
            Document {
                url: Some("https://example.org".into()),
                ..Document::new("Q1", "One", text_of(130))
            },
        ];
        let (kb, _) = KnowledgeBase::ingest(docs, 50).unwrap();
        kb.save(dir.path()).unwrap();
        let back = KnowledgeBase::load(dir.path()).unwrap();
        assert_eq!(back, kb);
    }

    proptest! {
        #[test]
        fn chunk_round_trip_and_length_law(text in "\\PC{0,300}", size in 1usize..40) {
            let chunks = chunk_document("d", &text, size).unwrap();
            let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
            prop_assert_eq!(&joined, &text);
            let mut expected_start = 0;
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.chunk_index, i);
                prop_assert_eq!(c.char_start, expected_start);
                prop_assert_eq!(c.text.chars().count(), c.char_len());
                if i + 1 < chunks.len() {
                    prop_assert_eq!(c.char_len(), size);
                } else {
                    prop_assert!(c.char_len() >= 1 && c.char_len() <= size);
                }
                expected_start = c.char_end;
            }
            prop_assert_eq!(expected_start, text.chars().count());
        }
    }
}
