//! Entity recall@k, answer matching, answer providers and (k, n, oracle)
//! experiment sweeps.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{assemble_context, Tokenizer};
use crate::embeddings::EmbeddingStore;
use crate::kb::KnowledgeBase;
use crate::retrieval::{Engine, PassageHit, RetrievalQuery};

/// Cut-offs reported for stage-1 recall.
pub const REPORT_KS: [usize; 4] = [1, 10, 20, 50];
/// Answer returned by the evidence-containment mock when the gold chunk is missing.
pub const MOCK_WRONG_ANSWER: &str = "unknown";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("{rankings} rankings but {gts} ground-truth entities")]
    LengthMismatch { rankings: usize, gts: usize },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("answer provider failed: {0}")]
    Answerer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoldAnswer {
    Text(String),
    Range { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldChunk {
    pub doc_id: String,
    pub chunk_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub gt_entity: String,
    pub gt_answers: Vec<GoldAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_chunk: Option<GoldChunk>,
}

/// One line of a query file. Embeddings are referenced by id into the
/// image-query and question-query stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_answers: Option<Vec<GoldAnswer>>,
    pub image_embedding_id: String,
    pub question_embedding_id: String,
}

/// The image-query and question-query stores a query file points into.
pub struct QueryEmbeddings {
    pub images: EmbeddingStore,
    pub questions: EmbeddingStore,
}

impl QueryEmbeddings {
    /// Resolves embedding ids. `oracle_entity` overrides the record's own
    /// `gt_entity` when given.
    pub fn resolve(
        &self,
        q: &QueryRecord,
        oracle_entity: Option<&str>,
    ) -> Result<RetrievalQuery, String> {
        let image = self
            .images
            .vector(&q.image_embedding_id)
            .map_err(|_| format!("missing image embedding {:?}", q.image_embedding_id))?;
        let question = self
            .questions
            .vector(&q.question_embedding_id)
            .map_err(|_| format!("missing question embedding {:?}", q.question_embedding_id))?;
        Ok(RetrievalQuery {
            query_id: q.query_id.clone(),
            image_embedding: image,
            question: q.question.clone(),
            question_embedding: question,
            oracle_entity: oracle_entity
                .map(str::to_string)
                .or_else(|| q.gt_entity.clone()),
        })
    }
}

/// R@k as a percentage: share of queries whose ground truth appears within
/// the first k entries of its ranking.
pub fn recall_at_k<S: AsRef<str>>(
    rankings: &[Vec<S>],
    gt: &[S],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::NoQueries);
    }
    if rankings.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            rankings: rankings.len(),
            gts: gt.len(),
        });
    }
    let positions: Vec<Option<usize>> = rankings
        .iter()
        .zip(gt)
        .map(|(r, g)| r.iter().position(|id| id.as_ref() == g.as_ref()))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = positions
                .iter()
                .filter(|p| matches!(p, Some(i) if *i < k))
                .count();
            (k, 100.0 * hits as f64 / rankings.len() as f64)
        })
        .collect())
}

/// Lowercases, strips punctuation, collapses whitespace and drops a leading
/// article.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !(c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())))
        .collect();
    let mut words: Vec<&str> = stripped.split_whitespace().collect();
    if words.len() > 1 && matches!(words[0], "a" | "an" | "the") {
        words.remove(0);
    }
    words.join(" ")
}

/// Parses a leading number, ignoring thousands separators and a trailing
/// unit such as `"m"` or `"km2"`.
pub fn parse_numeric(s: &str) -> Option<f64> {
    let cleaned: String = s.trim().chars().filter(|&c| c != ',').collect();
    let numeric_len = cleaned
        .char_indices()
        .take_while(|&(i, c)| c.is_ascii_digit() || c == '.' || (i == 0 && (c == '-' || c == '+')))
        .count();
    let (number, unit) = cleaned.split_at(numeric_len);
    let unit = unit.trim();
    if unit.chars().next().is_some_and(|c| c.is_ascii_digit()) {
        return None;
    }
    if !unit
        .chars()
        .all(|c| c.is_alphanumeric() || c == '%' || c == '°' || c == ' ' || c == '/')
    {
        return None;
    }
    number.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn match_answer(prediction: &str, gt_answers: &[GoldAnswer]) -> bool {
    let normalized = normalize_answer(prediction);
    let numeric = parse_numeric(prediction);
    gt_answers.iter().any(|g| match g {
        GoldAnswer::Text(t) => !normalized.is_empty() && normalize_answer(t) == normalized,
        GoldAnswer::Range { lo, hi } => numeric.is_some_and(|v| *lo <= v && v <= *hi),
    })
}

pub struct AnswerRequest<'a> {
    pub query_id: &'a str,
    pub question: &'a str,
    pub prompt: &'a str,
    pub passages: &'a [PassageHit],
}

/// Stands in for the multimodal LLM.
pub trait AnswerProvider: Send + Sync {
    fn name(&self) -> String;

    fn answer(&self, request: &AnswerRequest<'_>) -> Result<String, EvalError>;

    /// Non-reentrant providers are called one query at a time.
    fn is_reentrant(&self) -> bool {
        true
    }
}

/// Answers correctly exactly when the query's gold chunk text is in the prompt.
pub struct EvidenceContainmentAnswerer {
    evidence: HashMap<String, (String, String)>,
}

impl EvidenceContainmentAnswerer {
    pub fn new(kb: &KnowledgeBase, records: &[EvalRecord]) -> Self {
        let evidence = records
            .iter()
            .filter_map(|r| {
                let gold = r.gold_chunk.as_ref()?;
                let text = kb.chunk(&gold.doc_id, gold.chunk_index).ok()?.text.clone();
                let answer = match r.gt_answers.first()? {
                    GoldAnswer::Text(t) => t.clone(),
                    GoldAnswer::Range { lo, hi } => format!("{}", (lo + hi) / 2.0),
                };
                Some((r.query_id.clone(), (text, answer)))
            })
            .collect();
        Self { evidence }
    }
}

impl AnswerProvider for EvidenceContainmentAnswerer {
    fn name(&self) -> String {
        "evidence-mock".into()
    }

    fn answer(&self, request: &AnswerRequest<'_>) -> Result<String, EvalError> {
        Ok(match self.evidence.get(request.query_id) {
            Some((text, answer)) if request.prompt.contains(text.as_str()) => answer.clone(),
            _ => MOCK_WRONG_ANSWER.to_string(),
        })
    }
}

/// Returns the prompt unchanged.
pub struct EchoAnswerer;

impl AnswerProvider for EchoAnswerer {
    fn name(&self) -> String {
        "echo".into()
    }

    fn answer(&self, request: &AnswerRequest<'_>) -> Result<String, EvalError> {
        Ok(request.prompt.to_string())
    }
}

/// Always returns the same string.
pub struct ConstantAnswerer(pub String);

impl AnswerProvider for ConstantAnswerer {
    fn name(&self) -> String {
        "constant".into()
    }

    fn answer(&self, _request: &AnswerRequest<'_>) -> Result<String, EvalError> {
        Ok(self.0.clone())
    }
}

/// Runs an external program per query: the prompt goes to its stdin and
/// the trimmed stdout is the answer.
pub struct CommandAnswerer {
    program: String,
    args: Vec<String>,
}

impl CommandAnswerer {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }
}

impl AnswerProvider for CommandAnswerer {
    fn name(&self) -> String {
        format!("cmd:{}", self.program)
    }

    fn answer(&self, request: &AnswerRequest<'_>) -> Result<String, EvalError> {
        let err = |e: std::io::Error| EvalError::Answerer(format!("{}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .env("HIRET_QUERY_ID", request.query_id)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(err)?;
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            stdin.write_all(request.prompt.as_bytes()).map_err(err)?;
        }
        let out = child.wait_with_output().map_err(err)?;
        if !out.status.success() {
            return Err(EvalError::Answerer(format!(
                "{} exited with {}",
                self.program, out.status
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }

    fn is_reentrant(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub k: usize,
    pub n: usize,
    pub oracle: bool,
    pub budget: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.k == 0 || self.n == 0 {
            return Err(EvalError::InvalidConfig(
                "k and n must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub prediction: String,
    pub correct: bool,
    /// `None` when the record has no gold chunk.
    pub evidence_hit: Option<bool>,
    /// 1-based rank of the ground-truth entity in stage 1, retrieved mode only.
    pub gt_rank: Option<usize>,
    pub token_count: usize,
    pub dropped_passages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub config: String,
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub k: usize,
    pub n: usize,
    pub oracle: bool,
    /// Stage-1 recall; `None` in oracle mode.
    pub recall_at: Option<BTreeMap<usize, f64>>,
    pub accuracy: f64,
    pub evidence_hit_rate: Option<f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

impl ReportRow {
    fn config_label(&self) -> String {
        format!(
            "{} k={} n={}{}",
            self.model,
            self.k,
            self.n,
            if self.oracle { " oracle" } else { "" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRun {
    pub row: ReportRow,
    pub outcomes: Vec<QueryOutcome>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub diagnostics: Vec<Diagnostic>,
}

impl MetricsReport {
    pub fn from_runs(runs: impl IntoIterator<Item = ExperimentRun>) -> Self {
        let mut report = Self::default();
        for run in runs {
            report.rows.push(run.row);
            report.diagnostics.extend(run.diagnostics);
        }
        report
            .rows
            .sort_by(|a, b| (a.oracle, a.k, a.n, &a.model).cmp(&(b.oracle, b.k, b.n, &b.model)));
        report
    }

    /// Checks that must hold for any answerer. Returns human-readable
    /// violations; empty means the report is consistent.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        for row in &self.rows {
            let label = row.config_label();
            if !pct(row.accuracy) {
                out.push(format!(
                    "{label}: accuracy {} outside [0, 100]",
                    row.accuracy
                ));
            }
            if let Some(e) = row.evidence_hit_rate {
                if !pct(e) {
                    out.push(format!("{label}: evidence hit rate {e} outside [0, 100]"));
                }
            }
            if let Some(recall) = &row.recall_at {
                let values: Vec<f64> = recall.values().copied().collect();
                if values.iter().any(|&v| !pct(v)) {
                    out.push(format!("{label}: recall outside [0, 100]"));
                }
                if values.windows(2).any(|w| w[1] < w[0]) {
                    out.push(format!("{label}: recall@k decreases in k"));
                }
            }
        }
        // rows of one entity mode (same k, same oracle flag) see identical
        // entities, so evidence can only grow with n
        for a in &self.rows {
            for b in &self.rows {
                let same_mode =
                    a.model == b.model && a.oracle == b.oracle && (a.oracle || a.k == b.k);
                if same_mode && a.n < b.n && a.evaluated == b.evaluated {
                    if let (Some(x), Some(y)) = (a.evidence_hit_rate, b.evidence_hit_rate) {
                        if y < x {
                            out.push(format!(
                                "evidence hit rate drops from {x:.2} ({}) to {y:.2} ({})",
                                a.config_label(),
                                b.config_label()
                            ));
                        }
                    }
                }
                // ground-truth entity passages are identical in both modes at equal n
                if a.model == b.model
                    && a.oracle
                    && !b.oracle
                    && a.n == b.n
                    && a.evaluated == b.evaluated
                {
                    if let (Some(x), Some(y)) = (a.evidence_hit_rate, b.evidence_hit_rate) {
                        if x < y {
                            out.push(format!(
                                "oracle evidence hit rate {x:.2} ({}) below retrieved {y:.2} ({})",
                                a.config_label(),
                                b.config_label()
                            ));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Outcome, stage-1 ranking (retrieved mode) and ground-truth entity.
type Evaluated = (QueryOutcome, Option<Vec<String>>, String);

/// Runs one configuration over every query.
///
/// Queries lacking an eval record or embeddings, or whose retrieval or
/// answering fails, are skipped and listed in the diagnostics. Results do
/// not depend on how rayon schedules the queries.
pub fn run_experiment(
    engine: &Engine,
    queries: &[QueryRecord],
    embeddings: &QueryEmbeddings,
    records: &[EvalRecord],
    config: &ExperimentConfig,
    tokenizer: &dyn Tokenizer,
    answerer: &dyn AnswerProvider,
) -> Result<ExperimentRun, EvalError> {
    config.validate()?;
    let by_id: HashMap<&str, &EvalRecord> =
        records.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let serial = Mutex::new(());
    let model = answerer.name();
    let label = format!(
        "{model} k={} n={}{}",
        config.k,
        config.n,
        if config.oracle { " oracle" } else { "" }
    );
    let recall_depth = REPORT_KS.iter().copied().max().unwrap().max(config.k);

    let results: Vec<Result<Evaluated, Diagnostic>> = queries
        .par_iter()
        .map(|q| {
            let skip = |reason: String| Diagnostic {
                config: label.clone(),
                query_id: q.query_id.clone(),
                reason,
            };
            let record = by_id
                .get(q.query_id.as_str())
                .ok_or_else(|| skip("no eval record".into()))?;
            let query = embeddings
                .resolve(q, Some(&record.gt_entity))
                .map_err(skip)?;
            let retrieval = engine
                .hierarchical_retrieve(&query, config.k, config.n, config.oracle)
                .map_err(|e| skip(format!("retrieval failed: {e}")))?;
            let ranking = if config.oracle {
                None
            } else {
                let hits = engine
                    .retrieve_entities(query.image_embedding.as_slice(), recall_depth)
                    .map_err(|e| skip(format!("stage-1 ranking failed: {e}")))?;
                Some(hits.into_iter().map(|h| h.id).collect::<Vec<_>>())
            };
            let context = assemble_context(
                &query.question,
                &retrieval.passages,
                config.budget,
                tokenizer,
            )
            .map_err(|e| skip(e.to_string()))?;
            let request = AnswerRequest {
                query_id: &q.query_id,
                question: &query.question,
                prompt: &context.prompt,
                passages: &context.included_passages,
            };
            let prediction = if answerer.is_reentrant() {
                answerer.answer(&request)
            } else {
                let _guard = serial.lock().unwrap();
                answerer.answer(&request)
            }
            .map_err(|e| skip(e.to_string()))?;
            let outcome = QueryOutcome {
                query_id: q.query_id.clone(),
                correct: match_answer(&prediction, &record.gt_answers),
                prediction,
                evidence_hit: record
                    .gold_chunk
                    .as_ref()
                    .map(|g| retrieval.contains_chunk(&g.doc_id, g.chunk_index)),
                gt_rank: ranking
                    .as_ref()
                    .and_then(|r| r.iter().position(|id| *id == record.gt_entity))
                    .map(|p| p + 1),
                token_count: context.token_count,
                dropped_passages: context.dropped_passages.len(),
            };
            Ok((outcome, ranking, record.gt_entity.clone()))
        })
        .collect();

    let mut outcomes = Vec::new();
    let mut diagnostics = Vec::new();
    let mut rankings = Vec::new();
    let mut gts = Vec::new();
    for r in results {
        match r {
            Ok((outcome, ranking, gt)) => {
                if let Some(ranking) = ranking {
                    rankings.push(ranking);
                    gts.push(gt);
                }
                outcomes.push(outcome);
            }
            Err(d) => diagnostics.push(d),
        }
    }

    let evaluated = outcomes.len();
    let accuracy = percent(outcomes.iter().filter(|o| o.correct).count(), evaluated);
    let with_gold: Vec<bool> = outcomes.iter().filter_map(|o| o.evidence_hit).collect();
    let evidence_hit_rate = (!with_gold.is_empty())
        .then(|| percent(with_gold.iter().filter(|&&h| h).count(), with_gold.len()));
    let recall_at = if config.oracle || rankings.is_empty() {
        None
    } else {
        Some(recall_at_k(&rankings, &gts, &REPORT_KS)?)
    };
    Ok(ExperimentRun {
        row: ReportRow {
            model,
            k: config.k,
            n: config.n,
            oracle: config.oracle,
            recall_at,
            accuracy,
            evidence_hit_rate,
            evaluated,
            skipped: diagnostics.len(),
        },
        outcomes,
        diagnostics,
    })
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "model-config",
    "k",
    "n",
    "oracle",
    "R@1",
    "R@10",
    "R@20",
    "R@50",
    "accuracy",
    "evidence_hit_rate",
];

fn fmt_pct(v: Option<f64>) -> Option<String> {
    v.map(|v| format!("{v:.2}"))
}

/// Report cells in [`REPORT_COLUMNS`] order; `None` marks a value that does
/// not apply (recall in oracle mode, evidence without gold chunks).
pub fn report_cells(row: &ReportRow) -> Vec<Option<String>> {
    let mut cells = vec![
        Some(row.model.clone()),
        Some(row.k.to_string()),
        Some(row.n.to_string()),
        Some(row.oracle.to_string()),
    ];
    for k in REPORT_KS {
        cells.push(fmt_pct(
            row.recall_at.as_ref().and_then(|r| r.get(&k).copied()),
        ));
    }
    cells.push(fmt_pct(Some(row.accuracy)));
    cells.push(fmt_pct(row.evidence_hit_rate));
    cells
}

fn sorted_rows(report: &MetricsReport) -> Vec<&ReportRow> {
    let mut rows: Vec<&ReportRow> = report.rows.iter().collect();
    rows.sort_by(|a, b| (a.oracle, a.k, a.n, &a.model).cmp(&(b.oracle, b.k, b.n, &b.model)));
    rows
}

pub fn render_markdown(report: &MetricsReport) -> String {
    let mut out = format!("| {} |\n", REPORT_COLUMNS.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(REPORT_COLUMNS.len())));
    for row in sorted_rows(report) {
        let cells: Vec<String> = report_cells(row)
            .into_iter()
            .map(|c| c.unwrap_or_else(|| "-".into()))
            .collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out
}

pub fn render_csv(report: &MetricsReport) -> String {
    let escape = |s: String| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s
        }
    };
    let mut out = REPORT_COLUMNS.join(",") + "\n";
    for row in sorted_rows(report) {
        let cells: Vec<String> = report_cells(row)
            .into_iter()
            .map(|c| escape(c.unwrap_or_default()))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
