use std::fs::{self, File};
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use hiret_core::ann::{HnswIndex, HnswParams, NeighborSelection, HNSW_MAGIC};
use hiret_core::context::{assemble_context, WhitespaceTokenizer};
use hiret_core::embeddings::{
    EmbeddingProvider, EmbeddingStore, StoreKind, StoreProvider, TestEmbedder, WEMB_MAGIC,
};
use hiret_core::eval::{
    render_csv, render_markdown, run_experiment, AnswerProvider, CommandAnswerer, ConstantAnswerer,
    EchoAnswerer, EvalRecord, EvidenceContainmentAnswerer, ExperimentConfig, MetricsReport,
    QueryEmbeddings, QueryRecord,
};
use hiret_core::jsonl::{read_jsonl, write_jsonl};
use hiret_core::kb::{read_documents, KnowledgeBase, MANIFEST_FILE};
use hiret_core::retrieval::{Engine, RetrievalQuery};
use hiret_core::synth::{SyntheticConfig, SyntheticCorpus};
use hiret_core::SCHEMA_VERSION;
use serde_json::{json, Value};

use crate::{
    BuildIndexArgs, EngineArgs, EvalArgs, IngestArgs, InspectArgs, RetrieveArgs, SynthArgs,
};

fn emit(value: Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    match writeln!(io::stdout().lock(), "{text}") {
        // reader went away (e.g. `| head`)
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn require_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
    for p in paths {
        ensure!(p.exists(), "input not found: {}", p.display());
    }
    Ok(())
}

fn load_store(path: &Path, kind: StoreKind) -> Result<EmbeddingStore> {
    EmbeddingStore::load(path, kind).with_context(|| format!("loading {}", path.display()))
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let (items, bad) = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    for b in &bad {
        eprintln!("{}:{}: skipped: {}", path.display(), b.line, b.message);
    }
    Ok(items)
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let file = File::open(&a.docs).with_context(|| format!("reading {}", a.docs.display()))?;
    let (docs, mut rejected) = read_documents(BufReader::new(file))
        .with_context(|| format!("reading {}", a.docs.display()))?;
    let (kb, more) = KnowledgeBase::ingest(docs, a.chunk_size)
        .with_context(|| format!("ingesting {}", a.docs.display()))?;
    rejected.extend(more);
    for r in &rejected {
        match r.line {
            Some(line) => eprintln!("{}:{line}: rejected: {}", a.docs.display(), r.reason),
            None => eprintln!("rejected {:?}: {}", r.doc_id, r.reason),
        }
    }
    ensure!(
        !kb.is_empty(),
        "no documents accepted from {}",
        a.docs.display()
    );
    kb.save(&a.out_dir)
        .with_context(|| format!("writing {}", a.out_dir.display()))?;
    write_jsonl(a.out_dir.join("rejected.jsonl"), &rejected)?;
    let summary = kb.summary(rejected.len());
    eprintln!("{summary}");
    emit(json!({
        "schema_version": SCHEMA_VERSION,
        "documents": summary.documents,
        "chunks": summary.chunks,
        "rejected": summary.rejected,
        "chunk_size": kb.chunk_size(),
        "out_dir": a.out_dir,
    }))
}

pub fn build_index(a: BuildIndexArgs) -> Result<()> {
    require_inputs([a.titles.as_path()])?;
    let store = load_store(&a.titles, StoreKind::Title)?;
    let params = HnswParams {
        m: a.m,
        m0: a.m0.unwrap_or(2 * a.m),
        ef_construction: a.ef_construction,
        seed: a.seed,
        selection: if a.simple {
            NeighborSelection::Simple
        } else {
            NeighborSelection::Heuristic
        },
    };
    let start = Instant::now();
    let index = HnswIndex::build(&store, params)?;
    eprintln!(
        "built index over {} titles in {:.2?}",
        index.len(),
        start.elapsed()
    );
    index
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    emit(json!({
        "schema_version": SCHEMA_VERSION,
        "out": a.out,
        "count": index.len(),
        "dim": index.dim(),
        "normalized": index.is_normalized(),
        "params": index.params(),
    }))
}

struct Loaded {
    engine: Engine,
    embeddings: QueryEmbeddings,
}

fn load_engine(a: &EngineArgs, extra: &[&Path]) -> Result<Loaded> {
    require_inputs(
        [
            a.index.as_path(),
            a.kb.as_path(),
            a.images.as_path(),
            a.questions.as_path(),
        ]
        .into_iter()
        .chain(a.chunks.as_deref())
        .chain(extra.iter().copied()),
    )?;
    let kb = KnowledgeBase::load(&a.kb).with_context(|| format!("loading {}", a.kb.display()))?;
    let index =
        HnswIndex::load(&a.index).with_context(|| format!("loading {}", a.index.display()))?;
    let images = load_store(&a.images, StoreKind::ImageQuery)?;
    let questions = load_store(&a.questions, StoreKind::QuestionQuery)?;
    let provider: Arc<dyn EmbeddingProvider> = match (&a.chunks, a.test_embedder_seed) {
        (Some(path), _) => Arc::new(StoreProvider::new(load_store(path, StoreKind::Chunk)?)),
        (None, Some(seed)) => {
            ensure!(questions.dim() >= 2, "test embedder needs dim >= 2");
            Arc::new(TestEmbedder::new(seed, questions.dim()))
        }
        (None, None) => bail!("one of --chunks or --test-embedder-seed is required"),
    };
    ensure!(
        images.dim() == index.dim(),
        "image embeddings have dim {} but the index has dim {}",
        images.dim(),
        index.dim()
    );
    ensure!(
        questions.dim() == provider.dim(),
        "question embeddings have dim {} but chunk embeddings have dim {}",
        questions.dim(),
        provider.dim()
    );
    let mut engine = Engine::new(kb, index, provider);
    if let Some(ef) = a.ef_search {
        engine = engine.with_ef_search(ef);
    }
    Ok(Loaded {
        engine,
        embeddings: QueryEmbeddings { images, questions },
    })
}

pub fn retrieve(a: RetrieveArgs) -> Result<()> {
    let extra: Vec<&Path> = a.queries.as_deref().into_iter().collect();
    let Loaded { engine, embeddings } = load_engine(&a.engine, &extra)?;
    let oracle = a.oracle || a.oracle_entity.is_some();
    let query: RetrievalQuery = match (&a.queries, &a.query_id) {
        (Some(path), Some(id)) => {
            let records: Vec<QueryRecord> = read_records(path)?;
            let record = records
                .iter()
                .find(|r| &r.query_id == id)
                .with_context(|| format!("unknown query id {id:?} in {}", path.display()))?;
            embeddings
                .resolve(record, a.oracle_entity.as_deref())
                .map_err(anyhow::Error::msg)?
        }
        _ => {
            let (image_id, question_id) = (
                a.image_id.as_deref().unwrap(),
                a.question_id.as_deref().unwrap(),
            );
            RetrievalQuery {
                query_id: "inline".into(),
                image_embedding: embeddings
                    .images
                    .vector(image_id)
                    .with_context(|| format!("unknown image embedding id {image_id:?}"))?,
                question: a.question.clone().unwrap_or_default(),
                question_embedding: embeddings
                    .questions
                    .vector(question_id)
                    .with_context(|| format!("unknown question embedding id {question_id:?}"))?,
                oracle_entity: a.oracle_entity.clone(),
            }
        }
    };
    let retrieval = engine.hierarchical_retrieve(&query, a.k, a.n, oracle)?;
    let context = assemble_context(
        &query.question,
        &retrieval.passages,
        a.engine.budget,
        &WhitespaceTokenizer,
    )?;
    let dropped: Vec<Value> = context
        .dropped_passages
        .iter()
        .map(|p| json!({"doc_id": p.doc_id, "chunk_index": p.chunk_index}))
        .collect();
    emit(json!({
        "schema_version": SCHEMA_VERSION,
        "query_id": query.query_id,
        "k": a.k,
        "n": a.n,
        "oracle": oracle,
        "entities": retrieval.entities,
        "passages": retrieval.passages,
        "prompt": context.prompt,
        "token_count": context.token_count,
        "dropped_passages": dropped,
    }))
}

fn make_answerer(
    spec: &str,
    kb: &KnowledgeBase,
    records: &[EvalRecord],
) -> Result<Box<dyn AnswerProvider>> {
    Ok(match spec {
        "evidence" => Box::new(EvidenceContainmentAnswerer::new(kb, records)),
        "echo" => Box::new(EchoAnswerer),
        _ => {
            if let Some(text) = spec.strip_prefix("const:") {
                Box::new(ConstantAnswerer(text.to_string()))
            } else if let Some(cmd) = spec.strip_prefix("cmd:") {
                let mut parts = cmd.split_whitespace().map(str::to_string);
                let program = parts.next().context("cmd: answerer needs a program")?;
                Box::new(CommandAnswerer::new(program, parts.collect()))
            } else {
                bail!("unknown answerer {spec:?}; expected evidence, echo, const:<text> or cmd:<program>")
            }
        }
    })
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let Loaded { engine, embeddings } =
        load_engine(&a.engine, &[a.queries.as_path(), a.records.as_path()])?;
    let queries: Vec<QueryRecord> = read_records(&a.queries)?;
    let records: Vec<EvalRecord> = read_records(&a.records)?;
    ensure!(!queries.is_empty(), "no queries in {}", a.queries.display());
    let answerer = make_answerer(&a.answerer, engine.kb(), &records)?;

    let mut runs = Vec::with_capacity(a.sweep.len());
    for point in &a.sweep {
        let config = ExperimentConfig {
            k: point.k,
            n: point.n,
            oracle: point.oracle,
            budget: a.engine.budget,
        };
        let start = Instant::now();
        let run = run_experiment(
            &engine,
            &queries,
            &embeddings,
            &records,
            &config,
            &WhitespaceTokenizer,
            answerer.as_ref(),
        )?;
        eprintln!(
            "k={} n={}{}: {} evaluated, {} skipped in {:.2?}",
            config.k,
            config.n,
            if config.oracle { " oracle" } else { "" },
            run.row.evaluated,
            run.row.skipped,
            start.elapsed()
        );
        runs.push(run);
    }
    let report = MetricsReport::from_runs(runs);
    for d in &report.diagnostics {
        eprintln!("[{}] {}: {}", d.config, d.query_id, d.reason);
    }

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let markdown = render_markdown(&report);
    let files: Vec<PathBuf> = ["report.csv", "report.md", "report.json"]
        .iter()
        .map(|f| a.out_dir.join(f))
        .collect();
    fs::write(&files[0], render_csv(&report))?;
    fs::write(&files[1], &markdown)?;
    let full = json!({"schema_version": SCHEMA_VERSION, "rows": report.rows, "diagnostics": report.diagnostics});
    fs::write(&files[2], serde_json::to_string_pretty(&full)? + "\n")?;
    eprint!("{markdown}");

    let violations = report.invariant_violations();
    for v in &violations {
        eprintln!("invariant violated: {v}");
    }
    emit(json!({
        "schema_version": SCHEMA_VERSION,
        "rows": report.rows,
        "skipped": report.diagnostics.len(),
        "invariant_violations": violations,
        "files": files,
    }))?;
    if let Some(row) = report.rows.iter().find(|r| r.evaluated == 0) {
        bail!(
            "no queries evaluated for k={} n={} oracle={}",
            row.k,
            row.n,
            row.oracle
        );
    }
    ensure!(
        violations.is_empty(),
        "{} invariant check(s) failed",
        violations.len()
    );
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    require_inputs([a.path.as_path()])?;
    if a.path.is_dir() {
        ensure!(
            a.path.join(MANIFEST_FILE).exists(),
            "{} is not a knowledge-base directory",
            a.path.display()
        );
        let kb = KnowledgeBase::load(&a.path)
            .with_context(|| format!("loading {}", a.path.display()))?;
        let counts: Vec<usize> = kb
            .documents()
            .map(|d| kb.chunks(&d.doc_id).map(|c| c.len()).unwrap_or(0))
            .collect();
        return emit(json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "kb",
            "documents": kb.len(),
            "chunks": kb.chunk_count(),
            "chunk_size": kb.chunk_size(),
            "chunks_per_document": {
                "min": counts.iter().min(),
                "max": counts.iter().max(),
                "mean": mean(counts.iter().map(|&c| c as f64)),
            },
        }));
    }
    let mut magic = [0u8; 4];
    File::open(&a.path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .with_context(|| format!("reading {}", a.path.display()))?;
    if magic == HNSW_MAGIC {
        let index =
            HnswIndex::load(&a.path).with_context(|| format!("loading {}", a.path.display()))?;
        let mut stats = serde_json::to_value(index.stats())?;
        stats["schema_version"] = json!(SCHEMA_VERSION);
        stats["kind"] = json!("index");
        emit(stats)
    } else if magic == WEMB_MAGIC {
        let store = load_store(&a.path, StoreKind::Title)?;
        let norms: Vec<f64> = store
            .iter()
            .map(|(_, v)| {
                v.iter()
                    .map(|&x| f64::from(x) * f64::from(x))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        emit(json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "embeddings",
            "count": store.len(),
            "dim": store.dim(),
            "normalized": store.is_normalized(),
            "norm": {
                "min": norms.iter().copied().reduce(f64::min),
                "max": norms.iter().copied().reduce(f64::max),
                "mean": mean(norms.iter().copied()),
            },
        }))
    } else {
        bail!(
            "{}: unrecognized file (magic {:?})",
            a.path.display(),
            magic
        )
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    ensure!(a.dim >= 2, "--dim must be at least 2");
    ensure!(
        a.entities > 0 && a.queries > 0,
        "--entities and --queries must be positive"
    );
    let config = SyntheticConfig {
        entities: a.entities,
        queries: a.queries,
        dim: a.dim,
        chunk_size: a.chunk_size,
        image_noise: a.image_noise,
        question_noise: a.question_noise,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let corpus = SyntheticCorpus::generate(config);
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    corpus
        .write_fixture(&a.out_dir)
        .with_context(|| format!("writing {}", a.out_dir.display()))?;
    eprintln!(
        "wrote {} entities, {} chunks, {} queries to {}",
        corpus.kb.len(),
        corpus.kb.chunk_count(),
        corpus.queries.len(),
        a.out_dir.display()
    );
    emit(json!({
        "schema_version": SCHEMA_VERSION,
        "out_dir": a.out_dir,
        "entities": corpus.kb.len(),
        "chunks": corpus.kb.chunk_count(),
        "queries": corpus.queries.len(),
        "chunk_size": a.chunk_size,
        "dim": a.dim,
        "seed": a.seed,
    }))
}
