//! `hiret`: ingest documents, build title indexes, run retrievals and
//! evaluation sweeps.
//!
//! Machine-readable output goes to stdout as JSON; everything else goes to
//! stderr. Flags can also be set through `HIRET_*` environment variables.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use hiret_core::context::DEFAULT_TOKEN_BUDGET;
use hiret_core::kb::DEFAULT_CHUNK_SIZE;

#[derive(Parser)]
#[command(
    name = "hiret",
    version,
    about = "Hierarchical entity-then-passage retrieval"
)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "HIRET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a JSON-lines document file into a knowledge-base directory.
    Ingest(IngestArgs),
    /// Build an HNSW index over a title embedding file.
    BuildIndex(BuildIndexArgs),
    /// Run one hierarchical retrieval and print the assembled prompt.
    Retrieve(RetrieveArgs),
    /// Run a (k, n, oracle) sweep and write report files.
    Eval(EvalArgs),
    /// Print statistics for a KB directory, index file or embedding file.
    Inspect(InspectArgs),
    /// Write a seeded synthetic fixture (documents, embeddings, queries).
    Synth(SynthArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// JSON-lines file of {doc_id, title, url?, text}.
    docs: PathBuf,
    #[arg(long, env = "HIRET_OUT_DIR")]
    out_dir: PathBuf,
    /// Chunk length in characters.
    #[arg(long, env = "HIRET_CHUNK_SIZE", default_value_t = DEFAULT_CHUNK_SIZE)]
    chunk_size: usize,
}

#[derive(Args)]
struct BuildIndexArgs {
    /// Title embeddings (.wemb).
    titles: PathBuf,
    #[arg(long, env = "HIRET_INDEX_OUT")]
    out: PathBuf,
    #[arg(long, env = "HIRET_M", default_value_t = hiret_core::ann::DEFAULT_M)]
    m: usize,
    /// Layer-0 degree cap (default: 2·m).
    #[arg(long, env = "HIRET_M0")]
    m0: Option<usize>,
    #[arg(long, env = "HIRET_EF_CONSTRUCTION", default_value_t = hiret_core::ann::DEFAULT_EF_CONSTRUCTION)]
    ef_construction: usize,
    #[arg(long, env = "HIRET_SEED", default_value_t = 0)]
    seed: u64,
    /// Nearest-M neighbor selection instead of the diversity heuristic.
    #[arg(long)]
    simple: bool,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long, env = "HIRET_INDEX")]
    index: PathBuf,
    /// Knowledge-base directory written by `ingest`.
    #[arg(long, env = "HIRET_KB")]
    kb: PathBuf,
    /// Image-query embeddings (.wemb).
    #[arg(long, env = "HIRET_IMAGES")]
    images: PathBuf,
    /// Question embeddings (.wemb).
    #[arg(long, env = "HIRET_QUESTIONS")]
    questions: PathBuf,
    /// Chunk embeddings (.wemb) keyed `doc_id#chunk_index`.
    #[arg(long, env = "HIRET_CHUNKS", conflicts_with = "test_embedder_seed")]
    chunks: Option<PathBuf>,
    /// Embed chunks on the fly with the seeded test embedder.
    #[arg(
        long,
        env = "HIRET_TEST_EMBEDDER_SEED",
        required_unless_present = "chunks"
    )]
    test_embedder_seed: Option<u64>,
    /// Stage-1 beam width (default: max(64, 4k)).
    #[arg(long, env = "HIRET_EF_SEARCH")]
    ef_search: Option<usize>,
    #[arg(long, env = "HIRET_BUDGET", default_value_t = DEFAULT_TOKEN_BUDGET)]
    budget: usize,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Query file (JSON lines); used with --query-id.
    #[arg(long, env = "HIRET_QUERIES", requires = "query_id")]
    queries: Option<PathBuf>,
    #[arg(long, requires = "queries", conflicts_with_all = ["question", "image_id", "question_id"])]
    query_id: Option<String>,
    /// Inline question text.
    #[arg(long, required_unless_present = "query_id", requires_all = ["image_id", "question_id"])]
    question: Option<String>,
    /// Id into the image-query store.
    #[arg(long)]
    image_id: Option<String>,
    /// Id into the question store.
    #[arg(long)]
    question_id: Option<String>,
    #[arg(short, long, env = "HIRET_K", default_value_t = 1)]
    k: usize,
    #[arg(short, long, env = "HIRET_N", default_value_t = 1)]
    n: usize,
    /// Skip stage 1 and use the ground-truth entity.
    #[arg(long)]
    oracle: bool,
    /// Ground-truth entity for --oracle; implies --oracle.
    #[arg(long)]
    oracle_entity: Option<String>,
}

/// One sweep point, written `k:n` or `k:n:oracle`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SweepPoint {
    k: usize,
    n: usize,
    oracle: bool,
}

impl FromStr for SweepPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| format!("expected a positive integer, got {p:?}"))
        };
        match parts.as_slice() {
            [k, n] => Ok(Self {
                k: num(k)?,
                n: num(n)?,
                oracle: false,
            }),
            [k, n, "oracle"] => Ok(Self {
                k: num(k)?,
                n: num(n)?,
                oracle: true,
            }),
            _ => Err(format!("expected k:n or k:n:oracle, got {s:?}")),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, env = "HIRET_QUERIES")]
    queries: PathBuf,
    /// Eval records (JSON lines).
    #[arg(long, env = "HIRET_RECORDS")]
    records: PathBuf,
    /// Comma-separated sweep, e.g. `1:1,1:2,1:3,1:1:oracle`.
    #[arg(
        long,
        env = "HIRET_SWEEP",
        value_delimiter = ',',
        default_value = "1:1"
    )]
    sweep: Vec<SweepPoint>,
    /// `evidence`, `echo`, `const:<text>` or `cmd:<program> [args...]`.
    #[arg(long, env = "HIRET_ANSWERER", default_value = "evidence")]
    answerer: String,
    #[arg(long, env = "HIRET_OUT_DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// KB directory, `.whnw` index or `.wemb` embedding file.
    path: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, env = "HIRET_OUT_DIR")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    entities: usize,
    #[arg(long, default_value_t = 500)]
    queries: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 120)]
    chunk_size: usize,
    #[arg(long, default_value_t = 2.6)]
    image_noise: f32,
    #[arg(long, default_value_t = 4.0)]
    question_noise: f32,
    #[arg(long, env = "HIRET_SEED", default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::BuildIndex(a) => commands::build_index(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
