use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn hiret(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hiret"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Synthetic fixture, ingested and indexed.
    fn new(entities: usize, queries: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        let raw = f.path("raw");
        ok_json(&hiret(
            &[
                "synth",
                "--out-dir",
                s(&raw),
                "--entities",
                &entities.to_string(),
                "--queries",
                &queries.to_string(),
                "--seed",
                "3",
            ],
            &[],
        ));
        ok_json(&hiret(
            &[
                "ingest",
                s(&raw.join("documents.jsonl")),
                "--out-dir",
                s(&f.path("kb")),
                "--chunk-size",
                "120",
            ],
            &[],
        ));
        ok_json(&hiret(
            &[
                "build-index",
                s(&raw.join("titles.wemb")),
                "--out",
                s(&f.path("titles.whnw")),
            ],
            &[],
        ));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn engine_args(&self) -> Vec<String> {
        let raw = self.path("raw");
        [
            ("--index", self.path("titles.whnw")),
            ("--kb", self.path("kb")),
            ("--images", raw.join("images.wemb")),
            ("--questions", raw.join("questions.wemb")),
            ("--chunks", raw.join("chunks.wemb")),
        ]
        .into_iter()
        .flat_map(|(flag, p)| [flag.to_string(), p.to_str().unwrap().to_string()])
        .collect()
    }

    fn run(&self, sub: &str, extra: &[&str], envs: &[(&str, &str)]) -> Output {
        let mut args = vec![sub.to_string()];
        args.extend(self.engine_args());
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        hiret(&refs, envs)
    }

    fn retrieve(&self, extra: &[&str], envs: &[(&str, &str)]) -> Output {
        let queries = self.path("raw").join("queries.jsonl");
        let mut args = vec!["--queries", s(&queries)];
        args.extend_from_slice(extra);
        self.run("retrieve", &args, envs)
    }

    fn eval(&self, out_dir: &str, extra: &[&str]) -> Output {
        let raw = self.path("raw");
        let (queries, records, out) = (
            raw.join("queries.jsonl"),
            raw.join("eval.jsonl"),
            self.path(out_dir),
        );
        let mut args = vec![
            "--queries",
            s(&queries),
            "--records",
            s(&records),
            "--out-dir",
            s(&out),
        ];
        args.extend_from_slice(extra);
        self.run("eval", &args, &[])
    }

    fn gt_entity(&self, query_id: &str) -> String {
        let eval = fs::read_to_string(self.path("raw").join("eval.jsonl")).unwrap();
        eval.lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .find(|r| r["query_id"] == query_id)
            .unwrap()["gt_entity"]
            .as_str()
            .unwrap()
            .to_string()
    }
}

fn write_docs(dir: &Path, lines: &[String]) -> PathBuf {
    let p = dir.join("docs.jsonl");
    fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

fn doc_line(id: &str, title: &str, len: usize) -> String {
    serde_json::json!({"doc_id": id, "title": title, "text": "x".repeat(len)}).to_string()
}

#[test]
fn ingest_two_documents() {
    let dir = TempDir::new().unwrap();
    let docs = write_docs(
        dir.path(),
        &[doc_line("a", "Alpha", 700), doc_line("b", "Beta", 100)],
    );
    let out = hiret(
        &["ingest", s(&docs), "--out-dir", s(&dir.path().join("kb"))],
        &[],
    );
    let v = ok_json(&out);
    assert!(stderr(&out).contains("documents: 2, chunks: 3, rejected: 0"));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(
        (v["documents"].as_u64(), v["chunks"].as_u64()),
        (Some(2), Some(3))
    );

    let inspect = ok_json(&hiret(&["inspect", s(&dir.path().join("kb"))], &[]));
    assert_eq!(inspect["kind"], "kb");
    assert_eq!(inspect["chunks"], 3);
    assert_eq!(inspect["chunk_size"], 600);
}

#[test]
fn ingest_rejects_malformed_line_and_continues() {
    let dir = TempDir::new().unwrap();
    let docs = write_docs(
        dir.path(),
        &[
            doc_line("a", "Alpha", 10),
            "{not json".into(),
            doc_line("b", "Beta", 10),
        ],
    );
    let kb = dir.path().join("kb");
    let out = hiret(&["ingest", s(&docs), "--out-dir", s(&kb)], &[]);
    let v = ok_json(&out);
    assert_eq!(v["rejected"], 1);
    assert!(stderr(&out).contains("documents: 2, chunks: 2, rejected: 1"));
    let sidecar = fs::read_to_string(kb.join("rejected.jsonl")).unwrap();
    assert_eq!(sidecar.lines().count(), 1);
    assert!(sidecar.contains("\"line\":2"));
}

#[test]
fn ingest_failures_exit_nonzero() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = hiret(
        &[
            "ingest",
            s(&missing),
            "--out-dir",
            s(&dir.path().join("kb")),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains(s(&missing)));
    assert!(out.stdout.is_empty());

    let docs = write_docs(dir.path(), &["garbage".into(), doc_line("a", "", 5)]);
    let out = hiret(
        &["ingest", s(&docs), "--out-dir", s(&dir.path().join("kb"))],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no documents accepted"));
}

#[test]
fn build_index_records_params_and_is_reproducible() {
    let f = Fixture::new(120, 10);
    let titles = f.path("raw").join("titles.wemb");
    let a = f.path("a.whnw");
    let v = ok_json(&hiret(
        &[
            "build-index",
            s(&titles),
            "--out",
            s(&a),
            "--m",
            "16",
            "--seed",
            "5",
        ],
        &[],
    ));
    assert_eq!(
        (v["count"].as_u64(), v["dim"].as_u64()),
        (Some(120), Some(64))
    );
    assert_eq!(v["params"]["m"], 16);
    assert_eq!(v["params"]["m0"], 32);
    assert_eq!(v["params"]["seed"], 5);

    let stats = ok_json(&hiret(&["inspect", s(&a)], &[]));
    assert_eq!(stats["kind"], "index");
    assert_eq!(stats["m"], 16);
    assert_eq!(stats["count"], 120);

    let b = f.path("b.whnw");
    ok_json(&hiret(
        &[
            "build-index",
            s(&titles),
            "--out",
            s(&b),
            "--m",
            "16",
            "--seed",
            "5",
        ],
        &[("HIRET_THREADS", "1")],
    ));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let store = ok_json(&hiret(&["inspect", s(&titles)], &[]));
    assert_eq!(store["kind"], "embeddings");
    assert_eq!(store["normalized"], true);
}

#[test]
fn build_index_rejects_malformed_embeddings() {
    let dir = TempDir::new().unwrap();
    // header says dim 4 but the record carries 3 floats
    let mut bytes = b"WEMB".to_vec();
    bytes.extend(1u16.to_le_bytes());
    bytes.extend(0u16.to_le_bytes());
    bytes.extend(4u32.to_le_bytes());
    bytes.extend(1u64.to_le_bytes());
    bytes.extend(1u16.to_le_bytes());
    bytes.push(b'a');
    for x in [1.0f32, 2.0, 3.0] {
        bytes.extend(x.to_le_bytes());
    }
    let bad = dir.path().join("bad.wemb");
    fs::write(&bad, bytes).unwrap();
    let out = hiret(
        &[
            "build-index",
            s(&bad),
            "--out",
            s(&dir.path().join("x.whnw")),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bad.wemb"));
    assert!(!dir.path().join("x.whnw").exists());
}

#[test]
fn retrieve_planted_query() {
    let f = Fixture::new(150, 20);
    let v = ok_json(&f.retrieve(&["--query-id", "q00000"], &[]));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["entities"].as_array().unwrap().len(), 1);
    assert_eq!(v["passages"].as_array().unwrap().len(), 1);
    let prompt = v["prompt"].as_str().unwrap();
    assert!(prompt.starts_with("<IMAGE>\nGiven the following context:\n"));
    assert!(prompt.ends_with("\nGive a short answer. ASSISTANT:"));
    assert_eq!(
        v["token_count"].as_u64().unwrap() as usize,
        prompt.split_whitespace().count()
    );

    let v = ok_json(&f.retrieve(&["--query-id", "q00001", "-n", "3"], &[]));
    assert!(v["passages"].as_array().unwrap().len() <= 3);

    let gt = f.gt_entity("q00002");
    let v = ok_json(&f.retrieve(&["--query-id", "q00002", "-n", "3", "--oracle"], &[]));
    assert_eq!(v["oracle"], true);
    assert_eq!(v["entities"][0]["id"], gt.as_str());
    assert!(v["passages"]
        .as_array()
        .unwrap()
        .iter()
        .all(|p| p["doc_id"] == gt.as_str()));
}

#[test]
fn retrieve_inline_and_env_defaults() {
    let f = Fixture::new(100, 10);
    let inline = [
        "--question",
        "what is it?",
        "--image-id",
        "img:q00003",
        "--question-id",
        "qst:q00003",
    ];
    let v = ok_json(&f.run("retrieve", &inline, &[("HIRET_K", "3"), ("HIRET_N", "2")]));
    assert_eq!(v["k"], 3);
    assert_eq!(v["entities"].as_array().unwrap().len(), 3);
    assert_eq!(v["passages"].as_array().unwrap().len(), 6);
    let mut args = inline.to_vec();
    args.extend(["-k", "2"]);
    let v = ok_json(&f.run("retrieve", &args, &[("HIRET_K", "3")]));
    assert_eq!(v["entities"].as_array().unwrap().len(), 2);

    let mut oracle = inline.to_vec();
    oracle.extend(["-n", "2", "--oracle-entity", "E00007"]);
    let v = ok_json(&f.run("retrieve", &oracle, &[]));
    assert_eq!(v["entities"][0]["id"], "E00007");
}

#[test]
fn retrieve_unknown_ids_fail() {
    let f = Fixture::new(60, 5);
    let out = f.retrieve(&["--query-id", "missing"], &[]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing"));
    let out = f.run(
        "retrieve",
        &[
            "--question",
            "q",
            "--image-id",
            "img:nope",
            "--question-id",
            "qst:q00000",
        ],
        &[],
    );
    assert!(!out.status.success());
    let out = f.retrieve(&["--query-id", "q00000", "--oracle-entity", "E99999"], &[]);
    assert!(!out.status.success());
}

#[test]
fn eval_sweep_writes_reports() {
    let f = Fixture::new(300, 120);
    let v = ok_json(&f.eval(
        "rep",
        &["--sweep", "1:1,1:2,1:3,1:1:oracle,1:2:oracle,1:3:oracle"],
    ));
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert!(v["invariant_violations"].as_array().unwrap().is_empty());
    let row = |oracle: bool, n: u64| {
        rows.iter()
            .find(|r| r["oracle"] == oracle && r["n"] == n)
            .unwrap()
    };
    for oracle in [false, true] {
        let e: Vec<f64> = (1..=3)
            .map(|n| row(oracle, n)["evidence_hit_rate"].as_f64().unwrap())
            .collect();
        assert!(e[0] <= e[1] && e[1] <= e[2], "{e:?}");
    }
    for n in 1..=3 {
        assert!(row(true, n)["accuracy"].as_f64() >= row(false, n)["accuracy"].as_f64());
    }
    assert!(row(false, 1)["recall_at"]["1"].as_f64().is_some());
    assert!(row(true, 1)["recall_at"].is_null());

    let csv = fs::read_to_string(f.path("rep").join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(
        csv.starts_with("model-config,k,n,oracle,R@1,R@10,R@20,R@50,accuracy,evidence_hit_rate\n")
    );
    assert!(fs::read_to_string(f.path("rep").join("report.md"))
        .unwrap()
        .starts_with("| model-config |"));

    // scheduling does not change the report
    let mut args = vec!["--threads".to_string(), "1".to_string(), "eval".to_string()];
    args.extend(f.engine_args());
    let raw = f.path("raw");
    for a in [
        "--queries",
        s(&raw.join("queries.jsonl")),
        "--records",
        s(&raw.join("eval.jsonl")),
        "--out-dir",
        s(&f.path("rep1")),
        "--sweep",
        "1:1,1:2,1:3,1:1:oracle,1:2:oracle,1:3:oracle",
    ] {
        args.push(a.to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok_json(&hiret(&refs, &[]));
    for file in ["report.csv", "report.md", "report.json"] {
        assert_eq!(
            fs::read(f.path("rep").join(file)).unwrap(),
            fs::read(f.path("rep1").join(file)).unwrap()
        );
    }
}

#[test]
fn eval_with_external_answerer() {
    let f = Fixture::new(60, 8);
    let v = ok_json(&f.eval("rep", &["--answerer", "cmd:cat", "--sweep", "2:2"]));
    assert_eq!(v["rows"][0]["model"], "cmd:cat");
    assert_eq!(v["rows"][0]["evaluated"], 8);

    let v = ok_json(&f.eval("rep2", &["--answerer", "const:unknown"]));
    assert_eq!(v["rows"][0]["accuracy"], 0.0);

    let out = f.eval("rep3", &["--answerer", "oracle-llm"]);
    assert!(!out.status.success());
}

#[test]
fn eval_with_empty_queries_fails() {
    let f = Fixture::new(40, 4);
    let empty = f.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let records = f.path("raw").join("eval.jsonl");
    let out = f.run(
        "eval",
        &[
            "--queries",
            s(&empty),
            "--records",
            s(&records),
            "--out-dir",
            s(&f.path("rep")),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no queries"));

    // queries present but none has an eval record
    let out = f.run(
        "eval",
        &[
            "--queries",
            s(&f.path("raw").join("queries.jsonl")),
            "--records",
            s(&empty),
            "--out-dir",
            s(&f.path("rep")),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no queries evaluated"));
}

#[test]
fn missing_inputs_are_reported_before_work() {
    let f = Fixture::new(30, 3);
    let out = hiret(
        &[
            "retrieve",
            "--index",
            s(&f.path("titles.whnw")),
            "--kb",
            s(&f.path("kb")),
            "--images",
            s(&f.path("absent.wemb")),
            "--questions",
            s(&f.path("raw").join("questions.wemb")),
            "--test-embedder-seed",
            "1",
            "--question",
            "q",
            "--image-id",
            "a",
            "--question-id",
            "b",
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("absent.wemb"));
}
