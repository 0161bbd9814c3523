//! JSON-lines reading and writing.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// A line that failed to parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadLine {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

/// Parses every non-blank line. Bad lines are collected, not fatal.
pub fn read_jsonl<T: DeserializeOwned>(
    path: impl AsRef<Path>,
) -> io::Result<(Vec<T>, Vec<BadLine>)> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

pub fn parse_jsonl<T: DeserializeOwned, R: BufRead>(
    reader: R,
) -> io::Result<(Vec<T>, Vec<BadLine>)> {
    let mut items = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => items.push(v),
            Err(e) => bad.push(BadLine {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok((items, bad))
}

pub fn write_jsonl<T: Serialize>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = T>,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
