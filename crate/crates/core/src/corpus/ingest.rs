use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use super::{validate_review, Corpus, Item, Review};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RejectedLine {
    pub file: &'static str,
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub reviews: usize,
    pub items: usize,
    pub rejected: Vec<RejectedLine>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a main (reviews) and meta (items) line-delimited JSON pair.
pub fn ingest(main_path: &Path, meta_path: &Path) -> Result<(Corpus, IngestReport)> {
    let main = read(main_path)?;
    let meta = read(meta_path)?;
    parse_corpus(&main, &meta)
}

/// Parses file contents, keeping valid records and reporting the rest.
pub fn parse_corpus(main: &str, meta: &str) -> Result<(Corpus, IngestReport)> {
    let mut report = IngestReport::default();
    let mut items = Vec::new();
    let mut item_ids = BTreeSet::new();
    for (n, line) in meta.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let reject = |reason: String| RejectedLine {
            file: "meta",
            line: n + 1,
            reason,
        };
        match serde_json::from_str::<Item>(line) {
            Ok(it) if it.item_id.is_empty() => report.rejected.push(reject("empty item_id".into())),
            Ok(it) if !item_ids.insert(it.item_id.clone()) => {
                report
                    .rejected
                    .push(reject(format!("duplicate item_id {}", it.item_id)));
            }
            Ok(it) => items.push(it),
            Err(e) => report.rejected.push(reject(e.to_string())),
        }
    }
    let mut reviews = Vec::new();
    let mut keys = BTreeSet::new();
    for (n, line) in main.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let reject = |reason: String| RejectedLine {
            file: "main",
            line: n + 1,
            reason,
        };
        let r = match serde_json::from_str::<Review>(line) {
            Ok(r) => r,
            Err(e) => {
                report.rejected.push(reject(e.to_string()));
                continue;
            }
        };
        if let Err(e) = validate_review(&r) {
            report.rejected.push(reject(e.to_string()));
        } else if !item_ids.contains(&r.item_id) {
            report
                .rejected
                .push(reject(format!("unknown item {}", r.item_id)));
        } else if !keys.insert((r.user_id.clone(), r.item_id.clone(), r.timestamp)) {
            report.rejected.push(reject("duplicate (user, item, timestamp)".into()));
        } else {
            reviews.push(r);
        }
    }
    if reviews.is_empty() {
        return Err(Error::Data("no valid review records".into()));
    }
    report.reviews = reviews.len();
    report.items = items.len();
    Ok((Corpus::new(reviews, items)?, report))
}

/// Canonical `(main, meta)` serialization, one JSON record per line.
pub fn write_corpus(corpus: &Corpus) -> (String, String) {
    let mut main = String::new();
    for r in corpus.reviews() {
        main.push_str(&serde_json::to_string(r).expect("review serializes"));
        main.push('\n');
    }
    let mut meta = String::new();
    for it in corpus.items() {
        meta.push_str(&serde_json::to_string(it).expect("item serializes"));
        meta.push('\n');
    }
    (main, meta)
}
