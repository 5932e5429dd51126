//! ROUGE-1, corpus BLEU, an exact-match METEOR variant, and the
//! uniqueness user split.
//!
//! All text metrics share one tokenizer: lowercase, then maximal runs of
//! alphanumeric characters.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embedder::{EmbedCache, EmbedderSpec};
use crate::error::{Error, Result};

const BLEU_FLOOR: f64 = 1e-9;

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn counts<'a>(tokens: impl IntoIterator<Item = &'a [String]>) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let c = counts(cand.windows(n));
    let r = if reference.len() >= n { counts(reference.windows(n)) } else { HashMap::new() };
    let matched = c.iter().map(|(g, &k)| k.min(*r.get(g).unwrap_or(&0))).sum();
    (matched, cand.len() + 1 - n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rouge1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn rouge1(candidate: &str, reference: &str) -> Rouge1 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Rouge1::default();
    }
    let (overlap, _) = clipped_overlap(&c, &r, 1);
    let precision = overlap as f64 / c.len() as f64;
    let recall = overlap as f64 / r.len() as f64;
    let f1 = if overlap == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Rouge1 { precision, recall, f1 }
}

/// Corpus BLEU-4 on a 0–100 scale with zero precisions floored at `1e-9`.
pub fn bleu(candidates: &[String], references: &[String]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "bleu: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Data("bleu: empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (tokenize(c), tokenize(r));
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let (m, t) = clipped_overlap(&c, &r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let log_mean = (0..4)
        .map(|i| {
            let p = if total[i] == 0 { 0.0 } else { matched[i] as f64 / total[i] as f64 };
            p.max(BLEU_FLOOR).ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_mean.exp())
}

/// Exact-match METEOR: greedy left-to-right alignment, `F = 10PR/(R + 9P)`,
/// fragmentation penalty `0.5·(chunks/m)³`.
pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let mut used = vec![false; r.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in c.iter().enumerate() {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *tok) {
            used[j] = true;
            alignment.push((i, j));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge1: Rouge1,
    pub bleu: f64,
    pub meteor: f64,
    pub count: usize,
}

/// Instance-mean ROUGE-1 and METEOR, corpus BLEU.
pub fn evaluate(candidates: &[String], references: &[String]) -> Result<MetricReport> {
    let b = bleu(candidates, references)?;
    let n = candidates.len() as f64;
    let mut r = Rouge1::default();
    let mut meteor = 0.0;
    for (c, rf) in candidates.iter().zip(references) {
        let s = rouge1(c, rf);
        r.precision += s.precision;
        r.recall += s.recall;
        r.f1 += s.f1;
        meteor += meteor_lite(c, rf);
    }
    Ok(MetricReport {
        rouge1: Rouge1 {
            precision: r.precision / n,
            recall: r.recall / n,
            f1: r.f1 / n,
        },
        bleu: b,
        meteor: meteor / n,
        count: candidates.len(),
    })
}

/// Fixed-width table, one row per labelled report.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>5}\n",
        "mode", "R1-P", "R1-R", "R1-F1", "METEOR", "BLEU"
    );
    for (label, m) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>5.2}  (n={})\n",
            label, m.rouge1.precision, m.rouge1.recall, m.rouge1.f1, m.meteor, m.bleu, m.count
        ));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniquenessSplit {
    pub unique: Vec<String>,
    pub non_unique: Vec<String>,
}

/// Users ranked by Euclidean distance of their mean review embedding from
/// the mean over users; the first `ceil(n/2)` are unique.
pub fn uniqueness_split(corpus: &Corpus, spec: &EmbedderSpec) -> Result<UniquenessSplit> {
    if corpus.num_users() < 2 {
        return Err(Error::Data("uniqueness split needs at least two users".into()));
    }
    let mut cache = EmbedCache::new();
    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for user in corpus.users() {
        let idx = corpus.user_review_indices(user);
        let mut acc = vec![0.0; spec.dim];
        for &i in idx {
            let e = cache.get_or_embed(spec, &corpus.review(i).text);
            acc.iter_mut().zip(&e).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= idx.len() as f64);
        means.insert(user, acc);
    }
    let mut global = vec![0.0; spec.dim];
    for m in means.values() {
        global.iter_mut().zip(m).for_each(|(g, v)| *g += v);
    }
    global.iter_mut().for_each(|g| *g /= means.len() as f64);
    let mut ranked: Vec<(f64, &str)> = means
        .iter()
        .map(|(u, m)| {
            let d = m.iter().zip(&global).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            (d, *u)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let half = ranked.len().div_ceil(2);
    let names = |s: &[(f64, &str)]| s.iter().map(|(_, u)| u.to_string()).collect();
    Ok(UniquenessSplit {
        unique: names(&ranked[..half]),
        non_unique: names(&ranked[half..]),
    })
}
