//! Frozen hashing embedder standing in for an external sentence encoder.
//!
//! Bit-level definition (all hashes are [`crate::hash::hash64`]):
//!
//! 1. Lowercase the text and collapse whitespace runs to one space. If
//!    nothing but whitespace remains the result is the all-zero vector.
//! 2. Pad with one leading and one trailing space and take every character
//!    n-gram for `n` in `ngram_min..=ngram_max`.
//! 3. For each n-gram `g` (UTF-8 bytes): bucket `b = hash64(seed, g) % num_buckets`,
//!    sign `+1` if `hash64(seed ^ SIGN_SALT, g)` is even, else `−1`.
//! 4. Each bucket projects onto `dim / 64` output coordinates: for
//!    `r = 0..dim/64`, `h = hash64(seed ^ PROJ_SALT, le32(b) ++ le32(r))`,
//!    position `h % dim`, sign `+1` if `h >> 63 == 0`, else `−1`.
//! 5. Sum signed contributions (integer-valued, so exact in `f64`) and
//!    L2-normalize.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{hash64, ContentHasher};

const SIGN_SALT: u64 = 0x5349_474e_5f53_414c;
const PROJ_SALT: u64 = 0x5052_4f4a_5f53_414c;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub num_buckets: u32,
    pub seed: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            dim: 1024,
            ngram_min: 3,
            ngram_max: 5,
            num_buckets: 1 << 18,
            seed: 0x00de_9e3b,
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 64 || self.dim % 64 != 0 {
            return Err(Error::Config(format!(
                "embedder dim must be a positive multiple of 64, got {}",
                self.dim
            )));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::Config(format!(
                "invalid n-gram range {}..={}",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.num_buckets == 0 {
            return Err(Error::Config("num_buckets must be positive".into()));
        }
        Ok(())
    }

    /// Fingerprint of the frozen function: its spec plus its output on fixed probes.
    pub fn param_hash(&self) -> String {
        let mut h = ContentHasher::new();
        h.update(&serde_json::to_vec(self).expect("spec serializes"));
        for probe in ["the quick brown fox", "loved it", "zz"] {
            h.update_f64s(&embed_text(self, probe));
        }
        h.finish()
    }
}

fn normalize_text(text: &str) -> Option<Vec<char>> {
    let lower = text.to_lowercase();
    let mut chars = vec![' '];
    let mut last_space = true;
    for c in lower.chars() {
        if c.is_whitespace() {
            if !last_space {
                chars.push(' ');
                last_space = true;
            }
        } else {
            chars.push(c);
            last_space = false;
        }
    }
    if chars.len() == 1 {
        return None;
    }
    if !last_space {
        chars.push(' ');
    }
    Some(chars)
}

/// Signed bucket counts of the text's character n-grams.
fn bucket_counts(spec: &EmbedderSpec, chars: &[char]) -> BTreeMap<u32, i64> {
    let mut counts = BTreeMap::new();
    let mut buf = String::new();
    for n in spec.ngram_min..=spec.ngram_max {
        if chars.len() < n {
            break;
        }
        for w in chars.windows(n) {
            buf.clear();
            buf.extend(w);
            let bytes = buf.as_bytes();
            let bucket = (hash64(spec.seed, bytes) % u64::from(spec.num_buckets)) as u32;
            let sign = if hash64(spec.seed ^ SIGN_SALT, bytes) & 1 == 0 {
                1
            } else {
                -1
            };
            *counts.entry(bucket).or_insert(0) += sign;
        }
    }
    counts
}

/// Embeds `text` into a unit-norm vector of length `spec.dim`
/// (all zeros for empty or whitespace-only text).
pub fn embed_text(spec: &EmbedderSpec, text: &str) -> Vec<f64> {
    let mut out = vec![0.0; spec.dim];
    let Some(chars) = normalize_text(text) else {
        return out;
    };
    let per_bucket = spec.dim / 64;
    let mut key = [0u8; 8];
    for (bucket, count) in bucket_counts(spec, &chars) {
        if count == 0 {
            continue;
        }
        key[..4].copy_from_slice(&bucket.to_le_bytes());
        for r in 0..per_bucket as u32 {
            key[4..].copy_from_slice(&r.to_le_bytes());
            let h = hash64(spec.seed ^ PROJ_SALT, &key);
            let pos = (h % spec.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            out[pos] += sign * count as f64;
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

const CACHE_FORMAT: &str = "dep-embed-cache";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    spec: EmbedderSpec,
}

/// Text-hash keyed embedding cache. On disk: a JSON header line, then one
/// `hex(hash)<TAB>base64(f64 LE values)` line per text.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct EmbedCache {
    entries: BTreeMap<u64, Vec<f64>>,
}

impl EmbedCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn key(spec: &EmbedderSpec, text: &str) -> u64 {
        hash64(spec.seed, text.as_bytes())
    }

    pub fn get_or_embed(&mut self, spec: &EmbedderSpec, text: &str) -> Vec<f64> {
        self.entries
            .entry(Self::key(spec, text))
            .or_insert_with(|| embed_text(spec, text))
            .clone()
    }

    pub fn write(&self, spec: &EmbedderSpec, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            spec: spec.clone(),
        };
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", serde_json::to_string(&header).expect("header")).map_err(io)?;
        let b64 = base64::engine::general_purpose::STANDARD;
        for (k, v) in &self.entries {
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            writeln!(w, "{k:016x}\t{}", b64.encode(bytes)).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Loads a cache; fails if the header's spec differs from `spec`.
    pub fn read(spec: &EmbedderSpec, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty embed cache".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: CacheHeader = serde_json::from_str(&first)
            .map_err(|e| Error::Format(format!("embed cache header: {e}")))?;
        if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "unsupported embed cache {} v{}",
                header.format, header.version
            )));
        }
        if header.spec != *spec {
            return Err(Error::Format("embed cache was built with a different spec".into()));
        }
        let b64 = base64::engine::general_purpose::STANDARD;
        let mut entries = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let bad = || Error::Format(format!("embed cache line {}", i + 2));
            let (k, v) = line.split_once('\t').ok_or_else(bad)?;
            let key = u64::from_str_radix(k, 16).map_err(|_| bad())?;
            let bytes = b64.decode(v).map_err(|_| bad())?;
            if bytes.len() != spec.dim * 8 {
                return Err(bad());
            }
            let vec = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.insert(key, vec);
        }
        Ok(Self { entries })
    }
}
