//! User-specific and difference-aware embeddings per retrieved history.
//!
//! For a history review `y` of item `i` by the target user, `e_his = f(y)`
//! and `e_diff = (1/m) Σ_j (e_his − f(y_j))` over the `m` peer reviews of
//! `i`; `e_diff` is the zero vector when the item has no peers.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::blob::BlobFile;
use crate::corpus::{Corpus, Review};
use crate::embedder::{EmbedCache, EmbedderSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffRepresentation {
    pub e_his: Vec<f64>,
    pub e_diff: Vec<f64>,
    pub item_id: String,
    pub peer_count: usize,
}

impl DiffRepresentation {
    /// Rounds both vectors to `f32` precision, the precision of the on-disk cache.
    pub fn round_to_f32(&mut self) {
        for v in self.e_his.iter_mut().chain(self.e_diff.iter_mut()) {
            *v = f64::from(*v as f32);
        }
    }
}

pub fn user_specific(spec: &EmbedderSpec, review: &Review) -> Vec<f64> {
    crate::embedder::embed_text(spec, &review.text)
}

/// Mean of `e_his − p` over `peers`; zeros when `peers` is empty.
pub fn difference(e_his: &[f64], peers: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; e_his.len()];
    for p in peers {
        if p.len() != e_his.len() {
            return Err(Error::dim("difference", &[e_his.len()], &[p.len()]));
        }
        for ((a, e), q) in acc.iter_mut().zip(e_his).zip(p) {
            *a += e - q;
        }
    }
    if !peers.is_empty() {
        let m = peers.len() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
    }
    Ok(acc)
}

/// Retrieval knobs for building representations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub m_max: usize,
    /// Only use history reviews older than the target review.
    pub history_before_target: bool,
    /// Only use peer reviews older than the target review.
    pub peers_before_target: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 8,
            m_max: 16,
            history_before_target: true,
            peers_before_target: false,
        }
    }
}

/// Builds representations while memoizing text embeddings.
pub struct DiffBuilder<'a> {
    spec: &'a EmbedderSpec,
    cache: EmbedCache,
}

impl<'a> DiffBuilder<'a> {
    pub fn new(spec: &'a EmbedderSpec) -> Self {
        Self {
            spec,
            cache: EmbedCache::new(),
        }
    }

    pub fn with_cache(spec: &'a EmbedderSpec, cache: EmbedCache) -> Self {
        Self { spec, cache }
    }

    pub fn into_cache(self) -> EmbedCache {
        self.cache
    }

    pub fn embed(&mut self, text: &str) -> Vec<f64> {
        self.cache.get_or_embed(self.spec, text)
    }

    /// One representation per history in `histories`, same order.
    pub fn for_histories(
        &mut self,
        corpus: &Corpus,
        user: &str,
        histories: &[Review],
        m_max: usize,
        peers_before: Option<i64>,
    ) -> Result<Vec<DiffRepresentation>> {
        histories
            .iter()
            .map(|h| {
                let e_his = self.embed(&h.text);
                let peers: Vec<Vec<f64>> = corpus
                    .peers(&h.item_id, user, m_max, peers_before)
                    .iter()
                    .map(|p| self.embed(&p.text))
                    .collect();
                Ok(DiffRepresentation {
                    e_diff: difference(&e_his, &peers)?,
                    e_his,
                    item_id: h.item_id.clone(),
                    peer_count: peers.len(),
                })
            })
            .collect()
    }

    pub fn build_all(
        &mut self,
        corpus: &Corpus,
        user: &str,
        target_item: &str,
        k: usize,
        m_max: usize,
    ) -> Result<Vec<DiffRepresentation>> {
        let h = corpus.retrieve_recent(user, target_item, k);
        self.for_histories(corpus, user, &h.reviews, m_max, None)
    }
}

/// Representations for the `k` most recent histories of `user`, excluding `target_item`.
pub fn build_all(
    corpus: &Corpus,
    spec: &EmbedderSpec,
    user: &str,
    target_item: &str,
    k: usize,
    m_max: usize,
) -> Result<Vec<DiffRepresentation>> {
    DiffBuilder::new(spec).build_all(corpus, user, target_item, k, m_max)
}

const CACHE_KIND: &str = "diffrep-cache";

/// Key a representation cache is valid for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffCacheKey {
    pub corpus_hash: String,
    pub spec: EmbedderSpec,
    pub retrieval: RetrievalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CachedRep {
    item_id: String,
    peer_count: usize,
}

/// Precomputed representations per target review index.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffCache {
    pub key: DiffCacheKey,
    pub instances: Vec<(usize, Vec<DiffRepresentation>)>,
}

impl DiffCache {
    pub fn write(&self, path: &Path) -> Result<()> {
        let dim = self.key.spec.dim;
        let layout: Vec<(usize, Vec<CachedRep>)> = self
            .instances
            .iter()
            .map(|(idx, reps)| {
                let r = reps
                    .iter()
                    .map(|d| CachedRep {
                        item_id: d.item_id.clone(),
                        peer_count: d.peer_count,
                    })
                    .collect();
                (*idx, r)
            })
            .collect();
        let mut his = Vec::new();
        let mut diff = Vec::new();
        for (_, reps) in &self.instances {
            for d in reps {
                his.extend_from_slice(&d.e_his);
                diff.extend_from_slice(&d.e_diff);
            }
        }
        let rows = his.len() / dim;
        let mut f = BlobFile::new(CACHE_KIND, 1, json!({ "key": self.key, "layout": layout, "rows": rows }));
        if rows > 0 {
            f.push("e_his", Tensor::matrix(rows, dim, his)?);
            f.push("e_diff", Tensor::matrix(rows, dim, diff)?);
        }
        f.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = BlobFile::read(path, CACHE_KIND)?;
        let bad = |m: String| Error::Format(format!("{CACHE_KIND}: {m}"));
        let key: DiffCacheKey =
            serde_json::from_value(f.meta["key"].clone()).map_err(|e| bad(e.to_string()))?;
        let layout: Vec<(usize, Vec<CachedRep>)> =
            serde_json::from_value(f.meta["layout"].clone()).map_err(|e| bad(e.to_string()))?;
        let rows = f.meta["rows"].as_u64().unwrap_or(0) as usize;
        let dim = key.spec.dim;
        let (his, diff) = if rows > 0 {
            (f.get("e_his")?.data().to_vec(), f.get("e_diff")?.data().to_vec())
        } else {
            (Vec::new(), Vec::new())
        };
        let mut row = 0;
        let mut instances = Vec::with_capacity(layout.len());
        for (idx, reps) in layout {
            let mut out = Vec::with_capacity(reps.len());
            for r in reps {
                if row >= rows {
                    return Err(bad("layout exceeds payload".into()));
                }
                out.push(DiffRepresentation {
                    e_his: his[row * dim..(row + 1) * dim].to_vec(),
                    e_diff: diff[row * dim..(row + 1) * dim].to_vec(),
                    item_id: r.item_id,
                    peer_count: r.peer_count,
                });
                row += 1;
            }
            instances.push((idx, out));
        }
        Ok(Self { key, instances })
    }
}
