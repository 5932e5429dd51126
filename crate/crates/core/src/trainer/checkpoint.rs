use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::TrainConfig;
use super::params::DepParams;
use crate::blob::BlobFile;
use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::numerics::optim::{AdamW, AdamWConfig};
use crate::numerics::Tensor;

const KIND: &str = "checkpoint";
const VERSION: u32 = 1;

/// Selected parameters with optimizer state and provenance. Parameters are
/// rounded to `f32` on creation so a reloaded checkpoint behaves bitwise
/// like the in-memory one.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: DepParams,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub metric: Option<f64>,
    pub lm_hash: String,
    pub embedder_hash: String,
    pub corpus_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    epoch: usize,
    metric: Option<f64>,
    lm_hash: String,
    embedder_hash: String,
    corpus_hash: String,
    multiplicity: usize,
    optimizer: AdamWConfig,
    optimizer_steps: u64,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        mut params: DepParams,
        mut optimizer: AdamW,
        epoch: usize,
        metric: Option<f64>,
        hashes: [String; 3],
    ) -> Self {
        params.round_to_f32();
        for m in optimizer.m.iter_mut().chain(optimizer.v.iter_mut()) {
            m.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
        let [lm_hash, embedder_hash, corpus_hash] = hashes;
        Self {
            config,
            params,
            optimizer,
            epoch,
            metric: metric.filter(|m| m.is_finite()),
            lm_hash,
            embedder_hash,
            corpus_hash,
        }
    }

    pub fn to_blob(&self) -> BlobFile {
        let meta = Meta {
            config: self.config.clone(),
            epoch: self.epoch,
            metric: self.metric,
            lm_hash: self.lm_hash.clone(),
            embedder_hash: self.embedder_hash.clone(),
            corpus_hash: self.corpus_hash.clone(),
            multiplicity: self.params.multiplicity,
            optimizer: self.optimizer.config.clone(),
            optimizer_steps: self.optimizer.t,
        };
        let mut b = BlobFile::new(KIND, VERSION, json!(meta));
        let named = self.params.named();
        for (n, t) in &named {
            b.push(n.clone(), Tensor::clone(t));
        }
        for (i, (n, t)) in named.iter().enumerate() {
            let shape = t.shape().to_vec();
            for (tag, moments) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
                let data = moments[i].clone();
                b.push(format!("adam.{tag}.{n}"), Tensor::new(shape.clone(), data).expect("moment shape"));
            }
        }
        b
    }

    pub fn from_blob(b: &BlobFile) -> Result<Self> {
        let meta: Meta = serde_json::from_value(b.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        let (params_t, adam_t): (Vec<_>, Vec<_>) = b.tensors.iter().cloned().partition(|(n, _)| !n.starts_with("adam."));
        let params = DepParams::from_named(&params_t, meta.multiplicity)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != params_t.len() || adam_t.len() != 2 * names.len() {
            return Err(Error::Format("checkpoint tensor list is inconsistent".into()));
        }
        let mut opt = AdamW::new(meta.optimizer, &params.sizes());
        opt.t = meta.optimizer_steps;
        for (i, n) in names.iter().enumerate() {
            opt.m[i] = b.get(&format!("adam.m.{n}"))?.data().to_vec();
            opt.v[i] = b.get(&format!("adam.v.{n}"))?.data().to_vec();
        }
        Ok(Self {
            config: meta.config,
            params,
            optimizer: opt,
            epoch: meta.epoch,
            metric: meta.metric,
            lm_hash: meta.lm_hash,
            embedder_hash: meta.embedder_hash,
            corpus_hash: meta.corpus_hash,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_blob().to_bytes()
    }

    /// SHA-256 of the serialized file.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_blob().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_blob(&BlobFile::read(path, KIND)?)
    }
}
