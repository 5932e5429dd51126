use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{GenConfig, SplitPolicy};
use crate::embedder::EmbedderSpec;
use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::toylm::{LmConfig, PretrainConfig};
use crate::trainer::{Preset, TrainConfig};

/// File locations; unset entries resolve inside the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub main: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    pub template: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: GenConfig,
    pub split: SplitPolicy,
    pub train: TrainConfig,
    pub lm: LmConfig,
    pub pretrain: PretrainConfig,
    pub embedder: EmbedderSpec,
    /// Pretraining documents exclude validation and test targets.
    pub pretrain_excludes_eval: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            synth: GenConfig::default(),
            split: SplitPolicy {
                train_per_user: 6,
                ..Default::default()
            },
            train: TrainConfig::default(),
            lm: LmConfig::default(),
            pretrain: PretrainConfig::default(),
            embedder: EmbedderSpec::default(),
            pretrain_excludes_eval: true,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub mode: Option<String>,
    pub refinement: Option<String>,
    pub preset: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(p) = &o.preset {
            let base = TrainConfig::preset(p.parse::<Preset>()?);
            self.train.lr = base.lr;
            self.train.projector_hidden = base.projector_hidden;
        }
        if let Some(s) = o.seed {
            self.synth.seed = s;
            self.split.seed = s;
            self.train.seed = s;
            self.pretrain.seed = s;
            self.lm.seed = s;
        }
        if let Some(k) = o.k {
            self.train.retrieval.k = k;
        }
        if let Some(m) = &o.mode {
            self.train.mode = m.parse()?;
        }
        if let Some(r) = &o.refinement {
            self.train.refinement = r.parse()?;
        }
        if !self.train.mode.uses_embeddings() && o.refinement.is_none() {
            self.train.refinement = crate::trainer::Refinement::None;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.lm.validate()?;
        self.embedder.validate()?;
        if self.lm.d_lm == 0 || self.pretrain.lr <= 0.0 {
            return Err(Error::Config("invalid LM or pretraining settings".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

/// Concrete paths for one run.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub out: PathBuf,
    pub main: PathBuf,
    pub meta: PathBuf,
    pub cache: PathBuf,
    pub lm: PathBuf,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub reports: PathBuf,
    pub template: Option<PathBuf>,
}

impl Resolved {
    pub fn new(p: &Paths, out: &Path) -> Self {
        let or = |v: &Option<PathBuf>, d: &str| v.clone().unwrap_or_else(|| out.join(d));
        Self {
            out: out.to_path_buf(),
            main: or(&p.main, "corpus/main.jsonl"),
            meta: or(&p.meta, "corpus/meta.jsonl"),
            cache: or(&p.cache, "cache/diffrep.bin"),
            lm: or(&p.lm, "lm.bin"),
            checkpoint: or(&p.checkpoint, "checkpoint.bin"),
            predictions: or(&p.predictions, "predictions.jsonl"),
            reports: or(&p.reports, "reports"),
            template: p.template.clone(),
        }
    }
}
