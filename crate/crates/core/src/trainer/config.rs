use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffrep::RetrievalConfig;
use crate::error::{Error, Result};
use crate::numerics::optim::AdamWConfig;
use crate::projector::{DEFAULT_HIDDEN, PAPER_HIDDEN};
use crate::toylm::{PromptFlags, SamplingConfig};

/// Which signals reach the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NonPerso,
    RagTextOnly,
    HisOnly,
    DiffOnly,
    HisDiff,
    HisDiffNoText,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::NonPerso,
        Mode::RagTextOnly,
        Mode::HisOnly,
        Mode::DiffOnly,
        Mode::HisDiff,
        Mode::HisDiffNoText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NonPerso => "non_perso",
            Mode::RagTextOnly => "rag_text_only",
            Mode::HisOnly => "his_only",
            Mode::DiffOnly => "diff_only",
            Mode::HisDiff => "his_diff",
            Mode::HisDiffNoText => "his_diff_no_text",
        }
    }

    /// `(use_text, use_his, use_diff)`.
    pub fn sources(self) -> (bool, bool, bool) {
        match self {
            Mode::NonPerso => (false, false, false),
            Mode::RagTextOnly => (true, false, false),
            Mode::HisOnly => (true, true, false),
            Mode::DiffOnly => (true, false, true),
            Mode::HisDiff => (true, true, true),
            Mode::HisDiffNoText => (false, true, true),
        }
    }

    pub fn uses_embeddings(self) -> bool {
        let (_, h, d) = self.sources();
        h || d
    }

    /// The same embedding sources with history text toggled.
    pub fn with_text(self, text: bool) -> Mode {
        match (self, text) {
            (Mode::HisDiff | Mode::HisDiffNoText, true) => Mode::HisDiff,
            (Mode::HisDiff | Mode::HisDiffNoText, false) => Mode::HisDiffNoText,
            (Mode::NonPerso | Mode::RagTextOnly, true) => Mode::RagTextOnly,
            (Mode::NonPerso | Mode::RagTextOnly, false) => Mode::NonPerso,
            (m, _) => m,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// How embeddings are distilled before projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    /// Raw 1024-dim embeddings go straight into the projectors.
    None,
    /// Autoencoder without the sparsity term.
    Ae,
    Sae,
}

impl Refinement {
    pub const ALL: [Refinement; 3] = [Refinement::None, Refinement::Ae, Refinement::Sae];

    pub fn name(self) -> &'static str {
        match self {
            Refinement::None => "none",
            Refinement::Ae => "ae",
            Refinement::Sae => "sae",
        }
    }
}

impl fmt::Display for Refinement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Refinement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Refinement::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown refinement {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

pub const MAX_EPOCHS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
    pub retrieval: RetrievalConfig,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub max_epochs: usize,
    pub accumulation: usize,
    pub latent_dim: usize,
    pub projector_hidden: usize,
    pub slot_multiplicity: usize,
    pub guidance: bool,
    pub mode: Mode,
    pub refinement: Refinement,
    /// Prompt positions kept free for generated text in inference plans.
    pub generation_reserve: usize,
    /// Decoding used for checkpoint selection.
    pub validation_sampling: SamplingConfig,
    /// Decoding used for test predictions.
    pub test_sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let (lr, hidden) = match p {
            Preset::Desk => (1e-3, DEFAULT_HIDDEN),
            Preset::Paper => (1e-5, PAPER_HIDDEN),
        };
        Self {
            lambda: 100.0,
            gamma: 1e-3,
            rho: 0.05,
            retrieval: RetrievalConfig::default(),
            lr,
            warmup_ratio: 0.01,
            optimizer: AdamWConfig::default(),
            epochs: 5,
            max_epochs: MAX_EPOCHS,
            accumulation: 16,
            latent_dim: crate::sae::LATENT_DIM,
            projector_hidden: hidden,
            slot_multiplicity: 1,
            guidance: true,
            mode: Mode::HisDiff,
            refinement: Refinement::Sae,
            generation_reserve: 64,
            validation_sampling: SamplingConfig::greedy(256),
            test_sampling: SamplingConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) || !self.lambda.is_finite() || !self.gamma.is_finite() {
            return bad(format!("lambda and gamma must be finite and >= 0, got {} and {}", self.lambda, self.gamma));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if self.epochs == 0 || self.epochs > self.max_epochs || self.max_epochs > MAX_EPOCHS {
            return bad(format!(
                "epochs must be in 1..={} (max {MAX_EPOCHS}), got {}",
                self.max_epochs, self.epochs
            ));
        }
        if self.accumulation == 0 || self.latent_dim == 0 || self.projector_hidden == 0 || self.slot_multiplicity == 0 {
            return bad("accumulation, latent_dim, projector_hidden and slot_multiplicity must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("invalid lr {} or warmup ratio {}", self.lr, self.warmup_ratio));
        }
        if !self.mode.uses_embeddings() && self.refinement != Refinement::None {
            return bad(format!(
                "refinement {} needs an embedding source but mode {} has none",
                self.refinement, self.mode
            ));
        }
        self.validation_sampling.validate()?;
        self.test_sampling.validate()
    }

    pub fn flags(&self) -> PromptFlags {
        let (use_text, use_his, use_diff) = self.mode.sources();
        PromptFlags {
            use_text,
            use_his,
            use_diff,
            guidance: self.guidance,
            slot_multiplicity: self.slot_multiplicity,
        }
    }

    /// Weight on the sparsity term after the refinement choice.
    pub fn effective_gamma(&self) -> f64 {
        match self.refinement {
            Refinement::Sae => self.gamma,
            _ => 0.0,
        }
    }

    /// Same settings for another mode; refinement is reset to `none` for
    /// modes without embeddings.
    pub fn for_mode(&self, mode: Mode, refinement: Refinement) -> Self {
        let refinement = if mode.uses_embeddings() { refinement } else { Refinement::None };
        Self {
            mode,
            refinement,
            ..self.clone()
        }
    }
}

/// `L_gen + λ·(L_recon + γ·L_sparse)`.
pub fn total_loss(l_gen: f64, l_recon: f64, l_sparse: f64, lambda: f64, gamma: f64) -> f64 {
    l_gen + lambda * (l_recon + gamma * l_sparse)
}
