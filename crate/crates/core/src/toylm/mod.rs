//! Small frozen decoder-only transformer over bytes.
//!
//! Pre-LN GPT blocks with learned absolute positions and an untied output
//! head. Soft prompt vectors replace the embedding rows of slot placeholder
//! tokens before positions are added.

mod infer;
mod pretrain;
mod prompt;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::blob::BlobFile;
use crate::error::{Error, Result};
use crate::hash::{derive_seed, ContentHasher};
use crate::numerics::init::normal;
use crate::numerics::{Graph, Tensor, Var};

pub use infer::{
    generate, next_token_distribution, sample_next, InferenceSession, SamplingConfig,
};
pub use pretrain::{pretrain_frozen, pretraining_plans, PretrainConfig, PretrainReport};
pub use prompt::{assemble_prompt, PromptFlags, PromptInput, PromptPlan, Slot, SlotKind, Template};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const HIS_START: usize = 259;
pub const HIS_END: usize = 260;
pub const DIFF_START: usize = 261;
pub const DIFF_END: usize = 262;
pub const HIS_SLOT: usize = 263;
pub const DIFF_SLOT: usize = 264;
pub const VOCAB: usize = 265;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub mlp_mult: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: VOCAB,
            d_lm: 64,
            layers: 2,
            heads: 2,
            context: 512,
            mlp_mult: 4,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab != VOCAB {
            return Err(Error::Config(format!("vocab must be {VOCAB}, got {}", self.vocab)));
        }
        if self.d_lm == 0 || self.heads == 0 || self.d_lm % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_lm {} not divisible by heads {}",
                self.d_lm, self.heads
            )));
        }
        if self.layers == 0 || self.context < 2 || self.mlp_mult == 0 {
            return Err(Error::Config("layers, context and mlp_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_lm / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub w_qkv: T,
    pub b_qkv: T,
    pub w_o: T,
    pub b_o: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w_fc: T,
    pub b_fc: T,
    pub w_proj: T,
    pub b_proj: T,
}

impl<T> BlockParams<T> {
    fn fields(&self) -> [(&'static str, &T); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }

    fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            ln1_g: f("ln1_g", &self.ln1_g),
            ln1_b: f("ln1_b", &self.ln1_b),
            w_qkv: f("w_qkv", &self.w_qkv),
            b_qkv: f("b_qkv", &self.b_qkv),
            w_o: f("w_o", &self.w_o),
            b_o: f("b_o", &self.b_o),
            ln2_g: f("ln2_g", &self.ln2_g),
            ln2_b: f("ln2_b", &self.ln2_b),
            w_fc: f("w_fc", &self.w_fc),
            b_fc: f("b_fc", &self.b_fc),
            w_proj: f("w_proj", &self.w_proj),
            b_proj: f("b_proj", &self.b_proj),
        }
    }
}

/// Every LM parameter, generic over storage (tensors or graph handles).
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_g: T,
    pub lnf_b: T,
    pub w_head: T,
    pub b_head: T,
}

impl<T> LmParams<T> {
    /// `(name, value)` in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".into(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.fields() {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_head".into(), &self.w_head));
        out.push(("b_head".into(), &self.b_head));
        out
    }

    /// Mutable values in the order of [`LmParams::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_head, &mut self.b_head]);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> LmParams<U> {
        LmParams {
            tok_emb: f("tok_emb", &self.tok_emb),
            pos_emb: f("pos_emb", &self.pos_emb),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            lnf_g: f("lnf_g", &self.lnf_g),
            lnf_b: f("lnf_b", &self.lnf_b),
            w_head: f("w_head", &self.w_head),
            b_head: f("b_head", &self.b_head),
        }
    }
}

/// Whether a parameter (by short field name) is a matrix that takes weight decay.
pub(crate) fn is_weight(name: &str) -> bool {
    let short = name.rsplit('.').next().unwrap_or(name);
    short.starts_with("w_") || short.ends_with("_emb")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub config: LmConfig,
    pub params: LmParams<Arc<Tensor>>,
}

const LM_KIND: &str = "toylm";

impl LmState {
    /// Seeded initial weights, rounded to `f32` so a saved state reloads bitwise.
    /// Matrices are `N(0, 0.02)` (residual projections scaled by `1/√(2L)`),
    /// layer-norm gains one, biases zero.
    pub fn init(config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "toylm.init", 0));
        let d = config.d_lm;
        let h = d * config.mlp_mult;
        let resid = 0.02 / ((2 * config.layers) as f64).sqrt();
        let mut n = |shape: &[usize], std: f64| Arc::new(normal(&mut rng, shape, std));
        let tok_emb = n(&[VOCAB, d], 0.02);
        let pos_emb = n(&[config.context, d], 0.01);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let w_qkv = n(&[d, 3 * d], 0.02);
            let w_o = n(&[d, d], resid);
            let w_fc = n(&[d, h], 0.02);
            let w_proj = n(&[h, d], resid);
            blocks.push(BlockParams {
                ln1_g: Arc::new(Tensor::full(&[d], 1.0)),
                ln1_b: Arc::new(Tensor::zeros(&[d])),
                w_qkv,
                b_qkv: Arc::new(Tensor::zeros(&[3 * d])),
                w_o,
                b_o: Arc::new(Tensor::zeros(&[d])),
                ln2_g: Arc::new(Tensor::full(&[d], 1.0)),
                ln2_b: Arc::new(Tensor::zeros(&[d])),
                w_fc,
                b_fc: Arc::new(Tensor::zeros(&[h])),
                w_proj,
                b_proj: Arc::new(Tensor::zeros(&[d])),
            });
        }
        let w_head = n(&[d, VOCAB], 0.02);
        let mut s = Self {
            config: config.clone(),
            params: LmParams {
                tok_emb,
                pos_emb,
                blocks,
                lnf_g: Arc::new(Tensor::full(&[d], 1.0)),
                lnf_b: Arc::new(Tensor::zeros(&[d])),
                w_head,
                b_head: Arc::new(Tensor::zeros(&[VOCAB])),
            },
        };
        s.round_to_f32();
        Ok(s)
    }

    pub fn round_to_f32(&mut self) {
        for t in self.params.values_mut() {
            Arc::make_mut(t).round_to_f32();
        }
    }

    /// SHA-256 over the config and every parameter value.
    pub fn param_hash(&self) -> String {
        let mut h = ContentHasher::new();
        h.update(&serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.params.named() {
            h.update(name.as_bytes());
            h.update_f64s(t.data());
        }
        h.finish()
    }

    pub fn num_params(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_blob(&self) -> BlobFile {
        let mut f = BlobFile::new(LM_KIND, 1, json!({ "config": self.config }));
        for (name, t) in self.params.named() {
            f.push(name, (**t).clone());
        }
        f
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_blob().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BlobFile::read(path, LM_KIND)?;
        let config: LmConfig = serde_json::from_value(f.meta["config"].clone())
            .map_err(|e| Error::Format(format!("toylm config: {e}")))?;
        let mut s = Self::init(&config)?;
        let names: Vec<String> = s.params.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(s.params.values_mut()) {
            let t = f.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("toylm: {name} has shape {:?}", t.shape())));
            }
            *slot = Arc::new(t.clone());
        }
        Ok(s)
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LmParams<Var> {
        self.params.map(|_, t| g.leaf(Arc::clone(t), trainable))
    }

    /// Final-layer-normalized hidden states `[T × d]` for `tokens`, with the
    /// rows at `slot_positions` of the input embedding replaced by `slot_rows`.
    pub fn hidden(
        &self,
        g: &mut Graph,
        p: &LmParams<Var>,
        tokens: &[usize],
        slot_positions: &[usize],
        slot_rows: Option<Var>,
    ) -> Result<Var> {
        self.hidden_at(g, p, tokens, slot_positions, slot_rows, 0)
    }

    /// As [`LmState::hidden`] with positions starting at `offset`.
    pub fn hidden_at(
        &self,
        g: &mut Graph,
        p: &LmParams<Var>,
        tokens: &[usize],
        slot_positions: &[usize],
        slot_rows: Option<Var>,
        offset: usize,
    ) -> Result<Var> {
        let t = tokens.len();
        if t == 0 || t + offset > self.config.context {
            return Err(Error::Data(format!(
                "sequence length {t} at offset {offset} exceeds context {}",
                self.config.context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= VOCAB) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary")));
        }
        let mut x = g.gather_rows(p.tok_emb, tokens)?;
        match (slot_positions.is_empty(), slot_rows) {
            (true, _) => {}
            (false, Some(rows)) => x = g.replace_rows(x, slot_positions, rows)?,
            (false, None) => return Err(Error::Data("missing slot vectors".into())),
        }
        let positions: Vec<usize> = (offset..offset + t).collect();
        let pos = g.gather_rows(p.pos_emb, &positions)?;
        x = g.add(x, pos)?;
        let d = self.config.d_lm;
        let dh = self.config.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        for b in &p.blocks {
            let h = g.layer_norm(x, b.ln1_g, b.ln1_b)?;
            let qkv = g.matmul(h, b.w_qkv)?;
            let qkv = g.add(qkv, b.b_qkv)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for hd in 0..self.config.heads {
                let q = g.slice_cols(qkv, hd * dh, dh)?;
                let k = g.slice_cols(qkv, d + hd * dh, dh)?;
                let v = g.slice_cols(qkv, 2 * d + hd * dh, dh)?;
                let s = g.matmul_bt(q, k)?;
                let s = g.scale(s, inv);
                let a = g.causal_softmax(s)?;
                heads.push(g.matmul(a, v)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = g.matmul(cat, b.w_o)?;
            let o = g.add(o, b.b_o)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, b.ln2_g, b.ln2_b)?;
            let f = g.matmul(h, b.w_fc)?;
            let f = g.add(f, b.b_fc)?;
            let f = g.gelu(f);
            let f = g.matmul(f, b.w_proj)?;
            let f = g.add(f, b.b_proj)?;
            x = g.add(x, f)?;
        }
        g.layer_norm(x, p.lnf_g, p.lnf_b)
    }

    /// Head logits for the selected hidden rows.
    pub fn head(&self, g: &mut Graph, p: &LmParams<Var>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let sel = g.select_rows(hidden, rows)?;
        let l = g.matmul(sel, p.w_head)?;
        g.add(l, p.b_head)
    }

    /// Mean next-token cross-entropy over `plan`'s target span. LM
    /// parameters enter the graph as constants, so only `slot_rows`
    /// (one row per plan slot) can receive gradient.
    pub fn forward_loss(&self, g: &mut Graph, plan: &PromptPlan, slot_rows: Option<Var>) -> Result<Var> {
        let p = self.bind(g, false);
        self.loss_with(g, &p, plan, slot_rows)
    }

    pub(crate) fn loss_with(
        &self,
        g: &mut Graph,
        p: &LmParams<Var>,
        plan: &PromptPlan,
        slot_rows: Option<Var>,
    ) -> Result<Var> {
        let span = plan
            .target
            .clone()
            .filter(|r| !r.is_empty() && r.start >= 1)
            .ok_or_else(|| Error::Data("plan has no target span".into()))?;
        check_slot_rows(g, plan, slot_rows)?;
        let input = &plan.tokens[..span.end - 1];
        let positions: Vec<usize> = plan.slots.iter().map(|s| s.position).collect();
        let hidden = self.hidden(g, p, input, &positions, slot_rows)?;
        let rows: Vec<usize> = (span.start - 1..span.end - 1).collect();
        let logits = self.head(g, p, hidden, &rows)?;
        g.cross_entropy(logits, &plan.tokens[span])
    }

    /// Logits at every position of `tokens` (graph evaluation, no gradient).
    pub fn logits_all(&self, tokens: &[usize], slot_positions: &[usize], slot_rows: &[Vec<f64>]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let rows = if slot_rows.is_empty() {
            None
        } else {
            Some(g.constant(Tensor::from_rows(slot_rows)?))
        };
        let hidden = self.hidden(&mut g, &p, tokens, slot_positions, rows)?;
        let all: Vec<usize> = (0..tokens.len()).collect();
        let l = self.head(&mut g, &p, hidden, &all)?;
        Ok(g.value(l).clone())
    }
}

fn check_slot_rows(g: &Graph, plan: &PromptPlan, slot_rows: Option<Var>) -> Result<()> {
    match slot_rows {
        None if plan.slots.is_empty() => Ok(()),
        None => Err(Error::Data(format!("plan has {} slots but no slot vectors", plan.slots.len()))),
        Some(v) => {
            let shape = g.shape(v);
            if shape.len() != 2 || shape[0] != plan.slots.len() {
                return Err(Error::dim("slot_vectors", &[plan.slots.len()], shape));
            }
            Ok(())
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn tiny_config() -> LmConfig {
        LmConfig {
            d_lm: 8,
            layers: 2,
            heads: 2,
            context: 32,
            mlp_mult: 2,
            seed: 5,
            ..Default::default()
        }
    }

    pub fn plan_with_slots(tokens: Vec<usize>, slots: &[(usize, SlotKind)], target_len: usize) -> PromptPlan {
        let n = tokens.len();
        PromptPlan {
            slots: slots
                .iter()
                .enumerate()
                .map(|(i, &(position, kind))| Slot {
                    position,
                    kind,
                    history: i,
                    part: 0,
                })
                .collect(),
            target: Some(n - target_len..n),
            histories: slots.len(),
            tokens,
        }
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let a = LmState::init(&tiny_config()).unwrap();
        let b = LmState::init(&tiny_config()).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        let other = LmState::init(&LmConfig { seed: 6, ..tiny_config() }).unwrap();
        assert_ne!(a.param_hash(), other.param_hash());
        for (_, t) in a.params.named() {
            assert!(t.data().iter().all(|&v| f64::from(v as f32) == v));
        }
    }

    #[test]
    fn save_load_bitwise() {
        let a = LmState::init(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.bin");
        a.save(&p).unwrap();
        let b = LmState::load(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_hash(), b.param_hash());
    }

    #[test]
    fn uniform_head_gives_log_vocab() {
        let mut lm = LmState::init(&LmConfig::default()).unwrap();
        lm.params.w_head = Arc::new(Tensor::zeros(&[64, VOCAB]));
        lm.params.b_head = Arc::new(Tensor::zeros(&[VOCAB]));
        let plan = plan_with_slots(vec![1, 2, BOS, 104, 105, EOS], &[], 3);
        let mut g = Graph::new();
        let l = lm.forward_loss(&mut g, &plan, None).unwrap();
        assert!((g.value(l).item() - (VOCAB as f64).ln()).abs() < 1e-12);
        assert!((g.value(l).item() - 5.57973).abs() < 1e-5);
    }

    #[test]
    fn confident_head_gives_small_loss() {
        let mut lm = LmState::init(&tiny_config()).unwrap();
        lm.params.w_head = Arc::new(Tensor::zeros(&[8, VOCAB]));
        let mut b = vec![0.0; VOCAB];
        b[EOS] = 100.0;
        lm.params.b_head = Arc::new(Tensor::vector(b));
        let plan = plan_with_slots(vec![5, BOS, EOS], &[], 1);
        let mut g = Graph::new();
        let l = lm.forward_loss(&mut g, &plan, None).unwrap();
        assert!(g.value(l).item() < 1e-3);
    }

    #[test]
    fn missing_slots_and_empty_target_rejected() {
        let lm = LmState::init(&tiny_config()).unwrap();
        let plan = plan_with_slots(vec![HIS_START, HIS_SLOT, HIS_END, BOS, 1, EOS], &[(1, SlotKind::His)], 2);
        let mut g = Graph::new();
        assert!(lm.forward_loss(&mut g, &plan, None).is_err());
        let mut no_target = plan.clone();
        no_target.target = None;
        let rows = g.constant(Tensor::zeros(&[1, 8]));
        assert!(lm.forward_loss(&mut g, &no_target, Some(rows)).is_err());
        assert!(lm.forward_loss(&mut g, &plan, Some(rows)).is_ok());
    }

    #[test]
    fn training_graph_leaves_lm_untouched() {
        let lm = LmState::init(&tiny_config()).unwrap();
        let before = lm.param_hash();
        let plan = plan_with_slots(vec![HIS_START, HIS_SLOT, HIS_END, BOS, 1, 2, EOS], &[(1, SlotKind::His)], 3);
        for _ in 0..3 {
            let mut g = Graph::new();
            let rows = g.leaf(Tensor::full(&[1, 8], 0.3), true);
            let l = lm.forward_loss(&mut g, &plan, Some(rows)).unwrap();
            g.backward(l).unwrap();
            assert!(g.grad(rows).unwrap().iter().any(|&v| v != 0.0));
        }
        assert_eq!(lm.param_hash(), before);
    }

    #[test]
    fn causal_and_slot_local() {
        let lm = LmState::init(&tiny_config()).unwrap();
        let tokens = vec![10, 11, HIS_START, HIS_SLOT, HIS_END, 12, 13, 14];
        let slot = vec![vec![0.5; 8]];
        let base = lm.logits_all(&tokens, &[3], &slot).unwrap();
        let mut edited = tokens.clone();
        edited[6] = 99;
        let after = lm.logits_all(&edited, &[3], &slot).unwrap();
        for t in 0..8 {
            let same = base.row(t) == after.row(t);
            assert_eq!(same, t < 6, "position {t}");
        }
        let moved = lm.logits_all(&tokens, &[3], &[vec![-0.5; 8]]).unwrap();
        for t in 0..8 {
            assert_eq!(base.row(t) == moved.row(t), t < 3, "position {t}");
        }
    }
}
