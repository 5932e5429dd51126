//! Incremental plain-`f64` decoding with a key/value cache, and sampling.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LmState, PromptPlan, EOS, VOCAB};
use crate::error::{Error, Result};
use crate::numerics::{gelu_scalar, kernels, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub max_new: usize,
    /// `0` selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            max_new: 256,
            temperature: 0.8,
            top_p: 0.95,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(max_new: usize) -> Self {
        Self {
            max_new,
            temperature: 0.0,
            top_p: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "temperature {} / top_p {} out of range",
                self.temperature, self.top_p
            )));
        }
        Ok(())
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| g * ((v - mean) * r) + b).collect()
}

/// Causal decoding state: one key and value row per processed position and layer.
pub struct InferenceSession<'a> {
    lm: &'a LmState,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> InferenceSession<'a> {
    pub fn new(lm: &'a LmState) -> Self {
        let layers = lm.config.layers;
        Self {
            lm,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn token_row(&self, token: usize) -> &[f64] {
        self.lm.params.tok_emb.row(token)
    }

    /// Appends one position given its input embedding; returns next-token
    /// logits when `want_logits`.
    pub fn push(&mut self, input: &[f64], want_logits: bool) -> Result<Option<Vec<f64>>> {
        let cfg = &self.lm.config;
        let d = cfg.d_lm;
        if input.len() != d {
            return Err(Error::dim("inference input", &[input.len()], &[d]));
        }
        if self.len >= cfg.context {
            return Err(Error::Data(format!("context of {} positions exhausted", cfg.context)));
        }
        let p = &self.lm.params;
        let t = self.len;
        let mut x: Vec<f64> = input.iter().zip(p.pos_emb.row(t)).map(|(a, b)| a + b).collect();
        let dh = cfg.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        let mut buf = Vec::new();
        for (l, b) in p.blocks.iter().enumerate() {
            let h = layer_norm(&x, b.ln1_g.data(), b.ln1_b.data());
            kernels::vecmat_bias(&h, b.w_qkv.data(), b.b_qkv.data(), &mut buf);
            self.keys[l].extend_from_slice(&buf[d..2 * d]);
            self.values[l].extend_from_slice(&buf[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for hd in 0..cfg.heads {
                let q = &buf[hd * dh..(hd + 1) * dh];
                for (s, score) in scores.iter_mut().enumerate() {
                    let k = &keys[s * d + hd * dh..s * d + (hd + 1) * dh];
                    *score = kernels::dot(q, k) * inv;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut att[hd * dh..(hd + 1) * dh];
                for (s, &w) in scores.iter().enumerate() {
                    let v = &values[s * d + hd * dh..s * d + (hd + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += (w / sum) * vv;
                    }
                }
            }
            let mut o = Vec::new();
            kernels::vecmat_bias(&att, b.w_o.data(), b.b_o.data(), &mut o);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = layer_norm(&x, b.ln2_g.data(), b.ln2_b.data());
            let mut f = Vec::new();
            kernels::vecmat_bias(&h, b.w_fc.data(), b.b_fc.data(), &mut f);
            f.iter_mut().for_each(|v| *v = gelu_scalar(*v));
            kernels::vecmat_bias(&f, b.w_proj.data(), b.b_proj.data(), &mut o);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
        self.len += 1;
        if !want_logits {
            return Ok(None);
        }
        let h = layer_norm(&x, p.lnf_g.data(), p.lnf_b.data());
        let mut logits = Vec::new();
        kernels::vecmat_bias(&h, p.w_head.data(), p.b_head.data(), &mut logits);
        Ok(Some(logits))
    }

    /// Feeds every token of `plan` (slot rows taken from `slot_vectors`) and
    /// returns the logits after the last one.
    pub fn prefill(&mut self, plan: &PromptPlan, slot_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
        if slot_vectors.len() != plan.slots.len() {
            return Err(Error::Data(format!(
                "plan has {} slots but {} vectors were given",
                plan.slots.len(),
                slot_vectors.len()
            )));
        }
        let mut slot_at = vec![None; plan.tokens.len()];
        for (s, v) in plan.slots.iter().zip(slot_vectors) {
            slot_at[s.position] = Some(v);
        }
        let n = plan.tokens.len();
        let mut last = None;
        for (i, &tok) in plan.tokens.iter().enumerate() {
            let row = match slot_at[i] {
                Some(v) => v.clone(),
                None => self.token_row(tok).to_vec(),
            };
            last = self.push(&row, i + 1 == n)?;
        }
        last.ok_or_else(|| Error::Data("empty prompt".into()))
    }
}

/// Probability of each token under nucleus filtering then temperature.
///
/// Tokens are ranked by unit-temperature probability (ties by id); the
/// smallest prefix whose mass reaches `top_p` is kept. Kept tokens are
/// then re-weighted by `exp(logit / temperature)`. Temperature `0` puts all
/// mass on the arg-max (lowest id on ties).
pub fn next_token_distribution(logits: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let n = logits.len();
    let mut out = vec![0.0; n];
    if temperature <= 0.0 {
        let best = (0..n).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        out[best] = 1.0;
        return out;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut order: Vec<usize> = (0..n).filter(|&i| exps[i] > 0.0).collect();
    order.sort_by(|&a, &b| exps[b].total_cmp(&exps[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += exps[i] / total;
        if mass >= top_p {
            break;
        }
    }
    let kmax = kept.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &i in &kept {
        out[i] = ((logits[i] - kmax) / temperature).exp();
        z += out[i];
    }
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Draws from [`next_token_distribution`] by inverse CDF, walking tokens in id order.
pub fn sample_next(logits: &[f64], temperature: f64, top_p: f64, rng: &mut ChaCha8Rng) -> usize {
    let probs = next_token_distribution(logits, temperature, top_p);
    if temperature <= 0.0 {
        return probs.iter().position(|&p| p == 1.0).expect("one-hot");
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Autoregressive continuation of an inference plan. Only byte tokens and
/// `EOS` can be sampled; decoding stops at `EOS`, `max_new` tokens, or a
/// full context. Invalid UTF-8 is replaced.
pub fn generate(
    lm: &LmState,
    plan: &PromptPlan,
    slot_vectors: &[Vec<f64>],
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<String> {
    cfg.validate()?;
    if plan.target.is_some() {
        return Err(Error::Data("generate needs an inference plan without a target".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut session = InferenceSession::new(lm);
    let mut logits = session.prefill(plan, slot_vectors)?;
    let mut bytes = Vec::new();
    for _ in 0..cfg.max_new {
        logits[EOS + 1..VOCAB].iter_mut().for_each(|l| *l = f64::NEG_INFINITY);
        logits[256..EOS].iter_mut().for_each(|l| *l = f64::NEG_INFINITY);
        let tok = sample_next(&logits, cfg.temperature, cfg.top_p, &mut rng);
        if tok == EOS {
            break;
        }
        bytes.push(tok as u8);
        if session.len() >= lm.config.context {
            break;
        }
        let row = session.token_row(tok).to_vec();
        logits = session.push(&row, true)?.expect("logits requested");
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}
