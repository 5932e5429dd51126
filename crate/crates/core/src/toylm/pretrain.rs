//! Next-token pretraining of the toy LM before it is frozen.
//!
//! Documents are rendered prompts in the same layout the personalized runs
//! use (history text and placeholder slot tokens included) so the frozen
//! model has seen the template. Every position is supervised.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assemble_prompt, is_weight, LmConfig, LmParams, LmState, PromptFlags, PromptInput, PromptPlan, Template};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::numerics::optim::{lr_at, warmup_steps, AdamW, AdamWConfig};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    /// After warmup the rate follows a cosine from `lr` down to
    /// `lr * final_lr_ratio`.
    pub final_lr_ratio: f64,
    pub optimizer: AdamWConfig,
    /// Histories per document are drawn uniformly from `0..=max_histories`.
    pub max_histories: usize,
    /// Chance that a document starts at a random position instead of 0, so
    /// position rows beyond the longest documents still get trained.
    pub offset_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 3e-3,
            warmup_ratio: 0.01,
            final_lr_ratio: 0.1,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            max_histories: 8,
            offset_prob: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub step_losses: Vec<f64>,
    pub held_out_before: Option<f64>,
    pub held_out_after: Option<f64>,
}

/// One document per target review: its own prompt with random signal flags
/// and up to `max_histories` of the same user's other non-excluded reviews
/// as histories, most recent first. When the user has fewer reviews than
/// drawn, some repeat so long prompts are still seen.
///
/// Targets are the reviews in `only` when given (held-out documents), else
/// every review not in `exclude`. Histories never come from `exclude`.
pub fn pretraining_plans(
    corpus: &Corpus,
    template: &Template,
    context: usize,
    exclude: &BTreeSet<usize>,
    only: Option<&BTreeSet<usize>>,
    max_histories: usize,
    seed: u64,
) -> Result<Vec<PromptPlan>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain.docs", 0));
    let mut out = Vec::new();
    for (idx, r) in corpus.reviews().iter().enumerate() {
        let target = only.map_or(!exclude.contains(&idx), |o| o.contains(&idx));
        if !target || r.text.is_empty() {
            continue;
        }
        let flags = PromptFlags {
            use_text: rng.random_bool(0.75),
            use_his: rng.random_bool(0.5),
            use_diff: rng.random_bool(0.5),
            ..Default::default()
        };
        let item = corpus
            .item(&r.item_id)
            .ok_or_else(|| Error::Data(format!("unknown item {}", r.item_id)))?;
        let pool: Vec<usize> = corpus
            .user_review_indices(&r.user_id)
            .iter()
            .copied()
            .filter(|&i| i != idx && !exclude.contains(&i) && corpus.review(i).item_id != r.item_id)
            .collect();
        let k = if pool.is_empty() { 0 } else { rng.random_range(0..=max_histories) };
        let mut pick = rand::seq::index::sample(&mut rng, pool.len(), k.min(pool.len())).into_vec();
        while pick.len() < k {
            pick.push(rng.random_range(0..pool.len()));
        }
        pick.sort_unstable();
        let histories: Vec<_> = pick.iter().map(|&j| corpus.review(pool[j]).clone()).collect();
        let input = PromptInput {
            item,
            title: &r.title,
            rating: r.rating,
            histories: &histories,
            target: Some(&r.text),
        };
        out.push(assemble_prompt(template, context, 0, &input, &flags)?);
    }
    Ok(out)
}

fn doc_loss(lm: &LmState, g: &mut Graph, p: &LmParams<Var>, plan: &PromptPlan, offset: usize) -> Result<Var> {
    let n = plan.tokens.len();
    if n < 2 {
        return Err(Error::Data("pretraining document shorter than two tokens".into()));
    }
    let hidden = lm.hidden_at(g, p, &plan.tokens[..n - 1], &[], None, offset)?;
    let rows: Vec<usize> = (0..n - 1).collect();
    let logits = lm.head(g, p, hidden, &rows)?;
    g.cross_entropy(logits, &plan.tokens[1..])
}

/// Mean all-position loss of `docs` under `lm`.
pub fn mean_doc_loss(lm: &LmState, docs: &[PromptPlan]) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Data("no documents".into()));
    }
    let mut total = 0.0;
    for d in docs {
        let mut g = Graph::new();
        let p = lm.bind(&mut g, false);
        let l = doc_loss(lm, &mut g, &p, d, 0)?;
        total += g.value(l).item();
    }
    Ok(total / docs.len() as f64)
}

fn schedule(step: usize, total: usize, warmup: usize, cfg: &PretrainConfig) -> f64 {
    if step + 1 < warmup {
        return lr_at(step, warmup, cfg.lr);
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let frac = ((step + 1).saturating_sub(warmup) as f64 / span).min(1.0);
    let floor = cfg.lr * cfg.final_lr_ratio;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Trains a seeded initial LM on `docs` for `cfg.steps` single-document
/// steps and returns it frozen (rounded to `f32`). `steps = 0` returns the
/// seeded initial state.
pub fn pretrain_frozen(
    config: &LmConfig,
    docs: &[PromptPlan],
    held_out: &[PromptPlan],
    cfg: &PretrainConfig,
) -> Result<(LmState, PretrainReport)> {
    let mut lm = LmState::init(config)?;
    let mut report = PretrainReport::default();
    if !held_out.is_empty() {
        report.held_out_before = Some(mean_doc_loss(&lm, held_out)?);
    }
    if cfg.steps == 0 {
        report.held_out_after = report.held_out_before;
        return Ok((lm, report));
    }
    if docs.is_empty() {
        return Err(Error::Data("pretraining needs at least one document".into()));
    }
    let names: Vec<String> = lm.params.named().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = lm.params.named().iter().map(|(_, t)| t.numel()).collect();
    let decay: Vec<bool> = names.iter().map(|n| is_weight(n)).collect();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &sizes);
    let warmup = warmup_steps(cfg.steps, cfg.warmup_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain.order", 0));
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..docs.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let doc = &docs[order.pop().expect("refilled")];
        let mut g = Graph::new();
        let p = lm.bind(&mut g, true);
        let slack = config.context.saturating_sub(doc.tokens.len() - 1);
        let offset = if rng.random_bool(cfg.offset_prob) { rng.random_range(0..=slack) } else { 0 };
        let loss = doc_loss(&lm, &mut g, &p, doc, offset)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical {
                step,
                message: format!("pretraining loss {value}"),
            });
        }
        report.step_losses.push(value);
        g.backward(loss)?;
        let vars: Vec<Var> = p.named().into_iter().map(|(_, v)| *v).collect();
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
        drop(g);
        let mut params: Vec<&mut Arc<Tensor>> = lm.params.values_mut();
        opt.step(&mut params, &grads, &decay, schedule(step, cfg.steps, warmup, cfg))?;
    }
    lm.round_to_f32();
    if !held_out.is_empty() {
        report.held_out_after = Some(mean_doc_loss(&lm, held_out)?);
    }
    Ok((lm, report))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;
    use crate::corpus::{generate_synthetic, parse_corpus, GenConfig};

    fn docs() -> Vec<PromptPlan> {
        let f = generate_synthetic(&GenConfig {
            users: 4,
            items: 6,
            reviews_per_user: 3,
            ..Default::default()
        })
        .unwrap();
        let (c, _) = parse_corpus(&f.main, &f.meta).unwrap();
        let short = Template::parse("## system\n## guidance\n## input\n{rating}\n## history\n{text}{his}{diff}\n").unwrap();
        pretraining_plans(&c, &short, 2048, &BTreeSet::new(), None, 1, 0).unwrap()
    }

    #[test]
    fn zero_steps_is_seeded_init() {
        let cfg = tiny_config();
        let (lm, _) = pretrain_frozen(&cfg, &[], &[], &PretrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(lm, LmState::init(&cfg).unwrap());
    }

    #[test]
    fn few_steps_reduce_loss_deterministically() {
        let cfg = LmConfig { context: 2048, ..tiny_config() };
        let d = docs();
        let (train, held) = d.split_at(d.len() - 2);
        let pc = PretrainConfig {
            steps: 40,
            lr: 1e-2,
            ..Default::default()
        };
        let (a, rep) = pretrain_frozen(&cfg, train, held, &pc).unwrap();
        assert!(rep.held_out_after.unwrap() < rep.held_out_before.unwrap());
        let (b, _) = pretrain_frozen(&cfg, train, held, &pc).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        for (_, t) in a.params.named() {
            assert!(t.data().iter().all(|&v| f64::from(v as f32) == v));
        }
    }
}
