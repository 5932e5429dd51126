//! Joint optimization of the autoencoder and projectors against the frozen
//! LM, plus prediction, checkpoints and the experiment grid.

mod checkpoint;
mod config;
mod data;
mod experiment;
mod params;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embedder::EmbedderSpec;
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::numerics::optim::{lr_at, warmup_steps, AdamW};
use crate::numerics::{Graph, Tensor};
use crate::sae::{recon_term, sparsity_term, SaeState};
use crate::toylm::{generate, LmState, PromptPlan, SamplingConfig, Template};

pub use checkpoint::Checkpoint;
pub use config::{total_loss, Mode, Preset, Refinement, TrainConfig, MAX_EPOCHS};
pub use data::{plan_for, prepare, Dataset, Instance};
pub use experiment::{
    ablation_grid, group_reports, read_predictions, run_mode, score, sweep_k, mode_rows, refinement_rows,
    write_predictions, ModeRun, SweepPoint,
};
pub use params::{decays, init_params, instance_loss, DepParams, DepVars, LossValues, LossVars};

/// The frozen pieces every run shares.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub corpus: &'a Corpus,
    pub lm: &'a LmState,
    pub spec: &'a EmbedderSpec,
    pub template: &'a Template,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_gen: f64,
    pub l_recon: f64,
    pub l_sparse: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: LossValues,
    pub validation_meteor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Mean losses over the whole train split before the first update.
    pub initial: LossValues,
    /// Same, after the last epoch.
    pub last: LossValues,
    pub best_epoch: usize,
    pub lm_hash_before: String,
    pub lm_hash_after: String,
    pub embedder_hash_before: String,
    pub embedder_hash_after: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub review: usize,
    pub user_id: String,
    pub item_id: String,
    pub prediction: String,
    pub reference: String,
}

/// Training plans for `instances` under `cfg`'s mode.
pub fn training_plans(ctx: &Context<'_>, instances: &[Instance], cfg: &TrainConfig) -> Result<Vec<PromptPlan>> {
    let flags = cfg.flags();
    instances
        .iter()
        .map(|i| plan_for(ctx.corpus, ctx.template, ctx.lm.config.context, 0, i, &flags, true))
        .collect()
}

/// Mean losses without gradients.
pub fn mean_loss(
    ctx: &Context<'_>,
    params: &DepParams,
    plans: &[PromptPlan],
    instances: &[Instance],
    cfg: &TrainConfig,
) -> Result<LossValues> {
    let mut acc = LossValues::default();
    for (plan, inst) in plans.iter().zip(instances) {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let l = instance_loss(&mut g, &vars, params.multiplicity, ctx.lm, plan, &inst.reps, cfg)?;
        acc.add(&LossValues::read(&g, &l));
    }
    Ok(acc.scaled(1.0 / plans.len().max(1) as f64))
}

/// Gradients averaged over `members`, in [`DepParams::named`] order, and
/// the mean losses. Fails on a non-finite loss.
pub fn accumulate(
    ctx: &Context<'_>,
    params: &DepParams,
    plans: &[PromptPlan],
    instances: &[Instance],
    members: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Vec<Vec<f64>>, LossValues)> {
    let mut grads: Vec<Vec<f64>> = params.sizes().into_iter().map(|n| vec![0.0; n]).collect();
    let mut losses = LossValues::default();
    for &i in members {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let l = instance_loss(&mut g, &vars, params.multiplicity, ctx.lm, &plans[i], &instances[i].reps, cfg)?;
        let values = LossValues::read(&g, &l);
        if !values.l_total.is_finite() {
            return Err(Error::Numerical {
                step,
                message: format!("L_total is {} on review {}", values.l_total, instances[i].review),
            });
        }
        losses.add(&values);
        g.backward(l.total)?;
        for (acc, v) in grads.iter_mut().zip(params.vars_in_order(&vars)) {
            if let Some(gr) = g.grad(v) {
                acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
            }
        }
    }
    let inv = 1.0 / members.len() as f64;
    grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= inv));
    Ok((grads, losses.scaled(inv)))
}

/// Generates one prediction per instance. `params` may be `None` only
/// when no plan has slots.
pub fn predict(
    ctx: &Context<'_>,
    params: Option<&DepParams>,
    instances: &[Instance],
    cfg: &TrainConfig,
    sampling: &SamplingConfig,
) -> Result<Vec<Prediction>> {
    let flags = cfg.flags();
    instances
        .iter()
        .map(|inst| {
            let plan = plan_for(
                ctx.corpus,
                ctx.template,
                ctx.lm.config.context,
                cfg.generation_reserve,
                inst,
                &flags,
                false,
            )?;
            let vectors = if plan.slots.is_empty() {
                Vec::new()
            } else {
                params
                    .ok_or_else(|| Error::Config(format!("mode {} needs trained parameters", cfg.mode)))?
                    .slot_vectors(&plan, &inst.reps)?
            };
            let seed = derive_seed(cfg.seed, "generate", inst.review as u64);
            let r = ctx.corpus.review(inst.review);
            Ok(Prediction {
                review: inst.review,
                user_id: r.user_id.clone(),
                item_id: r.item_id.clone(),
                prediction: generate(ctx.lm, &plan, &vectors, sampling, seed)?,
                reference: r.text.clone(),
            })
        })
        .collect()
}

/// Trains under `cfg` and returns the checkpoint with the highest
/// validation METEOR (earliest on ties; the last epoch without validation).
pub fn train(ctx: &Context<'_>, data: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if !cfg.mode.uses_embeddings() {
        return Err(Error::Config(format!("mode {} has no trainable path", cfg.mode)));
    }
    if data.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let lm_hash_before = ctx.lm.param_hash();
    let embedder_hash_before = ctx.spec.param_hash();
    let plans = training_plans(ctx, &data.train, cfg)?;
    let mut params = init_params(cfg, ctx.spec.dim, ctx.lm.config.d_lm);
    let initial = mean_loss(ctx, &params, &plans, &data.train, cfg)?;

    let per_epoch = data.train.len().div_ceil(cfg.accumulation);
    let warmup = warmup_steps(per_epoch * cfg.epochs, cfg.warmup_ratio);
    let decay = params.decay_mask();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &params.sizes());
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch", epoch as u64)));
        let mut epoch_loss = LossValues::default();
        for chunk in order.chunks(cfg.accumulation) {
            let (grads, l) = accumulate(ctx, &params, &plans, &data.train, chunk, cfg, step)?;
            let lr = lr_at(step, warmup, cfg.lr);
            let mut named = params.named_mut();
            let mut refs: Vec<_> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            opt.step(&mut refs, &grads, &decay, lr)?;
            epoch_loss.add(&l.scaled(chunk.len() as f64));
            steps.push(StepLog {
                step,
                epoch,
                l_gen: l.l_gen,
                l_recon: l.l_recon,
                l_sparse: l.l_sparse,
                l_total: l.l_total,
                lr,
            });
            step += 1;
        }
        let metric = if data.validation.is_empty() {
            None
        } else {
            let preds = predict(ctx, Some(&params), &data.validation, cfg, &cfg.validation_sampling)?;
            Some(score(&preds)?.meteor)
        };
        epochs.push(EpochLog {
            epoch,
            mean_loss: epoch_loss.scaled(1.0 / data.train.len() as f64),
            validation_meteor: metric,
        });
        let better = match (&best, metric) {
            (None, _) => true,
            (Some(b), Some(m)) => b.metric.is_none_or(|bm| m > bm),
            (Some(_), None) => true,
        };
        if better {
            best = Some(Checkpoint::new(
                cfg.clone(),
                params.clone(),
                opt.clone(),
                epoch,
                metric,
                [lm_hash_before.clone(), embedder_hash_before.clone(), ctx.corpus.content_hash()],
            ));
        }
    }
    let last = mean_loss(ctx, &params, &plans, &data.train, cfg)?;
    let best = best.expect("at least one epoch");
    let report = TrainReport {
        steps,
        epochs,
        initial,
        last,
        best_epoch: best.epoch,
        lm_hash_before,
        lm_hash_after: ctx.lm.param_hash(),
        embedder_hash_before,
        embedder_hash_after: ctx.spec.param_hash(),
    };
    Ok((best, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityDrive {
    pub steps: usize,
    /// First step whose pre-update activations were all inside the band.
    pub reached_at: Option<usize>,
    pub mean_activation: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Trains an autoencoder alone on `embeddings` (one batch per step) with
/// objective `λ·(L_recon + γ·L_sparse)`, stopping once every latent unit's
/// mean activation lies in `band` or after `max_steps`.
pub fn drive_sparsity(
    embeddings: &[Vec<f64>],
    cfg: &TrainConfig,
    band: (f64, f64),
    max_steps: usize,
) -> Result<SparsityDrive> {
    if embeddings.is_empty() {
        return Err(Error::Data("no embeddings".into()));
    }
    let d = embeddings[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init", 0));
    let mut sae = SaeState::xavier(&mut rng, d, cfg.latent_dim);
    let e_t = Tensor::from_rows(embeddings)?;
    let names = sae.named().map(|(n, _)| n);
    let decay: Vec<bool> = names.iter().map(|n| decays(n)).collect();
    let sizes: Vec<usize> = sae.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &sizes);
    let warmup = warmup_steps(max_steps, cfg.warmup_ratio);
    let mut out = SparsityDrive {
        steps: 0,
        reached_at: None,
        mean_activation: Vec::new(),
        losses: Vec::new(),
    };
    for step in 0..=max_steps {
        let mut g = Graph::new();
        let v = sae.bind(&mut g, true);
        let e = g.constant(e_t.clone());
        let z = v.encode(&mut g, e)?;
        let rho_hat = g.mean_rows(z)?;
        out.mean_activation = g.value(rho_hat).data().to_vec();
        if out.mean_activation.iter().all(|&a| a >= band.0 && a <= band.1) {
            out.reached_at = Some(step);
            break;
        }
        if step == max_steps {
            break;
        }
        let e_hat = v.decode(&mut g, z)?;
        let r = recon_term(&mut g, e, e_hat)?;
        let s = sparsity_term(&mut g, z, cfg.rho)?;
        let s = g.scale(s, cfg.gamma);
        let l = g.add(r, s)?;
        let l = g.scale(l, cfg.lambda);
        let value = g.value(l).item();
        if !value.is_finite() {
            return Err(Error::Numerical { step, message: format!("loss {value}") });
        }
        out.losses.push(value);
        g.backward(l)?;
        let grads: Vec<Vec<f64>> = [v.w_enc, v.b_enc, v.w_dec, v.b_dec].iter().map(|&x| g.grad_or_zeros(x)).collect();
        let mut named = sae.named_mut();
        let mut refs: Vec<_> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        opt.step(&mut refs, &grads, &decay, lr_at(step, warmup, cfg.lr))?;
        out.steps = step + 1;
    }
    Ok(out)
}
