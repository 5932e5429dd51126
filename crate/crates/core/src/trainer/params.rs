use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Refinement, TrainConfig};
use crate::diffrep::DiffRepresentation;
use crate::error::{Error, Result};
use crate::hash::{derive_seed, ContentHasher};
use crate::numerics::{Graph, Tensor, Var};
use crate::projector::{Mlp, MlpVars, ProjectorState};
use crate::sae::{recon_term, sparsity_term, SaeState, SaeVars};
use crate::toylm::{LmState, PromptPlan, SlotKind};

/// Everything the optimizer updates: the optional autoencoder and both projectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DepParams {
    pub sae: Option<SaeState>,
    pub proj: ProjectorState,
    /// Soft tokens per embedding; projector outputs are `multiplicity·d_lm` wide.
    pub multiplicity: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DepVars {
    pub sae: Option<SaeVars>,
    pub his: MlpVars,
    pub diff: MlpVars,
}

/// Xavier-uniform weights, zero biases, seeded by `cfg.seed`.
pub fn init_params(cfg: &TrainConfig, embed_dim: usize, d_lm: usize) -> DepParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init", 0));
    let sae = (cfg.refinement != Refinement::None).then(|| SaeState::xavier(&mut rng, embed_dim, cfg.latent_dim));
    let input = if sae.is_some() { cfg.latent_dim } else { embed_dim };
    let proj = ProjectorState::xavier(&mut rng, input, cfg.projector_hidden, d_lm * cfg.slot_multiplicity);
    DepParams {
        sae,
        proj,
        multiplicity: cfg.slot_multiplicity,
    }
}

/// Weight matrices decay; biases do not.
pub fn decays(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with('w'))
}

impl DepParams {
    pub fn named(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out: Vec<(String, &Arc<Tensor>)> = Vec::new();
        if let Some(s) = &self.sae {
            out.extend(s.named().into_iter().map(|(n, t)| (n.to_string(), t)));
        }
        out.extend(self.proj.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Arc<Tensor>)> {
        let mut out: Vec<(String, &mut Arc<Tensor>)> = Vec::new();
        if let Some(s) = &mut self.sae {
            out.extend(s.named_mut().into_iter().map(|(n, t)| (n.to_string(), t)));
        }
        out.extend(self.proj.named_mut());
        out
    }

    /// Rebuilds parameters from `(name, tensor)` pairs as produced by [`DepParams::named`].
    pub fn from_named(tensors: &[(String, Tensor)], multiplicity: usize) -> Result<Self> {
        let map: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let get = |n: &str| -> Result<Arc<Tensor>> {
            map.get(n)
                .map(|t| Arc::new((*t).clone()))
                .ok_or_else(|| Error::Format(format!("missing parameter {n}")))
        };
        let sae = if map.contains_key("sae.w_enc") {
            Some(SaeState {
                w_enc: get("sae.w_enc")?,
                b_enc: get("sae.b_enc")?,
                w_dec: get("sae.w_dec")?,
                b_dec: get("sae.b_dec")?,
            })
        } else {
            None
        };
        let mlp = |net: &str| -> Result<Mlp> {
            Ok(Mlp {
                w1: get(&format!("proj.{net}.w1"))?,
                b1: get(&format!("proj.{net}.b1"))?,
                w2: get(&format!("proj.{net}.w2"))?,
                b2: get(&format!("proj.{net}.b2"))?,
            })
        };
        let out = Self {
            sae,
            proj: ProjectorState {
                his: mlp("his")?,
                diff: mlp("diff")?,
            },
            multiplicity,
        };
        out.check_shapes()?;
        Ok(out)
    }

    fn check_shapes(&self) -> Result<()> {
        let input = self.proj_input();
        for m in [&self.proj.his, &self.proj.diff] {
            let ok = m.w1.shape() == [input, m.b1.numel()]
                && m.w2.shape() == [m.b1.numel(), m.b2.numel()]
                && m.output_dim() % self.multiplicity == 0;
            if !ok {
                return Err(Error::Format("inconsistent projector shapes".into()));
            }
        }
        if let Some(s) = &self.sae {
            let (d, l) = (s.input_dim(), s.latent_dim());
            if s.b_enc.numel() != l || s.w_dec.shape() != [l, d] || s.b_dec.numel() != d {
                return Err(Error::Format("inconsistent autoencoder shapes".into()));
            }
        }
        Ok(())
    }

    fn proj_input(&self) -> usize {
        match &self.sae {
            Some(s) => s.latent_dim(),
            None => self.proj.his.input_dim(),
        }
    }

    /// Width of the raw embeddings this stack consumes.
    pub fn embed_dim(&self) -> usize {
        match &self.sae {
            Some(s) => s.input_dim(),
            None => self.proj.his.input_dim(),
        }
    }

    pub fn d_lm(&self) -> usize {
        self.proj.his.output_dim() / self.multiplicity
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.named().iter().map(|(n, _)| decays(n)).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.named().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn round_to_f32(&mut self) {
        for (_, t) in self.named_mut() {
            Arc::make_mut(t).round_to_f32();
        }
    }

    pub fn param_hash(&self) -> String {
        let mut h = ContentHasher::new();
        for (n, t) in self.named() {
            h.update(n.as_bytes()).update_f64s(t.data());
        }
        h.finish()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DepVars {
        DepVars {
            sae: self.sae.as_ref().map(|s| s.bind(g, trainable)),
            his: self.proj.his.bind(g, trainable),
            diff: self.proj.diff.bind(g, trainable),
        }
    }

    /// Vars in the same order as [`DepParams::named`].
    pub fn vars_in_order(&self, v: &DepVars) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(s) = v.sae {
            out.extend([s.w_enc, s.b_enc, s.w_dec, s.b_dec]);
        }
        for m in [v.his, v.diff] {
            out.extend([m.w1, m.b1, m.w2, m.b2]);
        }
        out
    }

    /// Soft prompt vectors for every slot of `plan`, plain arithmetic.
    pub fn slot_vectors(&self, plan: &PromptPlan, reps: &[DiffRepresentation]) -> Result<Vec<Vec<f64>>> {
        let d = self.d_lm();
        let mut memo: HashMap<(SlotKind, usize), Vec<f64>> = HashMap::new();
        let mut out = Vec::with_capacity(plan.slots.len());
        for s in &plan.slots {
            let rep = reps
                .get(s.history)
                .ok_or_else(|| Error::Data(format!("slot refers to history {} of {}", s.history, reps.len())))?;
            if !memo.contains_key(&(s.kind, s.history)) {
                let (e, net) = match s.kind {
                    SlotKind::His => (&rep.e_his, &self.proj.his),
                    SlotKind::Diff => (&rep.e_diff, &self.proj.diff),
                };
                let z = match &self.sae {
                    Some(sae) => sae.encode(e)?,
                    None => e.clone(),
                };
                memo.insert((s.kind, s.history), net.forward(&z)?);
            }
            let p = &memo[&(s.kind, s.history)];
            out.push(p[s.part * d..(s.part + 1) * d].to_vec());
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub gen: Var,
    pub recon: Var,
    pub sparse: Var,
    pub total: Var,
}

/// Scalar loss values of one instance or a mean over several.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub l_gen: f64,
    pub l_recon: f64,
    pub l_sparse: f64,
    pub l_total: f64,
}

impl LossValues {
    pub fn read(g: &Graph, v: &LossVars) -> Self {
        Self {
            l_gen: g.value(v.gen).item(),
            l_recon: g.value(v.recon).item(),
            l_sparse: g.value(v.sparse).item(),
            l_total: g.value(v.total).item(),
        }
    }

    pub fn add(&mut self, o: &LossValues) {
        self.l_gen += o.l_gen;
        self.l_recon += o.l_recon;
        self.l_sparse += o.l_sparse;
        self.l_total += o.l_total;
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            l_gen: self.l_gen * c,
            l_recon: self.l_recon * c,
            l_sparse: self.l_sparse * c,
            l_total: self.l_total * c,
        }
    }
}

struct Stream {
    kind: SlotKind,
    net: MlpVars,
}

/// Builds the full objective for one instance on `g`.
///
/// Only the `plan.histories` representations that made it into the prompt
/// are used; instances whose prompt keeps no history contribute `L_gen`
/// alone. Embedding streams absent from the mode are not encoded.
pub fn instance_loss(
    g: &mut Graph,
    vars: &DepVars,
    multiplicity: usize,
    lm: &LmState,
    plan: &PromptPlan,
    reps: &[DiffRepresentation],
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let n = plan.histories;
    let (_, use_his, use_diff) = cfg.mode.sources();
    let zero = g.constant(Tensor::scalar(0.0));
    if n == 0 || !(use_his || use_diff) {
        let gen = lm.forward_loss(g, plan, None)?;
        return Ok(LossVars { gen, recon: zero, sparse: zero, total: gen });
    }
    if reps.len() < n {
        return Err(Error::Data(format!("plan keeps {n} histories but only {} representations exist", reps.len())));
    }
    let gamma = cfg.effective_gamma();
    let mut streams = Vec::new();
    if use_his {
        streams.push(Stream { kind: SlotKind::His, net: vars.his });
    }
    if use_diff {
        streams.push(Stream { kind: SlotKind::Diff, net: vars.diff });
    }
    let d_lm = lm.config.d_lm;
    let mut recon = zero;
    let mut sparse = zero;
    let mut projected = Vec::new();
    let mut offsets = HashMap::new();
    for s in &streams {
        let rows: Vec<Vec<f64>> = reps[..n]
            .iter()
            .map(|r| match s.kind {
                SlotKind::His => r.e_his.clone(),
                SlotKind::Diff => r.e_diff.clone(),
            })
            .collect();
        let e = g.constant(Tensor::from_rows(&rows)?);
        let input = match &vars.sae {
            Some(sae) => {
                let z = sae.encode(g, e)?;
                let e_hat = sae.decode(g, z)?;
                let r = recon_term(g, e, e_hat)?;
                recon = g.add(recon, r)?;
                if gamma > 0.0 {
                    let k = sparsity_term(g, z, cfg.rho)?;
                    sparse = g.add(sparse, k)?;
                }
                z
            }
            None => e,
        };
        let p = s.net.forward(g, input)?;
        let p = g.reshape(p, &[n * multiplicity, d_lm])?;
        offsets.insert(s.kind, projected.len() * n * multiplicity);
        projected.push(p);
    }
    let table = if projected.len() == 1 { projected[0] } else { g.stack_rows(&projected)? };
    let rows: Vec<usize> = plan
        .slots
        .iter()
        .map(|s| offsets[&s.kind] + s.history * multiplicity + s.part)
        .collect();
    let slot_rows = g.select_rows(table, &rows)?;
    let gen = lm.forward_loss(g, plan, Some(slot_rows))?;
    let weighted_sparse = g.scale(sparse, gamma);
    let aux = g.add(recon, weighted_sparse)?;
    let aux = g.scale(aux, cfg.lambda);
    let total = g.add(gen, aux)?;
    Ok(LossVars { gen, recon, sparse, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::config::Mode;

    #[test]
    fn xavier_init_statistics() {
        let cfg = TrainConfig::default();
        let a = init_params(&cfg, 1024, 64);
        assert_eq!(a.param_hash(), init_params(&cfg, 1024, 64).param_hash());
        let other = init_params(&TrainConfig { seed: 1, ..cfg.clone() }, 1024, 64);
        assert_ne!(a.param_hash(), other.param_hash());
        let w = &a.sae.as_ref().unwrap().w_enc;
        assert_eq!(w.shape(), [1024, 512]);
        let bound = (6.0f64 / 1536.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / 1536.0;
        assert!((var - expect).abs() < 0.1 * expect, "{var} vs {expect}");
        for (name, t) in a.named() {
            if !decays(&name) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn shapes_follow_refinement_and_multiplicity() {
        let cfg = TrainConfig {
            refinement: Refinement::None,
            slot_multiplicity: 2,
            ..Default::default()
        };
        let p = init_params(&cfg, 1024, 16);
        assert!(p.sae.is_none());
        assert_eq!(p.proj.his.input_dim(), 1024);
        assert_eq!(p.proj.his.output_dim(), 32);
        assert_eq!(p.d_lm(), 16);
        assert_eq!(p.named().len(), 8);
        let back = DepParams::from_named(
            &p.named().into_iter().map(|(n, t)| (n, (**t).clone())).collect::<Vec<_>>(),
            2,
        )
        .unwrap();
        assert_eq!(back, p);
        assert_eq!(init_params(&TrainConfig { mode: Mode::HisOnly, ..Default::default() }, 1024, 16).named().len(), 12);
    }

    #[test]
    fn decay_names() {
        assert!(decays("sae.w_enc"));
        assert!(decays("proj.his.w2"));
        assert!(!decays("sae.b_dec"));
        assert!(!decays("proj.diff.b1"));
    }
}
