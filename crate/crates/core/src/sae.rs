//! Sparse autoencoder shared by the HIS and DIFF streams.
//!
//! `z = sigmoid(e·W_enc + b_enc)`, `ê = z·W_dec + b_dec`, with weights stored
//! input-major (`W_enc` is `[d × d']`) so a batch of row vectors maps with one
//! matmul. Losses:
//!
//! * reconstruction: Smooth-L1 (β = 1), mean over every coordinate of every
//!   history, summed over streams;
//! * sparsity: per stream, `(1/d') Σ_j KL(ρ ‖ ρ̂_j)` where `ρ̂` is the mean
//!   latent code over the instance's histories, clamped to `[1e-6, 1 − 1e-6]`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::init::xavier_uniform;
use crate::numerics::{kernels, sigmoid_scalar, Graph, Tensor, Var};

pub const INPUT_DIM: usize = 1024;
pub const LATENT_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct SaeState {
    pub w_enc: Arc<Tensor>,
    pub b_enc: Arc<Tensor>,
    pub w_dec: Arc<Tensor>,
    pub b_dec: Arc<Tensor>,
}

/// An [`SaeState`] recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SaeVars {
    pub w_enc: Var,
    pub b_enc: Var,
    pub w_dec: Var,
    pub b_dec: Var,
}

impl SaeState {
    pub fn zeros(d: usize, d_latent: usize) -> Self {
        Self {
            w_enc: Arc::new(Tensor::zeros(&[d, d_latent])),
            b_enc: Arc::new(Tensor::zeros(&[d_latent])),
            w_dec: Arc::new(Tensor::zeros(&[d_latent, d])),
            b_dec: Arc::new(Tensor::zeros(&[d])),
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(rng: &mut ChaCha8Rng, d: usize, d_latent: usize) -> Self {
        Self {
            w_enc: Arc::new(xavier_uniform(rng, d, d_latent)),
            b_enc: Arc::new(Tensor::zeros(&[d_latent])),
            w_dec: Arc::new(xavier_uniform(rng, d_latent, d)),
            b_dec: Arc::new(Tensor::zeros(&[d])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.w_enc.shape()[1]
    }

    pub fn named(&self) -> [(&'static str, &Arc<Tensor>); 4] {
        [
            ("sae.w_enc", &self.w_enc),
            ("sae.b_enc", &self.b_enc),
            ("sae.w_dec", &self.w_dec),
            ("sae.b_dec", &self.b_dec),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Arc<Tensor>); 4] {
        [
            ("sae.w_enc", &mut self.w_enc),
            ("sae.b_enc", &mut self.b_enc),
            ("sae.w_dec", &mut self.w_dec),
            ("sae.b_dec", &mut self.b_dec),
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> SaeVars {
        SaeVars {
            w_enc: g.leaf(Arc::clone(&self.w_enc), trainable),
            b_enc: g.leaf(Arc::clone(&self.b_enc), trainable),
            w_dec: g.leaf(Arc::clone(&self.w_dec), trainable),
            b_dec: g.leaf(Arc::clone(&self.b_dec), trainable),
        }
    }

    /// Latent code of one embedding; every entry lies in `(0, 1)`.
    pub fn encode(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.input_dim() {
            return Err(Error::dim("sae.encode", &[e.len()], self.w_enc.shape()));
        }
        let mut z = Vec::new();
        kernels::vecmat_bias(e, self.w_enc.data(), self.b_enc.data(), &mut z);
        z.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
        Ok(z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim("sae.decode", &[z.len()], self.w_dec.shape()));
        }
        let mut e = Vec::new();
        kernels::vecmat_bias(z, self.w_dec.data(), self.b_dec.data(), &mut e);
        Ok(e)
    }
}

impl SaeVars {
    /// `[N × d] → [N × d']`.
    pub fn encode(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let pre = g.matmul(e, self.w_enc)?;
        let pre = g.add(pre, self.b_enc)?;
        Ok(g.sigmoid(pre))
    }

    /// `[N × d'] → [N × d]`.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let out = g.matmul(z, self.w_dec)?;
        g.add(out, self.b_dec)
    }
}

/// Mean Smooth-L1 between one stream's embeddings and reconstructions.
pub fn recon_term(g: &mut Graph, e: Var, e_hat: Var) -> Result<Var> {
    let d = g.smooth_l1(e, e_hat)?;
    Ok(g.mean(d))
}

pub fn recon_loss(g: &mut Graph, e_his: Var, e_his_hat: Var, e_diff: Var, e_diff_hat: Var) -> Result<Var> {
    let a = recon_term(g, e_his, e_his_hat)?;
    let b = recon_term(g, e_diff, e_diff_hat)?;
    g.add(a, b)
}

/// `(1/d') Σ_j KL(ρ ‖ ρ̂_j)` for one stream's `[N × d']` codes.
pub fn sparsity_term(g: &mut Graph, z: Var, rho: f64) -> Result<Var> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("sparsity target {rho} outside (0, 1)")));
    }
    let rho_hat = g.mean_rows(z)?;
    let kl = g.bernoulli_kl(rho_hat, rho);
    Ok(g.mean(kl))
}

/// Sum of [`sparsity_term`] over both streams. `N = 0` cannot be expressed
/// as a graph value; callers with no histories use [`check_histories`].
pub fn sparsity_loss(g: &mut Graph, z_his: Var, z_diff: Var, rho: f64) -> Result<Var> {
    let a = sparsity_term(g, z_his, rho)?;
    let b = sparsity_term(g, z_diff, rho)?;
    g.add(a, b)
}

pub fn check_histories(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Data("sparsity loss needs at least one history".into()));
    }
    Ok(())
}
