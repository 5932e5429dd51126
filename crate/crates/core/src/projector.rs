//! Two independent GELU MLPs mapping latent codes to soft prompt vectors.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::init::xavier_uniform;
use crate::numerics::{gelu_scalar, kernels, Graph, Tensor, Var};

pub const DEFAULT_HIDDEN: usize = 128;
pub const PAPER_HIDDEN: usize = 512;

/// `W₂·gelu(W₁·z + b₁) + b₂`, weights stored input-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Arc<Tensor>,
    pub b1: Arc<Tensor>,
    pub w2: Arc<Tensor>,
    pub b2: Arc<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Arc::new(Tensor::zeros(&[input, hidden])),
            b1: Arc::new(Tensor::zeros(&[hidden])),
            w2: Arc::new(Tensor::zeros(&[hidden, output])),
            b2: Arc::new(Tensor::zeros(&[output])),
        }
    }

    pub fn xavier(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Arc::new(xavier_uniform(rng, input, hidden)),
            b1: Arc::new(Tensor::zeros(&[hidden])),
            w2: Arc::new(xavier_uniform(rng, hidden, output)),
            b2: Arc::new(Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::dim("projector", &[z.len()], self.w1.shape()));
        }
        let mut h = Vec::new();
        kernels::vecmat_bias(z, self.w1.data(), self.b1.data(), &mut h);
        h.iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let mut out = Vec::new();
        kernels::vecmat_bias(&h, self.w2.data(), self.b2.data(), &mut out);
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        MlpVars {
            w1: g.leaf(Arc::clone(&self.w1), trainable),
            b1: g.leaf(Arc::clone(&self.b1), trainable),
            w2: g.leaf(Arc::clone(&self.w2), trainable),
            b2: g.leaf(Arc::clone(&self.b2), trainable),
        }
    }

    fn tensors(&self) -> [&Arc<Tensor>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Arc<Tensor>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl MlpVars {
    /// `[N × in] → [N × out]`.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let h = g.matmul(z, self.w1)?;
        let h = g.add(h, self.b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, self.w2)?;
        g.add(o, self.b2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorState {
    pub his: Mlp,
    pub diff: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorVars {
    pub his: MlpVars,
    pub diff: MlpVars,
}

const NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl ProjectorState {
    pub fn zeros(input: usize, hidden: usize, d_lm: usize) -> Self {
        Self {
            his: Mlp::zeros(input, hidden, d_lm),
            diff: Mlp::zeros(input, hidden, d_lm),
        }
    }

    pub fn xavier(rng: &mut ChaCha8Rng, input: usize, hidden: usize, d_lm: usize) -> Self {
        let his = Mlp::xavier(rng, input, hidden, d_lm);
        let diff = Mlp::xavier(rng, input, hidden, d_lm);
        Self { his, diff }
    }

    pub fn project_his(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.his.forward(z)
    }

    pub fn project_diff(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.diff.forward(z)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ProjectorVars {
        ProjectorVars {
            his: self.his.bind(g, trainable),
            diff: self.diff.bind(g, trainable),
        }
    }

    pub fn named(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = Vec::with_capacity(8);
        for (net, mlp) in [("his", &self.his), ("diff", &self.diff)] {
            for (n, t) in NAMES.iter().zip(mlp.tensors()) {
                out.push((format!("proj.{net}.{n}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Arc<Tensor>)> {
        let mut out = Vec::with_capacity(8);
        for (net, mlp) in [("his", &mut self.his), ("diff", &mut self.diff)] {
            for (n, t) in NAMES.iter().zip(mlp.tensors_mut()) {
                out.push((format!("proj.{net}.{n}"), t));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_params_give_zero_output() {
        let p = ProjectorState::zeros(512, DEFAULT_HIDDEN, 64);
        let out = p.project_his(&vec![0.3; 512]).unwrap();
        assert_eq!(out, vec![0.0; 64]);
        assert!(p.project_diff(&[0.0; 4]).is_err());
    }

    #[test]
    fn networks_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ProjectorState::xavier(&mut rng, 16, 8, 4);
        let z: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        assert_ne!(p.project_his(&z).unwrap(), p.project_diff(&z).unwrap());
        let before = p.project_diff(&z).unwrap();
        Arc::make_mut(&mut p.his.w1).data_mut()[0] += 1.0;
        Arc::make_mut(&mut p.his.b2).data_mut()[0] += 1.0;
        assert_eq!(p.project_diff(&z).unwrap(), before);
    }

    #[test]
    fn graph_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ProjectorState::xavier(&mut rng, 16, 8, 4);
        let z: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let v = p.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(1, 16, z.clone()).unwrap());
        let o = v.diff.forward(&mut g, x).unwrap();
        for (a, b) in g.value(o).data().iter().zip(p.project_diff(&z).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p.named().len(), 8);
    }
}
