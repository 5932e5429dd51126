//! Central finite differences against reverse-mode gradients, one op at a
//! time and through composed models.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dep_core::numerics::{Graph, Tensor, Var};
use dep_core::projector::Mlp;
use dep_core::sae::{recon_loss, sparsity_loss, SaeState};

const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Checks every coordinate of every input of `f`, which builds a scalar from leaves.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vs);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = f(&mut g, &vs);
    g.backward(out).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = g.grad_or_zeros(vs[i]);
        for c in 0..x.numel() {
            let mut up = inputs.clone();
            up[i].data_mut()[c] += H;
            let mut down = inputs.clone();
            down[i].data_mut()[c] -= H;
            let num = (eval(&up) - eval(&down)) / (2.0 * H);
            let tol = 1e-6 * analytic[c].abs().max(num.abs()) + 1e-9;
            assert!((analytic[c] - num).abs() < tol, "input {i} coord {c}: analytic {} numeric {num}", analytic[c]);
        }
    }
}

fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_and_transposed_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b, c) = (random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[4, 2], 1.0), random(&mut rng, &[5, 4], 1.0));
    check(vec![a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, y)
    });
    check(vec![a, c], |g, v| {
        let y = g.matmul_bt(v[0], v[1]).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random(&mut rng, &[2, 5], 2.0), random(&mut rng, &[2, 5], 2.0));
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        let m = g.scale(m, -1.5);
        weighted_sum(g, m)
    });
    check(vec![a.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        weighted_sum(g, y)
    });
    check(vec![a.clone()], |g, v| {
        let y = g.gelu(v[0]);
        weighted_sum(g, y)
    });
    check(vec![a, b], |g, v| {
        let y = g.smooth_l1(v[0], v[1]).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn bias_broadcast_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, b) = (random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[4], 1.0));
    check(vec![x, b], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn softmaxes_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random(&mut rng, &[4, 4], 2.0);
    check(vec![s.clone()], |g, v| {
        let y = g.softmax(v[0]);
        weighted_sum(g, y)
    });
    check(vec![s.clone()], |g, v| {
        let y = g.causal_softmax(v[0]).unwrap();
        weighted_sum(g, y)
    });
    let (gain, bias) = (random(&mut rng, &[4], 1.0), random(&mut rng, &[4], 1.0));
    check(vec![s, gain, bias], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn reductions_and_row_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (table, rows) = (random(&mut rng, &[6, 3], 1.0), random(&mut rng, &[2, 3], 1.0));
    check(vec![table.clone(), rows], |g, v| {
        let x = g.gather_rows(v[0], &[4, 1, 1, 5]).unwrap();
        let x = g.replace_rows(x, &[0, 2], v[1]).unwrap();
        let x = g.select_rows(x, &[3, 0, 2]).unwrap();
        let m = g.mean_rows(x).unwrap();
        weighted_sum(g, m)
    });
    check(vec![table.clone(), table.clone()], |g, v| {
        let s = g.stack_rows(&[v[0], v[1]]).unwrap();
        let c = g.slice_cols(s, 1, 2).unwrap();
        let cc = g.concat_cols(&[c, s]).unwrap();
        let r = g.reshape(cc, &[60]).unwrap();
        let mean = g.mean(r);
        let w = weighted_sum(g, r);
        g.add(mean, w).unwrap()
    });
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(&mut rng, &[3, 7], 2.0);
    check(vec![logits], |g, v| g.cross_entropy(v[0], &[2, 6, 0]).unwrap());
    let probs = Tensor::new(vec![2, 3], vec![0.1, 0.4, 0.7, 0.06, 0.9, 0.3]).unwrap();
    check(vec![probs], |g, v| {
        let k = g.bernoulli_kl(v[0], 0.05);
        weighted_sum(g, k)
    });
}

#[test]
fn sae_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sae = SaeState::xavier(&mut rng, 6, 4);
    let w: Vec<Tensor> = sae.named().iter().map(|(_, t)| Tensor::clone(t)).collect();
    let (eh, ed) = (random(&mut rng, &[2, 6], 1.0), random(&mut rng, &[2, 6], 1.0));
    let mut inputs = w;
    inputs.extend([eh, ed]);
    check(inputs, |g, v| {
        let enc = |g: &mut Graph, e: Var| {
            let z = g.matmul(e, v[0]).unwrap();
            let z = g.add(z, v[1]).unwrap();
            g.sigmoid(z)
        };
        let dec = |g: &mut Graph, z: Var| {
            let y = g.matmul(z, v[2]).unwrap();
            g.add(y, v[3]).unwrap()
        };
        let zh = enc(g, v[4]);
        let zd = enc(g, v[5]);
        let (hh, hd) = (dec(g, zh), dec(g, zd));
        let r = recon_loss(g, v[4], hh, v[5], hd).unwrap();
        let s = sparsity_loss(g, zh, zd, 0.05).unwrap();
        let s = g.scale(s, 1e-3);
        let t = g.add(r, s).unwrap();
        g.scale(t, 100.0)
    });
}

#[test]
fn projector_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mlp = Mlp::xavier(&mut rng, 5, 4, 3);
    let z = random(&mut rng, &[2, 5], 1.0);
    let mut g = Graph::new();
    let vars = mlp.bind(&mut g, true);
    let zv = g.leaf(z.clone(), true);
    let y = vars.forward(&mut g, zv).unwrap();
    let out = weighted_sum(&mut g, y);
    g.backward(out).unwrap();
    let analytic = g.grad_or_zeros(zv);
    for c in 0..z.numel() {
        let f = |d: f64| {
            let mut zz = z.clone();
            zz.data_mut()[c] += d;
            let rows: Vec<Vec<f64>> = (0..2).map(|r| mlp.forward(zz.row(r)).unwrap()).collect();
            let y = Tensor::from_rows(&rows).unwrap();
            let mut g = Graph::new();
            let yv = g.constant(y);
            let s = weighted_sum(&mut g, yv);
            g.value(s).item()
        };
        let num = (f(H) - f(-H)) / (2.0 * H);
        assert!((analytic[c] - num).abs() < 1e-7 * num.abs().max(1.0), "coord {c}");
    }
}
