//! Central finite differences, evaluated through forward passes only, and
//! a catalogue of primitive checks built on them.

use std::sync::Arc;

use crate::kernels::Conv1dGeom;
use crate::nn::{self, DropoutKey};
use crate::rng;
use crate::{Result, Tape, Tensor, Var};

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape(), out)
}

/// `|a - b| / max(|a|, |b|)` over the flattened vectors, with a floor on the
/// denominator so that two vanishing gradients compare equal.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / a.norm().max(b.norm()).max(1e-8)
}

/// Builds a scalar from recorded inputs.
pub type ScalarFn<'a> = dyn Fn(&[Var]) -> Result<Var> + 'a;

/// Worst relative error between the tape gradient and central differences
/// over every input of `f`.
pub fn check(f: &ScalarFn<'_>, inputs: &[Tensor], eps: f64) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars)?;
    let analytic = tape.grad(&out, &vars, false)?;
    let mut worst = 0.0f64;
    for (k, g) in analytic.iter().enumerate() {
        let numeric = numeric_grad(
            |x| {
                let t = Tape::inference();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == k { x.clone() } else { v.clone() }))
                    .collect();
                f(&vs)?.item()
            },
            &inputs[k],
            eps,
        )?;
        worst = worst.max(relative_error(&g.value(), &numeric));
    }
    Ok(worst)
}

/// Small deterministic generator for test inputs.
#[derive(Clone, Debug)]
pub struct Draw {
    key: u64,
    counter: u64,
}

impl Draw {
    pub fn new(seed: u64) -> Self {
        Self { key: rng::splitmix64(seed ^ 0x5eed), counter: 0 }
    }

    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        rng::uniform(self.key, self.counter)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.range(lo, hi))
    }

    /// Values bounded away from zero, for kinks and poles.
    pub fn away_from_zero(&mut self, shape: &[usize], min: f64, max: f64) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let m = self.range(min, max);
            if self.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
    }
}

/// Projects `y` to a scalar with fixed random weights so that every output
/// element contributes a distinct sensitivity.
fn project(y: Var, salt: u64) -> Result<Var> {
    let shape = y.shape();
    let mut d = Draw::new(salt);
    let w = Arc::new(Tensor::from_fn(&shape, |_| d.range(-1.0, 1.0)));
    y.mul_const(w)?.sum()
}

pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Box<ScalarFn<'static>>,
}

/// One randomized instance of every primitive (and the composite layers).
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut d = Draw::new(seed);
    let r = 2 + d.index(3);
    let c = 2 + d.index(3);
    let k = 2 + d.index(3);
    let salt = seed.wrapping_mul(31).wrapping_add(7);
    let mut cases: Vec<PrimitiveCase> = Vec::new();
    let mut add = |name: &'static str, inputs: Vec<Tensor>, f: Box<ScalarFn<'static>>| {
        cases.push(PrimitiveCase { name, inputs, f });
    };

    add(
        "add",
        vec![d.tensor(&[r, c], -1.0, 1.0), d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].add(&v[1])?, salt)),
    );
    add(
        "sub",
        vec![d.tensor(&[r, c], -1.0, 1.0), d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].sub(&v[1])?, salt)),
    );
    add(
        "mul",
        vec![d.tensor(&[r, c], -1.0, 1.0), d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].mul(&v[1])?, salt)),
    );
    add(
        "scale_neg",
        vec![d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].scale(-1.7)?.neg()?, salt)),
    );
    add(
        "matmul",
        vec![d.tensor(&[r, k], -1.0, 1.0), d.tensor(&[k, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].matmul(&v[1])?, salt)),
    );
    for (name, ta, tb) in [
        ("bmm_tn", true, false),
        ("bmm_nt", false, true),
        ("bmm_tt", true, true),
    ] {
        let a_shape = if ta { [2 * k, r] } else { [2 * r, k] };
        let b_shape = if tb { [2 * c, k] } else { [2 * k, c] };
        add(
            name,
            vec![d.tensor(&a_shape, -1.0, 1.0), d.tensor(&b_shape, -1.0, 1.0)],
            Box::new(move |v| project(v[0].bmm(&v[1], 2, ta, tb)?, salt)),
        );
    }
    add(
        "transpose",
        vec![d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].transpose()?, salt)),
    );
    add(
        "reshape",
        vec![d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].reshape(&[c, r])?, salt)),
    );
    add(
        "concat",
        vec![d.tensor(&[r, c], -1.0, 1.0), d.tensor(&[r, k], -1.0, 1.0), d.tensor(&[k, c], -1.0, 1.0)],
        Box::new(move |v| {
            let wide = Var::concat(&[v[0].clone(), v[1].clone()], 1)?;
            let tall = Var::concat(&[v[0].clone(), v[2].clone()], 0)?;
            Ok(project(wide, salt)?.add(&project(tall, salt + 1)?)?)
        }),
    );
    add(
        "slice",
        vec![d.tensor(&[r + 1, c + 1], -1.0, 1.0)],
        Box::new(move |v| {
            let a = v[0].slice_rows(1, r)?;
            let b = v[0].slice_cols(1, c)?;
            project(a, salt)?.add(&project(b, salt + 1)?)
        }),
    );
    let idx: Vec<usize> = (0..r + 2).map(|_| d.index(k)).collect();
    let idx2 = idx.clone();
    add(
        "embedding_lookup",
        vec![d.tensor(&[k, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].gather_rows(&idx)?, salt)),
    );
    add(
        "scatter_add_rows",
        vec![d.tensor(&[idx2.len(), c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].scatter_add_rows(&idx2, k)?, salt)),
    );
    let picks: Vec<usize> = (0..r).map(|_| d.index(c)).collect();
    add(
        "pick_cols",
        vec![d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].pick_cols(&picks)?, salt)),
    );
    add(
        "sum_mean",
        vec![d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| v[0].mul(&v[0])?.mean()?.add(&v[0].sum()?.scale(0.3)?)),
    );
    add(
        "row_col_sums",
        vec![d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| {
            let a = v[0].row_sum()?.broadcast_cols(k)?;
            let b = v[0].col_sum()?.broadcast_rows(k)?;
            project(a, salt)?.add(&project(b, salt + 1)?)
        }),
    );
    add(
        "broadcast_scalar",
        vec![d.tensor(&[1, 1], -1.0, 1.0)],
        Box::new(move |v| project(v[0].broadcast_scalar(&[r, c])?, salt)),
    );
    add(
        "tile_rows",
        vec![d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].tile_rows(3)?, salt)),
    );
    add(
        "swap_mid",
        vec![d.tensor(&[2 * r * k, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].swap_mid(2, r, k, c)?, salt)),
    );
    add(
        "exp_log",
        vec![d.tensor(&[r, c], 0.2, 2.0)],
        Box::new(move |v| project(v[0].exp()?.add(&v[0].ln()?)?, salt)),
    );
    add(
        "tanh",
        vec![d.tensor(&[r, c], -2.0, 2.0)],
        Box::new(move |v| project(v[0].tanh()?, salt)),
    );
    add(
        "powf",
        vec![d.tensor(&[r, c], 0.3, 2.0)],
        Box::new(move |v| project(v[0].powf(-0.5)?.add(&v[0].powf(3.0)?)?, salt)),
    );
    add(
        "relu",
        vec![d.away_from_zero(&[r, c], 0.05, 1.0)],
        Box::new(move |v| project(v[0].relu()?, salt)),
    );
    add(
        "gelu",
        vec![d.tensor(&[r, c], -3.0, 3.0)],
        Box::new(move |v| project(nn::gelu(&v[0])?, salt)),
    );
    add(
        "softmax",
        vec![d.tensor(&[r, c], -2.0, 2.0)],
        Box::new(move |v| project(v[0].softmax()?, salt)),
    );
    add(
        "log_softmax",
        vec![d.tensor(&[r, c], -2.0, 2.0)],
        Box::new(move |v| project(v[0].log_softmax()?, salt)),
    );
    add(
        "layer_norm",
        vec![d.tensor(&[r, c + 1], -2.0, 2.0), d.tensor(&[1, c + 1], 0.5, 1.5), d.tensor(&[1, c + 1], -0.5, 0.5)],
        Box::new(move |v| project(nn::layer_norm(&v[0], Some(&v[1]), Some(&v[2]), 1e-5)?, salt)),
    );
    add(
        "dropout",
        vec![d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| {
            let key = DropoutKey { seed: salt, step: 3, path: "check.dropout" };
            project(nn::dropout(&v[0], 0.5, Some(key))?, salt)
        }),
    );
    let geom = Conv1dGeom { batch: 2, t_in: 6 + r, channels: c, kernel: 3, stride: 2, pad: 1 };
    add(
        "conv1d",
        vec![d.tensor(&[2 * geom.t_in, c], -1.0, 1.0), d.tensor(&[3 * c, k], -1.0, 1.0)],
        Box::new(move |v| project(v[0].unfold(geom)?.matmul(&v[1])?, salt)),
    );
    let targets: Vec<usize> = (0..r).map(|_| d.index(c)).collect();
    let mask: Vec<f64> = (0..r).map(|i| if i == 0 { 0.0 } else { 1.0 }).collect();
    add(
        "cross_entropy_nll",
        vec![d.tensor(&[r, c], -2.0, 2.0)],
        Box::new(move |v| nn::cross_entropy_nll(&v[0], &targets, &mask)),
    );
    let offset = d.tensor(&[r, c], -1.0, 1.0);
    let factor = Arc::new(d.tensor(&[r, c], -1.0, 1.0));
    add(
        "const_ops",
        vec![d.tensor(&[r, c], -1.0, 1.0)],
        Box::new(move |v| project(v[0].add_const(&offset)?.mul_const(factor.clone())?, salt)),
    );
    cases
}

/// Second-order probe on a random 10-parameter instance.
///
/// Inner objective `g(t) = sum_i c_i tanh((B t)_i) + 0.5 sum_j d_j t_j^2`,
/// outer objective `f(u) = sum_k softplus((C u)_k)`, meta-objective
/// `f(t - alpha * grad g(t))`. The tape differentiates through its own
/// recorded gradient of `g`; the reference differentiates the meta-objective
/// numerically, with `grad g` written out by hand. Returns the relative error.
pub fn second_order_probe(seed: u64) -> Result<f64> {
    const N: usize = 10;
    const M: usize = 6;
    let mut d = Draw::new(seed ^ 0xabcdef);
    let b = d.tensor(&[M, N], -0.6, 0.6);
    let c = d.tensor(&[M, 1], -1.0, 1.0);
    let dd = d.tensor(&[N, 1], 0.2, 1.0);
    let cm = d.tensor(&[M, N], -0.6, 0.6);
    let theta = d.tensor(&[N, 1], -1.0, 1.0);
    let alpha = 0.3;

    let tape = Tape::new();
    let t = tape.leaf(theta.clone());
    let bv = tape.constant(b.clone());
    let cv = tape.constant(c.clone());
    let dv = tape.constant(dd.clone());
    let cmv = tape.constant(cm.clone());
    let inner = bv
        .matmul(&t)?
        .tanh()?
        .mul(&cv)?
        .sum()?
        .add(&t.mul(&t)?.mul(&dv)?.sum()?.scale(0.5)?)?;
    let g = tape.grad(&inner, std::slice::from_ref(&t), true)?.remove(0);
    let adapted = t.sub(&g.scale(alpha)?)?;
    let z = cmv.matmul(&adapted)?;
    // softplus(z) = log(1 + exp(z))
    let outer = z.exp()?.add_const(&Tensor::ones(&[M, 1]))?.ln()?.sum()?;
    let meta = tape.grad(&outer, &[t], false)?.remove(0);

    let reference = |th: &Tensor| -> Result<f64> {
        let x = th.data();
        let mut grad = vec![0.0; N];
        for i in 0..M {
            let s: f64 = (0..N).map(|j| b.at(i, j) * x[j]).sum();
            let w = c.data()[i] * (1.0 - s.tanh().powi(2));
            for (j, gj) in grad.iter_mut().enumerate() {
                *gj += b.at(i, j) * w;
            }
        }
        let u: Vec<f64> = (0..N).map(|j| x[j] - alpha * (grad[j] + dd.data()[j] * x[j])).collect();
        Ok((0..M)
            .map(|k| {
                let zk: f64 = (0..N).map(|j| cm.at(k, j) * u[j]).sum();
                (1.0 + zk.exp()).ln()
            })
            .sum())
    };
    let numeric = numeric_grad(reference, &theta, 1e-5)?;
    Ok(relative_error(&meta.value(), &numeric))
}
