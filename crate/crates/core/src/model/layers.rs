//! Building blocks shared by the encoder, the language model and the mapper.

use std::sync::Arc;

use ecgqa_autodiff::nn::{dropout, gelu, layer_norm, linear, DropoutKey};
use ecgqa_autodiff::rng::stream_key;
use ecgqa_autodiff::{ParameterSet, Tensor, Var, Vars};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

fn param_rng(seed: u64, path: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, 0, path))
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, keyed by path so insertion order
/// does not matter.
pub fn uniform_fan_in(seed: u64, path: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut rng = param_rng(seed, path);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

pub fn normal(seed: u64, path: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = param_rng(seed, path);
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(&mut rng))
}

/// Adds `{path}.w [fan_in, fan_out]` and `{path}.b [1, fan_out]`.
pub fn add_linear(ps: &mut ParameterSet, seed: u64, path: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    let w = format!("{path}.w");
    let b = format!("{path}.b");
    ps.insert(&w, uniform_fan_in(seed, &w, &[fan_in, fan_out], fan_in), false)?;
    ps.insert(&b, uniform_fan_in(seed, &b, &[1, fan_out], fan_in), false)?;
    Ok(())
}

pub fn add_layer_norm(ps: &mut ParameterSet, path: &str, width: usize) -> Result<()> {
    ps.insert(format!("{path}.g"), Tensor::ones(&[1, width]), false)?;
    ps.insert(format!("{path}.b"), Tensor::zeros(&[1, width]), false)?;
    Ok(())
}

pub fn apply_linear(vars: &Vars, path: &str, x: &Var) -> Result<Var> {
    let w = vars.get(&format!("{path}.w"))?;
    let b = vars.get(&format!("{path}.b"))?;
    Ok(linear(x, w, Some(b))?)
}

pub fn apply_layer_norm(vars: &Vars, path: &str, x: &Var) -> Result<Var> {
    let g = vars.get(&format!("{path}.g"))?;
    let b = vars.get(&format!("{path}.b"))?;
    Ok(layer_norm(x, Some(g), Some(b), LN_EPS)?)
}

/// Dropout context: `None` is evaluation mode.
#[derive(Clone, Copy, Debug)]
pub struct Train<'a> {
    pub seed: u64,
    pub step: u64,
    pub rate: f64,
    pub scope: &'a str,
}

pub fn maybe_dropout(x: &Var, train: Option<Train<'_>>, site: &str) -> Result<Var> {
    match train {
        None => Ok(x.clone()),
        Some(t) => {
            let path = format!("{}/{site}", t.scope);
            Ok(dropout(x, t.rate, Some(DropoutKey { seed: t.seed, step: t.step, path: &path }))?)
        }
    }
}

/// Additive causal mask `[t, t]`: 0 on and below the diagonal, a large
/// negative value above it.
pub fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| if i % t > i / t { -1e9 } else { 0.0 })
}

/// Multi-head scaled dot-product attention for `batch` independent
/// sequences. `q: [batch * tq, d]`, `k, v: [batch * tk, d]`; `mask` is an
/// additive `[tq, tk]` mask shared by all sequences and heads.
pub fn attention(
    q: &Var,
    k: &Var,
    v: &Var,
    batch: usize,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let (qs, ks) = (q.shape(), k.shape());
    let d = qs[1];
    if d % heads != 0 || ks[1] != d || v.shape() != ks {
        return Err(Error::Config(format!("attention widths {qs:?}/{ks:?} with {heads} heads")));
    }
    let (tq, tk, dh) = (qs[0] / batch, ks[0] / batch, d / heads);
    let qh = q.swap_mid(batch, tq, heads, dh)?;
    let kh = k.swap_mid(batch, tk, heads, dh)?;
    let vh = v.swap_mid(batch, tk, heads, dh)?;
    let mut scores = qh.bmm(&kh, batch * heads, false, true)?.scale(1.0 / (dh as f64).sqrt())?;
    if let Some(m) = mask {
        if m.shape() != [tq, tk] {
            return Err(Error::Config(format!("mask {:?} for {tq}x{tk} attention", m.shape())));
        }
        let tiled = Tensor::new(&[batch * heads * tq, tk], m.data().repeat(batch * heads))?;
        scores = scores.add_const(&tiled)?;
    }
    let out = scores.softmax()?.bmm(&vh, batch * heads, false, false)?;
    Ok(out.swap_mid(batch, heads, tq, dh)?.reshape(&[batch * tq, d])?)
}

/// Parameters of a pre-norm transformer block at `path`.
pub fn add_block(ps: &mut ParameterSet, seed: u64, path: &str, d: usize, d_ff: usize) -> Result<()> {
    add_layer_norm(ps, &format!("{path}.ln1"), d)?;
    add_linear(ps, seed, &format!("{path}.qkv"), d, 3 * d)?;
    add_linear(ps, seed, &format!("{path}.proj"), d, d)?;
    add_layer_norm(ps, &format!("{path}.ln2"), d)?;
    add_linear(ps, seed, &format!("{path}.ff1"), d, d_ff)?;
    add_linear(ps, seed, &format!("{path}.ff2"), d_ff, d)?;
    Ok(())
}

pub fn block_param_count(d: usize, d_ff: usize) -> usize {
    2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * d_ff + d_ff) + (d_ff * d + d)
}

/// `x + attn(ln1(x))`, then `x + ff(ln2(x))` with GELU.
pub fn apply_block(
    vars: &Vars,
    path: &str,
    x: &Var,
    batch: usize,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let d = x.shape()[1];
    let h = apply_layer_norm(vars, &format!("{path}.ln1"), x)?;
    let qkv = apply_linear(vars, &format!("{path}.qkv"), &h)?;
    let q = qkv.slice_cols(0, d)?;
    let k = qkv.slice_cols(d, d)?;
    let v = qkv.slice_cols(2 * d, d)?;
    let a = attention(&q, &k, &v, batch, heads, mask)?;
    let x = x.add(&apply_linear(vars, &format!("{path}.proj"), &a)?)?;
    let h = apply_layer_norm(vars, &format!("{path}.ln2"), &x)?;
    let f = gelu(&apply_linear(vars, &format!("{path}.ff1"), &h)?)?;
    Ok(x.add(&apply_linear(vars, &format!("{path}.ff2"), &f)?)?)
}

/// Stacks `rows` copies of a constant tensor into a shared buffer.
pub fn tiled(t: &Tensor, times: usize) -> Arc<Tensor> {
    let mut shape = t.shape().to_vec();
    shape[0] *= times;
    Arc::new(Tensor::new(&shape, t.data().repeat(times)).expect("shape matches data"))
}
