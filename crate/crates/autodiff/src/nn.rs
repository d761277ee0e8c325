//! Composite layers built from primitives. Their gradients, and the
//! gradients of those gradients, follow from the primitive rules.

use std::sync::Arc;

use crate::rng;
use crate::{Error, Result, Tensor, Var};

/// `x @ w + b` for `x: [r, in]`, `w: [in, out]`, `b: [out]` or `[1, out]`.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add_row(b),
        None => Ok(y),
    }
}

/// Row-wise layer normalisation with optional affine gain/bias rows.
pub fn layer_norm(x: &Var, gain: Option<&Var>, bias: Option<&Var>, eps: f64) -> Result<Var> {
    let t = x.value();
    let (rows, cols) = (t.rows(), t.cols());
    let centered = x.sub(&x.row_mean()?.broadcast_cols(cols)?)?;
    let var = centered.mul(&centered)?.row_mean()?;
    let inv = var.add_const(&Tensor::full(&[rows, 1], eps))?.powf(-0.5)?;
    let mut y = centered.mul(&inv.broadcast_cols(cols)?)?;
    if let Some(g) = gain {
        y = y.mul(&g.broadcast_rows(rows)?)?;
    }
    if let Some(b) = bias {
        y = y.add_row(b)?;
    }
    Ok(y)
}

/// GELU, tanh approximation.
pub fn gelu(x: &Var) -> Result<Var> {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let inner = x.add(&x.powf(3.0)?.scale(0.044_715)?)?.scale(C)?;
    let t = inner.tanh()?;
    x.scale(0.5)?.add(&x.mul(&t)?.scale(0.5)?)
}

/// Identifies one dropout site: masks are a pure function of these fields.
#[derive(Clone, Copy, Debug)]
pub struct DropoutKey<'a> {
    pub seed: u64,
    pub step: u64,
    pub path: &'a str,
}

/// Inverted dropout; identity when `p == 0` or `key` is `None` (eval mode).
pub fn dropout(x: &Var, p: f64, key: Option<DropoutKey<'_>>) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Invalid(format!("dropout rate {p}")));
    }
    let Some(key) = key else { return Ok(x.clone()) };
    if p == 0.0 {
        return Ok(x.clone());
    }
    let stream = rng::stream_key(key.seed, key.step, key.path);
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(&x.shape(), |i| {
        if rng::uniform(stream, i as u64) < p {
            0.0
        } else {
            keep
        }
    });
    x.mul_const(Arc::new(mask))
}

/// `-sum_t mask[t] * log softmax(logits[t])[targets[t]]`.
pub fn cross_entropy_nll(logits: &Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
    let t = logits.value();
    if targets.len() != t.rows() || mask.len() != t.rows() {
        return Err(Error::Shape(format!(
            "{} targets / {} mask weights for {} logit rows",
            targets.len(),
            mask.len(),
            t.rows()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&id| id >= t.cols()) {
        return Err(Error::Index { index: bad, len: t.cols() });
    }
    let picked = logits.log_softmax()?.pick_cols(targets)?;
    let weights = Arc::new(Tensor::new(&[mask.len(), 1], mask.to_vec())?);
    picked.mul_const(weights)?.sum()?.neg()
}
