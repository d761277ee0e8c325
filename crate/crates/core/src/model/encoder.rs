//! Convolutional front end plus transformer: `[T_s, C]` -> `[K_e, d]`.

use std::collections::BTreeMap;

use ecgqa_autodiff::rng::stream_key;
use ecgqa_autodiff::{Conv1dGeom, ParameterSet, Tape, Tensor, Var, Vars};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{add_block, add_layer_norm, add_linear, apply_block, apply_layer_norm, apply_linear, normal};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::synth::signal::{random_lead_mask, EcgSignal, Findings};
use crate::synth::AttributeRegistry;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub t_len: usize,
    pub n_leads: usize,
    pub convs: Vec<ConvSpec>,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            t_len: 500,
            n_leads: 12,
            convs: vec![
                ConvSpec { channels: 48, kernel: 10, stride: 5 },
                ConvSpec { channels: 64, kernel: 10, stride: 6 },
            ],
            d_model: 64,
            depth: 2,
            heads: 4,
            d_ff: 128,
        }
    }
}

impl EncoderConfig {
    /// Output token count `K_e`.
    pub fn k_e(&self) -> Result<usize> {
        let mut t = self.t_len;
        for c in &self.convs {
            if c.kernel > t || c.stride == 0 {
                return Err(Error::Config(format!("convolution {c:?} does not fit length {t}")));
            }
            t = (t - c.kernel) / c.stride + 1;
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.k_e()?;
        if self.convs.last().map(|c| c.channels) != Some(self.d_model) {
            return Err(Error::Config("last convolution must produce d_model channels".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide {}", self.heads, self.d_model)));
        }
        Ok(())
    }
}

pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    let mut c_in = cfg.n_leads;
    for (i, c) in cfg.convs.iter().enumerate() {
        add_linear(&mut ps, seed, &format!("encoder.conv{i}"), c.kernel * c_in, c.channels)?;
        c_in = c.channels;
    }
    ps.insert("encoder.pos", normal(seed, "encoder.pos", &[cfg.k_e()?, cfg.d_model], 0.1), false)?;
    for i in 0..cfg.depth {
        add_block(&mut ps, seed, &format!("encoder.block{i}"), cfg.d_model, cfg.d_ff)?;
    }
    add_layer_norm(&mut ps, "encoder.ln_f", cfg.d_model)?;
    Ok(ps)
}

/// `x: [batch * T_s, C]` -> `[batch * K_e, d_model]`.
pub fn encode(vars: &Vars, cfg: &EncoderConfig, x: &Var, batch: usize) -> Result<Var> {
    if x.shape() != [batch * cfg.t_len, cfg.n_leads] {
        return Err(Error::Config(format!(
            "encoder expects [{} x {}], got {:?}",
            batch * cfg.t_len,
            cfg.n_leads,
            x.shape()
        )));
    }
    let mut h = x.clone();
    let (mut t, mut c_in) = (cfg.t_len, cfg.n_leads);
    for (i, c) in cfg.convs.iter().enumerate() {
        let geom = Conv1dGeom { batch, t_in: t, channels: c_in, kernel: c.kernel, stride: c.stride, pad: 0 };
        h = ecgqa_autodiff::nn::gelu(&apply_linear(vars, &format!("encoder.conv{i}"), &h.unfold(geom)?)?)?;
        t = geom.t_out();
        c_in = c.channels;
    }
    h = h.add(&vars.get("encoder.pos")?.tile_rows(batch)?)?;
    for i in 0..cfg.depth {
        h = apply_block(vars, &format!("encoder.block{i}"), &h, batch, cfg.heads, None)?;
    }
    apply_layer_norm(vars, "encoder.ln_f", &h)
}

/// Stacks signals into one `[n * T_s, C]` tensor.
pub fn stack_signals(signals: &[&EcgSignal]) -> Result<Tensor> {
    let (t, c) = signals
        .first()
        .map(|s| (s.t_len(), s.n_leads()))
        .ok_or_else(|| Error::Config("no signals".into()))?;
    let mut data = Vec::with_capacity(signals.len() * t * c);
    for s in signals {
        if (s.t_len(), s.n_leads()) != (t, c) {
            return Err(Error::Config("signals of mixed shape".into()));
        }
        data.extend(s.samples().iter().map(|&v| f64::from(v)));
    }
    Ok(Tensor::new(&[signals.len() * t, c], data)?)
}

/// Inference-mode features `[K_e, d_model]` for each signal.
pub fn encode_signals(params: &ParameterSet, cfg: &EncoderConfig, signals: &[&EcgSignal]) -> Result<Vec<Tensor>> {
    let k_e = cfg.k_e()?;
    let mut out = Vec::with_capacity(signals.len());
    for chunk in signals.chunks(64) {
        let tape = Tape::inference();
        let vars = params.to_vars(&tape);
        let x = tape.constant(stack_signals(chunk)?);
        let e = encode(&vars, cfg, &x, chunk.len())?.value();
        for i in 0..chunk.len() {
            let rows = e.data()[i * k_e * cfg.d_model..(i + 1) * k_e * cfg.d_model].to_vec();
            out.push(Tensor::new(&[k_e, cfg.d_model], rows)?);
        }
    }
    Ok(out)
}

pub fn encode_ecg(params: &ParameterSet, cfg: &EncoderConfig, x: &EcgSignal) -> Result<Tensor> {
    Ok(encode_signals(params, cfg, &[x])?.remove(0))
}

/// Mean over the `K_e` tokens of each sample: `[batch * K_e, d] -> [batch, d]`.
pub fn mean_pool(e: &Var, batch: usize) -> Result<Var> {
    let rows = e.shape()[0];
    let k = rows / batch;
    let pool = Tensor::from_fn(&[batch, rows], |i| if (i % rows) / k == i / rows { 1.0 / k as f64 } else { 0.0 });
    Ok(e.tape().constant(pool).matmul(e)?)
}

/// Detection targets: one per presence attribute, one per value of a valued
/// attribute.
pub fn label_space(attrs: &AttributeRegistry) -> Vec<(usize, Option<usize>)> {
    let mut out = Vec::new();
    for a in attrs.iter() {
        if a.is_valued() {
            out.extend((0..a.values.len()).map(|v| (a.id, Some(v))));
        } else {
            out.push((a.id, None));
        }
    }
    out
}

pub fn label_vector(space: &[(usize, Option<usize>)], findings: &Findings) -> Vec<f64> {
    space
        .iter()
        .map(|&(id, v)| {
            let hit = match v {
                None => findings.present.contains(&id),
                Some(v) => findings.values.get(&id) == Some(&v),
            };
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lead_mask_p: f64,
    /// Share of training records that receive a lead mask at all.
    pub masked_fraction: f64,
}

impl Default for EncoderPretrainConfig {
    fn default() -> Self {
        Self { epochs: 25, batch_size: 32, lr: 3e-3, lead_mask_p: 0.5, masked_fraction: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderPretrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Multi-label motif classification on top of mean-pooled features, with
/// random lead masking. The head is discarded; the returned encoder
/// weights are frozen.
pub fn pretrain_encoder(
    cfg: &EncoderConfig,
    pool: &[(EcgSignal, Findings)],
    attrs: &AttributeRegistry,
    train: &EncoderPretrainConfig,
    seed: u64,
) -> Result<(ParameterSet, EncoderPretrainReport)> {
    let mut params = init_encoder(cfg, seed)?;
    let space = label_space(attrs);
    add_linear(&mut params, seed, "head", cfg.d_model, space.len())?;
    let labels: Vec<Vec<f64>> = pool.iter().map(|(_, f)| label_vector(&space, f)).collect();
    let adam = AdamWConfig { lr: train.lr, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut opt = OptimizerState::new(adam, &params);
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, epoch as u64, "encoder-pretrain"));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size.max(1)) {
            let masked: Vec<EcgSignal> = batch
                .iter()
                .map(|&i| {
                    let keep = if rng.random::<f64>() < train.masked_fraction {
                        random_lead_mask(cfg.n_leads, train.lead_mask_p, &mut rng)
                    } else {
                        vec![true; cfg.n_leads]
                    };
                    pool[i].0.with_mask(&keep)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&EcgSignal> = masked.iter().collect();
            let y: Vec<f64> = batch.iter().flat_map(|&i| labels[i].iter().copied()).collect();
            let tape = Tape::new();
            let vars = params.to_vars(&tape);
            let x = tape.constant(stack_signals(&refs)?);
            let e = encode(&vars, cfg, &x, batch.len())?;
            let z = apply_linear(&vars, "head", &mean_pool(&e, batch.len())?)?;
            let loss = bce_with_logits(&z, &Tensor::new(&z.shape(), y)?)?;
            total += loss.item()? * batch.len() as f64;
            let grads = ecgqa_autodiff::grad_named(&loss, &vars, false)?;
            let grads: BTreeMap<String, Tensor> = grads.into_iter().map(|(k, g)| (k, (*g.value()).clone())).collect();
            opt.update(&mut params, &grads)?;
        }
        epoch_losses.push(total / pool.len().max(1) as f64);
    }
    let mut encoder = params.subset("encoder.");
    encoder.set_frozen(true);
    Ok((encoder, EncoderPretrainReport { epoch_losses }))
}

/// Mean binary cross-entropy, `softplus(z) - y z`.
pub fn bce_with_logits(z: &Var, y: &Tensor) -> Result<Var> {
    let shape = z.shape();
    let softplus = z.exp()?.add_const(&Tensor::ones(&shape))?.ln()?;
    let yz = z.mul_const(std::sync::Arc::new(y.clone()))?;
    Ok(softplus.sub(&yz)?.mean()?)
}

/// Per-target balanced accuracy of linear probes on mean-pooled features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub targets: BTreeMap<String, f64>,
    pub min_balanced_accuracy: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Fits one logistic-regression probe per detection target on 70% of the
/// pool and scores balanced accuracy on the rest.
pub fn probe_detectability(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    pool: &[(EcgSignal, Findings)],
    attrs: &AttributeRegistry,
    threshold: f64,
) -> Result<ProbeReport> {
    let refs: Vec<&EcgSignal> = pool.iter().map(|(s, _)| s).collect();
    let feats: Vec<Vec<f64>> = encode_signals(params, cfg, &refs)?
        .into_iter()
        .map(|e| {
            let (k, d) = (e.rows(), e.cols());
            (0..d).map(|j| (0..k).map(|i| e.at(i, j)).sum::<f64>() / k as f64).collect()
        })
        .collect();
    let d = cfg.d_model;
    let n = feats.len();
    let n_fit = n * 7 / 10;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for f in &feats[..n_fit] {
        for j in 0..d {
            mean[j] += f[j] / n_fit as f64;
        }
    }
    for f in &feats[..n_fit] {
        for j in 0..d {
            std[j] += (f[j] - mean[j]).powi(2) / n_fit as f64;
        }
    }
    let xs: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| (0..d).map(|j| (f[j] - mean[j]) / (std[j].sqrt() + 1e-8)).collect())
        .collect();
    let mut targets = BTreeMap::new();
    for attr in attrs.iter() {
        let (labels, classes): (Vec<usize>, usize) = if attr.is_valued() {
            let v = pool.iter().map(|(_, f)| f.values.get(&attr.id).copied().unwrap_or(attr.default_value));
            (v.collect(), attr.values.len())
        } else {
            (pool.iter().map(|(_, f)| usize::from(f.present.contains(&attr.id))).collect(), 2)
        };
        let w = fit_softmax(&xs[..n_fit], &labels[..n_fit], classes);
        targets.insert(attr.key.clone(), balanced_accuracy(&w, &xs[n_fit..], &labels[n_fit..], classes));
    }
    let min = targets.values().copied().fold(f64::INFINITY, f64::min);
    Ok(ProbeReport { targets, min_balanced_accuracy: min, threshold, passed: min >= threshold })
}

fn class_scores(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    w.iter().map(|wk| wk[d] + x.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>()).collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b })
}

/// Class-balanced multinomial logistic regression fitted by accelerated
/// gradient descent with a step size from the curvature bound. Returns one
/// weight row (bias last) per class.
fn fit_softmax(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let d = xs.first().map_or(0, Vec::len);
    let mut counts = vec![0.0; classes];
    for &y in ys {
        counts[y] += 1.0;
    }
    let present = counts.iter().filter(|&&c| c > 0.0).count().max(1) as f64;
    let weights: Vec<f64> = ys.iter().map(|&y| 1.0 / (present * counts[y])).collect();
    let step = 1.0 / (0.5 * weighted_top_eigenvalue(xs, &weights) + 1e-3);
    let mut w = vec![vec![0.0; d + 1]; classes];
    let mut prev = w.clone();
    for it in 0..PROBE_ITERATIONS {
        let momentum = it as f64 / (it as f64 + 3.0);
        let look: Vec<Vec<f64>> = w
            .iter()
            .zip(&prev)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + momentum * (x - y)).collect())
            .collect();
        let mut g = vec![vec![0.0; d + 1]; classes];
        for ((x, &y), &weight) in xs.iter().zip(ys).zip(&weights) {
            let z = class_scores(&look, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for k in 0..classes {
                let r = weight * (e[k] / total - f64::from(u8::from(k == y)));
                for j in 0..d {
                    g[k][j] += r * x[j];
                }
                g[k][d] += r;
            }
        }
        prev = std::mem::replace(
            &mut w,
            look.iter()
                .zip(&g)
                .map(|(l, gk)| {
                    (0..=d).map(|j| l[j] - step * (gk[j] + if j < d { PROBE_L2 * l[j] } else { 0.0 })).collect()
                })
                .collect(),
        );
    }
    w
}

const PROBE_ITERATIONS: usize = 600;
const PROBE_L2: f64 = 1e-3;

/// Largest eigenvalue of `sum_i w_i [x_i, 1] [x_i, 1]^T` by power iteration.
fn weighted_top_eigenvalue(xs: &[Vec<f64>], weights: &[f64]) -> f64 {
    let d = xs.first().map_or(0, Vec::len) + 1;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let mut next = vec![0.0; d];
        for (x, &w) in xs.iter().zip(weights) {
            let dot = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d - 1];
            for j in 0..d - 1 {
                next[j] += w * dot * x[j];
            }
            next[d - 1] += w * dot;
        }
        lambda = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if lambda == 0.0 {
            break;
        }
        v = next.iter().map(|a| a / lambda).collect();
    }
    lambda
}

/// Mean per-class recall over the classes present in `ys`.
fn balanced_accuracy(w: &[Vec<f64>], xs: &[Vec<f64>], ys: &[usize], classes: usize) -> f64 {
    let mut hit = vec![0.0; classes];
    let mut seen = vec![0.0; classes];
    for (x, &y) in xs.iter().zip(ys) {
        seen[y] += 1.0;
        if argmax(&class_scores(w, x)) == y {
            hit[y] += 1.0;
        }
    }
    let recalls: Vec<f64> = (0..classes).filter(|&k| seen[k] > 0.0).map(|k| hit[k] / seen[k]).collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}
