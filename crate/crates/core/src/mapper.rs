//! Trainable bridge from encoder features `[K_e, d_enc]` to decoder prefix
//! embeddings `[M_prefix, d_model]`.

use std::fmt;
use std::str::FromStr;

use ecgqa_autodiff::nn::gelu;
use ecgqa_autodiff::rng::hash_str;
use ecgqa_autodiff::{Checkpoint, ParameterSet, Tape, Tensor, Var, Vars};
use serde::{Deserialize, Serialize};

use crate::model::layers::{
    add_layer_norm, add_linear, apply_layer_norm, apply_linear, attention, maybe_dropout, uniform_fan_in, Train,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperVariant {
    Attention,
    Mlp,
    Linear,
}

impl MapperVariant {
    pub const ALL: [MapperVariant; 3] = [MapperVariant::Attention, MapperVariant::Mlp, MapperVariant::Linear];

    pub fn as_str(self) -> &'static str {
        match self {
            MapperVariant::Attention => "attention",
            MapperVariant::Mlp => "mlp",
            MapperVariant::Linear => "linear",
        }
    }
}

impl fmt::Display for MapperVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapperVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mapper variant {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    pub variant: MapperVariant,
    pub d_enc: usize,
    pub d_model: usize,
    pub k_e: usize,
    pub m_prefix: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            variant: MapperVariant::Attention,
            d_enc: 64,
            d_model: 64,
            k_e: 15,
            m_prefix: 8,
            heads: 8,
            layers: 4,
            mlp_layers: 3,
            mlp_hidden: 128,
            dropout: 0.5,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.d_model == 0 || self.k_e == 0 || self.m_prefix == 0 {
            return Err(Error::Config("mapper widths must be positive".into()));
        }
        if self.variant == MapperVariant::Attention && (self.heads == 0 || self.d_model % self.heads != 0) {
            return Err(Error::Config(format!("{} heads do not divide {}", self.heads, self.d_model)));
        }
        if self.variant == MapperVariant::Mlp && self.mlp_layers == 0 {
            return Err(Error::Config("mlp mapper needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Hex digest of the serialized configuration.
    pub fn hash(&self) -> String {
        format!("{:016x}", hash_str(&serde_json::to_string(self).expect("config serializes")))
    }

    /// Closed-form parameter count of the schema built by [`init_mapper`].
    pub fn param_count(&self) -> usize {
        let (d, e, m, k) = (self.d_model, self.d_enc, self.m_prefix, self.k_e);
        match self.variant {
            MapperVariant::Attention => {
                let layer = 3 * (2 * d) + (d * d + d) + (2 * d * d + 2 * d) + (d * d + d) + (2 * d * d + 2 * d) + (2 * d * d + d);
                (e * d + d) + m * d + self.layers * layer + (d * d + d)
            }
            MapperVariant::Mlp => {
                let h = self.mlp_hidden;
                let widths: Vec<usize> = std::iter::once(e)
                    .chain(std::iter::repeat_n(h, self.mlp_layers - 1))
                    .chain(std::iter::once(d))
                    .collect();
                widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() + m * k
            }
            MapperVariant::Linear => e * d + d + m * k,
        }
    }
}

/// Fan-in scaled uniform initialisation. Layer-norm gains start at one.
pub fn init_mapper(cfg: &MapperConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let (d, e) = (cfg.d_model, cfg.d_enc);
    let mut ps = ParameterSet::new();
    let pool = |ps: &mut ParameterSet| -> Result<()> {
        let t = uniform_fan_in(seed, "mapper.pool", &[cfg.m_prefix, cfg.k_e], cfg.k_e);
        ps.insert("mapper.pool", t, false)?;
        Ok(())
    };
    match cfg.variant {
        MapperVariant::Attention => {
            add_linear(&mut ps, seed, "mapper.in", e, d)?;
            ps.insert("mapper.seeds", uniform_fan_in(seed, "mapper.seeds", &[cfg.m_prefix, d], d), false)?;
            for l in 0..cfg.layers {
                let p = format!("mapper.layer{l}");
                add_layer_norm(&mut ps, &format!("{p}.ln_q"), d)?;
                add_layer_norm(&mut ps, &format!("{p}.ln_kv"), d)?;
                add_layer_norm(&mut ps, &format!("{p}.ln_ff"), d)?;
                add_linear(&mut ps, seed, &format!("{p}.q"), d, d)?;
                add_linear(&mut ps, seed, &format!("{p}.kv"), d, 2 * d)?;
                add_linear(&mut ps, seed, &format!("{p}.o"), d, d)?;
                add_linear(&mut ps, seed, &format!("{p}.ff1"), d, 2 * d)?;
                add_linear(&mut ps, seed, &format!("{p}.ff2"), 2 * d, d)?;
            }
            add_linear(&mut ps, seed, "mapper.out", d, d)?;
        }
        MapperVariant::Mlp => {
            let mut w_in = e;
            for l in 0..cfg.mlp_layers {
                let w_out = if l + 1 == cfg.mlp_layers { d } else { cfg.mlp_hidden };
                add_linear(&mut ps, seed, &format!("mapper.mlp{l}"), w_in, w_out)?;
                w_in = w_out;
            }
            pool(&mut ps)?;
        }
        MapperVariant::Linear => {
            add_linear(&mut ps, seed, "mapper.proj", e, d)?;
            pool(&mut ps)?;
        }
    }
    Ok(ps)
}

/// One cross-attention step of the attention variant: queries
/// `[batch * M, d]` attend over context `[batch * K_e, d]`.
pub fn cross_attend(vars: &Vars, cfg: &MapperConfig, layer: usize, queries: &Var, context: &Var, batch: usize) -> Result<Var> {
    let p = format!("mapper.layer{layer}");
    let d = cfg.d_model;
    let q = apply_linear(vars, &format!("{p}.q"), &apply_layer_norm(vars, &format!("{p}.ln_q"), queries)?)?;
    let kv = apply_linear(vars, &format!("{p}.kv"), &apply_layer_norm(vars, &format!("{p}.ln_kv"), context)?)?;
    attention(&q, &kv.slice_cols(0, d)?, &kv.slice_cols(d, d)?, batch, cfg.heads, None)
}

/// `e: [batch * K_e, d_enc]` -> `[batch * M_prefix, d_model]`. Dropout is
/// active only with a training context.
pub fn map_prefix(vars: &Vars, cfg: &MapperConfig, e: &Var, batch: usize, train: Option<Train<'_>>) -> Result<Var> {
    if e.shape() != [batch * cfg.k_e, cfg.d_enc] {
        return Err(Error::Config(format!(
            "mapper expects [{} x {}], got {:?}",
            batch * cfg.k_e,
            cfg.d_enc,
            e.shape()
        )));
    }
    let pooled = |h: &Var| -> Result<Var> {
        let pool = vars.get("mapper.pool")?.tile_rows(batch)?;
        Ok(pool.bmm(h, batch, false, false)?)
    };
    match cfg.variant {
        MapperVariant::Attention => {
            let context = apply_linear(vars, "mapper.in", e)?;
            let mut x = vars.get("mapper.seeds")?.tile_rows(batch)?;
            for l in 0..cfg.layers {
                let p = format!("mapper.layer{l}");
                let a = cross_attend(vars, cfg, l, &x, &context, batch)?;
                let a = apply_linear(vars, &format!("{p}.o"), &a)?;
                x = x.add(&maybe_dropout(&a, train, &format!("{p}.attn"))?)?;
                let h = apply_layer_norm(vars, &format!("{p}.ln_ff"), &x)?;
                let f = apply_linear(vars, &format!("{p}.ff2"), &gelu(&apply_linear(vars, &format!("{p}.ff1"), &h)?)?)?;
                x = x.add(&maybe_dropout(&f, train, &format!("{p}.ff"))?)?;
            }
            apply_linear(vars, "mapper.out", &x)
        }
        MapperVariant::Mlp => {
            let mut h = e.clone();
            for l in 0..cfg.mlp_layers {
                h = apply_linear(vars, &format!("mapper.mlp{l}"), &h)?;
                if l + 1 < cfg.mlp_layers {
                    h = maybe_dropout(&h.relu()?, train, &format!("mlp{l}"))?;
                }
            }
            pooled(&h)
        }
        MapperVariant::Linear => pooled(&apply_linear(vars, "mapper.proj", e)?),
    }
}

/// Inference-mode prefix for a stack of feature matrices.
pub fn map_prefix_eval(params: &ParameterSet, cfg: &MapperConfig, features: &[&Tensor]) -> Result<Tensor> {
    let tape = Tape::inference();
    let vars = params.to_vars(&tape);
    let e = tape.constant(stack_features(features)?);
    Ok((*map_prefix(&vars, cfg, &e, features.len(), None)?.value()).clone())
}

pub fn stack_features(features: &[&Tensor]) -> Result<Tensor> {
    let cols = features.first().map(|t| t.cols()).ok_or_else(|| Error::Config("no features".into()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for f in features {
        if f.cols() != cols {
            return Err(Error::Config("feature widths differ".into()));
        }
        data.extend_from_slice(f.data());
        rows += f.rows();
    }
    Ok(Tensor::new(&[rows, cols], data)?)
}

pub fn mapper_checkpoint(params: &ParameterSet, cfg: &MapperConfig, seed: u64) -> Checkpoint {
    Checkpoint::new(seed, params.clone())
        .with_tag("variant", cfg.variant.as_str())
        .with_tag("config_hash", cfg.hash())
}

/// Refuses checkpoints of another variant or schema.
pub fn load_mapper(ckpt: &Checkpoint, cfg: &MapperConfig) -> Result<ParameterSet> {
    if ckpt.tag("variant") != Some(cfg.variant.as_str()) {
        return Err(Error::Config(format!(
            "checkpoint holds a {:?} mapper, configuration expects {}",
            ckpt.tag("variant"),
            cfg.variant
        )));
    }
    let expected = init_mapper(cfg, 0)?;
    let same_schema = expected.len() == ckpt.params.len()
        && expected.iter().all(|(k, p)| ckpt.params.tensor(k).is_ok_and(|t| t.shape() == p.value.shape()));
    if !same_schema {
        return Err(Error::Config("checkpoint parameters do not match the mapper schema".into()));
    }
    Ok(ckpt.params.clone())
}

/// Worst relative error between tape and finite-difference gradients of a
/// random linear read-out of the mapper output, with respect to the
/// features and every parameter. Evaluation mode.
pub fn gradcheck_mapper(cfg: &MapperConfig, batch: usize, seed: u64) -> Result<f64> {
    let params = init_mapper(cfg, seed)?;
    let mut draw = ecgqa_autodiff::gradcheck::Draw::new(seed);
    let e = draw.tensor(&[batch * cfg.k_e, cfg.d_enc], -1.0, 1.0);
    let readout = std::sync::Arc::new(draw.tensor(&[batch * cfg.m_prefix, cfg.d_model], -1.0, 1.0));
    let paths: Vec<String> = params.paths().cloned().collect();
    let mut inputs = vec![e];
    inputs.extend(paths.iter().map(|p| params.tensor(p).cloned()).collect::<std::result::Result<Vec<_>, _>>()?);
    let f = |vs: &[Var]| -> ecgqa_autodiff::Result<Var> {
        let vars = Vars::from_map(paths.iter().cloned().zip(vs[1..].iter().cloned()).collect());
        let out = map_prefix(&vars, cfg, &vs[0], batch, None)
            .map_err(|err| ecgqa_autodiff::Error::Invalid(err.to_string()))?;
        out.mul_const(readout.clone())?.sum()
    };
    Ok(ecgqa_autodiff::gradcheck::check(&f, &inputs, 1e-5)?)
}
