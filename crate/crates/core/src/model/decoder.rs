//! Decoder-only language model with a soft prefix.
//!
//! Input layout per sequence: `M_prefix` prefix rows, `<sep>`, prompt
//! tokens, answer tokens. The output head is tied to the token embedding.

use std::collections::{BTreeMap, BTreeSet};

use ecgqa_autodiff::nn::cross_entropy_nll;
use ecgqa_autodiff::rng::stream_key;
use ecgqa_autodiff::{grad_named, ParameterSet, Tape, Tensor, Var, Vars};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{add_block, add_layer_norm, apply_block, apply_layer_norm, causal_mask, normal};
use super::tokenizer::{Tokenizer, EOS, PAD, SEP};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::synth::corpus::sample_findings;
use crate::synth::{ClassRegistry, Findings, PromptVariant, QuestionType, PARAPHRASES};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub m_prefix: usize,
    pub max_answer_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab: 0,
            d_model: 64,
            depth: 2,
            heads: 4,
            d_ff: 128,
            max_positions: 64,
            m_prefix: 8,
            max_answer_len: 6,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= SEP {
            return Err(Error::Config("vocabulary too small".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide {}", self.heads, self.d_model)));
        }
        if self.m_prefix == 0 || self.m_prefix >= self.max_positions {
            return Err(Error::Config("prefix length must be in [1, max_positions)".into()));
        }
        Ok(())
    }
}

pub fn init_lm(cfg: &DecoderConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    ps.insert("decoder.tok_emb", normal(seed, "decoder.tok_emb", &[cfg.vocab, cfg.d_model], 0.02), false)?;
    ps.insert("decoder.pos", normal(seed, "decoder.pos", &[cfg.max_positions, cfg.d_model], 0.02), false)?;
    for i in 0..cfg.depth {
        add_block(&mut ps, seed, &format!("decoder.block{i}"), cfg.d_model, cfg.d_ff)?;
    }
    add_layer_norm(&mut ps, "decoder.ln_f", cfg.d_model)?;
    Ok(ps)
}

/// Final hidden states `[batch * T, d]` for prefixes `[batch * M, d]` and
/// token sequences (each starting with `<sep>`), right-padded to a common
/// length `T = M + max len`.
pub fn hidden_states(vars: &Vars, cfg: &DecoderConfig, prefix: &Var, texts: &[Vec<usize>]) -> Result<(Var, usize)> {
    let batch = texts.len();
    let m = cfg.m_prefix;
    if batch == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    if prefix.shape() != [batch * m, cfg.d_model] {
        return Err(Error::Config(format!(
            "prefix {:?} for {batch} sequences of {m} x {}",
            prefix.shape(),
            cfg.d_model
        )));
    }
    let t = m + texts.iter().map(Vec::len).max().unwrap_or(0);
    if t > cfg.max_positions {
        return Err(Error::Config(format!("sequence length {t} exceeds {}", cfg.max_positions)));
    }
    let mut rows = Vec::with_capacity(batch * t);
    let mut ids = Vec::new();
    for (b, text) in texts.iter().enumerate() {
        rows.extend((0..m).map(|j| b * t + j));
        for &id in text {
            if id >= cfg.vocab {
                return Err(Error::Vocab(format!("token id {id} outside vocabulary of {}", cfg.vocab)));
            }
            ids.push(id);
        }
    }
    let mut text_rows = Vec::with_capacity(ids.len());
    for (b, text) in texts.iter().enumerate() {
        text_rows.extend((0..text.len()).map(|j| b * t + m + j));
    }
    let emb = vars.get("decoder.tok_emb")?;
    let tokens = emb.gather_rows(&ids)?;
    rows.extend(text_rows);
    let placed = Var::concat(&[prefix.clone(), tokens], 0)?.scatter_add_rows(&rows, batch * t)?;
    let pos = vars.get("decoder.pos")?.slice_rows(0, t)?.tile_rows(batch)?;
    let mut h = placed.add(&pos)?;
    let mask = causal_mask(t);
    for i in 0..cfg.depth {
        h = apply_block(vars, &format!("decoder.block{i}"), &h, batch, cfg.heads, Some(&mask))?;
    }
    Ok((apply_layer_norm(vars, "decoder.ln_f", &h)?, t))
}

/// Tied-head logits for the selected hidden rows.
pub fn logits_at(vars: &Vars, hidden: &Var, rows: &[usize]) -> Result<Var> {
    let emb = vars.get("decoder.tok_emb")?;
    Ok(hidden.gather_rows(rows)?.bmm(emb, 1, false, true)?)
}

/// One teacher-forced item: prompt tokens and the answer tokens to score.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scored {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Scored {
    /// `<sep> prompt answer`.
    fn input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(1 + self.prompt.len() + self.answer.len());
        v.push(SEP);
        v.extend_from_slice(&self.prompt);
        v.extend_from_slice(&self.answer);
        v
    }
}

/// Logits for every answer token followed by `<eos>`, stacked over the
/// batch, with their targets.
pub fn answer_logits(
    vars: &Vars,
    cfg: &DecoderConfig,
    prefix: &Var,
    items: &[Scored],
) -> Result<(Var, Vec<usize>)> {
    let texts: Vec<Vec<usize>> = items.iter().map(Scored::input).collect();
    let (h, t) = hidden_states(vars, cfg, prefix, &texts)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, it) in items.iter().enumerate() {
        let first = b * t + cfg.m_prefix + it.prompt.len();
        rows.extend(first..=first + it.answer.len());
        targets.extend_from_slice(&it.answer);
        targets.push(EOS);
    }
    Ok((logits_at(vars, &h, &rows)?, targets))
}

/// `[n + 1, V]` logits predicting each of the `n` answer tokens, then `<eos>`.
pub fn teacher_forced_logits(
    vars: &Vars,
    cfg: &DecoderConfig,
    prefix: &Var,
    prompt: &[usize],
    answer: &[usize],
) -> Result<Var> {
    let item = Scored { prompt: prompt.to_vec(), answer: answer.to_vec() };
    Ok(answer_logits(vars, cfg, prefix, &[item])?.0)
}

/// Mean NLL over all answer and `<eos>` positions of the batch.
pub fn answer_nll(vars: &Vars, cfg: &DecoderConfig, prefix: &Var, items: &[Scored]) -> Result<Var> {
    let (logits, targets) = answer_logits(vars, cfg, prefix, items)?;
    let mask = vec![1.0; targets.len()];
    Ok(cross_entropy_nll(&logits, &targets, &mask)?.scale(1.0 / targets.len() as f64)?)
}

/// Greedy decoding for a batch of prefixes `[batch * M, d]`. Stops a
/// sequence at `<eos>` (not included) or after `max_len` tokens.
pub fn decode_answers(
    lm: &ParameterSet,
    cfg: &DecoderConfig,
    prefix: &Tensor,
    prompts: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let batch = prompts.len();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); batch];
    let mut done = vec![false; batch];
    for _ in 0..max_len {
        let live: Vec<usize> = (0..batch).filter(|&b| !done[b]).collect();
        if live.is_empty() {
            break;
        }
        let tape = Tape::inference();
        let vars = lm.to_vars(&tape);
        let rows_per = cfg.m_prefix * cfg.d_model;
        let mut data = Vec::with_capacity(live.len() * rows_per);
        for &b in &live {
            data.extend_from_slice(&prefix.data()[b * rows_per..(b + 1) * rows_per]);
        }
        let p = tape.constant(Tensor::new(&[live.len() * cfg.m_prefix, cfg.d_model], data)?);
        let texts: Vec<Vec<usize>> = live
            .iter()
            .map(|&b| {
                let mut v = vec![SEP];
                v.extend_from_slice(&prompts[b]);
                v.extend_from_slice(&out[b]);
                v
            })
            .collect();
        let (h, t) = hidden_states(&vars, cfg, &p, &texts)?;
        let rows: Vec<usize> = texts.iter().enumerate().map(|(i, x)| i * t + cfg.m_prefix + x.len() - 1).collect();
        let logits = logits_at(&vars, &h, &rows)?.value();
        for (i, &b) in live.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == EOS {
                done[b] = true;
            } else {
                out[b].push(best);
            }
        }
    }
    Ok(out)
}

pub fn decode_answer(
    lm: &ParameterSet,
    cfg: &DecoderConfig,
    prefix: &Tensor,
    prompt: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    Ok(decode_answers(lm, cfg, prefix, &[prompt.to_vec()], max_len)?.remove(0))
}

pub fn build_tokenizer(registry: &ClassRegistry) -> Result<Tokenizer> {
    Tokenizer::build(&registry.all_texts()?, &registry.attributes.concepts())
}

/// Concept tokens describing `findings`: every present attribute and the
/// value of every valued attribute.
pub fn caption_concepts(registry: &ClassRegistry, findings: &Findings) -> Result<Vec<String>> {
    let attrs = &registry.attributes;
    let mut out = Vec::new();
    for &id in &findings.present {
        out.push(attrs.get(id)?.concept(None));
    }
    for a in attrs.iter().filter(|a| a.is_valued()) {
        let v = findings.values.get(&a.id).copied().unwrap_or(a.default_value);
        out.push(a.concept(Some(v)));
    }
    Ok(out)
}

/// A pretraining sequence: caption concepts standing in for the prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmExample {
    pub caption: Vec<usize>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Rendered question/answer pairs over every class, question type drawn
/// uniformly, paraphrase and prompt variant at random. Concepts needed to
/// answer are always kept in the caption; the others fill the remaining
/// slots in random order.
pub fn lm_examples(
    registry: &ClassRegistry,
    tok: &Tokenizer,
    m_prefix: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<LmExample>> {
    let types: Vec<QuestionType> = QuestionType::ALL
        .into_iter()
        .filter(|q| registry.classes.iter().any(|c| c.question_type == *q))
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, i as u64, "lm-example"));
        let qt = types[rng.random_range(0..types.len())];
        let pool: Vec<_> = registry.classes.iter().filter(|c| c.question_type == qt).collect();
        let cls = pool[rng.random_range(0..pool.len())];
        let findings = sample_findings(registry, cls, 0.2, &mut rng)?;
        let variant = PromptVariant::ALL[rng.random_range(0..3)];
        let prompt = registry.render_question(cls, rng.random_range(0..PARAPHRASES), variant)?;
        let answer = registry.derive_answer(cls, &findings)?;
        let needed: BTreeSet<String> = cls
            .attributes
            .iter()
            .filter_map(|&a| registry.attributes.get(a).ok())
            .flat_map(|a| {
                if a.is_valued() {
                    vec![a.concept(findings.values.get(&a.id).copied())]
                } else if findings.present.contains(&a.id) {
                    vec![a.concept(None)]
                } else {
                    vec![]
                }
            })
            .collect();
        let mut rest: Vec<String> =
            caption_concepts(registry, &findings)?.into_iter().filter(|c| !needed.contains(c)).collect();
        rest.shuffle(&mut rng);
        let mut caption: Vec<String> = needed.into_iter().chain(rest).take(m_prefix).collect();
        caption.shuffle(&mut rng);
        out.push(LmExample {
            caption: caption.iter().map(|c| tok.id(c)).collect::<Result<_>>()?,
            prompt: tok.encode(&prompt)?,
            answer: tok.encode(&answer)?,
        });
    }
    Ok(out)
}

/// Caption prefix rows: concept embeddings, `<pad>` embeddings after.
fn caption_prefix(vars: &Vars, cfg: &DecoderConfig, batch: &[&LmExample]) -> Result<Var> {
    let mut ids = Vec::with_capacity(batch.len() * cfg.m_prefix);
    for ex in batch {
        ids.extend(ex.caption.iter().copied().chain(std::iter::repeat(PAD)).take(cfg.m_prefix));
    }
    Ok(vars.get("decoder.tok_emb")?.gather_rows(&ids)?)
}

/// Summed NLL and count over every text position after `<sep>`.
fn text_nll(vars: &Vars, cfg: &DecoderConfig, batch: &[&LmExample]) -> Result<(Var, usize)> {
    let prefix = caption_prefix(vars, cfg, batch)?;
    let texts: Vec<Vec<usize>> = batch
        .iter()
        .map(|e| std::iter::once(SEP).chain(e.prompt.iter().copied()).chain(e.answer.iter().copied()).collect())
        .collect();
    let (h, t) = hidden_states(vars, cfg, &prefix, &texts)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, text) in texts.iter().enumerate() {
        for j in 0..text.len() {
            rows.push(b * t + cfg.m_prefix + j);
            targets.push(text.get(j + 1).copied().unwrap_or(EOS));
        }
    }
    let logits = logits_at(vars, &h, &rows)?;
    let n = targets.len();
    Ok((cross_entropy_nll(&logits, &targets, &vec![1.0; n])?, n))
}

pub fn perplexity(lm: &ParameterSet, cfg: &DecoderConfig, examples: &[LmExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in examples.chunks(64) {
        let tape = Tape::inference();
        let vars = lm.to_vars(&tape);
        let refs: Vec<&LmExample> = chunk.iter().collect();
        let (nll, n) = text_nll(&vars, cfg, &refs)?;
        total += nll.item()?;
        count += n;
    }
    Ok((total / count.max(1) as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_examples: usize,
    pub eval_examples: usize,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        Self { steps: 800, batch_size: 32, lr: 3e-3, train_examples: 8000, eval_examples: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmPretrainReport {
    pub vocab: usize,
    pub perplexity_untrained: f64,
    pub perplexity_trained: f64,
    pub improvement: f64,
    pub losses: Vec<f64>,
}

/// Next-token training on rendered QA text with caption prefixes. The
/// returned weights are frozen.
pub fn pretrain_lm(
    cfg: &DecoderConfig,
    registry: &ClassRegistry,
    tok: &Tokenizer,
    train: &LmPretrainConfig,
    seed: u64,
) -> Result<(ParameterSet, LmPretrainReport)> {
    let mut params = init_lm(cfg, seed)?;
    let data = lm_examples(registry, tok, cfg.m_prefix, train.train_examples.max(1), stream_key(seed, 0, "lm-train"))?;
    let held_out = lm_examples(registry, tok, cfg.m_prefix, train.eval_examples.max(1), stream_key(seed, 1, "lm-eval"))?;
    let before = perplexity(&params, cfg, &held_out)?;
    let adam = AdamWConfig { lr: train.lr, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut opt = OptimizerState::new(adam, &params);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, step as u64, "lm-batch"));
        let batch: Vec<&LmExample> = (0..train.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let tape = Tape::new();
        let vars = params.to_vars(&tape);
        let (nll, n) = text_nll(&vars, cfg, &batch)?;
        let loss = nll.scale(1.0 / n as f64)?;
        losses.push(loss.item()?);
        let grads: BTreeMap<String, Tensor> =
            grad_named(&loss, &vars, false)?.into_iter().map(|(k, g)| (k, (*g.value()).clone())).collect();
        let lr_scale = 1.0 - step as f64 / train.steps as f64;
        opt.config.lr = train.lr * lr_scale.max(0.05);
        opt.update(&mut params, &grads)?;
    }
    let after = perplexity(&params, cfg, &held_out)?;
    params.set_frozen(true);
    Ok((
        params,
        LmPretrainReport {
            vocab: cfg.vocab,
            perplexity_untrained: before,
            perplexity_trained: after,
            improvement: before / after,
            losses,
        },
    ))
}
