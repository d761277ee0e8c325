//! Episodic meta-learning of the mapper over frozen backbones.
//!
//! Inner loop: plain SGD on the support loss. Outer loop: AdamW on the sum
//! of the adapted query losses, differentiating through the inner updates
//! unless `second_order` is off.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ecgqa_autodiff::nn::cross_entropy_nll;
use ecgqa_autodiff::rng::stream_key;
use ecgqa_autodiff::{grad_named, Checkpoint, ParameterSet, Tape, Tensor, Var, Vars};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mapper::{map_prefix, stack_features, MapperConfig};
use crate::metrics::{ItemScore, MeanStd};
use crate::model::decoder::{answer_logits, decode_answers, DecoderConfig, Scored};
use crate::model::encoder::{encode, encode_signals, stack_signals, EncoderConfig};
use crate::model::layers::Train;
use crate::model::tokenizer::Tokenizer;
use crate::optim::{AdamWConfig, OptimizerState};
use crate::synth::{Corpus, EcgSignal, Episode, EpisodeSampler, PromptVariant};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub finetune_steps: usize,
    pub meta_train_steps: usize,
    pub meta_test_episodes: usize,
    pub meta_batch: usize,
    pub second_order: bool,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.05,
            outer_lr: 5e-4,
            inner_steps: 5,
            finetune_steps: 15,
            meta_train_steps: 1000,
            meta_test_episodes: 200,
            meta_batch: 4,
            second_order: true,
            weight_decay: 0.01,
            checkpoint_every: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.inner_steps == 0 || self.meta_batch == 0 {
            return Err(Error::Config("inner steps and meta-batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.outer_lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Encoder features per signal of a corpus, computed once with the frozen
/// encoder.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    features: Vec<Arc<Tensor>>,
}

impl FeatureBank {
    pub fn build(encoder: &ParameterSet, cfg: &EncoderConfig, signals: &[EcgSignal]) -> Result<Self> {
        let refs: Vec<&EcgSignal> = signals.iter().collect();
        let features = encode_signals(encoder, cfg, &refs)?.into_iter().map(Arc::new).collect();
        Ok(Self { features })
    }

    pub fn get(&self, signal: usize) -> Result<&Tensor> {
        self.features
            .get(signal)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::Config(format!("no features for signal {signal}")))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Frozen backbones plus everything needed to turn triplets into losses.
pub struct TaskContext<'a> {
    pub corpus: &'a Corpus,
    pub tokenizer: &'a Tokenizer,
    pub lm: &'a ParameterSet,
    pub lm_cfg: &'a DecoderConfig,
    pub encoder: &'a ParameterSet,
    pub encoder_cfg: &'a EncoderConfig,
    pub mapper_cfg: &'a MapperConfig,
    pub features: &'a FeatureBank,
    pub prompt: PromptVariant,
}

impl TaskContext<'_> {
    pub fn scored(&self, triplet: usize) -> Result<Scored> {
        let t = self.triplet(triplet)?;
        let cls = self.corpus.class(t.class_id)?;
        let prompt = self.corpus.registry.render_question(cls, t.paraphrase_id, self.prompt)?;
        Ok(Scored { prompt: self.tokenizer.encode(&prompt)?, answer: self.tokenizer.encode(&t.answer)? })
    }

    fn triplet(&self, i: usize) -> Result<&crate::synth::QaTriplet> {
        self.corpus.triplets.get(i).ok_or_else(|| Error::Sampling(format!("triplet {i} out of range")))
    }

    fn signal(&self, i: usize) -> Result<&EcgSignal> {
        Ok(self.corpus.signal(self.triplet(i)?))
    }

    /// Frozen decoder (and encoder, unless trainable) on `tape`, with `theta`.
    pub fn vars(&self, tape: &Tape, theta: &ParameterSet) -> Vars {
        let mut vars = self.lm.to_vars(tape);
        if !encoder_trainable(theta) {
            for (k, v) in self.encoder.to_vars(tape).iter() {
                vars.insert(k.clone(), v.clone());
            }
        }
        for (k, v) in theta.to_vars(tape).iter() {
            vars.insert(k.clone(), v.clone());
        }
        vars
    }

    /// Encoder features `[batch * K_e, d]`: cached unless the encoder is
    /// among the adapted parameters.
    fn features_for(&self, vars: &Vars, tape: &Tape, items: &[usize], trainable: bool) -> Result<Var> {
        if trainable {
            let signals = items.iter().map(|&i| self.signal(i)).collect::<Result<Vec<_>>>()?;
            let x = tape.constant(stack_signals(&signals)?);
            return encode(vars, self.encoder_cfg, &x, items.len());
        }
        let feats = items
            .iter()
            .map(|&i| self.features.get(self.triplet(i)?.signal_index))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.constant(stack_features(&feats)?))
    }

    fn prefix(&self, vars: &Vars, tape: &Tape, items: &[usize], trainable: bool, train: Option<Train<'_>>) -> Result<Var> {
        let e = self.features_for(vars, tape, items, trainable)?;
        map_prefix(vars, self.mapper_cfg, &e, items.len(), train)
    }
}

pub fn encoder_trainable(theta: &ParameterSet) -> bool {
    theta.iter().any(|(k, p)| k.starts_with("encoder.") && !p.frozen)
}

/// Mean NLL over answer tokens (and `<eos>`) plus the teacher-forced token
/// accuracy.
pub fn task_loss_vars(
    ctx: &TaskContext<'_>,
    vars: &Vars,
    tape: &Tape,
    items: &[usize],
    trainable_encoder: bool,
    train: Option<Train<'_>>,
) -> Result<(Var, f64)> {
    if items.is_empty() {
        return Err(Error::Sampling("empty batch".into()));
    }
    let prefix = ctx.prefix(vars, tape, items, trainable_encoder, train)?;
    let scored = items.iter().map(|&i| ctx.scored(i)).collect::<Result<Vec<_>>>()?;
    let (logits, targets) = answer_logits(vars, ctx.lm_cfg, &prefix, &scored)?;
    let n = targets.len();
    let loss = cross_entropy_nll(&logits, &targets, &vec![1.0; n])?.scale(1.0 / n as f64)?;
    let lv = logits.value();
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| {
            let row = lv.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == t
        })
        .count();
    Ok((loss, hits as f64 / n as f64))
}

/// Evaluation-mode loss of `theta` on `items`.
pub fn task_loss(ctx: &TaskContext<'_>, theta: &ParameterSet, items: &[usize]) -> Result<f64> {
    let tape = Tape::inference();
    let vars = ctx.vars(&tape, theta);
    Ok(task_loss_vars(ctx, &vars, &tape, items, encoder_trainable(theta), None)?.0.item()?)
}

fn adaptable(vars: &Vars, theta: &ParameterSet) -> Result<Vars> {
    let mut out = Vars::default();
    for path in theta.trainable_paths() {
        out.insert(path.clone(), vars.get(&path)?.clone());
    }
    Ok(out)
}

fn with_replaced(vars: &Vars, fast: &Vars) -> Vars {
    let mut out = vars.clone();
    for (k, v) in fast.iter() {
        out.insert(k.clone(), v.clone());
    }
    out
}

/// Dropout keys for one episode: a distinct stream per (seed, step).
#[derive(Clone, Copy, Debug)]
pub struct DropoutPlan {
    pub seed: u64,
    pub rate: f64,
}

impl DropoutPlan {
    fn at(self, step: u64, scope: &str) -> Option<Train<'_>> {
        (self.rate > 0.0).then_some(Train { seed: self.seed, step, rate: self.rate, scope })
    }
}

/// `steps` SGD updates on the support loss starting from the entries of
/// `vars` that `theta` marks trainable. Returns the fast weights and the
/// support losses seen before each update.
#[allow(clippy::too_many_arguments)]
fn adapt_on_tape(
    ctx: &TaskContext<'_>,
    vars: &Vars,
    tape: &Tape,
    theta: &ParameterSet,
    support: &[usize],
    steps: usize,
    alpha: f64,
    create_graph: bool,
    dropout: Option<DropoutPlan>,
) -> Result<(Vars, Vec<f64>)> {
    let trainable = encoder_trainable(theta);
    let mut fast = adaptable(vars, theta)?;
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let current = with_replaced(vars, &fast);
        let scope = format!("inner{s}");
        let train = dropout.and_then(|d| d.at(s as u64, &scope));
        let (loss, _) = task_loss_vars(ctx, &current, tape, support, trainable, train)?;
        losses.push(loss.item()?);
        let grads = grad_named(&loss, &fast, create_graph)?;
        let mut next = Vars::default();
        for (k, w) in fast.iter() {
            next.insert(k.clone(), w.sub(&grads[k].scale(alpha)?)?);
        }
        fast = next;
    }
    Ok((fast, losses))
}

/// Adapted copy of `theta` after `cfg.inner_steps` SGD steps on `support`.
/// `theta` itself is left untouched.
pub fn inner_adapt(
    ctx: &TaskContext<'_>,
    theta: &ParameterSet,
    support: &[usize],
    cfg: &MetaConfig,
) -> Result<ParameterSet> {
    finetune(ctx, theta, support, cfg.inner_steps, cfg.inner_lr, None)
}

/// Detached SGD fine-tuning, one tape per step.
pub fn finetune(
    ctx: &TaskContext<'_>,
    theta: &ParameterSet,
    support: &[usize],
    steps: usize,
    alpha: f64,
    dropout: Option<DropoutPlan>,
) -> Result<ParameterSet> {
    if support.is_empty() {
        return Err(Error::Sampling("empty support set".into()));
    }
    let mut current = theta.clone();
    for s in 0..steps {
        let tape = Tape::new();
        let vars = ctx.vars(&tape, &current);
        let plan = dropout.map(|d| DropoutPlan { seed: stream_key(d.seed, s as u64, "finetune"), rate: d.rate });
        let (fast, _) = adapt_on_tape(ctx, &vars, &tape, &current, support, 1, alpha, false, plan)?;
        let mut next = current.clone();
        for (k, v) in fast.iter() {
            next.set(k, (*v.value()).clone())?;
        }
        current = next;
    }
    Ok(current)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub classes: Vec<usize>,
    pub support_loss_before: f64,
    pub support_loss_after: f64,
    pub query_loss: f64,
    pub query_token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub meta_loss: f64,
    pub episodes: Vec<EpisodeLog>,
}

/// Summed adapted query loss of each episode and its gradient with respect
/// to the trainable entries of `theta`.
pub fn meta_gradient(
    ctx: &TaskContext<'_>,
    theta: &ParameterSet,
    episodes: &[(u64, &Episode)],
    cfg: &MetaConfig,
    dropout_rate: f64,
) -> Result<(BTreeMap<String, Tensor>, Vec<EpisodeLog>)> {
    if episodes.is_empty() {
        return Err(Error::Sampling("empty meta-batch".into()));
    }
    let trainable = encoder_trainable(theta);
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut logs = Vec::with_capacity(episodes.len());
    for &(seed, ep) in episodes {
        let tape = Tape::new();
        let vars = ctx.vars(&tape, theta);
        let plan = DropoutPlan { seed: stream_key(seed, 0, "dropout"), rate: dropout_rate };
        let (fast, support_losses) = adapt_on_tape(
            ctx,
            &vars,
            &tape,
            theta,
            &ep.support,
            cfg.inner_steps,
            cfg.inner_lr,
            cfg.second_order,
            Some(plan),
        )?;
        let adapted = with_replaced(&vars, &fast);
        let train = plan.at(cfg.inner_steps as u64, "query");
        let (query_loss, acc) = task_loss_vars(ctx, &adapted, &tape, &ep.query, trainable, train)?;
        let after = task_loss_vars(ctx, &adapted, &tape, &ep.support, trainable, None)?.0.item()?;
        let outer = adaptable(&vars, theta)?;
        let grads = grad_named(&query_loss, &outer, false)?;
        for (k, g) in grads {
            let g = (*g.value()).clone();
            match total.get_mut(&k) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    total.insert(k, g);
                }
            }
        }
        logs.push(EpisodeLog {
            seed,
            classes: ep.classes.clone(),
            support_loss_before: support_losses[0],
            support_loss_after: after,
            query_loss: query_loss.item()?,
            query_token_accuracy: acc,
        });
    }
    Ok((total, logs))
}

/// One outer AdamW update from a batch of episodes.
pub fn meta_train_step(
    ctx: &TaskContext<'_>,
    theta: &mut ParameterSet,
    episodes: &[(u64, &Episode)],
    cfg: &MetaConfig,
    opt: &mut OptimizerState,
    step: usize,
) -> Result<StepRecord> {
    let (grads, logs) = meta_gradient(ctx, theta, episodes, cfg, ctx.mapper_cfg.dropout)?;
    opt.update(theta, &grads)?;
    Ok(StepRecord { step, meta_loss: logs.iter().map(|l| l.query_loss).sum(), episodes: logs })
}

/// Learner state that a run can be resumed from.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub theta: ParameterSet,
    pub opt: OptimizerState,
    pub step: usize,
}

impl MetaState {
    pub fn new(theta: ParameterSet, cfg: &MetaConfig) -> Self {
        let opt = OptimizerState::new(cfg.adamw(), &theta);
        Self { theta, opt, step: 0 }
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let mut params = self.theta.clone();
        params.extend(self.opt.to_parameter_set()?)?;
        Ok(Checkpoint::new(seed, params)
            .with_tag("step", self.step.to_string())
            .with_tag("opt_step", self.opt.step.to_string())
            .with_tag("opt_config", serde_json::to_string(&self.opt.config)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let tag = |k: &str| ckpt.tag(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let step = tag("step")?.parse().map_err(|_| Error::Format("bad step tag".into()))?;
        let opt_step = tag("opt_step")?.parse().map_err(|_| Error::Format("bad opt_step tag".into()))?;
        let config: AdamWConfig = serde_json::from_str(tag("opt_config")?)?;
        let mut theta = ParameterSet::new();
        let mut moments = ParameterSet::new();
        for (k, p) in ckpt.params.iter() {
            let dest = if k.starts_with("opt.") { &mut moments } else { &mut theta };
            dest.insert(k.clone(), (*p.value).clone(), p.frozen)?;
        }
        let opt = OptimizerState::from_parameter_set(config, opt_step, &moments);
        Ok(Self { theta, opt, step })
    }
}

/// Meta-trains until `state.step == cfg.meta_train_steps`. Episode seeds
/// depend only on (`seed`, step, slot), so a resumed run replays the same
/// stream. One JSON line per step goes to `log`.
pub fn meta_train(
    ctx: &TaskContext<'_>,
    sampler: &EpisodeSampler,
    cfg: &MetaConfig,
    state: &mut MetaState,
    seed: u64,
    mut log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    while state.step < cfg.meta_train_steps {
        let step = state.step;
        let seeds: Vec<u64> = (0..cfg.meta_batch).map(|b| stream_key(seed, step as u64, &format!("episode{b}"))).collect();
        let episodes: Vec<Episode> = seeds.iter().map(|&s| sampler.sample(s)).collect();
        let batch: Vec<(u64, &Episode)> = seeds.iter().copied().zip(&episodes).collect();
        let record = meta_train_step(ctx, &mut state.theta, &batch, cfg, &mut state.opt, step)?;
        state.step += 1;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?)?;
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                state.to_checkpoint(seed)?.save(dir.join(format!("meta_step{:06}.ckpt", state.step)))?;
            }
        }
        records.push(record);
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub classes: Vec<usize>,
    pub query_loss_before: f64,
    pub query_loss_after: f64,
    pub overlap_accuracy: f64,
    pub bleu1: f64,
    pub rouge_l_f1: f64,
    pub items: Vec<ItemScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTestReport {
    pub finetune_steps: usize,
    pub overlap_accuracy: MeanStd,
    pub bleu1: MeanStd,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: MeanStd,
    pub query_loss_before: f64,
    pub query_loss_after: f64,
    /// Share of episodes whose query loss fell after fine-tuning.
    pub improved_fraction: f64,
    pub episodes: Vec<EpisodeResult>,
}

/// Greedy answers of `theta` for `items`.
pub fn predict(ctx: &TaskContext<'_>, theta: &ParameterSet, items: &[usize]) -> Result<Vec<String>> {
    let tape = Tape::inference();
    let vars = ctx.vars(&tape, theta);
    let prefix = ctx.prefix(&vars, &tape, items, encoder_trainable(theta), None)?.value();
    let prompts = items.iter().map(|&i| Ok(ctx.scored(i)?.prompt)).collect::<Result<Vec<_>>>()?;
    let ids = decode_answers(ctx.lm, ctx.lm_cfg, &prefix, &prompts, ctx.lm_cfg.max_answer_len)?;
    ids.iter().map(|a| ctx.tokenizer.decode(a)).collect()
}

/// Fine-tunes a copy of `theta` on each support set with `finetune_steps`
/// steps (dropout on, eval-mode decoding) and scores greedy answers on the
/// query set.
pub fn meta_test(
    ctx: &TaskContext<'_>,
    theta: &ParameterSet,
    episodes: &[(u64, Episode)],
    finetune_steps: usize,
    cfg: &MetaConfig,
) -> Result<MetaTestReport> {
    if episodes.is_empty() {
        return Err(Error::Sampling("no meta-test episodes".into()));
    }
    let mut results = Vec::with_capacity(episodes.len());
    for (seed, ep) in episodes {
        let plan = DropoutPlan { seed: stream_key(*seed, 0, "finetune"), rate: ctx.mapper_cfg.dropout };
        let adapted = finetune(ctx, theta, &ep.support, finetune_steps, cfg.inner_lr, Some(plan))?;
        let before = task_loss(ctx, theta, &ep.query)?;
        let after = task_loss(ctx, &adapted, &ep.query)?;
        let predictions = predict(ctx, &adapted, &ep.query)?;
        let items = ep
            .query
            .iter()
            .zip(predictions)
            .map(|(&i, p)| ItemScore::score(&p, &ctx.corpus.triplets[i].answer))
            .collect::<Result<Vec<_>>>()?;
        let mean = |f: fn(&ItemScore) -> f64| items.iter().map(f).sum::<f64>() / items.len() as f64;
        results.push(EpisodeResult {
            seed: *seed,
            classes: ep.classes.clone(),
            query_loss_before: before,
            query_loss_after: after,
            overlap_accuracy: mean(|s| s.overlap_accuracy),
            bleu1: mean(|s| s.bleu1),
            rouge_l_f1: mean(|s| s.rouge_l_f1),
            items,
        });
    }
    let col = |f: fn(&EpisodeResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
    let n = results.len() as f64;
    Ok(MetaTestReport {
        finetune_steps,
        overlap_accuracy: MeanStd::of(&col(|r| r.overlap_accuracy)),
        bleu1: MeanStd::of(&col(|r| r.bleu1)),
        rouge_l_f1: MeanStd::of(&col(|r| r.rouge_l_f1)),
        query_loss_before: col(|r| r.query_loss_before).iter().sum::<f64>() / n,
        query_loss_after: col(|r| r.query_loss_after).iter().sum::<f64>() / n,
        improved_fraction: results.iter().filter(|r| r.query_loss_after < r.query_loss_before).count() as f64 / n,
        episodes: results,
    })
}

/// Seeded, deterministic episode stream.
pub fn episode_stream(sampler: &EpisodeSampler, seed: u64, count: usize) -> Vec<(u64, Episode)> {
    (0..count)
        .map(|i| {
            let s = stream_key(seed, i as u64, "meta-test");
            (s, sampler.sample(s))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, lr: 5e-4 }
    }
}

/// Non-episodic mini-batch training on the pooled `triplets`. Returns the
/// trained copy and the mean loss of each epoch.
pub fn supervised_baseline_train(
    ctx: &TaskContext<'_>,
    theta: &ParameterSet,
    triplets: &[usize],
    cfg: &BaselineConfig,
    weight_decay: f64,
    seed: u64,
) -> Result<(ParameterSet, Vec<f64>)> {
    let mut theta = theta.clone();
    if cfg.epochs == 0 {
        return Ok((theta, Vec::new()));
    }
    if triplets.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Sampling("baseline needs triplets and a positive batch size".into()));
    }
    let mut opt = OptimizerState::new(AdamWConfig { lr: cfg.lr, weight_decay, ..AdamWConfig::default() }, &theta);
    let trainable = encoder_trainable(&theta);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order = triplets.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_key(seed, epoch as u64, "baseline-order")));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let vars = ctx.vars(&tape, &theta);
            let plan = DropoutPlan { seed: stream_key(seed, step, "baseline-dropout"), rate: ctx.mapper_cfg.dropout };
            let (loss, _) = task_loss_vars(ctx, &vars, &tape, chunk, trainable, plan.at(step, "baseline"))?;
            sum += loss.item()?;
            batches += 1;
            let grads: BTreeMap<String, Tensor> = grad_named(&loss, &adaptable(&vars, &theta)?, false)?
                .into_iter()
                .map(|(k, g)| (k, (*g.value()).clone()))
                .collect();
            opt.update(&mut theta, &grads)?;
            step += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok((theta, epoch_losses))
}
