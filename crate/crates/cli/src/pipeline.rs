use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ecgqa_autodiff::rng::stream_key;
use ecgqa_autodiff::{Checkpoint, ParameterSet};
use ecgqa_core::mapper::{init_mapper, MapperConfig};
use ecgqa_core::meta::{
    episode_stream, meta_test, meta_train, supervised_baseline_train, FeatureBank, MetaState, MetaTestReport,
    TaskContext,
};
use ecgqa_core::model::decoder::{build_tokenizer, pretrain_lm, DecoderConfig, LmPretrainReport};
use ecgqa_core::model::encoder::{pretrain_encoder, probe_detectability, EncoderConfig, ProbeReport};
use ecgqa_core::model::tokenizer::Tokenizer;
use ecgqa_core::synth::corpus::labeled_pool;
use ecgqa_core::synth::{
    apply_lead_mask, generate_corpus, load_corpus, make_domain_shift_corpus, save_corpus, Corpus, EpisodeSampler,
    EpisodeSpec, ParaphrasePool, Split,
};
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, ExperimentConfig, Method};

/// Failures with their own exit status.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("config hash mismatch for {artifact}: expected {expected}, found {found}")]
    HashMismatch { artifact: String, expected: String, found: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::MissingArtifact(_) => 3,
            Failure::HashMismatch { .. } => 4,
            Failure::Invariant(_) => 5,
        }
    }
}

const HASH_FILE: &str = "config.sha256";

fn check_hash(dir: &Path, expected: &str) -> Result<()> {
    let path = dir.join(HASH_FILE);
    let found = fs::read_to_string(&path)
        .map_err(|_| Failure::MissingArtifact(path.display().to_string()))?
        .trim()
        .to_string();
    if found != expected {
        return Err(Failure::HashMismatch { artifact: dir.display().to_string(), expected: expected.into(), found }.into());
    }
    Ok(())
}

/// Loads the corpus from `work/corpus`, generating it first if absent.
pub fn corpus_stage(cfg: &ExperimentConfig, work: &Path) -> Result<Corpus> {
    let dir = work.join("corpus");
    let hash = cfg.corpus_hash();
    if dir.exists() {
        check_hash(&dir, &hash)?;
        return load_corpus(&dir).map_err(|e| Failure::Invariant(format!("corpus at {}: {e}", dir.display())).into());
    }
    let corpus = generate_corpus(&cfg.generator, cfg.data_seed).context("generating corpus")?;
    save_corpus(&corpus, &dir)?;
    fs::write(dir.join(HASH_FILE), format!("{hash}\n"))?;
    Ok(corpus)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneReport {
    pub config_hash: String,
    pub encoder_losses: Vec<f64>,
    pub probe: ProbeReport,
    pub lm: LmPretrainReport,
    pub encoder_digest: String,
    pub lm_digest: String,
}

/// Frozen encoder and language model with their tokenizer.
pub struct Backbones {
    pub encoder: ParameterSet,
    pub encoder_cfg: EncoderConfig,
    pub lm: ParameterSet,
    pub lm_cfg: DecoderConfig,
    pub tokenizer: Tokenizer,
    pub report: BackboneReport,
}

/// Loads the backbones from `work/backbones`, pretraining them first if
/// absent. Refuses backbones whose probes miss the configured threshold.
pub fn backbone_stage(cfg: &ExperimentConfig, corpus: &Corpus, work: &Path) -> Result<Backbones> {
    let dir = work.join("backbones");
    let hash = cfg.backbone_hash();
    let tokenizer = build_tokenizer(&corpus.registry)?;
    let lm_cfg = DecoderConfig { vocab: tokenizer.len(), ..cfg.decoder.clone() };
    let backbones = if dir.exists() {
        check_hash(&dir, &hash)?;
        let load = |name: &str| -> Result<ParameterSet> {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Failure::MissingArtifact(path.display().to_string()).into());
            }
            Ok(Checkpoint::load(&path)?.params)
        };
        let report_path = dir.join("report.json");
        let report: BackboneReport = serde_json::from_str(
            &fs::read_to_string(&report_path).map_err(|_| Failure::MissingArtifact(report_path.display().to_string()))?,
        )?;
        let encoder = load("encoder.ckpt")?;
        let lm = load("lm.ckpt")?;
        if encoder.digest() != report.encoder_digest || lm.digest() != report.lm_digest {
            return Err(Failure::Invariant(format!("backbone weights in {} do not match their report", dir.display())).into());
        }
        Backbones { encoder, encoder_cfg: cfg.encoder.clone(), lm, lm_cfg, tokenizer, report }
    } else {
        let b = &cfg.backbones;
        let pool = labeled_pool(&cfg.generator, b.pool_size, b.presence_rate, stream_key(cfg.data_seed, 0, "encoder-pool"))?;
        let calibration =
            labeled_pool(&cfg.generator, b.calibration_size, b.presence_rate, stream_key(cfg.data_seed, 0, "probe-pool"))?;
        let attrs = &corpus.registry.attributes;
        let (encoder, enc_report) = pretrain_encoder(&cfg.encoder, &pool, attrs, &cfg.encoder_pretrain, cfg.data_seed)?;
        let probe = probe_detectability(&encoder, &cfg.encoder, &calibration, attrs, b.probe_threshold)?;
        let (lm, lm_report) = pretrain_lm(&lm_cfg, &corpus.registry, &tokenizer, &cfg.lm_pretrain, cfg.data_seed)?;
        let report = BackboneReport {
            config_hash: hash.clone(),
            encoder_losses: enc_report.epoch_losses,
            probe,
            lm: lm_report,
            encoder_digest: encoder.digest(),
            lm_digest: lm.digest(),
        };
        fs::create_dir_all(&dir)?;
        Checkpoint::new(cfg.data_seed, encoder.clone()).with_tag("config_hash", &hash).save(dir.join("encoder.ckpt"))?;
        Checkpoint::new(cfg.data_seed, lm.clone()).with_tag("config_hash", &hash).save(dir.join("lm.ckpt"))?;
        tokenizer.save(&dir.join("tokenizer.json"))?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        fs::write(dir.join(HASH_FILE), format!("{hash}\n"))?;
        Backbones { encoder, encoder_cfg: cfg.encoder.clone(), lm, lm_cfg, tokenizer, report }
    };
    let probe = &backbones.report.probe;
    if cfg.backbones.probe_threshold > 0.0 && !probe.passed {
        return Err(Failure::Invariant(format!(
            "encoder probe balanced accuracy {:.3} is below {:.3}",
            probe.min_balanced_accuracy, cfg.backbones.probe_threshold
        ))
        .into());
    }
    Ok(backbones)
}

/// A corpus with the encoder features of its signals.
pub struct Data {
    pub corpus: Corpus,
    pub features: FeatureBank,
}

impl Data {
    pub fn new(corpus: Corpus, backbones: &Backbones) -> Result<Self> {
        let features = FeatureBank::build(&backbones.encoder, &backbones.encoder_cfg, &corpus.signals)?;
        Ok(Self { corpus, features })
    }
}

/// Corpus and backbones shared by every cell and seed of a run.
pub struct Prepared {
    pub backbones: Backbones,
    pub data: Data,
}

pub fn prepare(cfg: &ExperimentConfig, work: &Path) -> Result<Prepared> {
    let corpus = corpus_stage(cfg, work)?;
    let backbones = backbone_stage(cfg, &corpus, work)?;
    let data = Data::new(corpus, &backbones)?;
    Ok(Prepared { backbones, data })
}

fn masked(corpus: &Corpus, leads: &[String]) -> Result<Corpus> {
    let signals = corpus.signals.iter().map(|s| apply_lead_mask(s, leads)).collect::<ecgqa_core::Result<Vec<_>>>()?;
    Ok(Corpus { signals, ..corpus.clone() })
}

/// Training and evaluation data of one configuration: lead masking applies
/// to both, the domain shift only to evaluation.
pub fn cell_data(cfg: &ExperimentConfig, prep: &Prepared) -> Result<(Option<Data>, Option<Data>)> {
    let train = match &cfg.leads {
        Some(leads) => Some(Data::new(masked(&prep.data.corpus, leads)?, &prep.backbones)?),
        None => None,
    };
    let eval = match &cfg.domain_shift {
        Some(shift) => {
            let mut corpus = make_domain_shift_corpus(&cfg.generator, &shift.params(), cfg.data_seed)?;
            if let Some(leads) = &cfg.leads {
                corpus = masked(&corpus, leads)?;
            }
            Some(Data::new(corpus, &prep.backbones)?)
        }
        None => None,
    };
    Ok((train, eval))
}

pub fn context<'a>(bb: &'a Backbones, data: &'a Data, mapper: &'a MapperConfig, cfg: &ExperimentConfig) -> TaskContext<'a> {
    TaskContext {
        corpus: &data.corpus,
        tokenizer: &bb.tokenizer,
        lm: &bb.lm,
        lm_cfg: &bb.lm_cfg,
        encoder: &bb.encoder,
        encoder_cfg: &bb.encoder_cfg,
        mapper_cfg: mapper,
        features: &data.features,
        prompt: cfg.prompt,
    }
}

fn eligible_counts(cfg: &ExperimentConfig, corpus: &Corpus, split: Split, pool: ParaphrasePool) -> Result<Vec<usize>> {
    let qt = cfg.question_type.question_type();
    let mut counts = BTreeMap::new();
    for &cid in corpus.manifest.side(split) {
        if qt.is_none_or(|q| corpus.class(cid).is_ok_and(|c| c.question_type == q)) {
            counts.insert(cid, 0usize);
        }
    }
    for t in &corpus.triplets {
        if pool.admits(t.paraphrase_id) {
            if let Some(c) = counts.get_mut(&t.class_id) {
                *c += 1;
            }
        }
    }
    Ok(counts.into_values().collect())
}

/// Query records per class: the configured value, or
/// `min(K + 5, smallest eligible class - K)`.
pub fn query_size(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<usize> {
    if let Some(q) = cfg.q_query {
        return Ok(q);
    }
    let mut smallest = usize::MAX;
    for &pool in cfg.expression.sizing_pools() {
        for split in [Split::MetaTrain, Split::MetaTest] {
            smallest = smallest.min(eligible_counts(cfg, corpus, split, pool)?.into_iter().min().unwrap_or(0));
        }
    }
    let q = (cfg.k_shot + 5).min(smallest.saturating_sub(cfg.k_shot));
    if q <= cfg.k_shot {
        return Err(Failure::Invariant(format!(
            "classes hold {smallest} eligible records, too few for {}-shot episodes with a larger query set",
            cfg.k_shot
        ))
        .into());
    }
    Ok(q)
}

pub fn sampler(cfg: &ExperimentConfig, corpus: &Corpus, split: Split) -> Result<EpisodeSampler> {
    let spec = EpisodeSpec::new(cfg.n_way, cfg.k_shot, query_size(cfg, corpus)?)?;
    let (train_pool, eval_pool) = cfg.expression.pools();
    let pool = if split == Split::MetaTrain { train_pool } else { eval_pool };
    EpisodeSampler::new(corpus, split, cfg.question_type.question_type(), pool, spec)
        .map_err(|e| Failure::Invariant(e.to_string()).into())
}

fn check_split(corpus: &Corpus) -> Result<()> {
    corpus.manifest.check_disjoint().map_err(|e| Failure::Invariant(e.to_string()).into())
}

/// A trained mapper (plus the encoder when it was released).
pub struct Trained {
    pub theta: ParameterSet,
    pub train_hash: String,
    pub seed: u64,
    /// One JSON object per meta-train step or baseline epoch.
    pub log: Vec<String>,
}

impl Trained {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(self.seed, self.theta.clone()).with_tag("train_hash", &self.train_hash).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        if !path.exists() {
            return Err(Failure::MissingArtifact(path.display().to_string()).into());
        }
        let ckpt = Checkpoint::load(path)?;
        let expected = cfg.train_hash();
        let found = ckpt.tag("train_hash").unwrap_or_default().to_string();
        if found != expected {
            return Err(Failure::HashMismatch { artifact: path.display().to_string(), expected, found }.into());
        }
        Ok(Self { theta: ckpt.params, train_hash: found, seed: ckpt.seed, log: Vec::new() })
    }
}

pub fn mapper_config(cfg: &ExperimentConfig, bb: &Backbones) -> Result<MapperConfig> {
    Ok(cfg.mapper_config(bb.encoder_cfg.k_e()?))
}

/// Initial learner parameters for `seed`.
pub fn initial_theta(cfg: &ExperimentConfig, bb: &Backbones, seed: u64) -> Result<ParameterSet> {
    let mut theta = init_mapper(&mapper_config(cfg, bb)?, seed)?;
    if cfg.unfreeze_encoder {
        let mut encoder = bb.encoder.clone();
        encoder.set_frozen(false);
        theta.extend(encoder)?;
    }
    Ok(theta)
}

/// Meta-trains or baseline-trains one seed.
pub fn train(cfg: &ExperimentConfig, prep: &Prepared, train_data: Option<&Data>, seed: u64) -> Result<Trained> {
    let data = train_data.unwrap_or(&prep.data);
    check_split(&data.corpus)?;
    let bb = &prep.backbones;
    let mcfg = mapper_config(cfg, bb)?;
    let ctx = context(bb, data, &mcfg, cfg);
    let theta = initial_theta(cfg, bb, seed)?;
    let (encoder_before, lm_before) = (bb.encoder.digest(), bb.lm.digest());
    let (theta, log) = match cfg.method {
        Method::Episodic => {
            let sampler = sampler(cfg, &data.corpus, Split::MetaTrain)?;
            let mut state = MetaState::new(theta, &cfg.meta);
            let mut buf = Vec::new();
            meta_train(&ctx, &sampler, &cfg.meta, &mut state, seed, Some(&mut buf), None)?;
            let log = String::from_utf8(buf)?.lines().map(str::to_string).collect();
            (state.theta, log)
        }
        Method::Baseline => {
            let sampler = sampler(cfg, &data.corpus, Split::MetaTrain)?;
            let classes = sampler.classes();
            let (pool, _) = cfg.expression.pools();
            let triplets: Vec<usize> = data
                .corpus
                .triplets
                .iter()
                .enumerate()
                .filter(|(_, t)| classes.contains(&t.class_id) && pool.admits(t.paraphrase_id))
                .map(|(i, _)| i)
                .collect();
            let (theta, losses) =
                supervised_baseline_train(&ctx, &theta, &triplets, &cfg.baseline, cfg.meta.weight_decay, seed)?;
            let log = losses
                .iter()
                .enumerate()
                .map(|(epoch, loss)| serde_json::json!({ "epoch": epoch, "loss": loss }).to_string())
                .collect();
            (theta, log)
        }
    };
    if bb.encoder.digest() != encoder_before || bb.lm.digest() != lm_before {
        return Err(Failure::Invariant("frozen backbone weights changed during training".into()).into());
    }
    Ok(Trained { theta, train_hash: cfg.train_hash(), seed, log })
}

/// Fine-tune steps used at evaluation time.
pub fn eval_finetune_steps(cfg: &ExperimentConfig) -> usize {
    match &cfg.domain_shift {
        Some(shift) if !shift.meta_adapt => 0,
        _ => cfg.meta.finetune_steps,
    }
}

/// Meta-tests `theta` on the episode stream of `seed`. `steps` overrides the
/// configured fine-tune steps.
pub fn evaluate(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    eval_data: Option<&Data>,
    theta: &ParameterSet,
    seed: u64,
    steps: usize,
) -> Result<MetaTestReport> {
    let data = eval_data.unwrap_or(&prep.data);
    check_split(&data.corpus)?;
    let bb = &prep.backbones;
    let mcfg = mapper_config(cfg, bb)?;
    let ctx = context(bb, data, &mcfg, cfg);
    let sampler = sampler(cfg, &data.corpus, Split::MetaTest)?;
    let stream = episode_stream(&sampler, stream_key(seed, 0, "evaluation"), cfg.meta.meta_test_episodes);
    Ok(meta_test(&ctx, theta, &stream, steps, &cfg.meta)?)
}

/// One line of a results table. Every row names the config and seed that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub suite: String,
    pub variant: String,
    pub method: String,
    pub question_type: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub finetune_steps: usize,
    pub seed: u64,
    pub config_hash: String,
    pub episodes: usize,
    pub overlap_accuracy: f64,
    pub overlap_accuracy_std: f64,
    pub bleu1: f64,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: f64,
    pub query_loss_before: f64,
    pub query_loss_after: f64,
    pub improved_fraction: f64,
}

impl ResultRow {
    pub fn new(
        suite: &str,
        variant: &str,
        cfg: &ExperimentConfig,
        corpus: &Corpus,
        seed: u64,
        report: &MetaTestReport,
    ) -> Result<Self> {
        Ok(Self {
            suite: suite.into(),
            variant: variant.into(),
            method: cfg.method.as_str().into(),
            question_type: cfg.question_type.as_str().into(),
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
            q_query: query_size(cfg, corpus)?,
            finetune_steps: report.finetune_steps,
            seed,
            config_hash: cfg.hash(),
            episodes: report.episodes.len(),
            overlap_accuracy: report.overlap_accuracy.mean,
            overlap_accuracy_std: report.overlap_accuracy.std,
            bleu1: report.bleu1.mean,
            rouge_l_f1: report.rouge_l_f1.mean,
            query_loss_before: report.query_loss_before,
            query_loss_after: report.query_loss_after,
            improved_fraction: report.improved_fraction,
        })
    }
}

pub const ROWS_CSV: &str = "rows.csv";
pub const ROWS_JSON: &str = "rows.json";

pub fn write_rows(dir: &Path, rows: &[ResultRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(ROWS_CSV))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join(ROWS_JSON), serde_json::to_string_pretty(rows)? + "\n")?;
    Ok(())
}

pub fn read_rows(dir: &Path) -> Result<Vec<ResultRow>> {
    let path = dir.join(ROWS_JSON);
    let text = fs::read_to_string(&path).map_err(|_| Failure::MissingArtifact(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn seed_dir(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    out.join(cfg.cell_label()).join(format!("seed{seed}"))
}

/// Trains every cell and seed and stores the learners under `out`.
pub fn train_stage(cfg: &ExperimentConfig, prep: &Prepared, out: &Path) -> Result<()> {
    for cell in cfg.cells() {
        let (train_data, _) = cell_data(&cell, prep)?;
        for &seed in &cell.seeds {
            let trained = train(&cell, prep, train_data.as_ref(), seed)?;
            let dir = seed_dir(out, &cell, seed);
            fs::create_dir_all(&dir)?;
            trained.save(&dir.join("learner.ckpt"))?;
            write_lines(&dir.join("train_log.jsonl"), &trained.log)?;
            eprintln!("trained {} seed {seed}", cell.cell_label());
        }
    }
    Ok(())
}

/// Meta-tests the stored learners and writes the results table. Baselines
/// are scored both as trained and after support-set fine-tuning.
pub fn evaluate_stage(cfg: &ExperimentConfig, prep: &Prepared, out: &Path) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for cell in cfg.cells() {
        let (_, eval_data) = cell_data(&cell, prep)?;
        let corpus = &eval_data.as_ref().unwrap_or(&prep.data).corpus;
        for &seed in &cell.seeds {
            let dir = seed_dir(out, &cell, seed);
            let trained = Trained::load(&dir.join("learner.ckpt"), &cell)?;
            let mut steps = vec![eval_finetune_steps(&cell)];
            if cell.method == Method::Baseline && steps[0] > 0 {
                steps.insert(0, 0);
            }
            for s in steps {
                let report = evaluate(&cell, prep, eval_data.as_ref(), &trained.theta, seed, s)?;
                fs::write(dir.join(format!("meta_test_ft{s}.json")), serde_json::to_string_pretty(&report)? + "\n")?;
                rows.push(ResultRow::new("main", "default", &cell, corpus, seed, &report)?);
            }
            eprintln!("evaluated {} seed {seed}", cell.cell_label());
        }
    }
    let expected: usize = cfg
        .cells()
        .iter()
        .map(|c| c.seeds.len() * if c.method == Method::Baseline && eval_finetune_steps(c) > 0 { 2 } else { 1 })
        .sum();
    if rows.len() != expected {
        return Err(Failure::Invariant(format!("{} rows for a grid of {expected}", rows.len())).into());
    }
    write_rows(out, &rows)?;
    Ok(rows)
}

/// Writes the resolved config and the backbone report next to the results.
pub fn write_provenance(cfg: &ExperimentConfig, prep: &Prepared, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    fs::write(out.join("config.sha256"), format!("{}\n", cfg.hash()))?;
    fs::write(out.join("backbones.json"), serde_json::to_string_pretty(&prep.backbones.report)? + "\n")?;
    Ok(())
}

/// The whole pipeline: corpus, backbones, training, evaluation.
pub fn run(cfg: &ExperimentConfig, work: &Path, out: &Path) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let prep = prepare(cfg, work)?;
    write_provenance(cfg, &prep, out)?;
    train_stage(cfg, &prep, out)?;
    evaluate_stage(cfg, &prep, out)
}

pub fn digest_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
