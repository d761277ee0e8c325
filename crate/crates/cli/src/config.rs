use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ecgqa_core::mapper::{MapperConfig, MapperVariant};
use ecgqa_core::meta::{BaselineConfig, MetaConfig};
use ecgqa_core::model::decoder::{DecoderConfig, LmPretrainConfig};
use ecgqa_core::model::encoder::{EncoderConfig, EncoderPretrainConfig};
use ecgqa_core::synth::signal::lead_index;
use ecgqa_core::synth::{GeneratorConfig, ParaphrasePool, PromptVariant, QuestionType, ShiftParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Question-type column of the results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    SingleVerify,
    SingleChoose,
    SingleQuery,
    AllSingle,
}

impl TaskFamily {
    pub fn question_type(self) -> Option<QuestionType> {
        match self {
            TaskFamily::SingleVerify => Some(QuestionType::SingleVerify),
            TaskFamily::SingleChoose => Some(QuestionType::SingleChoose),
            TaskFamily::SingleQuery => Some(QuestionType::SingleQuery),
            TaskFamily::AllSingle => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::SingleVerify => "single_verify",
            TaskFamily::SingleChoose => "single_choose",
            TaskFamily::SingleQuery => "single_query",
            TaskFamily::AllSingle => "all_single",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Episodic,
    Baseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Episodic => "episodic",
            Method::Baseline => "baseline",
        }
    }
}

/// Paraphrase regime. `Any` draws every template on both sides; `Same`
/// and `Different` train on the seen templates and test on seen or
/// held-out ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expression {
    Any,
    Same,
    Different,
}

impl Expression {
    pub fn as_str(self) -> &'static str {
        match self {
            Expression::Any => "any",
            Expression::Same => "same",
            Expression::Different => "different",
        }
    }

    /// (training pool, evaluation pool).
    pub fn pools(self) -> (ParaphrasePool, ParaphrasePool) {
        match self {
            Expression::Any => (ParaphrasePool::All, ParaphrasePool::All),
            Expression::Same => (ParaphrasePool::Seen, ParaphrasePool::Seen),
            Expression::Different => (ParaphrasePool::Seen, ParaphrasePool::Unseen),
        }
    }

    /// Pools whose class sizes bound the query size; `Same` and `Different`
    /// share them so that one training serves both.
    pub fn sizing_pools(self) -> &'static [ParaphrasePool] {
        match self {
            Expression::Any => &[ParaphrasePool::All],
            _ => &[ParaphrasePool::Seen, ParaphrasePool::Unseen],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub noise_std: f64,
    pub amplitude: f64,
    pub paraphrase_offset: usize,
    /// Fine-tune on the shifted support sets before answering.
    pub meta_adapt: bool,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self { noise_std: 0.15, amplitude: -0.3, paraphrase_offset: 0, meta_adapt: true }
    }
}

impl DomainShift {
    pub fn params(&self) -> ShiftParams {
        ShiftParams { noise_std: self.noise_std, amplitude: self.amplitude, paraphrase_offset: self.paraphrase_offset }
    }
}

/// Labelled pools for encoder pretraining and the detectability check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSettings {
    pub pool_size: usize,
    pub calibration_size: usize,
    pub presence_rate: f64,
    pub probe_threshold: f64,
    pub seed: u64,
}

impl Default for BackboneSettings {
    fn default() -> Self {
        Self { pool_size: 5000, calibration_size: 2000, presence_rate: 0.3, probe_threshold: 0.9, seed: 0 }
    }
}

/// Mapper hyperparameters; widths follow the backbones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperSettings {
    pub heads: usize,
    pub layers: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
}

impl Default for MapperSettings {
    fn default() -> Self {
        let d = MapperConfig::default();
        Self { heads: d.heads, layers: d.layers, mlp_layers: d.mlp_layers, mlp_hidden: d.mlp_hidden, dropout: d.dropout }
    }
}

/// Optional product grid over the results-table factors. Empty lists fall
/// back to the single cell given by the top-level fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub methods: Vec<Method>,
    pub question_types: Vec<TaskFamily>,
    pub settings: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Seed of the corpus and of the backbones.
    pub data_seed: u64,
    pub question_type: TaskFamily,
    pub n_way: usize,
    pub k_shot: usize,
    /// Query records per class; derived from the corpus when absent.
    pub q_query: Option<usize>,
    pub method: Method,
    pub mapper: MapperVariant,
    pub prompt: PromptVariant,
    /// Leads kept at evaluation time; all when absent.
    pub leads: Option<Vec<String>>,
    pub expression: Expression,
    pub domain_shift: Option<DomainShift>,
    pub unfreeze_encoder: bool,
    pub generator: GeneratorConfig,
    pub backbones: BackboneSettings,
    pub encoder: EncoderConfig,
    pub encoder_pretrain: EncoderPretrainConfig,
    pub decoder: DecoderConfig,
    pub lm_pretrain: LmPretrainConfig,
    pub mapper_settings: MapperSettings,
    pub meta: MetaConfig,
    pub baseline: BaselineConfig,
    pub grid: Grid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seeds: vec![0, 1, 2],
            data_seed: 7,
            question_type: TaskFamily::SingleVerify,
            n_way: 2,
            k_shot: 5,
            q_query: None,
            method: Method::Episodic,
            mapper: MapperVariant::Attention,
            prompt: PromptVariant::Scaffold,
            leads: None,
            expression: Expression::Any,
            domain_shift: None,
            unfreeze_encoder: false,
            generator: GeneratorConfig::default(),
            backbones: BackboneSettings::default(),
            encoder: EncoderConfig::default(),
            encoder_pretrain: EncoderPretrainConfig::default(),
            decoder: DecoderConfig::default(),
            lm_pretrain: LmPretrainConfig::default(),
            mapper_settings: MapperSettings::default(),
            meta: MetaConfig::default(),
            baseline: BaselineConfig::default(),
            grid: Grid::default(),
        }
    }
}

pub const FEW_SHOT_SETTINGS: [(usize, usize); 4] = [(2, 5), (2, 10), (5, 5), (5, 10)];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config lists no seeds");
        }
        if !FEW_SHOT_SETTINGS.contains(&(self.n_way, self.k_shot)) {
            bail!("few-shot setting {}-way {}-shot is outside the experiment grid", self.n_way, self.k_shot);
        }
        if let Some(q) = self.q_query {
            if q <= self.k_shot {
                bail!("q_query {q} must exceed k_shot {}", self.k_shot);
            }
        }
        if let Some(leads) = &self.leads {
            if leads.is_empty() {
                bail!("lead subset is empty");
            }
            for l in leads {
                lead_index(l).with_context(|| format!("unknown lead {l}"))?;
            }
        }
        if let Some(qt) = self.question_type.question_type() {
            if !self.generator.question_types.contains(&qt) {
                bail!("question type {qt} is not generated by this config");
            }
        }
        self.meta.validate()?;
        self.encoder.validate()?;
        for &(n, k) in &self.grid.settings {
            if !FEW_SHOT_SETTINGS.contains(&(n, k)) {
                bail!("grid setting {n}-way {k}-shot is outside the experiment grid");
            }
        }
        Ok(())
    }

    /// Every (method, question type, N, K) cell, in table order.
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        let methods = if self.grid.methods.is_empty() { vec![self.method] } else { self.grid.methods.clone() };
        let types =
            if self.grid.question_types.is_empty() { vec![self.question_type] } else { self.grid.question_types.clone() };
        let settings =
            if self.grid.settings.is_empty() { vec![(self.n_way, self.k_shot)] } else { self.grid.settings.clone() };
        let mut out = Vec::new();
        for &method in &methods {
            for &question_type in &types {
                for &(n_way, k_shot) in &settings {
                    out.push(ExperimentConfig {
                        method,
                        question_type,
                        n_way,
                        k_shot,
                        grid: Grid::default(),
                        ..self.clone()
                    });
                }
            }
        }
        out
    }

    /// Hash of the fields that determine a trained mapper; evaluation-only
    /// fields are normalized away so one training serves several evaluations.
    pub fn train_hash(&self) -> String {
        let mut c = self.clone();
        c.name = String::new();
        c.seeds = Vec::new();
        if c.expression == Expression::Different {
            c.expression = Expression::Same;
        }
        c.domain_shift = None;
        c.meta.meta_test_episodes = 0;
        c.meta.finetune_steps = 0;
        c.grid = Grid::default();
        if c.method == Method::Baseline {
            c.meta.meta_train_steps = 0;
        } else {
            c.baseline = BaselineConfig::default();
        }
        c.hash()
    }

    pub fn cell_label(&self) -> String {
        format!("{}_{}_{}w{}s", self.method.as_str(), self.question_type, self.n_way, self.k_shot)
    }

    /// SHA-256 of the canonical serialized form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        sha256_hex(text.as_bytes())
    }

    /// Hash of everything that determines the corpus.
    pub fn corpus_hash(&self) -> String {
        let text = serde_json::to_string(&(self.data_seed, &self.generator)).expect("config serializes");
        sha256_hex(text.as_bytes())
    }

    /// Hash of everything that determines the frozen backbones.
    pub fn backbone_hash(&self) -> String {
        let text = serde_json::to_string(&(
            self.data_seed,
            &self.generator,
            &self.backbones,
            &self.encoder,
            &self.encoder_pretrain,
            &self.decoder,
            &self.lm_pretrain,
        ))
        .expect("config serializes");
        sha256_hex(text.as_bytes())
    }

    pub fn mapper_config(&self, k_e: usize) -> MapperConfig {
        let s = &self.mapper_settings;
        MapperConfig {
            variant: self.mapper,
            d_enc: self.encoder.d_model,
            d_model: self.decoder.d_model,
            k_e,
            m_prefix: self.decoder.m_prefix,
            heads: s.heads,
            layers: s.layers,
            mlp_layers: s.mlp_layers,
            mlp_hidden: s.mlp_hidden,
            dropout: s.dropout,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
