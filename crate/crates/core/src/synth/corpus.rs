use std::collections::{BTreeMap, BTreeSet};

use ecgqa_autodiff::rng::stream_key;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attributes::{conflicts, AttributeRegistry, Motif};
use super::classes::{ClassRegistry, QuestionType, TaskClass, PARAPHRASES};
use super::signal::{inject_motif, EcgSignal, Finding, Findings, Recipe, SynthEcg};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub t_len: usize,
    pub n_leads: usize,
    pub attributes: Vec<Motif>,
    pub question_types: Vec<QuestionType>,
    pub min_verify: usize,
    pub min_choose: usize,
    pub min_query: usize,
    pub background_rate: f64,
    pub motif_strength: f64,
    pub noise_std: f64,
    pub test_fraction: f64,
    pub max_samples: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            t_len: 500,
            n_leads: 12,
            attributes: Motif::ALL.to_vec(),
            question_types: QuestionType::ALL.to_vec(),
            min_verify: 40,
            min_choose: 14,
            min_query: 20,
            background_rate: 0.1,
            motif_strength: 1.0,
            noise_std: 0.02,
            test_fraction: 0.2,
            max_samples: 20_000,
        }
    }
}

impl GeneratorConfig {
    pub fn min_count(&self, qt: QuestionType) -> usize {
        match qt {
            QuestionType::SingleVerify => self.min_verify,
            QuestionType::SingleChoose => self.min_choose,
            QuestionType::SingleQuery => self.min_query,
        }
    }

    fn validate(&self, registry: &AttributeRegistry) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if registry.len() < 12 {
            return fail(format!("{} attributes configured, at least 12 required", registry.len()));
        }
        if registry.families().len() < 4 {
            return fail("attributes must span at least 4 families".into());
        }
        if self.question_types.is_empty() {
            return fail("no question types selected".into());
        }
        if self.t_len < 50 || self.n_leads == 0 || self.n_leads > 12 {
            return fail(format!("unsupported signal shape {}x{}", self.t_len, self.n_leads));
        }
        if QuestionType::ALL.iter().any(|&q| self.question_types.contains(&q) && self.min_count(q) == 0) {
            return fail("minimum class counts must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test fraction {} outside (0, 1)", self.test_fraction));
        }
        if !(0.0..1.0).contains(&self.background_rate) {
            return fail(format!("background rate {} outside [0, 1)", self.background_rate));
        }
        if !(self.motif_strength > 0.0 && self.motif_strength <= 1.0) {
            return fail(format!("motif strength {} outside (0, 1]", self.motif_strength));
        }
        if !(self.noise_std >= 0.0) {
            return fail("negative noise level".into());
        }
        Ok(())
    }
}

/// Distribution shift applied on top of a generator configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftParams {
    /// Extra white-noise standard deviation.
    pub noise_std: f64,
    /// Relative amplitude change; the signal is scaled by `1 + amplitude`.
    pub amplitude: f64,
    /// Rotation of the paraphrase pool.
    pub paraphrase_offset: usize,
}

impl ShiftParams {
    pub fn is_zero(&self) -> bool {
        self.noise_std == 0.0 && self.amplitude == 0.0 && self.paraphrase_offset % PARAPHRASES == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaTriplet {
    pub signal_index: usize,
    pub class_id: usize,
    pub question: String,
    pub answer: String,
    pub paraphrase_id: usize,
    pub findings: Findings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub meta_train: Vec<usize>,
    pub meta_test: Vec<usize>,
    pub class_counts: BTreeMap<usize, usize>,
    pub test_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaTest,
}

impl SplitManifest {
    pub fn side(&self, split: Split) -> &[usize] {
        match split {
            Split::MetaTrain => &self.meta_train,
            Split::MetaTest => &self.meta_test,
        }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<_> = self.meta_train.iter().collect();
        match self.meta_test.iter().find(|c| train.contains(c)) {
            Some(c) => Err(Error::Generation(format!("class {c} is in both splits"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub shift: ShiftParams,
    pub registry: ClassRegistry,
    pub signals: Vec<EcgSignal>,
    pub triplets: Vec<QaTriplet>,
    pub manifest: SplitManifest,
}

impl Corpus {
    pub fn class(&self, id: usize) -> Result<&TaskClass> {
        self.registry.class(id)
    }

    pub fn signal(&self, triplet: &QaTriplet) -> &EcgSignal {
        &self.signals[triplet.signal_index]
    }

    /// Triplet indices grouped by class.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.triplets.iter().enumerate() {
            out.entry(t.class_id).or_default().push(i);
        }
        out
    }

    /// Re-derives every answer from the recorded findings.
    pub fn verify_answers(&self) -> Result<()> {
        for (i, t) in self.triplets.iter().enumerate() {
            let cls = self.class(t.class_id)?;
            let derived = self.registry.derive_answer(cls, &t.findings)?;
            if derived != t.answer || cls.answer != t.answer {
                return Err(Error::Generation(format!(
                    "triplet {i}: stored answer {:?}, derived {derived:?}",
                    t.answer
                )));
            }
        }
        Ok(())
    }
}

/// Findings constrained by `cls`, with unconstrained attributes drawn from
/// the background distribution.
pub fn sample_findings(
    registry: &ClassRegistry,
    cls: &TaskClass,
    background_rate: f64,
    rng: &mut impl Rng,
) -> Result<Findings> {
    let attrs = &registry.attributes;
    let mut present = BTreeSet::new();
    let mut absent = BTreeSet::new();
    let mut values = BTreeMap::new();
    match cls.question_type {
        QuestionType::SingleVerify => {
            if cls.answer == "yes" {
                present.insert(cls.attributes[0]);
            } else {
                absent.insert(cls.attributes[0]);
            }
        }
        QuestionType::SingleChoose => {
            let (a, b) = (cls.attributes[0], cls.attributes[1]);
            let name = |id| attrs.get(id).map(|s| s.name.to_lowercase());
            let (pa, pb) = match cls.answer.as_str() {
                "both" => (true, true),
                "none" => (false, false),
                x if x == name(a)? => (true, false),
                x if x == name(b)? => (false, true),
                x => return Err(Error::Generation(format!("bad choose answer {x}"))),
            };
            for (id, p) in [(a, pa), (b, pb)] {
                if p {
                    present.insert(id);
                } else {
                    absent.insert(id);
                }
            }
        }
        QuestionType::SingleQuery => {
            let attr = attrs.get(cls.attributes[0])?;
            let v = attr
                .values
                .iter()
                .position(|v| *v == cls.answer)
                .ok_or_else(|| Error::Generation(format!("bad query answer {}", cls.answer)))?;
            values.insert(attr.id, v);
        }
    }
    for a in attrs.iter() {
        if a.is_valued() {
            let draw: f64 = rng.random();
            let pick = rng.random_range(0..a.values.len().max(2) - 1);
            if values.contains_key(&a.id) {
                continue;
            }
            let v = if draw < 0.6 {
                a.default_value
            } else {
                (0..a.values.len()).filter(|&v| v != a.default_value).nth(pick).unwrap_or(a.default_value)
            };
            values.insert(a.id, v);
        } else {
            let draw: f64 = rng.random();
            if present.contains(&a.id) || absent.contains(&a.id) || draw >= background_rate {
                continue;
            }
            let clash = present.iter().any(|&p| attrs.get(p).is_ok_and(|s| conflicts(s.motif, a.motif)));
            if !clash {
                present.insert(a.id);
            }
        }
    }
    Ok(Findings { present, values })
}

/// Renders a record carrying exactly `findings`.
pub fn render_findings(
    attrs: &AttributeRegistry,
    findings: &Findings,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<EcgSignal> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, 0, "recipe"));
    let recipe = Recipe::normal(config.t_len, config.n_leads, &mut rng);
    let mut ecg = SynthEcg::from_recipe(recipe, config.noise_std, stream_key(seed, 0, "noise"));
    let mut list: Vec<(u8, usize, Finding)> = Vec::new();
    for &id in &findings.present {
        list.push((attrs.get(id)?.motif.stage(), id, Finding::Present(id)));
    }
    for (&id, &v) in &findings.values {
        list.push((attrs.get(id)?.motif.stage(), id, Finding::Value(id, v)));
    }
    list.sort_by_key(|&(stage, id, _)| (stage, id));
    for (_, id, finding) in list {
        ecg = inject_motif(&ecg, attrs, finding, config.motif_strength, stream_key(seed, id as u64, "motif"))?;
    }
    ecg.to_signal()
}

/// Generates the corpus: every class of the selected question types gets
/// exactly its minimum number of records, and classes are split per type.
pub fn generate_corpus(config: &GeneratorConfig, seed: u64) -> Result<Corpus> {
    make_domain_shift_corpus(config, &ShiftParams::default(), seed)
}

/// Same class schema as [`generate_corpus`] with shifted signal statistics
/// and paraphrase pool. A zero shift reproduces the unshifted corpus.
pub fn make_domain_shift_corpus(config: &GeneratorConfig, shift: &ShiftParams, seed: u64) -> Result<Corpus> {
    let attrs = AttributeRegistry::new(&config.attributes)?;
    config.validate(&attrs)?;
    if !(shift.noise_std >= 0.0) || !(shift.amplitude > -1.0) {
        return Err(Error::Generation("invalid domain shift".into()));
    }
    let registry = ClassRegistry::build(attrs, &config.question_types);
    if registry.is_empty() {
        return Err(Error::Generation("configuration yields no classes".into()));
    }
    let budget: usize = registry.classes.iter().map(|c| config.min_count(c.question_type)).sum();
    if budget > config.max_samples {
        return Err(Error::Generation(format!(
            "{budget} records needed for the class minimums, budget is {}",
            config.max_samples
        )));
    }

    let mut signals = Vec::with_capacity(budget);
    let mut triplets = Vec::with_capacity(budget);
    let mut class_counts = BTreeMap::new();
    for cls in &registry.classes {
        let count = config.min_count(cls.question_type);
        for j in 0..count {
            let index = signals.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, index, "findings"));
            let findings = sample_findings(&registry, cls, config.background_rate, &mut rng)?;
            let sample_seed = stream_key(seed, index, "signal");
            let mut signal = render_findings(&registry.attributes, &findings, config, sample_seed)?;
            signal = signal.shifted(shift.noise_std, 1.0 + shift.amplitude, stream_key(seed, index, "shift"))?;
            let paraphrase_id = (j + shift.paraphrase_offset) % PARAPHRASES;
            let answer = registry.derive_answer(cls, &findings)?;
            triplets.push(QaTriplet {
                signal_index: signals.len(),
                class_id: cls.id,
                question: registry.question(cls, paraphrase_id)?,
                answer,
                paraphrase_id,
                findings,
            });
            signals.push(signal);
        }
        class_counts.insert(cls.id, count);
    }

    let mut meta_train = Vec::new();
    let mut meta_test = Vec::new();
    for qt in QuestionType::ALL {
        let mut ids: Vec<usize> =
            registry.classes.iter().filter(|c| c.question_type == qt).map(|c| c.id).collect();
        if ids.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, 0, &format!("split:{qt}")));
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_test = if n < 2 {
            0
        } else {
            ((n as f64 * config.test_fraction).round() as usize).clamp(1, n - 1)
        };
        let mut test = ids.split_off(n - n_test);
        ids.sort_unstable();
        test.sort_unstable();
        meta_train.extend(ids);
        meta_test.extend(test);
    }
    let manifest = SplitManifest { meta_train, meta_test, class_counts, test_fraction: config.test_fraction };
    manifest.check_disjoint()?;

    let corpus = Corpus {
        config: config.clone(),
        seed,
        shift: *shift,
        registry,
        signals,
        triplets,
        manifest,
    };
    corpus.verify_answers()?;
    Ok(corpus)
}

/// Every presence attribute with probability `presence_rate` (skipping
/// conflicts), every valued attribute uniformly over its domain.
pub fn random_findings(attrs: &AttributeRegistry, presence_rate: f64, rng: &mut impl Rng) -> Findings {
    let mut f = Findings::default();
    for a in attrs.iter() {
        if a.is_valued() {
            f.values.insert(a.id, rng.random_range(0..a.values.len()));
        } else if rng.random::<f64>() < presence_rate
            && !f.present.iter().any(|&p| attrs.get(p).is_ok_and(|s| conflicts(s.motif, a.motif)))
        {
            f.present.insert(a.id);
        }
    }
    f
}

/// Signals with their findings, for encoder pretraining and probing.
pub fn labeled_pool(
    config: &GeneratorConfig,
    n: usize,
    presence_rate: f64,
    seed: u64,
) -> Result<Vec<(EcgSignal, Findings)>> {
    let attrs = AttributeRegistry::new(&config.attributes)?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, i as u64, "pool"));
            let findings = random_findings(&attrs, presence_rate, &mut rng);
            let signal = render_findings(&attrs, &findings, config, stream_key(seed, i as u64, "pool-signal"))?;
            Ok((signal, findings))
        })
        .collect()
}
