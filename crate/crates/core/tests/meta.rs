use std::sync::OnceLock;

use ecgqa_autodiff::nn::cross_entropy_nll;
use ecgqa_autodiff::{ParameterSet, Tape};
use ecgqa_core::mapper::{init_mapper, map_prefix_eval, MapperConfig, MapperVariant};
use ecgqa_core::meta::*;
use ecgqa_core::model::decoder::{build_tokenizer, init_lm, pretrain_lm, teacher_forced_logits, DecoderConfig, LmPretrainConfig};
use ecgqa_core::model::encoder::{encode_ecg, init_encoder, ConvSpec, EncoderConfig};
use ecgqa_core::model::tokenizer::Tokenizer;
use ecgqa_core::synth::*;

struct Fixture {
    corpus: Corpus,
    tok: Tokenizer,
    lm: ParameterSet,
    lm_cfg: DecoderConfig,
    encoder: ParameterSet,
    encoder_cfg: EncoderConfig,
    mapper_cfg: MapperConfig,
    bank: FeatureBank,
}

impl Fixture {
    fn new(d: usize, lm_steps: usize) -> Self {
        let gen = GeneratorConfig {
            question_types: vec![QuestionType::SingleVerify],
            min_verify: 16,
            ..GeneratorConfig::default()
        };
        let corpus = generate_corpus(&gen, 3).unwrap();
        let tok = build_tokenizer(&corpus.registry).unwrap();
        let lm_cfg = DecoderConfig {
            vocab: tok.len(),
            d_model: d,
            depth: 1,
            heads: 2,
            d_ff: 2 * d,
            m_prefix: 2,
            ..DecoderConfig::default()
        };
        let lm = if lm_steps == 0 {
            let mut lm = init_lm(&lm_cfg, 0).unwrap();
            lm.set_frozen(true);
            lm
        } else {
            let train = LmPretrainConfig { steps: lm_steps, batch_size: 16, train_examples: 1000, eval_examples: 32, ..Default::default() };
            pretrain_lm(&lm_cfg, &corpus.registry, &tok, &train, 0).unwrap().0
        };
        let encoder_cfg = EncoderConfig {
            convs: vec![ConvSpec { channels: 8, kernel: 10, stride: 10 }, ConvSpec { channels: d, kernel: 10, stride: 10 }],
            d_model: d,
            depth: 1,
            heads: 2,
            d_ff: 2 * d,
            ..EncoderConfig::default()
        };
        let mut encoder = init_encoder(&encoder_cfg, 0).unwrap();
        encoder.set_frozen(true);
        let mapper_cfg = MapperConfig {
            variant: MapperVariant::Linear,
            d_enc: d,
            d_model: d,
            k_e: encoder_cfg.k_e().unwrap(),
            m_prefix: 2,
            dropout: 0.0,
            ..MapperConfig::default()
        };
        let bank = FeatureBank::build(&encoder, &encoder_cfg, &corpus.signals).unwrap();
        Self { corpus, tok, lm, lm_cfg, encoder, encoder_cfg, mapper_cfg, bank }
    }

    fn ctx(&self) -> TaskContext<'_> {
        self.ctx_with(&self.mapper_cfg)
    }

    fn ctx_with<'a>(&'a self, mapper_cfg: &'a MapperConfig) -> TaskContext<'a> {
        TaskContext {
            corpus: &self.corpus,
            tokenizer: &self.tok,
            lm: &self.lm,
            lm_cfg: &self.lm_cfg,
            encoder: &self.encoder,
            encoder_cfg: &self.encoder_cfg,
            mapper_cfg,
            features: &self.bank,
            prompt: PromptVariant::Scaffold,
        }
    }

    fn sampler(&self, split: Split, spec: EpisodeSpec) -> EpisodeSampler {
        EpisodeSampler::new(&self.corpus, split, None, ParaphrasePool::All, spec).unwrap()
    }
}

/// Tiny backbones with a 30-value mapper, for derivative checks.
fn tiny() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| Fixture::new(4, 0))
}

/// Small pretrained decoder, for behavioural checks.
fn trained() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| Fixture::new(16, 400))
}

fn spec() -> EpisodeSpec {
    EpisodeSpec::new(2, 3, 4).unwrap()
}

#[test]
fn tiny_mapper_is_small() {
    let f = tiny();
    assert!(init_mapper(&f.mapper_cfg, 0).unwrap().num_values() <= 50);
}

#[test]
fn loss_composes_module_outputs() {
    let f = trained();
    let ctx = f.ctx();
    let theta = init_mapper(&f.mapper_cfg, 1).unwrap();
    let i = 5;
    let t = &f.corpus.triplets[i];
    let e = encode_ecg(&f.encoder, &f.encoder_cfg, &f.corpus.signals[t.signal_index]).unwrap();
    let prefix = map_prefix_eval(&theta, &f.mapper_cfg, &[&e]).unwrap();
    let cls = f.corpus.class(t.class_id).unwrap();
    let prompt = f.tok.encode(&f.corpus.registry.render_question(cls, t.paraphrase_id, PromptVariant::Scaffold).unwrap()).unwrap();
    let answer = f.tok.encode(&t.answer).unwrap();
    let tape = Tape::inference();
    let vars = f.lm.to_vars(&tape);
    let logits = teacher_forced_logits(&vars, &f.lm_cfg, &tape.constant(prefix), &prompt, &answer).unwrap();
    let mut targets = answer.clone();
    targets.push(ecgqa_core::model::tokenizer::EOS);
    let n = targets.len();
    let expected = cross_entropy_nll(&logits, &targets, &vec![1.0; n]).unwrap().item().unwrap() / n as f64;
    let got = task_loss(&ctx, &theta, &[i]).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn duplicated_batch_has_the_same_loss() {
    let f = trained();
    let ctx = f.ctx();
    let theta = init_mapper(&f.mapper_cfg, 1).unwrap();
    let one = task_loss(&ctx, &theta, &[7]).unwrap();
    let two = task_loss(&ctx, &theta, &[7, 7]).unwrap();
    assert!((one - two).abs() < 1e-12);
    assert!(task_loss(&ctx, &theta, &[]).is_err());
}

#[test]
fn zero_inner_rate_is_the_identity() {
    let f = tiny();
    let ctx = f.ctx();
    let theta = init_mapper(&f.mapper_cfg, 2).unwrap();
    let ep = f.sampler(Split::MetaTrain, spec()).sample(1);
    let adapted = finetune(&ctx, &theta, &ep.support, 3, 0.0, None).unwrap();
    assert_eq!(adapted.digest(), theta.digest());
    assert!(finetune(&ctx, &theta, &[], 1, 0.1, None).is_err());
}

#[test]
fn inner_adaptation_leaves_theta_untouched_and_lowers_support_loss() {
    let f = trained();
    let ctx = f.ctx();
    let theta = init_mapper(&f.mapper_cfg, 3).unwrap();
    let digest = theta.digest();
    let sampler = f.sampler(Split::MetaTrain, spec());
    let cfg = MetaConfig::default();
    let mut improved = 0;
    let tasks = 100;
    for seed in 0..tasks {
        let ep = sampler.sample(seed);
        let before = task_loss(&ctx, &theta, &ep.support).unwrap();
        let adapted = inner_adapt(&ctx, &theta, &ep.support, &cfg).unwrap();
        if task_loss(&ctx, &adapted, &ep.support).unwrap() <= before {
            improved += 1;
        }
    }
    assert_eq!(theta.digest(), digest);
    assert!(improved * 100 >= 95 * tasks, "{improved}/{tasks}");
}

#[test]
fn plain_gradient_steps_descend_on_a_fixed_task() {
    let f = trained();
    let ctx = f.ctx();
    let mut theta = init_mapper(&f.mapper_cfg, 4).unwrap();
    let ep = f.sampler(Split::MetaTrain, spec()).sample(9);
    let mut losses = vec![task_loss(&ctx, &theta, &ep.support).unwrap()];
    for _ in 0..50 {
        theta = finetune(&ctx, &theta, &ep.support, 1, 0.05, None).unwrap();
        losses.push(task_loss(&ctx, &theta, &ep.support).unwrap());
    }
    assert!(losses[50] < losses[0], "{} -> {}", losses[0], losses[50]);
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 5, "{rises} increases in {losses:?}");
}

fn composed_meta_loss(ctx: &TaskContext<'_>, theta: &ParameterSet, ep: &Episode, cfg: &MetaConfig) -> f64 {
    let adapted = finetune(ctx, theta, &ep.support, cfg.inner_steps, cfg.inner_lr, None).unwrap();
    task_loss(ctx, &adapted, &ep.query).unwrap()
}

#[test]
fn second_order_meta_gradient_matches_finite_differences() {
    let f = tiny();
    let ctx = f.ctx();
    let cfg = MetaConfig { inner_lr: 0.5, ..MetaConfig::default() };
    let theta = init_mapper(&f.mapper_cfg, 5).unwrap();
    let ep = f.sampler(Split::MetaTrain, spec()).sample(3);
    let (grads, _) = meta_gradient(&ctx, &theta, &[(0, &ep)], &cfg, 0.0).unwrap();
    let (mut num, mut diff) = (0.0f64, 0.0f64);
    let eps = 1e-5;
    for (path, p) in theta.iter() {
        for i in 0..p.value.numel() {
            let mut plus = theta.clone();
            let mut t = (*p.value).clone();
            t.data_mut()[i] += eps;
            plus.set(path, t.clone()).unwrap();
            let mut minus = theta.clone();
            t.data_mut()[i] -= 2.0 * eps;
            minus.set(path, t).unwrap();
            let fd = (composed_meta_loss(&ctx, &plus, &ep, &cfg) - composed_meta_loss(&ctx, &minus, &ep, &cfg)) / (2.0 * eps);
            let g = grads[path].data()[i];
            num += fd * fd;
            diff += (fd - g).powi(2);
        }
    }
    let rel = diff.sqrt() / num.sqrt().max(1e-12);
    assert!(rel < 1e-3, "relative error {rel}");

    let first = MetaConfig { second_order: false, ..cfg };
    let (fo, _) = meta_gradient(&ctx, &theta, &[(0, &ep)], &first, 0.0).unwrap();
    let gap: f64 = fo
        .iter()
        .map(|(k, g)| g.data().iter().zip(grads[k].data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    assert!(gap.sqrt() > 1e-6, "first-order equals second-order");
}

#[test]
fn identical_episodes_scale_the_meta_gradient() {
    let f = tiny();
    let ctx = f.ctx();
    let cfg = MetaConfig::default();
    let theta = init_mapper(&f.mapper_cfg, 6).unwrap();
    let ep = f.sampler(Split::MetaTrain, spec()).sample(4);
    let (one, _) = meta_gradient(&ctx, &theta, &[(1, &ep)], &cfg, 0.0).unwrap();
    let (three, _) = meta_gradient(&ctx, &theta, &[(1, &ep), (1, &ep), (1, &ep)], &cfg, 0.0).unwrap();
    for (k, g) in &one {
        for (a, b) in g.data().iter().zip(three[k].data()) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
    assert!(meta_gradient(&ctx, &theta, &[], &cfg, 0.0).is_err());
}

#[test]
fn resumed_training_is_bit_identical() {
    let f = tiny();
    let ctx = f.ctx();
    let sampler = f.sampler(Split::MetaTrain, spec());
    let cfg = MetaConfig { meta_train_steps: 4, meta_batch: 2, ..MetaConfig::default() };
    let theta = init_mapper(&f.mapper_cfg, 7).unwrap();

    let mut straight = MetaState::new(theta.clone(), &cfg);
    let mut log = Vec::new();
    meta_train(&ctx, &sampler, &cfg, &mut straight, 11, Some(&mut log), None).unwrap();
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 4);

    let dir = tempfile::tempdir().unwrap();
    let half = MetaConfig { meta_train_steps: 2, checkpoint_every: 2, ..cfg.clone() };
    let mut first = MetaState::new(theta, &cfg);
    meta_train(&ctx, &sampler, &half, &mut first, 11, None, Some(dir.path())).unwrap();
    let ckpt = ecgqa_autodiff::Checkpoint::load(dir.path().join("meta_step000002.ckpt")).unwrap();
    let mut resumed = MetaState::from_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.step, 2);
    meta_train(&ctx, &sampler, &cfg, &mut resumed, 11, None, None).unwrap();
    assert_eq!(resumed.theta.digest(), straight.theta.digest());
    assert_eq!(resumed.opt.step, straight.opt.step);
}

#[test]
fn backbones_stay_frozen_unless_the_encoder_is_released() {
    let f = tiny();
    let ctx = f.ctx();
    let sampler = f.sampler(Split::MetaTrain, spec());
    let cfg = MetaConfig { meta_train_steps: 2, meta_batch: 1, inner_steps: 1, ..MetaConfig::default() };
    let (lm, enc) = (f.lm.digest(), f.encoder.digest());
    let mut state = MetaState::new(init_mapper(&f.mapper_cfg, 8).unwrap(), &cfg);
    meta_train(&ctx, &sampler, &cfg, &mut state, 1, None, None).unwrap();
    assert_eq!((f.lm.digest(), f.encoder.digest()), (lm, enc.clone()));
    assert!(state.theta.paths().all(|p| p.starts_with("mapper.")));

    let mut theta = init_mapper(&f.mapper_cfg, 8).unwrap();
    let mut released = f.encoder.clone();
    released.set_frozen(false);
    theta.extend(released).unwrap();
    let mut state = MetaState::new(theta, &cfg);
    meta_train(&ctx, &sampler, &cfg, &mut state, 1, None, None).unwrap();
    assert_ne!(state.theta.subset("encoder.").digest(), enc);
}

#[test]
fn zero_finetune_steps_is_zero_shot_evaluation() {
    let f = trained();
    let ctx = f.ctx();
    let theta = init_mapper(&f.mapper_cfg, 9).unwrap();
    let stream = episode_stream(&f.sampler(Split::MetaTest, spec()), 2, 2);
    let report = meta_test(&ctx, &theta, &stream, 0, &MetaConfig::default()).unwrap();
    for (res, (_, ep)) in report.episodes.iter().zip(&stream) {
        let direct = predict(&ctx, &theta, &ep.query).unwrap();
        let got: Vec<&str> = res.items.iter().map(|s| s.prediction.as_str()).collect();
        assert_eq!(got, direct);
        assert_eq!(res.query_loss_before, res.query_loss_after);
    }
}

#[test]
fn saturated_mapper_answers_its_own_support_perfectly() {
    let f = trained();
    let ctx = f.ctx();
    let sampler = f.sampler(Split::MetaTest, spec());
    let mut ep = sampler.sample(5);
    ep.query = ep.support.clone();
    let theta = init_mapper(&f.mapper_cfg, 10).unwrap();
    let base = BaselineConfig { epochs: 150, batch_size: ep.support.len(), lr: 1e-2 };
    let (adapted, _) = supervised_baseline_train(&ctx, &theta, &ep.support, &base, 0.0, 1).unwrap();
    let report = meta_test(&ctx, &adapted, &[(0, ep)], 0, &MetaConfig::default()).unwrap();
    assert_eq!(report.overlap_accuracy.mean, 1.0);
}

#[test]
fn baseline_with_zero_epochs_is_the_identity_and_training_descends() {
    let f = trained();
    let ctx = f.ctx();
    let theta = init_mapper(&f.mapper_cfg, 11).unwrap();
    let pool: Vec<usize> = (0..60).collect();
    let (same, losses) = supervised_baseline_train(&ctx, &theta, &pool, &BaselineConfig { epochs: 0, ..Default::default() }, 0.01, 0).unwrap();
    assert_eq!(same.digest(), theta.digest());
    assert!(losses.is_empty());

    let cfg = BaselineConfig { epochs: 12, batch_size: 8, lr: 3e-3 };
    let (_, losses) = supervised_baseline_train(&ctx, &theta, &pool, &cfg, 0.01, 0).unwrap();
    let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let windows: Vec<f64> = losses.windows(5).map(avg).collect();
    assert!(windows.last().unwrap() < windows.first().unwrap(), "{losses:?}");
}

#[test]
fn adaptation_lowers_query_loss_on_average() {
    let f = trained();
    let ctx = f.ctx();
    let theta = init_mapper(&f.mapper_cfg, 12).unwrap();
    let stream = episode_stream(&f.sampler(Split::MetaTest, spec()), 3, 50);
    let report = meta_test(&ctx, &theta, &stream, 15, &MetaConfig::default()).unwrap();
    assert!(report.query_loss_after < report.query_loss_before);
    for v in [report.overlap_accuracy.mean, report.bleu1.mean, report.rouge_l_f1.mean] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn config_validation() {
    assert!(MetaConfig { inner_lr: 0.0, ..MetaConfig::default() }.validate().is_err());
    assert!(MetaConfig { inner_steps: 0, ..MetaConfig::default() }.validate().is_err());
    assert!(MetaConfig::default().validate().is_ok());
}
