//! Acceptance harness: one PASS/FAIL line per criterion and a final tally.
//! Runs to completion and exits 0 even when criteria fail; the lines are the
//! verdict.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use ecgqa_autodiff::{gradcheck, ParameterSet};
use ecgqa_cli::config::{DomainShift, Expression, ExperimentConfig, Method};
use ecgqa_cli::pipeline::{self, cell_data, digest_file, evaluate, initial_theta, prepare, train, Prepared};
use ecgqa_core::mapper::{gradcheck_mapper, init_mapper, MapperConfig, MapperVariant};
use ecgqa_core::meta::{finetune, meta_gradient, task_loss, FeatureBank, MetaConfig, MetaTestReport, TaskContext};
use ecgqa_core::metrics::{bleu1, lcs_len, normalize, overlap_accuracy, rouge_l_f1};
use ecgqa_core::model::decoder::{build_tokenizer, init_lm, DecoderConfig};
use ecgqa_core::model::encoder::{init_encoder, ConvSpec, EncoderConfig};
use ecgqa_core::synth::*;

const VERIFY_CHANCE: f64 = 0.5;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { passed, detail: detail.into() })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn head_accuracy(report: &MetaTestReport, n: usize) -> f64 {
    let eps = &report.episodes[..n.min(report.episodes.len())];
    eps.iter().map(|e| e.overlap_accuracy).sum::<f64>() / eps.len() as f64
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Learners and reports of the main 2-way 5-shot comparison, reused by the
/// later criteria.
struct Main {
    cfg: ExperimentConfig,
    learners: Vec<ParameterSet>,
    episodic: Vec<MetaTestReport>,
    digests_before: (String, String, String, String),
}

fn backbone_digests(prep: &Prepared, work: &Path) -> Result<(String, String, String, String)> {
    let bb = &prep.backbones;
    Ok((
        bb.encoder.digest(),
        bb.lm.digest(),
        digest_file(&work.join("backbones/encoder.ckpt"))?,
        digest_file(&work.join("backbones/lm.ckpt"))?,
    ))
}

fn c1_gradients() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for seed in 0..100 {
        for case in gradcheck::primitive_cases(seed) {
            let err = gradcheck::check(case.f.as_ref(), &case.inputs, 1e-5)?;
            checks += 1;
            if err > worst.0 {
                worst = (err, format!("{} seed {seed}", case.name));
            }
        }
        for variant in MapperVariant::ALL {
            let cfg = MapperConfig {
                variant,
                d_enc: 6,
                d_model: 8,
                k_e: 3,
                m_prefix: 2,
                heads: 2,
                layers: 1,
                mlp_layers: 2,
                mlp_hidden: 5,
                dropout: 0.5,
            };
            let err = gradcheck_mapper(&cfg, 2, seed)?;
            checks += 1;
            if err > worst.0 {
                worst = (err, format!("{variant} mapper seed {seed}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 < 1e-4 && secs < 60.0,
        format!("{checks} checks over 100 seeds, worst relative error {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

fn c2_second_order() -> Result<Verdict> {
    let start = Instant::now();
    let d = 4;
    let gen = GeneratorConfig { question_types: vec![QuestionType::SingleVerify], min_verify: 16, ..GeneratorConfig::default() };
    let corpus = generate_corpus(&gen, 3)?;
    let tok = build_tokenizer(&corpus.registry)?;
    let lm_cfg =
        DecoderConfig { vocab: tok.len(), d_model: d, depth: 1, heads: 2, d_ff: 2 * d, m_prefix: 2, ..DecoderConfig::default() };
    let mut lm = init_lm(&lm_cfg, 0)?;
    lm.set_frozen(true);
    let encoder_cfg = EncoderConfig {
        convs: vec![ConvSpec { channels: 8, kernel: 10, stride: 10 }, ConvSpec { channels: d, kernel: 10, stride: 10 }],
        d_model: d,
        depth: 1,
        heads: 2,
        d_ff: 2 * d,
        ..EncoderConfig::default()
    };
    let mut encoder = init_encoder(&encoder_cfg, 0)?;
    encoder.set_frozen(true);
    let mapper_cfg = MapperConfig {
        variant: MapperVariant::Linear,
        d_enc: d,
        d_model: d,
        k_e: encoder_cfg.k_e()?,
        m_prefix: 2,
        dropout: 0.0,
        ..MapperConfig::default()
    };
    let features = FeatureBank::build(&encoder, &encoder_cfg, &corpus.signals)?;
    let ctx = TaskContext {
        corpus: &corpus,
        tokenizer: &tok,
        lm: &lm,
        lm_cfg: &lm_cfg,
        encoder: &encoder,
        encoder_cfg: &encoder_cfg,
        mapper_cfg: &mapper_cfg,
        features: &features,
        prompt: PromptVariant::Scaffold,
    };
    let cfg = MetaConfig { inner_lr: 0.5, inner_steps: 5, ..MetaConfig::default() };
    let theta = init_mapper(&mapper_cfg, 5)?;
    ensure!(theta.num_values() <= 50, "mapper holds {} values", theta.num_values());
    let sampler = EpisodeSampler::new(&corpus, Split::MetaTrain, None, ParaphrasePool::All, EpisodeSpec::new(2, 3, 4)?)?;
    let ep = sampler.sample(3);
    let composed = |t: &ParameterSet| -> Result<f64> {
        let adapted = finetune(&ctx, t, &ep.support, cfg.inner_steps, cfg.inner_lr, None)?;
        Ok(task_loss(&ctx, &adapted, &ep.query)?)
    };
    let (grads, _) = meta_gradient(&ctx, &theta, &[(0, &ep)], &cfg, 0.0)?;
    let (mut num, mut diff, eps) = (0.0f64, 0.0f64, 1e-5);
    for (path, p) in theta.iter() {
        for i in 0..p.value.numel() {
            let mut t = (*p.value).clone();
            t.data_mut()[i] += eps;
            let mut plus = theta.clone();
            plus.set(path, t.clone())?;
            t.data_mut()[i] -= 2.0 * eps;
            let mut minus = theta.clone();
            minus.set(path, t)?;
            let fd = (composed(&plus)? - composed(&minus)?) / (2.0 * eps);
            num += fd * fd;
            diff += (fd - grads[path].data()[i]).powi(2);
        }
    }
    let rel = diff.sqrt() / num.sqrt().max(1e-12);
    let (first, _) = meta_gradient(&ctx, &theta, &[(0, &ep)], &MetaConfig { second_order: false, ..cfg.clone() }, 0.0)?;
    let (mut gap, mut norm) = (0.0f64, 0.0f64);
    for (k, g) in &first {
        for (a, b) in g.data().iter().zip(grads[k].data()) {
            gap += (a - b).powi(2);
            norm += b * b;
        }
    }
    let gap = gap.sqrt() / norm.sqrt().max(1e-12);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        rel < 1e-3 && gap > 1e-3 && secs < 60.0,
        format!(
            "{} values, 5 inner steps: relative error {rel:.2e}, first-order differs by {:.1}%, {secs:.1}s",
            theta.num_values(),
            100.0 * gap
        ),
    )
}

fn c3_episodic_vs_supervised(cfg: &ExperimentConfig, prep: &Prepared, main: &mut Option<Main>, work: &Path) -> Result<Verdict> {
    let start = Instant::now();
    let digests_before = backbone_digests(prep, work)?;
    let mut learners = Vec::new();
    let mut episodic = Vec::new();
    for &seed in &cfg.seeds {
        let trained = train(cfg, prep, None, seed)?;
        episodic.push(evaluate(cfg, prep, None, &trained.theta, seed, cfg.meta.finetune_steps)?);
        learners.push(trained.theta);
        eprintln!("episodic seed {seed} done at {:.0}s", start.elapsed().as_secs_f64());
    }
    let baseline_cfg = ExperimentConfig { method: Method::Baseline, ..cfg.clone() };
    let mut plain = Vec::new();
    let mut baselines = Vec::new();
    for &seed in &cfg.seeds {
        let trained = train(&baseline_cfg, prep, None, seed)?;
        plain.push(evaluate(&baseline_cfg, prep, None, &trained.theta, seed, 0)?.overlap_accuracy.mean);
        baselines.push(trained.theta);
        eprintln!("baseline seed {seed} done at {:.0}s", start.elapsed().as_secs_f64());
    }
    let secs = start.elapsed().as_secs_f64();
    let short = ExperimentConfig { meta: MetaConfig { meta_test_episodes: 50, ..cfg.meta.clone() }, ..baseline_cfg.clone() };
    let mut tuned = Vec::new();
    for (theta, &seed) in baselines.iter().zip(&cfg.seeds) {
        tuned.push(evaluate(&short, prep, None, theta, seed, cfg.meta.finetune_steps)?.overlap_accuracy.mean);
    }
    let ep_acc = mean(&episodic.iter().map(|r| r.overlap_accuracy.mean).collect::<Vec<_>>());
    let base_acc = mean(&plain);
    *main = Some(Main { cfg: cfg.clone(), learners, episodic, digests_before });
    verdict(
        ep_acc - base_acc >= 0.10 && secs < 1800.0,
        format!(
            "episodic {} vs supervised {} ({} seeds x {} episodes, {:+.1} points), {secs:.0}s; supervised after {} fine-tune steps {} on 50 episodes",
            pct(ep_acc),
            pct(base_acc),
            cfg.seeds.len(),
            cfg.meta.meta_test_episodes,
            100.0 * (ep_acc - base_acc),
            cfg.meta.finetune_steps,
            pct(mean(&tuned))
        ),
    )
}

fn c4_meta_knowledge(prep: &Prepared, main: &Main) -> Result<Verdict> {
    let n = 100;
    let cfg = ExperimentConfig { meta: MetaConfig { meta_test_episodes: n, ..main.cfg.meta.clone() }, ..main.cfg.clone() };
    let (mut untrained, mut zero_shot, mut trained) = (Vec::new(), Vec::new(), Vec::new());
    for (report, &seed) in main.episodic.iter().zip(&cfg.seeds) {
        let theta = initial_theta(&cfg, &prep.backbones, seed)?;
        untrained.push(evaluate(&cfg, prep, None, &theta, seed, cfg.meta.finetune_steps)?.overlap_accuracy.mean);
        zero_shot.push(evaluate(&cfg, prep, None, &theta, seed, 0)?.overlap_accuracy.mean);
        trained.push(head_accuracy(report, n));
    }
    let (u, z, t) = (mean(&untrained), mean(&zero_shot), mean(&trained));
    verdict(
        (u - VERIFY_CHANCE).abs() <= 0.10 && t - u >= 0.25,
        format!(
            "untrained {} after {} fine-tune steps (chance {}), meta-trained {} on the same {n} episodes x {} seeds; untrained without fine-tuning {}",
            pct(u),
            cfg.meta.finetune_steps,
            pct(VERIFY_CHANCE),
            pct(t),
            cfg.seeds.len(),
            pct(z)
        ),
    )
}

fn c5_monotonicity(prep: &Prepared, main: &Main) -> Result<Verdict> {
    let n = 50;
    let at = |n_way: usize, k_shot: usize| -> Result<f64> {
        let cfg = ExperimentConfig {
            n_way,
            k_shot,
            meta: MetaConfig { meta_test_episodes: n, ..main.cfg.meta.clone() },
            ..main.cfg.clone()
        };
        let mut accs = Vec::new();
        for (theta, &seed) in main.learners.iter().zip(&cfg.seeds) {
            accs.push(evaluate(&cfg, prep, None, theta, seed, cfg.meta.finetune_steps)?.overlap_accuracy.mean);
        }
        Ok(mean(&accs))
    };
    let base = mean(&main.episodic.iter().map(|r| head_accuracy(r, n)).collect::<Vec<_>>());
    let k10 = at(2, 10)?;
    let n5 = at(5, 5)?;
    verdict(
        k10 >= base && n5 <= base,
        format!("2w5s {}, 2w10s {}, 5w5s {} ({n} episodes x {} seeds)", pct(base), pct(k10), pct(n5), main.learners.len()),
    )
}

fn c6_adaptation(main: &Main) -> Result<Verdict> {
    let total: usize = main.episodic.iter().map(|r| r.episodes.len()).sum();
    let improved: usize =
        main.episodic.iter().flat_map(|r| &r.episodes).filter(|e| e.query_loss_after < e.query_loss_before).count();
    let frac = improved as f64 / total as f64;
    let before = mean(&main.episodic.iter().map(|r| r.query_loss_before).collect::<Vec<_>>());
    let after = mean(&main.episodic.iter().map(|r| r.query_loss_after).collect::<Vec<_>>());
    verdict(
        frac >= 0.9,
        format!("query loss fell on {improved}/{total} episodes ({}); mean {before:.3} -> {after:.3}", pct(frac)),
    )
}

fn c7_frozen(prep: &Prepared, main: &Main, work: &Path) -> Result<Verdict> {
    let after = backbone_digests(prep, work)?;
    let frozen = after == main.digests_before && after.0 == prep.backbones.report.encoder_digest;
    let cfg = ExperimentConfig {
        unfreeze_encoder: true,
        seeds: vec![0],
        meta: MetaConfig { meta_train_steps: 2, meta_batch: 1, ..main.cfg.meta.clone() },
        ..main.cfg.clone()
    };
    let trained = train(&cfg, prep, None, 0)?;
    let mut encoder = trained.theta.subset("encoder.");
    encoder.set_frozen(true);
    ensure!(encoder.len() == prep.backbones.encoder.len(), "released encoder is incomplete");
    let moved = encoder.digest() != prep.backbones.encoder.digest();
    verdict(
        frozen && moved,
        format!(
            "encoder {} and decoder {} unchanged across {} meta-training runs: {frozen}; released encoder digest changed after 2 steps: {moved}",
            &after.0[..12],
            &after.1[..12],
            main.learners.len()
        ),
    )
}

fn c8_metrics() -> Result<Verdict> {
    let t = |s: &str| normalize(s);
    let cases: Vec<(&str, f64, f64)> = vec![
        ("acc identical", overlap_accuracy(&t("left axis"), &t("left axis"))?, 1.0),
        ("acc trailing tokens", overlap_accuracy(&t("yes but noisy"), &t("yes"))?, 1.0),
        ("acc mismatch", overlap_accuracy(&t("no"), &t("yes"))?, 0.0),
        ("bleu identical", bleu1(&t("baseline drift"), &t("baseline drift")), 1.0),
        ("bleu disjoint", bleu1(&t("no"), &t("yes")), 0.0),
        ("bleu clipped", bleu1(&t("yes yes"), &t("yes")), 0.5),
        ("rouge identical", rouge_l_f1(&t("baseline drift"), &t("baseline drift")), 1.0),
        ("rouge disjoint", rouge_l_f1(&t("no"), &t("yes")), 0.0),
        ("rouge extra token", rouge_l_f1(&t("baseline drift present"), &t("baseline drift")), 0.8),
    ];
    let off: Vec<&str> = cases.iter().filter(|(_, got, want)| (got - want).abs() > 1e-12).map(|c| c.0).collect();
    ensure!(overlap_accuracy(&t("yes"), &t("")).is_err(), "empty reference accepted");

    fn brute(a: &[u8], b: &[u8]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.len() > best && sub.iter().all(|x| it.any(|y| y == x)) {
                best = sub.len();
            }
        }
        best
    }
    let mut seqs: Vec<Vec<u8>> = vec![Vec::new()];
    let mut frontier = seqs.clone();
    for _ in 0..6 {
        frontier = frontier.iter().flat_map(|s| (0..2u8).map(move |c| [s.as_slice(), &[c]].concat())).collect();
        seqs.extend(frontier.iter().cloned());
    }
    let words = |s: &[u8]| s.iter().map(u8::to_string).collect::<Vec<_>>();
    let mut pairs = 0usize;
    let mut lcs_errors = 0usize;
    for a in &seqs {
        for b in &seqs {
            pairs += 1;
            if lcs_len(&words(a), &words(b)) != brute(a, b) {
                lcs_errors += 1;
            }
        }
    }
    verdict(
        off.is_empty() && lcs_errors == 0,
        format!(
            "{}/{} worked examples exact{}; LCS equals exhaustive search on {pairs} binary pairs up to length 6 ({lcs_errors} mismatches)",
            cases.len() - off.len(),
            cases.len(),
            if off.is_empty() { String::new() } else { format!(" (off: {})", off.join(", ")) }
        ),
    )
}

fn c9_sampler(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Verdict> {
    let corpus = &prep.data.corpus;
    let q = pipeline::query_size(cfg, corpus)?;
    let train_classes: BTreeSet<usize> = corpus.manifest.meta_train.iter().copied().collect();
    let test_classes: BTreeSet<usize> = corpus.manifest.meta_test.iter().copied().collect();
    let (mut overlaps, mut bad_sizes, mut leaks, mut draws) = (0usize, 0usize, 0usize, 0usize);
    for (split, side) in [(Split::MetaTrain, &train_classes), (Split::MetaTest, &test_classes)] {
        let sampler = pipeline::sampler(cfg, corpus, split)?;
        for seed in 0..1000u64 {
            let ep = sampler.sample(seed);
            draws += 1;
            let s: BTreeSet<_> = ep.support.iter().collect();
            let qs: BTreeSet<_> = ep.query.iter().collect();
            let classes: BTreeSet<_> = ep.classes.iter().collect();
            if !s.is_disjoint(&qs) {
                overlaps += 1;
            }
            let labels_ok = ep.support.iter().enumerate().all(|(i, &t)| corpus.triplets[t].class_id == ep.classes[i / cfg.k_shot])
                && ep.query.iter().enumerate().all(|(i, &t)| corpus.triplets[t].class_id == ep.classes[i / q]);
            if classes.len() != cfg.n_way
                || s.len() != cfg.n_way * cfg.k_shot
                || qs.len() != cfg.n_way * q
                || ep.support.len() != s.len()
                || ep.query.len() != qs.len()
                || !labels_ok
            {
                bad_sizes += 1;
            }
            if !ep.classes.iter().all(|c| side.contains(c)) {
                leaks += 1;
            }
        }
    }
    let disjoint = train_classes.is_disjoint(&test_classes);
    verdict(
        overlaps == 0 && bad_sizes == 0 && leaks == 0 && disjoint,
        format!(
            "{draws} episodes (N={} K={} M_q={q}): {overlaps} overlaps, {bad_sizes} cardinality errors, {leaks} leaks, split disjoint: {disjoint}",
            cfg.n_way, cfg.k_shot
        ),
    )
}

fn c10_paraphrase(prep: &Prepared, main: &Main) -> Result<Verdict> {
    let n = 100;
    let cfg = ExperimentConfig {
        expression: Expression::Different,
        meta: MetaConfig { meta_test_episodes: n, ..main.cfg.meta.clone() },
        ..main.cfg.clone()
    };
    ensure!(cfg.train_hash() == main.cfg.train_hash(), "expression variants must share learners");
    let mut unseen = Vec::new();
    for (theta, &seed) in main.learners.iter().zip(&cfg.seeds) {
        unseen.push(evaluate(&cfg, prep, None, theta, seed, cfg.meta.finetune_steps)?.overlap_accuracy.mean);
    }
    let same = mean(&main.episodic.iter().map(|r| head_accuracy(r, n)).collect::<Vec<_>>());
    let different = mean(&unseen);
    verdict(
        same - different <= 0.10,
        format!("seen expressions {}, unseen expressions {} ({:+.1} points, {n} episodes x {} seeds)", pct(same), pct(different), 100.0 * (different - same), unseen.len()),
    )
}

fn c11_domain_shift(prep: &Prepared, main: &Main) -> Result<Verdict> {
    let n = 100;
    let cfg = ExperimentConfig {
        domain_shift: Some(DomainShift::default()),
        meta: MetaConfig { meta_test_episodes: n, ..main.cfg.meta.clone() },
        ..main.cfg.clone()
    };
    let (_, shifted) = cell_data(&cfg, prep)?;
    let shifted = shifted.context("shifted corpus missing")?;
    let (mut no_adapt, mut adapt) = (Vec::new(), Vec::new());
    for (theta, &seed) in main.learners.iter().zip(&cfg.seeds) {
        no_adapt.push(evaluate(&cfg, prep, Some(&shifted), theta, seed, 0)?.overlap_accuracy.mean);
        adapt.push(evaluate(&cfg, prep, Some(&shifted), theta, seed, cfg.meta.finetune_steps)?.overlap_accuracy.mean);
    }
    let in_domain = mean(&main.episodic.iter().map(|r| head_accuracy(r, n)).collect::<Vec<_>>());
    let (lo, hi) = (mean(&no_adapt), mean(&adapt));
    let gap = in_domain - lo;
    let recovery = if gap > 0.0 { (hi - lo) / gap } else { f64::NAN };
    verdict(
        gap > 0.0 && recovery >= 0.7,
        format!(
            "shifted without adaptation {}, with meta-adaptation {}, in-domain {}: recovered {} of the gap",
            pct(lo),
            pct(hi),
            pct(in_domain),
            if recovery.is_finite() { pct(recovery) } else { "none (no gap)".into() }
        ),
    )
}

fn c12_determinism(scratch: &Path) -> Result<Verdict> {
    let cfg = ExperimentConfig::load(&repo().join("configs/smoke.toml"))?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = scratch.join(format!("det-out-{run}"));
        pipeline::run(&cfg, &scratch.join(format!("det-work-{run}")), &out)?;
        ecgqa_cli::emit_report(&out)?;
        let mut files = Vec::new();
        let mut stack = vec![out.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push((p.strip_prefix(&out)?.to_path_buf(), digest_file(&p)?));
                }
            }
        }
        files.sort();
        trees.push(files);
    }
    let differing = trees[0].iter().zip(&trees[1]).filter(|(a, b)| a != b).count();
    verdict(
        trees[0].len() == trees[1].len() && differing == 0,
        format!("{} result files from two fresh runs, {differing} differ", trees[0].len()),
    )
}

fn main() {
    let started = Instant::now();
    let scratch = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let work = scratch.join("work");
    for dir in ["det-out-a", "det-out-b", "det-work-a", "det-work-b"] {
        let _ = fs::remove_dir_all(scratch.join(dir));
    }
    let mut lines: Vec<(String, Result<Verdict>)> = Vec::new();
    let mut record = |name: &str, v: Result<Verdict>| {
        let line = match &v {
            Ok(v) => format!("{} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail),
            Err(e) => format!("FAIL {name}: error: {e:#}"),
        };
        println!("{line}");
        lines.push((name.to_string(), v));
    };

    record("C1 gradient correctness", c1_gradients());
    record("C2 second-order meta-gradient", c2_second_order());

    let cfg = ExperimentConfig::load(&repo().join("configs/desk.toml"));
    let prep = cfg.as_ref().map_err(|e| anyhow::anyhow!("{e:#}")).and_then(|cfg| {
        let t = Instant::now();
        let prep = prepare(cfg, &work)?;
        eprintln!("backbones ready after {:.0}s", t.elapsed().as_secs_f64());
        Ok(prep)
    });
    let mut main_run = None;
    match (&cfg, &prep) {
        (Ok(cfg), Ok(prep)) => {
            record("C3 episodic beats supervised", c3_episodic_vs_supervised(cfg, prep, &mut main_run, &work));
            match &main_run {
                Some(main) => {
                    record("C4 meta-knowledge ablation", c4_meta_knowledge(prep, main));
                    record("C5 shot and way monotonicity", c5_monotonicity(prep, main));
                    record("C6 adaptation lowers query loss", c6_adaptation(main));
                    record("C7 frozen backbone contract", c7_frozen(prep, main, &work));
                }
                None => {
                    for name in ["C4 meta-knowledge ablation", "C5 shot and way monotonicity", "C6 adaptation lowers query loss", "C7 frozen backbone contract"] {
                        record(name, Err(anyhow::anyhow!("main comparison did not complete")));
                    }
                }
            }
            record("C8 metric oracles", c8_metrics());
            record("C9 sampler invariants", c9_sampler(cfg, prep));
            match &main_run {
                Some(main) => {
                    record("C10 paraphrase robustness", c10_paraphrase(prep, main));
                    record("C11 domain shift with meta-adaptation", c11_domain_shift(prep, main));
                }
                None => {
                    for name in ["C10 paraphrase robustness", "C11 domain shift with meta-adaptation"] {
                        record(name, Err(anyhow::anyhow!("main comparison did not complete")));
                    }
                }
            }
        }
        _ => {
            let why = match (&cfg, &prep) {
                (Err(e), _) | (_, Err(e)) => format!("{e:#}"),
                _ => unreachable!(),
            };
            for name in ["C3 episodic beats supervised", "C4 meta-knowledge ablation", "C5 shot and way monotonicity", "C6 adaptation lowers query loss", "C7 frozen backbone contract"] {
                record(name, Err(anyhow::anyhow!("setup failed: {why}")));
            }
            record("C8 metric oracles", c8_metrics());
            for name in ["C9 sampler invariants", "C10 paraphrase robustness", "C11 domain shift with meta-adaptation"] {
                record(name, Err(anyhow::anyhow!("setup failed: {why}")));
            }
        }
    }
    record("C12 determinism", c12_determinism(&scratch));

    let passed = lines.iter().filter(|(_, v)| v.as_ref().is_ok_and(|v| v.passed)).count();
    println!("{passed}/{} passed in {:.0}s", lines.len(), started.elapsed().as_secs_f64());
}
