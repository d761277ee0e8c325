use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use ecgqa_cli::ablation::{variants, Suite};
use ecgqa_cli::config::{ExperimentConfig, Method};
use ecgqa_cli::pipeline::{self, prepare, Failure, Prepared};
use ecgqa_cli::{emit_report, run_ablation_suite};

fn smoke() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    ExperimentConfig::load(&path).unwrap()
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

fn shared() -> &'static (PathBuf, Prepared) {
    static PREP: OnceLock<(PathBuf, Prepared)> = OnceLock::new();
    PREP.get_or_init(|| {
        let work = scratch().join("work");
        let prep = prepare(&smoke(), &work).unwrap();
        (work, prep)
    })
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn failure(err: &anyhow::Error) -> &Failure {
    err.downcast_ref::<Failure>().unwrap_or_else(|| panic!("not a pipeline failure: {err:#}"))
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = ExperimentConfig::default();
    let text = cfg.to_toml().unwrap();
    let back: ExperimentConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());

    assert!(toml::from_str::<ExperimentConfig>("colour = \"red\"").is_err());
    assert!(toml::from_str::<ExperimentConfig>("[meta]\ninner_rate = 0.1").is_err());
    let bad = ExperimentConfig { n_way: 3, ..ExperimentConfig::default() };
    assert!(bad.validate().is_err());
    let bad = ExperimentConfig { leads: Some(vec!["V7".into()]), ..ExperimentConfig::default() };
    assert!(bad.validate().is_err());
    assert_ne!(smoke().hash(), ExperimentConfig::default().hash());
}

#[test]
fn grid_cells_cover_the_declared_product() {
    let mut cfg = ExperimentConfig::default();
    cfg.grid.methods = vec![Method::Episodic, Method::Baseline];
    cfg.grid.settings = vec![(2, 5), (2, 10), (5, 5), (5, 10)];
    let cells = cfg.cells();
    assert_eq!(cells.len(), 8);
    let labels: std::collections::BTreeSet<String> = cells.iter().map(|c| c.cell_label()).collect();
    assert_eq!(labels.len(), 8);
    cfg.grid.settings.push((3, 3));
    assert!(cfg.validate().is_err());
}

#[test]
fn smoke_run_emits_every_file_and_reruns_byte_identically() {
    let cfg = smoke();
    let first = scratch().join("run-a");
    let second = scratch().join("run-b");
    let rows = pipeline::run(&cfg, &scratch().join("work-a"), &first).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows.iter().all(|r| r.config_hash == cfg.hash() && r.episodes == cfg.meta.meta_test_episodes));
    emit_report(&first).unwrap();
    for name in ["rows.csv", "rows.json", "summary.txt", "series.csv", "report.json", "config.toml", "backbones.json"] {
        assert!(first.join(name).exists(), "{name} missing");
    }
    let seed_dir = pipeline::seed_dir(&first, &cfg, 0);
    assert!(seed_dir.join("learner.ckpt").exists());
    let log = fs::read_to_string(seed_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), cfg.meta.meta_train_steps);

    pipeline::run(&cfg, &scratch().join("work-b"), &second).unwrap();
    emit_report(&second).unwrap();
    assert_eq!(files(&first), files(&second));

    let resolved = ExperimentConfig::load(&first.join("config.toml")).unwrap();
    assert_eq!(resolved.hash(), cfg.hash());
}

#[test]
fn report_is_idempotent_and_refuses_empty_directories() {
    let (work, prep) = shared();
    let cfg = smoke();
    let out = scratch().join("report");
    pipeline::write_provenance(&cfg, prep, &out).unwrap();
    pipeline::train_stage(&cfg, prep, &out).unwrap();
    pipeline::evaluate_stage(&cfg, prep, &out).unwrap();
    emit_report(&out).unwrap();
    let once = files(&out);
    emit_report(&out).unwrap();
    assert_eq!(once, files(&out));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains(&cfg.hash()) && summary.contains("BERTScore unavailable"));

    let empty = scratch().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert!(emit_report(&empty).is_err());
    assert!(emit_report(&scratch().join("absent")).is_err());
    assert!(work.join("corpus").exists());
}

#[test]
fn baseline_cells_report_plain_and_fine_tuned_rows() {
    let (_, prep) = shared();
    let cfg = ExperimentConfig { method: Method::Baseline, ..smoke() };
    let out = scratch().join("baseline");
    pipeline::train_stage(&cfg, prep, &out).unwrap();
    let rows = pipeline::evaluate_stage(&cfg, prep, &out).unwrap();
    let steps: Vec<usize> = rows.iter().map(|r| r.finetune_steps).collect();
    assert_eq!(steps, vec![0, cfg.meta.finetune_steps]);
    assert!(rows.iter().all(|r| r.method == "baseline"));
}

#[test]
fn missing_learners_and_mismatched_artifacts_have_distinct_failures() {
    let (work, prep) = shared();
    let cfg = smoke();
    let err = pipeline::evaluate_stage(&cfg, prep, &scratch().join("untrained")).unwrap_err();
    assert!(matches!(failure(&err), Failure::MissingArtifact(_)));

    let other = ExperimentConfig { data_seed: 8, ..smoke() };
    let err = prepare(&other, work).err().unwrap();
    assert!(matches!(failure(&err), Failure::HashMismatch { .. }));

    let out = scratch().join("retrained");
    pipeline::train_stage(&cfg, prep, &out).unwrap();
    let changed = ExperimentConfig { prompt: ecgqa_core::synth::PromptVariant::Bare, ..smoke() };
    let err = pipeline::evaluate_stage(&changed, prep, &out).unwrap_err();
    assert!(matches!(failure(&err), Failure::HashMismatch { .. }));
}

#[test]
fn overlapping_split_is_refused_before_training() {
    let cfg = smoke();
    let work = scratch().join("tampered");
    pipeline::corpus_stage(&cfg, &work).unwrap();
    let manifest_path = work.join("corpus/manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    let leaked = manifest["split"]["meta_train"][0].clone();
    manifest["split"]["meta_test"].as_array_mut().unwrap().push(leaked);
    fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();

    let out = scratch().join("tampered-out");
    let status = Command::new(env!("CARGO_BIN_EXE_ecgqa"))
        .args(["run", "--config"])
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml"))
        .arg("--work")
        .arg(&work)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(5), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stderr).contains("both splits"));
    assert!(!out.exists());
}

#[test]
fn seed_override_comes_from_the_environment() {
    let status = Command::new(env!("CARGO_BIN_EXE_ecgqa"))
        .args(["show-config", "--work", "unused"])
        .env("ECGQA_SEED", "41")
        .output()
        .unwrap();
    assert!(status.status.success());
    let cfg: ExperimentConfig = toml::from_str(&String::from_utf8(status.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seeds, vec![41]);
}

#[test]
fn ablation_grids_vary_one_factor() {
    let base = smoke();
    let sizes: Vec<usize> = Suite::ALL.iter().map(|&s| variants(s, &base).len()).collect();
    assert_eq!(sizes, vec![3, 2, 2, 3, 4, 2, 3]);
    let leads: Vec<String> = variants(Suite::Leads, &base).into_iter().map(|(l, _)| l).collect();
    assert_eq!(leads, ["I", "I+II", "I+II+V3", "all"]);
    for suite in Suite::ALL {
        assert_eq!(suite.as_str().parse::<Suite>().unwrap(), suite);
        for (_, cfg) in variants(suite, &base) {
            assert_eq!(cfg.seeds, base.seeds);
            assert_eq!(cfg.backbone_hash(), base.backbone_hash());
        }
    }
    let (label, without) = &variants(Suite::MetaKnowledge, &base)[1];
    assert_eq!((label.as_str(), without.meta.meta_train_steps), ("without", 0));
    assert!("colour".parse::<Suite>().is_err());
}

#[test]
fn mapper_and_meta_knowledge_suites_emit_their_rows() {
    let (_, prep) = shared();
    let base = smoke();
    let out = scratch().join("ablate-mapper");
    let rows = run_ablation_suite(Suite::Mapper, &base, prep, &out).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(labels, ["attention", "mlp", "linear"]);
    assert!(out.join("rows.csv").exists());

    let out = scratch().join("ablate-meta");
    let rows = run_ablation_suite(Suite::MetaKnowledge, &base, prep, &out).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].variant, "without");
    emit_report(&out).unwrap();
}
