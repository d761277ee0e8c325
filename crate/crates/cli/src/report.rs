use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use ecgqa_core::metrics::MeanStd;
use serde::{Deserialize, Serialize};

use crate::pipeline::{read_rows, Failure, ResultRow};

pub const BERTSCORE_NOTE: &str = "BERTScore unavailable: it needs an external pretrained text encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hashes: Vec<String>,
    pub seeds: Vec<u64>,
    pub versions: BTreeMap<String, String>,
    pub metrics: Vec<String>,
    pub notes: Vec<String>,
}

/// Seed-aggregated scores of one table cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub suite: String,
    pub variant: String,
    pub method: String,
    pub question_type: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub finetune_steps: usize,
    pub seeds: Vec<u64>,
    pub overlap_accuracy: MeanStd,
    pub bleu1: MeanStd,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: MeanStd,
    pub improved_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub groups: Vec<GroupSummary>,
}

type GroupKey = (String, String, String, String, usize, usize, usize);

/// Groups rows by table cell, keeping first-appearance order.
pub fn aggregate(rows: &[ResultRow]) -> Result<Report> {
    if rows.is_empty() {
        bail!("no result rows to aggregate");
    }
    if let Some(r) = rows.iter().find(|r| r.config_hash.is_empty()) {
        return Err(Failure::Invariant(format!("row {}/{} seed {} has no config hash", r.suite, r.variant, r.seed)).into());
    }
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.suite.clone(),
            r.variant.clone(),
            r.method.clone(),
            r.question_type.clone(),
            r.n_way,
            r.k_shot,
            r.finetune_steps,
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let summaries = order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let col = |f: fn(&ResultRow) -> f64| members.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (suite, variant, method, question_type, n_way, k_shot, finetune_steps) = key;
            GroupSummary {
                suite,
                variant,
                method,
                question_type,
                n_way,
                k_shot,
                finetune_steps,
                seeds: members.iter().map(|r| r.seed).collect(),
                overlap_accuracy: MeanStd::of(&col(|r| r.overlap_accuracy)),
                bleu1: MeanStd::of(&col(|r| r.bleu1)),
                rouge_l_f1: MeanStd::of(&col(|r| r.rouge_l_f1)),
                improved_fraction: col(|r| r.improved_fraction).iter().sum::<f64>() / members.len() as f64,
            }
        })
        .collect();
    let config_hashes: BTreeSet<String> = rows.iter().map(|r| r.config_hash.clone()).collect();
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    let versions = BTreeMap::from([
        ("ecgqa-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("rows-format".to_string(), "1".to_string()),
    ]);
    Ok(Report {
        provenance: Provenance {
            config_hashes: config_hashes.into_iter().collect(),
            seeds: seeds.into_iter().collect(),
            versions,
            metrics: vec!["overlap_accuracy".into(), "bleu1".into(), "rougeL_f1 (ROUGE-L F1)".into()],
            notes: vec![BERTSCORE_NOTE.into()],
        },
        groups: summaries,
    })
}

pub fn render_summary(report: &Report) -> String {
    let mut s = String::new();
    let p = &report.provenance;
    let _ = writeln!(s, "provenance");
    let _ = writeln!(s, "  config hashes: {}", p.config_hashes.join(", "));
    let seeds: Vec<String> = p.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "  seeds: {}", seeds.join(", "));
    for (k, v) in &p.versions {
        let _ = writeln!(s, "  {k}: {v}");
    }
    let _ = writeln!(s, "  metrics: {}", p.metrics.join(", "));
    for n in &p.notes {
        let _ = writeln!(s, "  note: {n}");
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<15} {:<20} {:<9} {:<13} {:>2} {:>3} {:>3} {:>5}  {:>15}  {:>15}  {:>15}",
        "suite", "variant", "method", "question", "N", "K", "ft", "seeds", "accuracy", "bleu1", "rougeL_f1"
    );
    let ms = |m: &MeanStd| format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std);
    for g in &report.groups {
        let _ = writeln!(
            s,
            "{:<15} {:<20} {:<9} {:<13} {:>2} {:>3} {:>3} {:>5}  {:>15}  {:>15}  {:>15}",
            g.suite,
            g.variant,
            g.method,
            g.question_type,
            g.n_way,
            g.k_shot,
            g.finetune_steps,
            g.seeds.len(),
            ms(&g.overlap_accuracy),
            ms(&g.bleu1),
            ms(&g.rouge_l_f1)
        );
    }
    s
}

/// Reads the rows in `dir` and writes `summary.txt`, `series.csv` and
/// `report.json` next to them.
pub fn emit_report(dir: &Path) -> Result<Report> {
    if !dir.is_dir() || fs::read_dir(dir)?.next().is_none() {
        return Err(Failure::MissingArtifact(format!("results directory {} is empty", dir.display())).into());
    }
    let rows = read_rows(dir)?;
    let report = aggregate(&rows)?;
    fs::write(dir.join("summary.txt"), render_summary(&report))?;
    let mut w = csv::Writer::from_path(dir.join("series.csv"))?;
    w.write_record([
        "suite",
        "variant",
        "method",
        "question_type",
        "n_way",
        "k_shot",
        "finetune_steps",
        "seeds",
        "overlap_accuracy_mean",
        "overlap_accuracy_std",
        "bleu1_mean",
        "bleu1_std",
        "rougeL_f1_mean",
        "rougeL_f1_std",
        "improved_fraction",
    ])?;
    for g in &report.groups {
        w.write_record([
            g.suite.clone(),
            g.variant.clone(),
            g.method.clone(),
            g.question_type.clone(),
            g.n_way.to_string(),
            g.k_shot.to_string(),
            g.finetune_steps.to_string(),
            g.seeds.len().to_string(),
            g.overlap_accuracy.mean.to_string(),
            g.overlap_accuracy.std.to_string(),
            g.bleu1.mean.to_string(),
            g.bleu1.std.to_string(),
            g.rouge_l_f1.mean.to_string(),
            g.rouge_l_f1.std.to_string(),
            g.improved_fraction.to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
