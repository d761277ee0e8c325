use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Result};
use ecgqa_autodiff::ParameterSet;
use ecgqa_core::mapper::MapperVariant;
use ecgqa_core::synth::PromptVariant;

use crate::config::{DomainShift, ExperimentConfig, Expression, Method};
use crate::pipeline::{cell_data, eval_finetune_steps, evaluate, train, write_rows, Failure, Prepared, ResultRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Mapper,
    Freezing,
    MetaKnowledge,
    Prompts,
    Leads,
    Expression,
    DomainShift,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Mapper,
        Suite::Freezing,
        Suite::MetaKnowledge,
        Suite::Prompts,
        Suite::Leads,
        Suite::Expression,
        Suite::DomainShift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Mapper => "mapper",
            Suite::Freezing => "freezing",
            Suite::MetaKnowledge => "meta_knowledge",
            Suite::Prompts => "prompts",
            Suite::Leads => "leads",
            Suite::Expression => "expression",
            Suite::DomainShift => "domain_shift",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match Suite::ALL.into_iter().find(|v| v.as_str() == s) {
            Some(v) => Ok(v),
            None => bail!("unknown ablation suite {s}"),
        }
    }
}

pub const LEAD_SUBSETS: [&[&str]; 3] = [&["I"], &["I", "II"], &["I", "II", "V3"]];

/// The controlled grid of `suite`: one labelled config per level of the
/// varied factor, everything else taken from `base`.
pub fn variants(suite: Suite, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match suite {
        Suite::Mapper => MapperVariant::ALL
            .into_iter()
            .map(|v| (v.as_str().to_string(), with(&|c| c.mapper = v)))
            .collect(),
        Suite::Freezing => vec![
            ("frozen".into(), with(&|c| c.unfreeze_encoder = false)),
            ("unfrozen_encoder".into(), with(&|c| c.unfreeze_encoder = true)),
        ],
        Suite::MetaKnowledge => vec![
            ("with".into(), with(&|c| c.method = Method::Episodic)),
            (
                "without".into(),
                with(&|c| {
                    c.method = Method::Episodic;
                    c.meta.meta_train_steps = 0;
                }),
            ),
        ],
        Suite::Prompts => PromptVariant::ALL
            .into_iter()
            .map(|p| (p.as_str().to_string(), with(&|c| c.prompt = p)))
            .collect(),
        Suite::Leads => LEAD_SUBSETS
            .iter()
            .map(|leads| {
                let names: Vec<String> = leads.iter().map(|s| s.to_string()).collect();
                (names.join("+"), with(&|c| c.leads = Some(names.clone())))
            })
            .chain(std::iter::once(("all".to_string(), with(&|c| c.leads = None))))
            .collect(),
        Suite::Expression => vec![
            ("same".into(), with(&|c| c.expression = Expression::Same)),
            ("different".into(), with(&|c| c.expression = Expression::Different)),
        ],
        Suite::DomainShift => {
            let shift = base.domain_shift.clone().unwrap_or_default();
            vec![
                ("in_domain".into(), with(&|c| c.domain_shift = None)),
                (
                    "shifted_no_adapt".into(),
                    with(&|c| c.domain_shift = Some(DomainShift { meta_adapt: false, ..shift.clone() })),
                ),
                (
                    "shifted_meta_adapt".into(),
                    with(&|c| c.domain_shift = Some(DomainShift { meta_adapt: true, ..shift.clone() })),
                ),
            ]
        }
    }
}

/// Runs every variant of `suite` over the seeds of `base` and writes the
/// comparison table to `out`. Variants that share a training configuration
/// share the trained learner.
pub fn run_ablation_suite(
    suite: Suite,
    base: &ExperimentConfig,
    prep: &Prepared,
    out: &Path,
) -> Result<Vec<ResultRow>> {
    base.validate()?;
    let grid = variants(suite, base);
    let mut trained: BTreeMap<(String, u64), ParameterSet> = BTreeMap::new();
    let mut rows = Vec::new();
    for (label, cfg) in &grid {
        cfg.validate()?;
        let (train_data, eval_data) = cell_data(cfg, prep)?;
        let corpus = &eval_data.as_ref().unwrap_or(&prep.data).corpus;
        for &seed in &base.seeds {
            let key = (cfg.train_hash(), seed);
            if !trained.contains_key(&key) {
                let t = train(cfg, prep, train_data.as_ref(), seed)?;
                trained.insert(key.clone(), t.theta);
            }
            let theta = &trained[&key];
            let report = evaluate(cfg, prep, eval_data.as_ref(), theta, seed, eval_finetune_steps(cfg))?;
            rows.push(ResultRow::new(suite.as_str(), label, cfg, corpus, seed, &report)?);
            eprintln!("{suite} {label} seed {seed}: accuracy {:.3}", report.overlap_accuracy.mean);
        }
    }
    if rows.len() != grid.len() * base.seeds.len() {
        return Err(Failure::Invariant(format!("{suite} produced {} rows", rows.len())).into());
    }
    write_rows(out, &rows)?;
    Ok(rows)
}
