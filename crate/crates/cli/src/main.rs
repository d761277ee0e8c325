use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ecgqa_cli::config::{Expression, Method, TaskFamily};
use ecgqa_cli::pipeline::{self, corpus_stage, prepare};
use ecgqa_cli::{emit_report, run_ablation_suite, ExperimentConfig, Failure, Suite};
use ecgqa_core::mapper::MapperVariant;
use ecgqa_core::synth::PromptVariant;

#[derive(Parser)]
#[command(name = "ecgqa", version, about = "Few-shot ECG question answering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into the work directory.
    GenerateData(Common),
    /// Pretrain and probe the frozen backbones.
    Pretrain(Common),
    /// Meta-train the mapper for every cell and seed.
    MetaTrain(Staged),
    /// Train the non-episodic baseline for every cell and seed.
    BaselineTrain(Staged),
    /// Meta-test stored learners and write the results table.
    Evaluate(Staged),
    /// Run one ablation suite.
    Ablate {
        #[arg(long)]
        suite: String,
        #[command(flatten)]
        staged: Staged,
    },
    /// Aggregate a results directory into summary and plot series.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
    /// Every stage end to end, then the report.
    Run(Staged),
    /// Print the resolved configuration as TOML.
    ShowConfig(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum MapperArg {
    Attention,
    Mlp,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuestionArg {
    SingleVerify,
    SingleChoose,
    SingleQuery,
    AllSingle,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExpressionArg {
    Any,
    Same,
    Different,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the corpus and backbone artifacts.
    #[arg(long)]
    work: PathBuf,
    /// Replaces the configured seed list with this single seed.
    #[arg(long, env = "ECGQA_SEED")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long, value_enum)]
    question_type: Option<QuestionArg>,
    #[arg(long, value_enum)]
    mapper: Option<MapperArg>,
    /// P-A, P-B or P-C.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, value_delimiter = ',')]
    leads: Option<Vec<String>>,
    #[arg(long, value_enum)]
    expression: Option<ExpressionArg>,
    #[arg(long)]
    meta_train_steps: Option<usize>,
    #[arg(long)]
    meta_test_episodes: Option<usize>,
    #[arg(long)]
    unfreeze_encoder: bool,
}

#[derive(Args, Clone)]
struct Staged {
    #[command(flatten)]
    common: Common,
    /// Results directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(n) = self.n_way {
            cfg.n_way = n;
        }
        if let Some(k) = self.k_shot {
            cfg.k_shot = k;
        }
        if let Some(q) = self.question_type {
            cfg.question_type = match q {
                QuestionArg::SingleVerify => TaskFamily::SingleVerify,
                QuestionArg::SingleChoose => TaskFamily::SingleChoose,
                QuestionArg::SingleQuery => TaskFamily::SingleQuery,
                QuestionArg::AllSingle => TaskFamily::AllSingle,
            };
        }
        if let Some(m) = self.mapper {
            cfg.mapper = match m {
                MapperArg::Attention => MapperVariant::Attention,
                MapperArg::Mlp => MapperVariant::Mlp,
                MapperArg::Linear => MapperVariant::Linear,
            };
        }
        if let Some(p) = &self.prompt {
            cfg.prompt = p.parse::<PromptVariant>()?;
        }
        if let Some(leads) = &self.leads {
            cfg.leads = Some(leads.clone());
        }
        if let Some(e) = self.expression {
            cfg.expression = match e {
                ExpressionArg::Any => Expression::Any,
                ExpressionArg::Same => Expression::Same,
                ExpressionArg::Different => Expression::Different,
            };
        }
        if let Some(s) = self.meta_train_steps {
            cfg.meta.meta_train_steps = s;
        }
        if let Some(e) = self.meta_test_episodes {
            cfg.meta.meta_test_episodes = e;
        }
        if self.unfreeze_encoder {
            cfg.unfreeze_encoder = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn with_method(mut cfg: ExperimentConfig, method: Method) -> ExperimentConfig {
    cfg.method = method;
    cfg.grid.methods.clear();
    cfg
}

fn train(staged: &Staged, method: Method) -> Result<()> {
    let cfg = with_method(staged.common.resolve()?, method);
    let prep = prepare(&cfg, &staged.common.work)?;
    pipeline::write_provenance(&cfg, &prep, &staged.out)?;
    pipeline::train_stage(&cfg, &prep, &staged.out)
}

fn print_summary(out: &Path) -> Result<()> {
    let report = emit_report(out)?;
    print!("{}", ecgqa_cli::report::render_summary(&report));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            let corpus = corpus_stage(&c.resolve()?, &c.work)?;
            println!("{} triplets, {} classes", corpus.triplets.len(), corpus.registry.len());
        }
        Command::Pretrain(c) => {
            let prep = prepare(&c.resolve()?, &c.work)?;
            println!("{}", serde_json::to_string_pretty(&prep.backbones.report.probe)?);
        }
        Command::MetaTrain(s) => train(&s, Method::Episodic)?,
        Command::BaselineTrain(s) => train(&s, Method::Baseline)?,
        Command::Evaluate(s) => {
            let cfg = s.common.resolve()?;
            let prep = prepare(&cfg, &s.common.work)?;
            pipeline::evaluate_stage(&cfg, &prep, &s.out)?;
            print_summary(&s.out)?;
        }
        Command::Ablate { suite, staged } => {
            let suite: Suite = suite.parse()?;
            let cfg = staged.common.resolve()?;
            let prep = prepare(&cfg, &staged.common.work)?;
            pipeline::write_provenance(&cfg, &prep, &staged.out)?;
            run_ablation_suite(suite, &cfg, &prep, &staged.out)?;
            print_summary(&staged.out)?;
        }
        Command::Report { results } => print_summary(&results)?,
        Command::Run(s) => {
            pipeline::run(&s.common.resolve()?, &s.common.work, &s.out)?;
            print_summary(&s.out)?;
        }
        Command::ShowConfig(c) => print!("{}", c.resolve()?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Failure>().map_or(1, Failure::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
