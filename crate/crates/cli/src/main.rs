//! `stabilab`: vocabulary building, pretraining, fine-tuning and stability
//! sweeps from one TOML config.
//!
//! Errors go to stderr as a single JSON line and exit nonzero: 2 for an
//! invalid config, 1 for anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::SweepOptions;
use config::{Invalid, Need, Sources, OUTPUT_ENV};

#[derive(Parser, Debug)]
#[command(name = "stabilab", version, about = "Fine-tuning stability experiments on small encoders")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config; unset keys take built-in defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set finetune.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output root; overrides the config file and the environment.
    #[arg(long, global = true)]
    output: Option<String>,
    #[arg(long, global = true)]
    master_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a subword vocabulary from the corpus.
    BuildVocab {
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        vocab: Option<String>,
        #[arg(long)]
        size: Option<usize>,
        /// `bpe` or `wordpiece`.
        #[arg(long)]
        algorithm: Option<String>,
    },
    /// Pretrain an encoder and save its checkpoint.
    Pretrain {
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        checkpoint: Option<String>,
        /// bert_standard, bert_no_nsp, bert_single_seq or electra.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune the checkpoint once on one task.
    Finetune {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed_index: Option<usize>,
    },
    /// Run the optimizer and strategy comparisons over seeds.
    Bench {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated task names.
        #[arg(long)]
        tasks: Option<String>,
    },
    /// Fine-tune with the top k layers removed, for each configured k.
    AblatePrune {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated layer counts, e.g. `0,1,3`.
        #[arg(long)]
        k: Option<String>,
    },
    /// Render tables from results files.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Also write CSV and text tables into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 700)]
        documents: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic task suite for the configured vocabulary.
    SynthTasks {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print the resolved job list as JSON lines and exit.
    #[arg(long)]
    dry_run: bool,
}

impl SweepArgs {
    fn options(&self) -> SweepOptions {
        SweepOptions {
            jobs: self.jobs,
            dry_run: self.dry_run,
        }
    }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn list(s: &str, quote: bool) -> String {
    let items: Vec<String> = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| if quote { quoted(x) } else { x.to_string() })
        .collect();
    format!("[{}]", items.join(", "))
}

/// Turns the `--set` flags and the subcommand's own flags into overrides.
fn overrides(cli: &Cli) -> anyhow::Result<Vec<(String, String)>> {
    let mut sets = Vec::new();
    for s in &cli.common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Invalid(vec![format!("--set expects KEY=VALUE, got `{s}`")]))?;
        sets.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut put = |k: &str, v: String| sets.push((k.to_string(), v));
    if let Some(o) = &cli.common.output {
        put("paths.output", quoted(o));
    }
    if let Some(s) = cli.common.master_seed {
        put("master_seed", s.to_string());
    }
    match &cli.command {
        Command::BuildVocab { corpus, vocab, size, algorithm } => {
            corpus.iter().for_each(|c| put("paths.corpus", quoted(c)));
            vocab.iter().for_each(|c| put("paths.vocab", quoted(c)));
            size.iter().for_each(|c| put("vocab.size", c.to_string()));
            algorithm.iter().for_each(|c| put("vocab.algorithm", quoted(c)));
        }
        Command::Pretrain { corpus, checkpoint, mode, steps } => {
            corpus.iter().for_each(|c| put("paths.corpus", quoted(c)));
            checkpoint.iter().for_each(|c| put("paths.checkpoint", quoted(c)));
            mode.iter().for_each(|c| put("pretrain.mode", quoted(c)));
            steps.iter().for_each(|c| put("pretrain.steps", c.to_string()));
        }
        Command::Finetune { task, strategy, seed_index } => {
            task.iter().for_each(|c| put("run.task", quoted(c)));
            strategy.iter().for_each(|c| put("run.strategy", quoted(c)));
            seed_index.iter().for_each(|c| put("run.seed_index", c.to_string()));
        }
        Command::Bench { seeds, tasks, .. } => {
            seeds.iter().for_each(|c| put("bench.seeds", c.to_string()));
            tasks.iter().for_each(|c| put("bench.tasks", list(c, true)));
        }
        Command::AblatePrune { seeds, k, .. } => {
            seeds.iter().for_each(|c| put("prune.seeds", c.to_string()));
            k.iter().for_each(|c| put("prune.k", list(c, false)));
        }
        Command::Report { .. } | Command::SynthCorpus { .. } | Command::SynthTasks { .. } => {}
    }
    Ok(sets)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Command::Report { results, out } = &cli.command {
        return commands::report_cmd(results, out.as_deref());
    }
    let needs: &[Need] = match &cli.command {
        Command::BuildVocab { .. } => &[Need::Corpus],
        Command::Pretrain { .. } => &[Need::Corpus, Need::Vocab],
        Command::Finetune { .. } => &[Need::Vocab, Need::Checkpoint, Need::Run],
        Command::Bench { sweep, .. } if sweep.dry_run => &[Need::Bench],
        Command::Bench { .. } => &[Need::Vocab, Need::Checkpoint, Need::Bench],
        Command::AblatePrune { sweep, .. } if sweep.dry_run => &[Need::Prune],
        Command::AblatePrune { .. } => &[Need::Vocab, Need::Checkpoint, Need::Prune],
        Command::SynthTasks { .. } => &[Need::Vocab],
        Command::Report { .. } | Command::SynthCorpus { .. } => &[],
    };
    let sources = Sources {
        file: cli.common.config.clone(),
        sets: overrides(cli)?,
        output_env: std::env::var(OUTPUT_ENV).ok().filter(|s| !s.is_empty()),
    };
    let config = config::resolve(&sources, needs)?;
    match &cli.command {
        Command::BuildVocab { .. } => commands::build_vocab_cmd(&config),
        Command::Pretrain { .. } => commands::pretrain_cmd(&config),
        Command::Finetune { .. } => commands::finetune_cmd(&config),
        Command::Bench { sweep, .. } => {
            let jobs = commands::bench_jobs(&config)?;
            commands::sweep(&config, "bench", &jobs, &config.bench.tasks, sweep.options())
        }
        Command::AblatePrune { sweep, .. } => {
            let jobs = commands::prune_jobs(&config);
            commands::sweep(&config, "ablate-prune", &jobs, &config.prune.tasks, sweep.options())
        }
        Command::SynthCorpus { documents, out } => commands::synth_corpus_cmd(&config, *documents, out),
        Command::SynthTasks { out } => commands::synth_tasks_cmd(&config, out),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, violations, code) = match e.downcast_ref::<Invalid>() {
                Some(inv) => ("config", inv.0.clone(), 2),
                None => ("runtime", Vec::new(), 1),
            };
            let message = format!("{e:#}").replace('\n', " ");
            let line = serde_json::json!({ "error": kind, "message": message, "violations": violations });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
