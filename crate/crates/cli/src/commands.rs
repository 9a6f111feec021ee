//! Subcommand bodies. Each writes its resolved config into
//! `<output>/<subcommand>/` before doing any work.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use stabilab::encoder::{load_checkpoint, save_checkpoint, EncoderModel};
use stabilab::finetune::{fine_tune, AdaptationStrategy, FineTuneConfig, TaskData};
use stabilab::pretraining::{
    pretrain, read_corpus, tokenize_corpus, write_loss_curve, BertPretrainer, ElectraPair, PretrainMode,
    PretrainModel,
};
use stabilab::stability::report::{render, Table};
use stabilab::stability::synth::{corpus_text, generate_corpus, generate_suite, Lexicon};
use stabilab::stability::{read_records, run_jobs, Job, JobRecord};
use stabilab::vocab::{build_vocab, Vocabulary};

use crate::config::{seed_for, Config, CORPUS_SEED, MODEL_SEED, SUITE_SEED};

pub const ECHO_FILE: &str = "resolved_config.toml";
pub const RESULTS_FILE: &str = "results.jsonl";

/// Creates `<output>/<name>` and writes the resolved config into it.
fn run_dir(config: &Config, name: &str) -> Result<PathBuf> {
    let dir = config.output().join(name);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join(ECHO_FILE), config.to_toml()?)?;
    Ok(dir)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub fn build_vocab_cmd(config: &Config) -> Result<()> {
    run_dir(config, "build-vocab")?;
    let text = fs::read_to_string(&config.paths.corpus)
        .with_context(|| format!("cannot read corpus {}", config.paths.corpus))?;
    let vocab = build_vocab(&text, config.vocab.size, config.vocab.algorithm, config.vocab.casing)?;
    let path = Path::new(&config.paths.vocab);
    ensure_parent(path)?;
    vocab.save(path)?;
    log::info!("wrote {} entries to {}", vocab.len(), path.display());
    Ok(())
}

pub fn pretrain_cmd(config: &Config) -> Result<()> {
    let dir = run_dir(config, "pretrain")?;
    let vocab = Vocabulary::load(&config.paths.vocab)?;
    let docs = tokenize_corpus(&read_corpus(&config.paths.corpus)?, &vocab);
    let enc = config.encoder_config(vocab.len())?;
    let seed = seed_for(config.master_seed, MODEL_SEED);
    let model = match config.pretrain.mode {
        PretrainMode::Electra => PretrainModel::Electra(ElectraPair::new(
            enc,
            config.model.generator_divisor,
            config.pretrain.loss_weight,
            seed,
        )?),
        mode => PretrainModel::Bert(BertPretrainer::new(enc, mode, seed)?),
    };
    let outcome = pretrain(model, &docs, &config.pretrain)?;
    if outcome.skipped_documents > 0 {
        log::warn!("{} documents were too short to use", outcome.skipped_documents);
    }
    write_loss_curve(dir.join("loss_curve.csv"), &outcome.curve)?;
    let path = Path::new(&config.paths.checkpoint);
    ensure_parent(path)?;
    save_checkpoint(&outcome.encoder, path)?;
    let last = outcome.series("total").last().copied().unwrap_or(f64::NAN);
    log::info!("final loss {last:.4}; checkpoint {}", path.display());
    Ok(())
}

/// Tasks by name: read from `paths.tasks`, or the synthetic suite built
/// from the vocabulary.
fn load_tasks(config: &Config, vocab: &Vocabulary, names: &[String]) -> Result<Vec<TaskData>> {
    let mut wanted: Vec<&String> = Vec::new();
    for n in names {
        if !wanted.contains(&n) {
            wanted.push(n);
        }
    }
    if config.paths.tasks.is_empty() {
        let suite = generate_suite(vocab, seed_for(config.master_seed, SUITE_SEED))?;
        wanted
            .iter()
            .map(|n| suite.task(n).cloned().ok_or_else(|| anyhow!("no synthetic task {n}")))
            .collect()
    } else {
        wanted
            .iter()
            .map(|n| Ok(TaskData::load(Path::new(&config.paths.tasks).join(n))?))
            .collect()
    }
}

fn load_inputs(config: &Config) -> Result<(Vocabulary, EncoderModel)> {
    let vocab = Vocabulary::load(&config.paths.vocab)?;
    let encoder = load_checkpoint(&config.paths.checkpoint)?;
    if encoder.config().vocab_size != vocab.len() {
        return Err(anyhow!(
            "checkpoint vocabulary of {} does not match the {} entries in {}",
            encoder.config().vocab_size,
            vocab.len(),
            config.paths.vocab
        ));
    }
    Ok((vocab, encoder))
}

pub fn finetune_cmd(config: &Config) -> Result<()> {
    let dir = run_dir(config, "finetune")?;
    let (vocab, encoder) = load_inputs(config)?;
    let tasks = load_tasks(config, &vocab, std::slice::from_ref(&config.run.task))?;
    let strategy = AdaptationStrategy::parse(&config.run.strategy)?;
    let result = fine_tune(&encoder, &vocab, &tasks[0], &strategy, &config.finetune)?;
    fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    println!(
        "{} {} seed {}: test {} = {:.4} (epoch {})",
        result.task,
        strategy.label(),
        config.finetune.seed,
        result.metric.as_str(),
        result.test_metric,
        result.best_epoch
    );
    Ok(())
}

fn job(config: &Config, group: &str, row: &str, task: &str, strategy: AdaptationStrategy, ft: &FineTuneConfig, i: usize) -> Job {
    let mut cfg = ft.clone();
    cfg.seed = config.run_seed(i);
    Job {
        id: format!("{group}/{row}/{task}/{i}"),
        group: group.into(),
        row: row.into(),
        task: task.into(),
        strategy,
        config: cfg,
    }
}

/// The optimizer comparison and the strategy comparison.
pub fn bench_jobs(config: &Config) -> Result<Vec<Job>> {
    let b = &config.bench;
    let base = &config.finetune;
    let mut rows: Vec<(&str, String, AdaptationStrategy, FineTuneConfig)> = Vec::new();
    if b.optimization {
        let mut short = base.clone();
        short.epochs = b.standard_epochs;
        let mut no_bc = base.clone();
        no_bc.optimizer.bias_correction = false;
        let mut both = short.clone();
        both.optimizer.bias_correction = false;
        for (row, cfg) in [
            ("improved", base.clone()),
            ("standard_epochs", short),
            ("no_bias_correction", no_bc),
            ("standard", both),
        ] {
            rows.push(("optimization", row.into(), AdaptationStrategy::None, cfg));
        }
    }
    for s in &b.strategies {
        let strategy = AdaptationStrategy::parse(s)?;
        rows.push(("strategies", strategy.label(), strategy, base.clone()));
    }
    let mut jobs = Vec::new();
    for (group, row, strategy, cfg) in &rows {
        for task in &b.tasks {
            for i in 0..b.seeds {
                jobs.push(job(config, group, row, task, strategy.clone(), cfg, i));
            }
        }
    }
    Ok(jobs)
}

pub fn prune_jobs(config: &Config) -> Vec<Job> {
    let p = &config.prune;
    let mut jobs = Vec::new();
    for task in &p.tasks {
        for &k in &p.k {
            for i in 0..p.seeds {
                let strategy = AdaptationStrategy::PruneTop { k };
                jobs.push(job(config, "pruning", &k.to_string(), task, strategy, &config.finetune, i));
            }
        }
    }
    jobs
}

/// How a sweep runs: worker threads, or only list the jobs.
#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    pub jobs: usize,
    pub dry_run: bool,
}

/// Runs `jobs` into `<output>/<name>/results.jsonl` and writes the tables.
pub fn sweep(config: &Config, name: &str, jobs: &[Job], names: &[String], opts: SweepOptions) -> Result<()> {
    if opts.dry_run {
        for j in jobs {
            println!("{}", serde_json::to_string(j)?);
        }
        return Ok(());
    }
    let dir = run_dir(config, name)?;
    let (vocab, encoder) = load_inputs(config)?;
    let tasks = load_tasks(config, &vocab, names)?;
    let refs: Vec<&TaskData> = tasks.iter().collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs.max(1)).build()?;
    let records = pool.install(|| run_jobs(&encoder, &vocab, &refs, jobs, dir.join(RESULTS_FILE), opts.jobs.max(1)))?;
    let tables = render(&records);
    write_tables(&dir, &tables)?;
    print_tables(&tables);
    Ok(())
}

fn write_tables(dir: &Path, tables: &[Table]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = String::new();
    for (i, t) in tables.iter().enumerate() {
        let stem = t.title.split(':').next().unwrap_or("table").replace(' ', "_");
        let kind = if i % 2 == 0 { "table" } else { "summary" };
        fs::write(dir.join(format!("{stem}_{kind}.csv")), t.to_csv())?;
        text.push_str(&t.to_text());
        text.push('\n');
    }
    fs::write(dir.join("tables.txt"), text)?;
    Ok(())
}

fn print_tables(tables: &[Table]) {
    for t in tables {
        println!("{}", t.to_text());
    }
}

/// Tables from one or more results files. An empty input gives an empty
/// table and a warning, not an error.
pub fn report_cmd(files: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut records: Vec<JobRecord> = Vec::new();
    for f in files {
        if !f.exists() {
            return Err(anyhow!("results file does not exist: {}", f.display()));
        }
        records.extend(read_records(f)?);
    }
    let tables = if records.is_empty() {
        log::warn!("no results found in {}", files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>().join(", "));
        vec![Table {
            title: "results: no runs".into(),
            header: ["setting", "task", "runs", "mean", "std", "min", "failure_rate"].map(String::from).to_vec(),
            rows: Vec::new(),
        }]
    } else {
        render(&records)
    };
    if let Some(dir) = out {
        write_tables(dir, &tables)?;
    }
    print_tables(&tables);
    Ok(())
}

pub fn synth_corpus_cmd(config: &Config, documents: usize, out: &Path) -> Result<()> {
    run_dir(config, "synth-corpus")?;
    let docs = generate_corpus(&Lexicon::standard(), documents, seed_for(config.master_seed, CORPUS_SEED));
    ensure_parent(out)?;
    fs::write(out, corpus_text(&docs))?;
    log::info!("wrote {documents} documents to {}", out.display());
    Ok(())
}

pub fn synth_tasks_cmd(config: &Config, out: &Path) -> Result<()> {
    run_dir(config, "synth-tasks")?;
    let vocab = Vocabulary::load(&config.paths.vocab)?;
    let suite = generate_suite(&vocab, seed_for(config.master_seed, SUITE_SEED))?;
    suite.save(out)?;
    log::info!("wrote the task suite to {}", out.display());
    Ok(())
}
