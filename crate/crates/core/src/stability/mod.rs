//! Multi-seed stability measurement, benchmark aggregation, the pruning
//! ablation and a resumable job driver.

pub mod metrics;
pub mod report;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::finetune::{
    fine_tune, AdaptationStrategy, Example, FineTuneConfig, Label, Metric, RunResult, TaskData,
    FAILED_METRIC,
};
use crate::vocab::Vocabulary;

pub const DEFAULT_SEEDS: usize = 10;
/// Entity F1 at or below this counts as a collapsed run.
pub const F1_FAILURE_THRESHOLD: f64 = 0.01;

/// Test-metric value at or below which a run counts as failed: majority-class
/// accuracy, zero correlation, or near-zero entity F1.
pub fn failure_threshold(task: &TaskData) -> f64 {
    match task.spec.metric {
        Metric::Pearson => 0.0,
        Metric::EntityF1 => F1_FAILURE_THRESHOLD,
        Metric::Accuracy => {
            let golds: Vec<usize> = task
                .splits
                .test
                .iter()
                .filter_map(|e| match e {
                    Example::Pair { label: Label::Class(c), .. } | Example::Single { label: Label::Class(c), .. } => Some(*c),
                    _ => None,
                })
                .collect();
            metrics::majority_baseline(&golds)
        }
    }
}

/// Summary statistics of one configuration over seeds.
///
/// `mean`, `std` (sample, n − 1) and `min` are taken over runs with a finite
/// metric; runs carrying the failure sentinel only enter `failure_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub name: String,
    pub task: String,
    pub metric: Metric,
    pub strategy: String,
    pub seeds: Vec<u64>,
    #[serde(with = "crate::float_text::vec")]
    pub per_seed: Vec<f64>,
    #[serde(with = "crate::float_text")]
    pub mean: f64,
    #[serde(with = "crate::float_text")]
    pub std: f64,
    #[serde(with = "crate::float_text")]
    pub min: f64,
    pub threshold: f64,
    pub failures: usize,
    pub failure_rate: f64,
    pub fingerprint: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub failures: usize,
    pub failure_rate: f64,
}

/// Statistics over `values` under the rules of [`StabilityReport`].
pub fn summarize(values: &[f64], threshold: f64) -> Stats {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let failures = values.iter().filter(|v| !v.is_finite() || **v <= threshold).count();
    let failure_rate = if values.is_empty() {
        0.0
    } else {
        failures as f64 / values.len() as f64
    };
    if finite.is_empty() {
        return Stats {
            mean: FAILED_METRIC,
            std: FAILED_METRIC,
            min: FAILED_METRIC,
            failures,
            failure_rate,
        };
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let std = if finite.len() < 2 {
        0.0
    } else {
        (finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    Stats {
        mean,
        std,
        min,
        failures,
        failure_rate,
    }
}

/// One configuration to be run over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub name: String,
    pub task: String,
    pub strategy: AdaptationStrategy,
    pub config: FineTuneConfig,
}

impl Experiment {
    /// Hash of everything but the seed.
    pub fn fingerprint(&self, seeds: &[u64]) -> String {
        let mut cfg = self.config.clone();
        cfg.seed = 0;
        let text = serde_json::json!({
            "task": self.task,
            "strategy": self.strategy,
            "config": cfg,
            "seeds": seeds,
        })
        .to_string();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// A failed [`RunResult`] standing in for a run that returned an error.
fn failed_run(exp: &Experiment, task: &TaskData, seed: u64, err: &Error) -> RunResult {
    RunResult {
        task: task.spec.name.clone(),
        metric: task.spec.metric,
        strategy: exp.strategy.label(),
        seed,
        lr: exp.config.optimizer.lr,
        epochs: exp.config.epochs,
        bias_correction: exp.config.optimizer.bias_correction,
        combine_train_dev: exp.config.combine_train_dev,
        best_dev_metric: FAILED_METRIC,
        best_epoch: 0,
        test_metric: FAILED_METRIC,
        failure: Some(err.to_string()),
        curve: Vec::new(),
        wall_time_secs: 0.0,
    }
}

pub fn build_report(exp: &Experiment, task: &TaskData, seeds: &[u64], runs: &[RunResult]) -> StabilityReport {
    let per_seed: Vec<f64> = runs.iter().map(|r| r.test_metric).collect();
    let threshold = failure_threshold(task);
    let s = summarize(&per_seed, threshold);
    StabilityReport {
        name: exp.name.clone(),
        task: task.spec.name.clone(),
        metric: task.spec.metric,
        strategy: exp.strategy.label(),
        seeds: seeds.to_vec(),
        per_seed,
        mean: s.mean,
        std: s.std,
        min: s.min,
        threshold,
        failures: s.failures,
        failure_rate: s.failure_rate,
        fingerprint: exp.fingerprint(seeds),
    }
}

/// One fine-tuning run per seed (in parallel on the current rayon pool).
/// Errors inside a run are recorded as failed runs.
pub fn run_stability(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    task: &TaskData,
    experiment: &Experiment,
    seeds: &[u64],
) -> Result<(StabilityReport, Vec<RunResult>)> {
    if seeds.len() < 2 {
        return Err(Error::Config("a stability experiment needs at least 2 seeds".into()));
    }
    if experiment.task != task.spec.name {
        return Err(Error::Config(format!(
            "experiment {} is for task {}, got {}",
            experiment.name, experiment.task, task.spec.name
        )));
    }
    experiment.config.validate()?;
    task.spec.validate()?;
    let runs: Vec<RunResult> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = experiment.config.clone();
            cfg.seed = seed;
            fine_tune(encoder, vocab, task, &experiment.strategy, &cfg)
                .unwrap_or_else(|e| failed_run(experiment, task, seed, &e))
        })
        .collect();
    let report = build_report(experiment, task, seeds, &runs);
    Ok((report, runs))
}

/// Mean within each group, then the (optionally weighted) mean across
/// groups. Empty groups are skipped with a warning.
pub fn aggregate_benchmark(groups: &BTreeMap<String, Vec<f64>>, weights: Option<&BTreeMap<String, f64>>) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (name, values) in groups {
        if values.is_empty() {
            log::warn!("benchmark group {name} has no results; left out of the score");
            continue;
        }
        let w = match weights {
            Some(ws) => *ws
                .get(name)
                .ok_or_else(|| Error::Config(format!("no weight for benchmark group {name}")))?,
            None => 1.0,
        };
        num += w * values.iter().sum::<f64>() / values.len() as f64;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::invalid("no benchmark group has results"));
    }
    Ok(num / den)
}

/// Metric against number of top layers removed, per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningRow {
    pub task: String,
    pub metric: Metric,
    /// `(k, mean test metric over seeds)` in `k_list` order.
    pub by_k: Vec<(usize, f64)>,
    /// Degradation: metric at k = 0 minus metric at the largest k.
    pub drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningTable {
    pub k_list: Vec<usize>,
    pub rows: Vec<PruningRow>,
    pub reports: Vec<StabilityReport>,
}

/// Fine-tunes `prune_top(k)` copies of `encoder` for every task and k.
pub fn pruning_ablation(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    tasks: &[&TaskData],
    k_list: &[usize],
    config: &FineTuneConfig,
    seeds: &[u64],
) -> Result<PruningTable> {
    let layers = encoder.config().num_layers;
    if !k_list.contains(&0) || k_list.iter().any(|&k| k >= layers) {
        return Err(Error::Config(format!(
            "k_list {k_list:?} must contain 0 and keep every k below the {layers} layers"
        )));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for task in tasks {
        let mut by_k = Vec::new();
        for &k in k_list {
            let exp = Experiment {
                name: format!("prune_{k}"),
                task: task.spec.name.clone(),
                strategy: AdaptationStrategy::PruneTop { k },
                config: config.clone(),
            };
            let (report, _) = run_stability(encoder, vocab, task, &exp, seeds)?;
            by_k.push((k, report.mean));
            reports.push(report);
        }
        let at = |k: usize| by_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v).unwrap_or(FAILED_METRIC);
        let max_k = *k_list.iter().max().expect("non-empty");
        rows.push(PruningRow {
            task: task.spec.name.clone(),
            metric: task.spec.metric,
            drop: at(0) - at(max_k),
            by_k,
        });
    }
    Ok(PruningTable {
        k_list: k_list.to_vec(),
        rows,
        reports,
    })
}

/// One fine-tuning run in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    /// Table the run belongs to, e.g. `optimization`.
    pub group: String,
    /// Row label within the group.
    pub row: String,
    pub task: String,
    pub strategy: AdaptationStrategy,
    pub config: FineTuneConfig,
}

/// A finished job as stored in the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub group: String,
    pub row: String,
    /// Test-metric failure threshold of the task.
    pub threshold: f64,
    pub result: RunResult,
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<JobRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Runs the jobs whose ids are not yet in `results` and appends them in job
/// order, `chunk` jobs at a time, so an interrupted sweep resumes where it
/// stopped and the file does not depend on how many threads ran.
pub fn run_jobs(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    tasks: &[&TaskData],
    jobs: &[Job],
    results: impl AsRef<Path>,
    chunk: usize,
) -> Result<Vec<JobRecord>> {
    let results = results.as_ref();
    let mut ids = HashSet::new();
    for j in jobs {
        if !ids.insert(&j.id) {
            return Err(Error::Config(format!("duplicate job id {}", j.id)));
        }
        if !tasks.iter().any(|t| t.spec.name == j.task) {
            return Err(Error::Config(format!("job {} names unknown task {}", j.id, j.task)));
        }
        j.config.validate()?;
    }
    let mut done = read_records(results)?;
    let finished: HashSet<String> = done.iter().map(|r| r.id.clone()).collect();
    let pending: Vec<&Job> = jobs.iter().filter(|j| !finished.contains(&j.id)).collect();
    if pending.len() < jobs.len() {
        log::info!("{} of {} jobs already in {}", jobs.len() - pending.len(), jobs.len(), results.display());
    }
    if let Some(dir) = results.parent() {
        fs::create_dir_all(dir)?;
    }
    for part in pending.chunks(chunk.max(1)) {
        let records: Vec<JobRecord> = part
            .par_iter()
            .map(|j| {
                let task = tasks.iter().find(|t| t.spec.name == j.task).expect("checked above");
                let exp = Experiment {
                    name: j.row.clone(),
                    task: j.task.clone(),
                    strategy: j.strategy.clone(),
                    config: j.config.clone(),
                };
                let result = fine_tune(encoder, vocab, task, &j.strategy, &j.config)
                    .unwrap_or_else(|e| failed_run(&exp, task, j.config.seed, &e));
                JobRecord {
                    id: j.id.clone(),
                    group: j.group.clone(),
                    row: j.row.clone(),
                    threshold: failure_threshold(task),
                    result,
                }
            })
            .collect();
        let mut file = OpenOptions::new().create(true).append(true).open(results)?;
        for r in &records {
            writeln!(file, "{}", serde_json::to_string(r)?)?;
            log::info!("{} -> {:.4}", r.id, r.result.test_metric);
        }
        done.extend(records);
    }
    let order: BTreeMap<&String, usize> = jobs.iter().enumerate().map(|(i, j)| (&j.id, i)).collect();
    done.retain(|r| order.contains_key(&r.id));
    done.sort_by_key(|r| order[&r.id]);
    Ok(done)
}
