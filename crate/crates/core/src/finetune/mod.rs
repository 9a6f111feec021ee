//! Fine-tuning: task heads, adaptation plans, the training loop with per-epoch
//! dev selection, and grid search over learning rate and epoch count.

mod head;
mod plan;
mod task;

pub use head::{head_forward, head_loss, init_head, HeadTarget};
pub use plan::{compile_plan, AdaptationPlan, AdaptationStrategy, PlanRecord};
pub use task::{
    encode_example, format_split, parse_split, Encoded, Example, Label, Metric, Splits, TaskData,
    TaskKind, TaskSpec, Target,
};

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, Bound, EncoderInput, EncoderModel, Params};
use crate::error::{Error, Result};
use crate::optim::{adam_step, linear_schedule, warmup_steps, AdamConfig, AdamState};
use crate::pretraining::weighted_sum;
use crate::seed::{derive_seed, stream};
use crate::stability::metrics::{accuracy, decode_bio, entity_f1, pearson, MatchMode};
use crate::tensor::Tape;
use crate::vocab::Vocabulary;

/// Metric value recorded for runs that diverged or whose metric is undefined.
pub const FAILED_METRIC: f64 = f64::NEG_INFINITY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Longest encoded input, special tokens included.
    pub max_len: usize,
    pub optimizer: AdamConfig,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Train on train + dev and report test after the last epoch; needs
    /// hyperparameters fixed beforehand.
    pub combine_train_dev: bool,
    /// Learning rates tried by a search; empty when none is run.
    pub lr_grid: Vec<f64>,
    pub epoch_grid: Vec<usize>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self::improved()
    }
}

impl FineTuneConfig {
    /// Few epochs, no extended search.
    pub fn standard() -> Self {
        Self {
            epochs: 5,
            ..Self::improved()
        }
    }

    /// Up to 100 epochs with bias correction; the best dev epoch is kept.
    pub fn improved() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            max_len: 64,
            // Desk-scale rate for TINY encoders.
            optimizer: AdamConfig {
                lr: 3e-4,
                bias_correction: true,
                ..AdamConfig::default()
            },
            warmup_fraction: 0.1,
            seed: 0,
            combine_train_dev: false,
            lr_grid: Vec::new(),
            epoch_grid: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.max_len < 5 {
            problems.push(format!("max_len must be at least 5, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            problems.push(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if let Err(Error::Config(m)) = self.optimizer.validate() {
            problems.push(m);
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            problems.push("lr_grid values must be positive".to_string());
        }
        if self.epoch_grid.contains(&0) {
            problems.push("epoch_grid values must be at least 1".to_string());
        }
        if self.combine_train_dev && (self.lr_grid.len() > 1 || self.epoch_grid.len() > 1) {
            problems.push("combine_train_dev needs fixed hyperparameters; disable the search grids".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(with = "crate::float_text")]
    pub train_loss: f64,
    /// Not evaluated (`-inf`) when training on train + dev.
    #[serde(with = "crate::float_text")]
    pub dev_metric: f64,
}

/// Outcome of one fine-tuning run; one JSON line in a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: String,
    pub metric: Metric,
    pub strategy: String,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub bias_correction: bool,
    pub combine_train_dev: bool,
    #[serde(with = "crate::float_text")]
    pub best_dev_metric: f64,
    /// Epoch whose test metric is reported (the last one when training on
    /// train + dev); 0 if the run failed before finishing an epoch.
    pub best_epoch: usize,
    #[serde(with = "crate::float_text")]
    pub test_metric: f64,
    /// Why the run counts as failed, if it does.
    pub failure: Option<String>,
    pub curve: Vec<EpochRecord>,
    /// Seconds spent; not serialized so result files stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunResult {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Extra state exposed for inspection: the model after plan compilation, the
/// final model and the learning rate each parameter received at each step.
#[derive(Clone, Debug)]
pub struct FineTuneTrace {
    pub plan: AdaptationPlan,
    pub initial: EncoderModel,
    pub final_encoder: EncoderModel,
    pub final_head: Params,
    /// Step schedule factor and per-parameter effective learning rates.
    pub step_lrs: Vec<(f64, IndexMap<String, f64>)>,
}

fn encode_split(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    examples: &[Example],
    max_len: usize,
    two_segments: bool,
) -> Result<Vec<Encoded>> {
    examples
        .iter()
        .map(|e| encode_example(spec, vocab, e, max_len, two_segments))
        .collect()
}

/// Forward pass with the head; returns the head output for one example.
fn predict(
    tape: &mut Tape,
    model: &EncoderModel,
    spec: &TaskSpec,
    p: &Bound,
    e: &Encoded,
    dropout: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<crate::tensor::Var> {
    let out = encode(
        model.config(),
        tape,
        p,
        EncoderInput {
            token_ids: &e.token_ids,
            segment_ids: &e.segment_ids,
            attention_mask: &e.attention_mask,
        },
        dropout,
    )?;
    head_forward(tape, spec, p, &out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Examples evaluated on one tape.
const EVAL_CHUNK: usize = 32;

/// Task metric of `model` + `head` on `data`. Undefined metrics (e.g. a
/// constant similarity prediction) are reported as [`FAILED_METRIC`].
pub fn evaluate(model: &EncoderModel, head: &Params, spec: &TaskSpec, data: &[Encoded]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let mut scores = Vec::new();
    let mut golds_f = Vec::new();
    let mut classes = Vec::new();
    let mut golds_c = Vec::new();
    let mut gold_ents = Vec::new();
    let mut pred_ents = Vec::new();
    for chunk in data.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let mut p = Bound::new(&mut tape, model.params(), |_| false);
        p.extend(&mut tape, head, |_| false);
        for e in chunk {
            let out = predict(&mut tape, model, spec, &p, e, None)?;
            let v = tape.value(out);
            match &e.target {
                Target::Score(y) => {
                    scores.push(v.item());
                    golds_f.push(*y);
                }
                Target::Class(c) => {
                    classes.push(argmax(v.data()));
                    golds_c.push(*c);
                }
                Target::Tags { positions, labels, words } => {
                    let mut gold = vec!["O"; *words];
                    let mut pred = vec!["O"; *words];
                    for (w, (&pos, &l)) in positions.iter().zip(labels).enumerate() {
                        gold[w] = &spec.labels[l];
                        pred[w] = &spec.labels[argmax(v.row(pos))];
                    }
                    gold_ents.push(decode_bio(&gold).0);
                    pred_ents.push(decode_bio(&pred).0);
                }
            }
        }
    }
    Ok(match spec.metric {
        Metric::Pearson => pearson(&scores, &golds_f).unwrap_or(FAILED_METRIC),
        Metric::Accuracy => accuracy(&classes, &golds_c)?,
        Metric::EntityF1 => entity_f1(&gold_ents, &pred_ents, MatchMode::Strict)?.f1,
    })
}

fn head_target(t: &Target) -> HeadTarget<'_> {
    match t {
        Target::Score(y) => HeadTarget::Score(*y),
        Target::Class(c) => HeadTarget::Class(*c),
        Target::Tags { positions, labels, .. } => HeadTarget::Tags { positions, labels },
    }
}

/// Fine-tunes a copy of `encoder` on `task` and reports the test metric at
/// the epoch with the best dev metric (ties go to the earlier epoch).
///
/// A non-finite loss ends the run early; it is returned as a failed result
/// with [`FAILED_METRIC`] rather than as an error.
pub fn fine_tune(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    task: &TaskData,
    strategy: &AdaptationStrategy,
    config: &FineTuneConfig,
) -> Result<RunResult> {
    run(encoder, vocab, task, strategy, config, false).map(|(r, _)| r)
}

/// [`fine_tune`] that also returns a [`FineTuneTrace`].
pub fn fine_tune_traced(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    task: &TaskData,
    strategy: &AdaptationStrategy,
    config: &FineTuneConfig,
) -> Result<(RunResult, FineTuneTrace)> {
    run(encoder, vocab, task, strategy, config, true)
}

fn run(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    task: &TaskData,
    strategy: &AdaptationStrategy,
    config: &FineTuneConfig,
    trace: bool,
) -> Result<(RunResult, FineTuneTrace)> {
    let started = Instant::now();
    config.validate()?;
    task.spec.validate()?;
    let spec = &task.spec;
    let splits = &task.splits;
    for (name, s) in task.named_splits() {
        if s.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    splits.check_disjoint()?;
    if config.max_len > encoder.config().max_positions {
        return Err(Error::Config(format!(
            "max_len {} exceeds the model's max_positions {}",
            config.max_len,
            encoder.config().max_positions
        )));
    }
    if vocab.len() != encoder.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries, the model expects {}",
            vocab.len(),
            encoder.config().vocab_size
        )));
    }
    let two_segments = spec.use_segment_ids && encoder.config().num_segments >= 2;
    if spec.kind.is_pair() && spec.use_segment_ids && !two_segments {
        log::warn!(
            "task {} asks for segment ids but the model has a single segment embedding; using segment 0 throughout",
            spec.name
        );
    }

    let mut train = encode_split(spec, vocab, &splits.train, config.max_len, two_segments)?;
    let dev = encode_split(spec, vocab, &splits.dev, config.max_len, two_segments)?;
    let test = encode_split(spec, vocab, &splits.test, config.max_len, two_segments)?;
    if config.combine_train_dev {
        train.extend(dev.iter().cloned());
    }

    let mut head = init_head(spec, encoder.config().hidden_dim, &mut stream(config.seed, 3));
    let (plan, mut model) = compile_plan(strategy, encoder, &head, derive_seed(config.seed, 4))?;
    let initial = if trace { Some(model.clone()) } else { None };

    let mut order_rng = stream(config.seed, 1);
    let mut dropout_rng = stream(config.seed, 2);
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = (steps_per_epoch * config.epochs) as u64;
    let warmup = warmup_steps(total, config.warmup_fraction);
    let (mut s_enc, mut s_head) = (AdamState::new(), AdamState::new());
    let mut step = 0u64;
    let mut step_lrs = Vec::new();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut failure = None;
    let (mut best_dev, mut best_epoch, mut best_test) = (FAILED_METRIC, 0, FAILED_METRIC);
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let scale = linear_schedule(step, total, warmup);
            let mut tape = Tape::new();
            let mut p = Bound::new(&mut tape, model.params(), |n| plan.trainable(n));
            p.extend(&mut tape, &head, |_| true);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let out = predict(&mut tape, &model, spec, &p, &train[i], Some(&mut dropout_rng))?;
                let l = head_loss(&mut tape, out, head_target(&train[i].target))?;
                terms.push((l, 1.0 / batch.len() as f64));
            }
            let loss = weighted_sum(&mut tape, &terms)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                failure = Some(format!("non-finite training loss at epoch {epoch}, step {step}"));
                curve.push(EpochRecord {
                    epoch,
                    train_loss: value,
                    dev_metric: FAILED_METRIC,
                });
                break 'epochs;
            }
            loss_sum += value * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g_enc = p.take_grads(&tape, &mut grads, model.params(), |_| true);
            let g_head = p.take_grads(&tape, &mut grads, &head, |_| true);
            let mult = |n: &str| scale * plan.multiplier(n);
            let step_result = adam_step(model.params_mut(), &g_enc, &mut s_enc, &config.optimizer, step, mult)
                .and_then(|mut used| {
                    used.extend(adam_step(&mut head, &g_head, &mut s_head, &config.optimizer, step, |_| scale)?);
                    Ok(used)
                });
            match step_result {
                Ok(used) if trace => step_lrs.push((scale, used)),
                Ok(_) => {}
                Err(Error::NonFiniteGradient { name }) => {
                    failure = Some(format!("non-finite gradient for {name} at epoch {epoch}, step {step}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let dev_metric = if config.combine_train_dev {
            FAILED_METRIC
        } else {
            evaluate(&model, &head, spec, &dev)?
        };
        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_metric,
        });
        // Test is only scored at epochs that become the selected one.
        if config.combine_train_dev {
            if epoch == config.epochs {
                best_epoch = epoch;
                best_test = evaluate(&model, &head, spec, &test)?;
            }
        } else if best_epoch == 0 || dev_metric > best_dev {
            best_dev = dev_metric;
            best_epoch = epoch;
            best_test = evaluate(&model, &head, spec, &test)?;
        }
    }

    if failure.is_some() {
        best_dev = FAILED_METRIC;
        best_test = FAILED_METRIC;
    } else if best_test == FAILED_METRIC {
        failure = Some(format!("{} undefined on the test split at the selected epoch", spec.metric));
    }
    let result = RunResult {
        task: spec.name.clone(),
        metric: spec.metric,
        strategy: strategy.label(),
        seed: config.seed,
        lr: config.optimizer.lr,
        epochs: config.epochs,
        bias_correction: config.optimizer.bias_correction,
        combine_train_dev: config.combine_train_dev,
        best_dev_metric: best_dev,
        best_epoch,
        test_metric: best_test,
        failure,
        curve,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let trace = FineTuneTrace {
        plan,
        initial: initial.unwrap_or_else(|| model.clone()),
        final_encoder: model,
        final_head: head,
        step_lrs,
    };
    Ok((result, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub epochs: usize,
    #[serde(with = "crate::float_text")]
    pub mean_dev: f64,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: FineTuneConfig,
    pub cells: Vec<GridCell>,
}

/// Tries every (learning rate, epochs) pair over `seeds` and keeps the best
/// mean dev metric; ties go to the lower learning rate, then fewer epochs.
/// Runs execute in parallel on the current rayon pool; results do not depend
/// on the thread count.
pub fn grid_search(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    task: &TaskData,
    strategy: &AdaptationStrategy,
    base: &FineTuneConfig,
    lr_grid: &[f64],
    epoch_grid: &[usize],
    seeds: &[u64],
) -> Result<GridResult> {
    if lr_grid.is_empty() || epoch_grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("grid search needs learning rates, epoch counts and seeds".into()));
    }
    if base.combine_train_dev {
        return Err(Error::Config("grid search selects on dev; combine_train_dev must be off".into()));
    }
    let mut lrs = lr_grid.to_vec();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    let mut eps = epoch_grid.to_vec();
    eps.sort_unstable();
    eps.dedup();
    let cells: Vec<(f64, usize)> = lrs.iter().flat_map(|&lr| eps.iter().map(move |&e| (lr, e))).collect();
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let mut cfg = base.clone();
            cfg.optimizer.lr = cells[c].0;
            cfg.epochs = cells[c].1;
            cfg.seed = seed;
            cfg.lr_grid.clear();
            cfg.epoch_grid.clear();
            fine_tune(encoder, vocab, task, strategy, &cfg)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(cells.len());
    let mut best: Option<usize> = None;
    for (c, chunk) in runs.chunks(seeds.len()).enumerate() {
        let mean_dev = chunk.iter().map(|r| r.best_dev_metric).sum::<f64>() / chunk.len() as f64;
        let mean_dev = if mean_dev.is_nan() { FAILED_METRIC } else { mean_dev };
        if best.map_or(true, |b: usize| mean_dev > out_mean(&out, b)) {
            best = Some(c);
        }
        out.push(GridCell {
            lr: cells[c].0,
            epochs: cells[c].1,
            mean_dev,
            runs: chunk.to_vec(),
        });
    }
    let b = best.expect("at least one cell");
    let mut chosen = base.clone();
    chosen.optimizer.lr = out[b].lr;
    chosen.epochs = out[b].epochs;
    Ok(GridResult { best: chosen, cells: out })
}

fn out_mean(cells: &[GridCell], i: usize) -> f64 {
    cells[i].mean_dev
}
