use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::electra::{electra_forward, generator_owns, Choice};
use super::{
    bert_forward, make_examples, BertPretrainer, ElectraPair, ExampleOptions, LossVars,
    PretrainExample, PretrainMode, Replacement, TokenizedDocument, DEFAULT_MASK_RATE,
};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::optim::{adam_step, linear_schedule, warmup_steps, AdamConfig, AdamState};
use crate::seed::stream;
use crate::tensor::Tape;
use crate::vocab::SpecialIds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub mask_rate: f64,
    /// Fresh examples and masks on every pass over the corpus; otherwise both
    /// are drawn once and only the order changes.
    pub dynamic_masking: bool,
    pub optimizer: AdamConfig,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// ELECTRA discriminator weight λ.
    pub loss_weight: f64,
    pub replacement: Replacement,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::BertStandard,
            steps: 2000,
            batch_size: 16,
            max_len: 64,
            mask_rate: DEFAULT_MASK_RATE,
            dynamic_masking: true,
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            warmup_fraction: 0.1,
            seed: 0,
            loss_weight: 50.0,
            replacement: Replacement::Sample,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.max_len < 5 {
            problems.push(format!("max_len must be at least 5, got {}", self.max_len));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            problems.push(format!("mask_rate must be in (0, 1), got {}", self.mask_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            problems.push(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            problems.push(format!("loss_weight must be non-negative, got {}", self.loss_weight));
        }
        if let Err(Error::Config(m)) = self.optimizer.validate() {
            problems.push(m);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PretrainModel {
    Bert(BertPretrainer),
    Electra(ElectraPair),
}

impl PretrainModel {
    pub fn mode(&self) -> PretrainMode {
        match self {
            PretrainModel::Bert(b) => b.mode,
            PretrainModel::Electra(_) => PretrainMode::Electra,
        }
    }

    /// The encoder that survives pretraining (the discriminator for ELECTRA).
    pub fn encoder(&self) -> &EncoderModel {
        match self {
            PretrainModel::Bert(b) => &b.encoder,
            PretrainModel::Electra(p) => &p.discriminator,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub component: String,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Trained encoder; pretraining heads and any generator are dropped.
    pub encoder: EncoderModel,
    /// Per-step losses: `total` then each component.
    pub curve: Vec<LossRecord>,
    pub skipped_documents: usize,
    /// The full trained state, for inspection and tests.
    pub model: PretrainModel,
}

impl PretrainOutcome {
    /// Values of one component in step order.
    pub fn series(&self, component: &str) -> Vec<f64> {
        self.curve
            .iter()
            .filter(|r| r.component == component)
            .map(|r| r.value)
            .collect()
    }
}

/// `step,component,value` CSV.
pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,component,value\n");
    for r in curve {
        out.push_str(&format!("{},{},{:?}\n", r.step, r.component, r.value));
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

struct Feeder<'a> {
    docs: &'a [TokenizedDocument],
    config: &'a PretrainConfig,
    vocab_size: usize,
    pool: Vec<PretrainExample>,
    order: Vec<usize>,
    cursor: usize,
    skipped: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Feeder<'_> {
    fn refill(&mut self) -> Result<()> {
        if self.pool.is_empty() || self.config.dynamic_masking {
            let opts = ExampleOptions {
                max_len: self.config.max_len,
                ..ExampleOptions::default()
            };
            let ex = make_examples(self.docs, self.config.mode, SpecialIds::default(), opts, &mut self.rng)?;
            self.skipped = ex.skipped_documents;
            if ex.examples.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            self.pool = ex
                .examples
                .iter()
                .map(|s| {
                    PretrainExample::from_skeleton(
                        s,
                        self.vocab_size,
                        SpecialIds::default(),
                        &mut self.rng,
                        self.config.mask_rate,
                    )
                })
                .collect::<Result<_>>()?;
        }
        self.order = (0..self.pool.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
        Ok(())
    }

    fn next_batch(&mut self) -> Result<Vec<PretrainExample>> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.refill()?;
            }
            batch.push(self.pool[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        Ok(batch)
    }
}

fn check_finite(step: usize, tape: &Tape, vars: &LossVars) -> Result<()> {
    let parts = [("mlm", Some(vars.mlm)), ("nsp", vars.nsp), ("disc", vars.disc), ("total", Some(vars.total))];
    for (name, v) in parts {
        if let Some(v) = v {
            if !tape.value(v).item().is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    component: name.into(),
                });
            }
        }
    }
    Ok(())
}

/// Runs `config.steps` optimizer steps over batches drawn from `docs`.
///
/// Deterministic for a given model, corpus and config.
pub fn pretrain(
    mut model: PretrainModel,
    docs: &[TokenizedDocument],
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if model.mode() != config.mode {
        return Err(Error::Config(format!(
            "model is set up for {}, config asks for {}",
            model.mode(),
            config.mode
        )));
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab_size = model.encoder().config().vocab_size;
    let max_id = docs.iter().flatten().flatten().copied().max().unwrap_or(0);
    if max_id as usize >= vocab_size {
        return Err(Error::Config(format!(
            "corpus token id {max_id} is outside the model vocabulary of {vocab_size}"
        )));
    }
    if config.max_len > model.encoder().config().max_positions {
        return Err(Error::Config(format!(
            "max_len {} exceeds max_positions {}",
            config.max_len,
            model.encoder().config().max_positions
        )));
    }
    if let PretrainModel::Electra(p) = &mut model {
        p.replacement = config.replacement;
        p.loss_weight = config.loss_weight;
    }
    let mut feeder = Feeder {
        docs,
        config,
        vocab_size,
        pool: Vec::new(),
        order: Vec::new(),
        cursor: 0,
        skipped: 0,
        rng: stream(config.seed, 1),
    };
    let mut dropout_rng = stream(config.seed, 2);
    let mut sample_rng = stream(config.seed, 3);
    let total = config.steps as u64;
    let warmup = warmup_steps(total, config.warmup_fraction);
    let mut states = [AdamState::new(), AdamState::new(), AdamState::new(), AdamState::new()];
    let mut curve = Vec::with_capacity(config.steps * 3);

    for step in 1..=config.steps {
        let batch = feeder.next_batch()?;
        let scale = linear_schedule(step as u64, total, warmup);
        let mut tape = Tape::new();
        let values = match &mut model {
            PretrainModel::Bert(m) => {
                let p = m.bind(&mut tape, true);
                let vars = bert_forward(&mut tape, m, &p, &batch, Some(&mut dropout_rng))?;
                check_finite(step, &tape, &vars)?;
                let values = vars.values(&tape, 0.0);
                let mut grads = tape.backward(vars.total)?;
                let g_enc = p.take_grads(&tape, &mut grads, m.encoder.params(), |_| true);
                let g_head = p.take_grads(&tape, &mut grads, &m.heads, |_| true);
                let [s0, s1, ..] = &mut states;
                adam_step(m.encoder.params_mut(), &g_enc, s0, &config.optimizer, step as u64, |_| scale)?;
                adam_step(&mut m.heads, &g_head, s1, &config.optimizer, step as u64, |_| scale)?;
                values
            }
            PretrainModel::Electra(pair) => {
                let (dp, gp) = pair.bind(&mut tape, true);
                let ev = electra_forward(
                    &mut tape,
                    pair,
                    &dp,
                    &gp,
                    &batch,
                    Choice::Policy(pair.replacement, &mut sample_rng),
                    Some(&mut dropout_rng),
                )?;
                check_finite(step, &tape, &ev.loss)?;
                let values = ev.loss.values(&tape, pair.loss_weight);
                let mut grads = tape.backward(ev.loss.total)?;
                let g_disc = dp.take_grads(&tape, &mut grads, pair.discriminator.params(), |_| true);
                let g_dhead = dp.take_grads(&tape, &mut grads, &pair.discriminator_head, |_| true);
                let g_gen = gp.take_grads(&tape, &mut grads, pair.generator.params(), generator_owns);
                let g_ghead = gp.take_grads(&tape, &mut grads, &pair.generator_head, |_| true);
                let [s0, s1, s2, s3] = &mut states;
                let t = step as u64;
                adam_step(pair.discriminator.params_mut(), &g_disc, s0, &config.optimizer, t, |_| scale)?;
                adam_step(&mut pair.discriminator_head, &g_dhead, s1, &config.optimizer, t, |_| scale)?;
                adam_step(pair.generator.params_mut(), &g_gen, s2, &config.optimizer, t, |_| scale)?;
                adam_step(&mut pair.generator_head, &g_ghead, s3, &config.optimizer, t, |_| scale)?;
                pair.sync_tables();
                values
            }
        };
        curve.push(LossRecord {
            step,
            component: "total".into(),
            value: values.total,
        });
        curve.push(LossRecord {
            step,
            component: "mlm".into(),
            value: values.mlm,
        });
        if let Some(v) = values.nsp {
            curve.push(LossRecord {
                step,
                component: "nsp".into(),
                value: v,
            });
        }
        if let Some(v) = values.disc {
            curve.push(LossRecord {
                step,
                component: "disc".into(),
                value: v,
            });
        }
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {:.4}", values.total);
        }
    }
    Ok(PretrainOutcome {
        encoder: model.encoder().clone(),
        curve,
        skipped_documents: feeder.skipped,
        model,
    })
}
