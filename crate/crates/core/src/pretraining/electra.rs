use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{heads, weighted_sum, LossBreakdown, LossVars, PretrainExample};
use crate::encoder::{encode, Bound, EncoderConfig, EncoderInput, EncoderModel, Params};
use crate::error::{Error, Result};
use crate::tensor::Tape;

/// Embedding tables the generator reads from the discriminator.
pub(crate) const SHARED_TABLES: [&str; 3] = [
    "embeddings.token",
    "embeddings.position",
    "embeddings.segment",
];

/// How the generator picks replacement tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    /// Draw from the generator's softmax.
    #[default]
    Sample,
    /// Take the most likely token.
    Greedy,
}

impl std::str::FromStr for Replacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Replacement::Sample),
            "greedy" => Ok(Replacement::Greedy),
            other => Err(Error::Config(format!(
                "unknown replacement `{other}` (expected sample or greedy)"
            ))),
        }
    }
}

/// Generator and discriminator trained jointly; only the discriminator is kept.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectraPair {
    pub generator: EncoderModel,
    /// `mlm.*` head of the generator.
    pub generator_head: Params,
    pub discriminator: EncoderModel,
    /// `disc.*` head of the discriminator.
    pub discriminator_head: Params,
    /// Weight λ on the discriminator loss.
    pub loss_weight: f64,
    pub replacement: Replacement,
}

impl ElectraPair {
    /// Fresh pair whose generator is `1/divisor` of the discriminator's width.
    pub fn new(disc_config: EncoderConfig, divisor: usize, loss_weight: f64, seed: u64) -> Result<Self> {
        let gen_config = disc_config.generator(divisor)?;
        let discriminator = EncoderModel::init(disc_config, seed)?;
        let generator = EncoderModel::init(gen_config, crate::seed::derive_seed(seed, 2))?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(seed, 3));
        let g = generator.config();
        let generator_head = heads::init_mlm_head(g.hidden_dim, g.embedding_dim(), g.vocab_size, &mut rng);
        let discriminator_head = heads::init_disc_head(discriminator.config().hidden_dim, &mut rng);
        Self::from_parts(
            generator,
            generator_head,
            discriminator,
            discriminator_head,
            divisor,
            loss_weight,
        )
    }

    /// Checks the capacity ratio and head shapes, and points the generator's
    /// embedding tables at the discriminator's.
    pub fn from_parts(
        mut generator: EncoderModel,
        generator_head: Params,
        discriminator: EncoderModel,
        discriminator_head: Params,
        divisor: usize,
        loss_weight: f64,
    ) -> Result<Self> {
        let expected = discriminator.config().generator(divisor)?;
        let g = generator.config();
        if g.hidden_dim != expected.hidden_dim
            || g.num_heads != expected.num_heads
            || g.embedding_dim() != discriminator.config().hidden_dim
            || g.num_layers != expected.num_layers
            || g.vocab_size != expected.vocab_size
        {
            return Err(Error::Config(format!(
                "generator (hidden {}, heads {}, embedding {}) does not match 1/{divisor} of the discriminator (hidden {}, heads {}, embedding {})",
                g.hidden_dim,
                g.num_heads,
                g.embedding_dim(),
                expected.hidden_dim,
                expected.num_heads,
                expected.embedding_dim()
            )));
        }
        if !(loss_weight >= 0.0 && loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "loss_weight must be non-negative, got {loss_weight}"
            )));
        }
        for name in ["mlm.transform.weight", "mlm.output_bias"] {
            if !generator_head.contains_key(name) {
                return Err(Error::Config(format!("generator head lacks `{name}`")));
            }
        }
        for name in ["disc.dense.weight", "disc.out.weight"] {
            if !discriminator_head.contains_key(name) {
                return Err(Error::Config(format!("discriminator head lacks `{name}`")));
            }
        }
        for name in SHARED_TABLES {
            generator.params_mut()[name] = discriminator.params()[name].clone();
        }
        Ok(Self {
            generator,
            generator_head,
            discriminator,
            discriminator_head,
            loss_weight,
            replacement: Replacement::Sample,
        })
    }

    /// Discriminator bindings first, then generator bindings that reuse the
    /// discriminator's embedding tables.
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> (Bound, Bound) {
        let mut disc = Bound::new(tape, self.discriminator.params(), |_| trainable);
        disc.extend(tape, &self.discriminator_head, |_| trainable);
        let mut gen = Bound::default();
        let own: Params = self
            .generator
            .params()
            .iter()
            .filter(|(n, _)| !SHARED_TABLES.contains(&n.as_str()))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        gen.extend(tape, &own, |_| trainable);
        gen.extend(tape, &self.generator_head, |_| trainable);
        for name in SHARED_TABLES {
            gen.insert(name, disc.get(name).expect("bound above"));
        }
        (disc, gen)
    }

    /// Copies the (shared) discriminator tables into the generator's own
    /// parameter map after an update.
    pub(crate) fn sync_tables(&mut self) {
        for name in SHARED_TABLES {
            self.generator.params_mut()[name] = self.discriminator.params()[name].clone();
        }
    }
}

/// Replaces the masked positions with `replacements`; a position is labelled
/// replaced iff the resulting token differs from the original.
pub fn corrupt(example: &PretrainExample, replacements: &[u32]) -> Result<PretrainExample> {
    if replacements.len() != example.mlm_positions.len() {
        return Err(Error::invalid(format!(
            "{} replacements for {} masked positions",
            replacements.len(),
            example.mlm_positions.len()
        )));
    }
    let original = example.original();
    let mut tokens = original.clone();
    for (&p, &r) in example.mlm_positions.iter().zip(replacements) {
        tokens[p] = r;
    }
    let replaced = tokens
        .iter()
        .zip(&original)
        .zip(&example.attention_mask)
        .map(|((t, o), &real)| real && t != o)
        .collect();
    Ok(PretrainExample {
        token_ids: tokens,
        replaced_labels: Some(replaced),
        ..example.clone()
    })
}

pub(crate) enum Choice<'a> {
    Policy(Replacement, &'a mut dyn RngCore),
    Forced(&'a [Vec<u32>]),
}

fn pick(row: &[f64], policy: Replacement, rng: &mut dyn RngCore) -> Result<u32> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            component: "generator logits".into(),
        });
    }
    Ok(match policy {
        Replacement::Greedy => row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0 as u32,
        Replacement::Sample => {
            let weights: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
            dist.sample(rng) as u32
        }
    })
}

/// Result of one ELECTRA forward pass.
pub(crate) struct ElectraVars {
    pub loss: LossVars,
    pub corrupted: Vec<PretrainExample>,
}

pub(crate) fn electra_forward(
    tape: &mut Tape,
    pair: &ElectraPair,
    disc_p: &Bound,
    gen_p: &Bound,
    batch: &[PretrainExample],
    mut choice: Choice<'_>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ElectraVars> {
    if batch.is_empty() {
        return Err(Error::invalid("empty pretraining batch"));
    }
    if let Choice::Forced(f) = &choice {
        if f.len() != batch.len() {
            return Err(Error::invalid("forced replacements do not cover the batch"));
        }
    }
    let gcfg = pair.generator.config();
    let dcfg = pair.discriminator.config();
    let table = gen_p.get("embeddings.token")?;
    let total_masked: usize = batch.iter().map(|e| e.mlm_positions.len()).sum();
    let total_real: usize = batch
        .iter()
        .map(|e| e.attention_mask.iter().filter(|&&m| m).count())
        .sum();

    let mut mlm_terms = Vec::new();
    let mut disc_terms = Vec::new();
    let mut corrupted = Vec::with_capacity(batch.len());
    for (i, e) in batch.iter().enumerate() {
        let input = EncoderInput {
            token_ids: &e.token_ids,
            segment_ids: &e.segment_ids,
            attention_mask: &e.attention_mask,
        };
        let replacements: Vec<u32> = if e.mlm_positions.is_empty() {
            Vec::new()
        } else {
            let out = encode(gcfg, tape, gen_p, input, dropout_rng.as_deref_mut())?;
            let logits = heads::mlm_logits(
                tape,
                gen_p,
                out.last_hidden(),
                &e.mlm_positions,
                table,
                gcfg.layer_norm_eps,
            )?;
            let targets: Vec<usize> = e.mlm_labels.iter().map(|&l| l as usize).collect();
            let ce = tape.cross_entropy(logits, &targets, None)?;
            mlm_terms.push((ce, e.mlm_positions.len() as f64 / total_masked as f64));
            match &mut choice {
                Choice::Forced(f) => f[i].clone(),
                Choice::Policy(policy, rng) => {
                    let values = tape.value(logits);
                    (0..e.mlm_positions.len())
                        .map(|r| pick(values.row(r), *policy, &mut **rng))
                        .collect::<Result<_>>()?
                }
            }
        };
        let c = corrupt(e, &replacements)?;
        let labels: Vec<f64> = c
            .replaced_labels
            .as_ref()
            .expect("set by corrupt")
            .iter()
            .map(|&r| if r { 1.0 } else { 0.0 })
            .collect();
        let out = encode(
            dcfg,
            tape,
            disc_p,
            EncoderInput {
                token_ids: &c.token_ids,
                segment_ids: &c.segment_ids,
                attention_mask: &c.attention_mask,
            },
            dropout_rng.as_deref_mut(),
        )?;
        let logits = heads::disc_logits(tape, disc_p, out.last_hidden())?;
        let bce = tape.binary_cross_entropy_with_logits(logits, &labels, &c.attention_mask)?;
        let real = c.attention_mask.iter().filter(|&&m| m).count();
        disc_terms.push((bce, real as f64 / total_real.max(1) as f64));
        corrupted.push(c);
    }
    let mlm = weighted_sum(tape, &mlm_terms)?;
    let disc = weighted_sum(tape, &disc_terms)?;
    let weighted = tape.scale(disc, pair.loss_weight);
    let total = tape.add(mlm, weighted)?;
    Ok(ElectraVars {
        loss: LossVars {
            total,
            mlm,
            nsp: None,
            disc: Some(disc),
        },
        corrupted,
    })
}

fn run(pair: &ElectraPair, batch: &[PretrainExample], choice: Choice<'_>) -> Result<(LossBreakdown, Vec<PretrainExample>)> {
    let mut tape = Tape::new();
    let (disc, gen) = pair.bind(&mut tape, false);
    let vars = electra_forward(&mut tape, pair, &disc, &gen, batch, choice, None)?;
    Ok((vars.loss.values(&tape, pair.loss_weight), vars.corrupted))
}

/// Generator masked-token loss plus λ times the replaced-token detection loss
/// over all real tokens, without dropout. Replacements follow
/// `pair.replacement` using `rng`. Also returns the corrupted batch.
pub fn electra_step<R: Rng>(
    pair: &ElectraPair,
    batch: &[PretrainExample],
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<PretrainExample>)> {
    run(pair, batch, Choice::Policy(pair.replacement, rng))
}

/// [`electra_step`] with the generator's replacements fixed by the caller, one
/// list per example aligned with its `mlm_positions`.
pub fn electra_step_forced(
    pair: &ElectraPair,
    batch: &[PretrainExample],
    replacements: &[Vec<u32>],
) -> Result<(LossBreakdown, Vec<PretrainExample>)> {
    run(pair, batch, Choice::Forced(replacements))
}

/// Which generator variables receive updates: everything except the tables it
/// borrows from the discriminator.
pub(crate) fn generator_owns(name: &str) -> bool {
    !SHARED_TABLES.contains(&name)
}
