//! Pretraining examples, objectives and the training loop for the three BERT
//! settings (with NSP, without NSP, single sequence) and ELECTRA.

mod data;
mod electra;
pub mod heads;
mod trainer;

pub use data::{
    apply_mlm_mask, apply_mlm_mask_traced, make_examples, parse_corpus, read_corpus,
    tokenize_corpus, truncate_pair, Document, ExampleOptions, Examples, MaskAction, MlmMask,
    NspLabel, Skeleton, TokenizedDocument,
};
pub use electra::{corrupt, electra_step, electra_step_forced, ElectraPair, Replacement};
pub use trainer::{pretrain, write_loss_curve, LossRecord, PretrainConfig, PretrainModel, PretrainOutcome};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, Bound, EncoderConfig, EncoderInput, EncoderModel, Params};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::SpecialIds;

pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Sentence pairs with next-sentence prediction.
    BertStandard,
    /// Sentence pairs, masked-token loss only.
    BertNoNsp,
    /// One span with a single segment id, masked-token loss only.
    BertSingleSeq,
    Electra,
}

impl PretrainMode {
    pub const ALL: [PretrainMode; 4] = [
        PretrainMode::BertStandard,
        PretrainMode::BertNoNsp,
        PretrainMode::BertSingleSeq,
        PretrainMode::Electra,
    ];

    pub fn uses_nsp(self) -> bool {
        self == PretrainMode::BertStandard
    }

    pub fn num_segments(self) -> usize {
        match self {
            PretrainMode::BertSingleSeq => 1,
            _ => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMode::BertStandard => "bert_standard",
            PretrainMode::BertNoNsp => "bert_no_nsp",
            PretrainMode::BertSingleSeq => "bert_single_seq",
            PretrainMode::Electra => "electra",
        }
    }
}

impl fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown pretrain mode `{s}` (expected bert_standard, bert_no_nsp, bert_single_seq or electra)"
                ))
            })
    }
}

/// A masked pretraining sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainExample {
    /// Model input after masking.
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
    pub mlm_positions: Vec<usize>,
    pub mlm_labels: Vec<u32>,
    pub nsp_label: Option<NspLabel>,
    /// Per-token replaced flags, filled in by ELECTRA corruption.
    pub replaced_labels: Option<Vec<bool>>,
}

impl PretrainExample {
    pub fn from_skeleton<R: Rng + ?Sized>(
        skeleton: &Skeleton,
        vocab_size: usize,
        special: SpecialIds,
        rng: &mut R,
        rate: f64,
    ) -> Result<Self> {
        let m = apply_mlm_mask(&skeleton.token_ids, vocab_size, special, rng, rate)?;
        Ok(Self {
            attention_mask: skeleton.token_ids.iter().map(|&t| t != special.pad).collect(),
            token_ids: m.tokens,
            segment_ids: skeleton.segment_ids.clone(),
            mlm_positions: m.positions,
            mlm_labels: m.labels,
            nsp_label: skeleton.nsp_label,
            replaced_labels: None,
        })
    }

    /// The unmasked sequence.
    pub fn original(&self) -> Vec<u32> {
        let mut out = self.token_ids.clone();
        for (&p, &l) in self.mlm_positions.iter().zip(&self.mlm_labels) {
            out[p] = l;
        }
        out
    }

    fn input(&self) -> EncoderInput<'_> {
        EncoderInput {
            token_ids: &self.token_ids,
            segment_ids: &self.segment_ids,
            attention_mask: &self.attention_mask,
        }
    }
}

/// Loss of one batch, split by objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mlm: f64,
    pub nsp: Option<f64>,
    /// Unweighted replaced-token detection loss.
    pub disc: Option<f64>,
    pub disc_weight: f64,
}

impl LossBreakdown {
    /// Named contributions to `total`; they sum to it.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("mlm", self.mlm)];
        if let Some(n) = self.nsp {
            out.push(("nsp", n));
        }
        if let Some(d) = self.disc {
            out.push(("disc", self.disc_weight * d));
        }
        out
    }
}

pub(crate) struct LossVars {
    pub total: Var,
    pub mlm: Var,
    pub nsp: Option<Var>,
    pub disc: Option<Var>,
}

impl LossVars {
    pub fn values(&self, tape: &Tape, disc_weight: f64) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).item(),
            mlm: tape.value(self.mlm).item(),
            nsp: self.nsp.map(|v| tape.value(v).item()),
            disc: self.disc.map(|v| tape.value(v).item()),
            disc_weight,
        }
    }
}

/// Encoder plus masked-token head, and the NSP head in `bert_standard` mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BertPretrainer {
    pub mode: PretrainMode,
    pub encoder: EncoderModel,
    pub heads: Params,
}

impl BertPretrainer {
    pub fn new(config: EncoderConfig, mode: PretrainMode, seed: u64) -> Result<Self> {
        let encoder = EncoderModel::init(config, seed)?;
        Self::from_encoder(encoder, mode, seed)
    }

    pub fn from_encoder(encoder: EncoderModel, mode: PretrainMode, seed: u64) -> Result<Self> {
        if mode == PretrainMode::Electra {
            return Err(Error::invalid("electra pretraining uses ElectraPair"));
        }
        let cfg = encoder.config();
        if cfg.num_segments != mode.num_segments() {
            return Err(Error::Config(format!(
                "{mode} needs num_segments = {}, model has {}",
                mode.num_segments(),
                cfg.num_segments
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(seed, 1));
        let mut heads = heads::init_mlm_head(cfg.hidden_dim, cfg.embedding_dim(), cfg.vocab_size, &mut rng);
        if mode.uses_nsp() {
            heads.extend(heads::init_nsp_head(cfg.hidden_dim, &mut rng));
        }
        Ok(Self {
            mode,
            encoder,
            heads,
        })
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut b = Bound::new(tape, self.encoder.params(), |_| trainable);
        b.extend(tape, &self.heads, |_| trainable);
        b
    }
}

/// Adds `terms`, each weighted, starting from zero.
pub(crate) fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &(v, w) in terms {
        let s = tape.scale(v, w);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Masked-token cross-entropy averaged over all selected positions of the batch.
pub(crate) fn mlm_loss(
    tape: &mut Tape,
    config: &EncoderConfig,
    p: &Bound,
    hiddens: &[Var],
    batch: &[PretrainExample],
) -> Result<Var> {
    let total: usize = batch.iter().map(|e| e.mlm_positions.len()).sum();
    let table = p.get("embeddings.token")?;
    let mut terms = Vec::new();
    for (h, e) in hiddens.iter().zip(batch) {
        if e.mlm_positions.is_empty() {
            continue;
        }
        if e.mlm_labels.len() != e.mlm_positions.len() {
            return Err(Error::invalid("mlm_labels and mlm_positions differ in length"));
        }
        let logits = heads::mlm_logits(tape, p, *h, &e.mlm_positions, table, config.layer_norm_eps)?;
        let targets: Vec<usize> = e.mlm_labels.iter().map(|&l| l as usize).collect();
        let ce = tape.cross_entropy(logits, &targets, None)?;
        terms.push((ce, e.mlm_positions.len() as f64 / total as f64));
    }
    weighted_sum(tape, &terms)
}

pub(crate) fn bert_forward(
    tape: &mut Tape,
    model: &BertPretrainer,
    p: &Bound,
    batch: &[PretrainExample],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::invalid("empty pretraining batch"));
    }
    let cfg = model.encoder.config();
    let nsp = model.mode.uses_nsp();
    let mut hiddens = Vec::with_capacity(batch.len());
    let mut nsp_terms = Vec::new();
    for e in batch {
        let out = encode(cfg, tape, p, e.input(), dropout_rng.as_deref_mut())?;
        hiddens.push(out.last_hidden());
        if nsp {
            let label = e
                .nsp_label
                .ok_or_else(|| Error::invalid("bert_standard example without nsp_label"))?;
            let logits = heads::nsp_logits(tape, p, out.pooled)?;
            let ce = tape.cross_entropy(logits, &[label.class()], None)?;
            nsp_terms.push((ce, 1.0 / batch.len() as f64));
        }
    }
    let mlm = mlm_loss(tape, cfg, p, &hiddens, batch)?;
    let nsp = if nsp {
        Some(weighted_sum(tape, &nsp_terms)?)
    } else {
        None
    };
    let total = match nsp {
        Some(n) => tape.add(mlm, n)?,
        None => mlm,
    };
    Ok(LossVars {
        total,
        mlm,
        nsp,
        disc: None,
    })
}

/// Masked-token loss plus (in `bert_standard` mode) the next-sentence loss,
/// evaluated without dropout.
pub fn bert_loss(model: &BertPretrainer, batch: &[PretrainExample]) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let vars = bert_forward(&mut tape, model, &p, batch, None)?;
    Ok(vars.values(&tape, 0.0))
}
