use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PretrainMode;
use crate::error::{Error, Result};
use crate::vocab::{SpecialIds, Vocabulary, NUM_SPECIAL};

/// Sentences of one document.
pub type Document = Vec<String>;
/// Token ids of each sentence of one document.
pub type TokenizedDocument = Vec<Vec<u32>>;

/// One sentence per line, blank lines between documents.
pub fn parse_corpus(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    Ok(parse_corpus(&fs::read_to_string(path)?))
}

/// Tokenizes every sentence, dropping sentences that produce no tokens.
pub fn tokenize_corpus(docs: &[Document], vocab: &Vocabulary) -> Vec<TokenizedDocument> {
    docs.iter()
        .map(|d| {
            d.iter()
                .map(|s| vocab.tokenize(s))
                .filter(|t| !t.is_empty())
                .collect::<Vec<_>>()
        })
        .filter(|d| !d.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    pub fn class(self) -> usize {
        match self {
            NspLabel::IsNext => 0,
            NspLabel::NotNext => 1,
        }
    }
}

/// An unmasked pretraining sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub nsp_label: Option<NspLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleOptions {
    /// Total length including `[CLS]` and `[SEP]` tokens.
    pub max_len: usize,
    /// Probability that B is the true next sentence (NSP mode only).
    pub next_sentence_prob: f64,
}

impl Default for ExampleOptions {
    fn default() -> Self {
        Self {
            max_len: 128,
            next_sentence_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Examples {
    pub examples: Vec<Skeleton>,
    /// Documents with too few sentences for the mode.
    pub skipped_documents: usize,
}

/// Trims the longer of the two segments from the end (B on ties) until
/// `a + b ≤ budget`.
pub fn truncate_pair(a: &mut Vec<u32>, b: &mut Vec<u32>, budget: usize) {
    while a.len() + b.len() > budget {
        if a.len() > b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

/// One pass over the corpus: an example per adjacent sentence pair, in
/// document order. In single-sequence mode the pair is joined into one span,
/// and one-sentence documents contribute their sentence alone.
pub fn make_examples<R: Rng + ?Sized>(
    docs: &[TokenizedDocument],
    mode: PretrainMode,
    special: SpecialIds,
    options: ExampleOptions,
    rng: &mut R,
) -> Result<Examples> {
    if options.max_len < 5 {
        return Err(Error::invalid(format!(
            "max_len {} leaves no room for two segments",
            options.max_len
        )));
    }
    if !(0.0..=1.0).contains(&options.next_sentence_prob) {
        return Err(Error::invalid("next_sentence_prob must be in [0, 1]"));
    }
    let nsp = mode.uses_nsp();
    if nsp && docs.len() < 2 {
        return Err(Error::invalid(
            "next-sentence negatives need at least two documents",
        ));
    }
    let mut out = Examples::default();
    for (d, doc) in docs.iter().enumerate() {
        if doc.len() < 2 {
            if mode == PretrainMode::BertSingleSeq && !doc.is_empty() {
                let mut span = doc[0].clone();
                span.truncate(options.max_len - 2);
                out.examples.push(single(span, special));
            } else {
                out.skipped_documents += 1;
            }
            continue;
        }
        for i in 0..doc.len() - 1 {
            let mut a = doc[i].clone();
            let (mut b, label) = if nsp && !rng.gen_bool(options.next_sentence_prob) {
                let other = loop {
                    let o = rng.gen_range(0..docs.len() - 1);
                    let o = if o >= d { o + 1 } else { o };
                    if !docs[o].is_empty() {
                        break o;
                    }
                };
                let s = rng.gen_range(0..docs[other].len());
                (docs[other][s].clone(), Some(NspLabel::NotNext))
            } else {
                (doc[i + 1].clone(), nsp.then_some(NspLabel::IsNext))
            };
            if mode == PretrainMode::BertSingleSeq {
                a.append(&mut b);
                a.truncate(options.max_len - 2);
                out.examples.push(single(a, special));
                continue;
            }
            truncate_pair(&mut a, &mut b, options.max_len - 3);
            let mut token_ids = Vec::with_capacity(a.len() + b.len() + 3);
            token_ids.push(special.cls);
            token_ids.extend(&a);
            token_ids.push(special.sep);
            let first = token_ids.len();
            token_ids.extend(&b);
            token_ids.push(special.sep);
            let mut segment_ids = vec![0; token_ids.len()];
            segment_ids[first..].fill(1);
            out.examples.push(Skeleton {
                token_ids,
                segment_ids,
                nsp_label: label,
            });
        }
    }
    Ok(out)
}

fn single(span: Vec<u32>, special: SpecialIds) -> Skeleton {
    let mut token_ids = Vec::with_capacity(span.len() + 2);
    token_ids.push(special.cls);
    token_ids.extend(span);
    token_ids.push(special.sep);
    Skeleton {
        segment_ids: vec![0; token_ids.len()],
        token_ids,
        nsp_label: None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmMask {
    pub tokens: Vec<u32>,
    /// Sorted positions selected for prediction.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub labels: Vec<u32>,
}

/// What happened to a selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Masked,
    Kept,
    Random,
}

/// Selects `⌈rate · candidates⌉` non-special positions uniformly without
/// replacement; each becomes `[MASK]` (80%), stays (10%) or becomes a uniform
/// random non-special id (10%).
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    tokens: &[u32],
    vocab_size: usize,
    special: SpecialIds,
    rng: &mut R,
    rate: f64,
) -> Result<MlmMask> {
    apply_mlm_mask_traced(tokens, vocab_size, special, rng, rate).map(|(m, _)| m)
}

/// [`apply_mlm_mask`] plus the action taken at each selected position.
pub fn apply_mlm_mask_traced<R: Rng + ?Sized>(
    tokens: &[u32],
    vocab_size: usize,
    special: SpecialIds,
    rng: &mut R,
    rate: f64,
) -> Result<(MlmMask, Vec<MaskAction>)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(format!("mask rate must be in (0, 1), got {rate}")));
    }
    let candidates: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| (t as usize) >= NUM_SPECIAL && !special.contains(t))
        .map(|(i, _)| i)
        .collect();
    let count = ((rate * candidates.len() as f64).ceil() as usize).min(candidates.len());
    let mut positions: Vec<usize> = sample(rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();
    let mut masked = tokens.to_vec();
    let mut labels = Vec::with_capacity(count);
    let mut actions = Vec::with_capacity(count);
    for &p in &positions {
        labels.push(tokens[p]);
        let u: f64 = rng.gen();
        let action = if u < 0.8 {
            masked[p] = special.mask;
            MaskAction::Masked
        } else if u < 0.9 || vocab_size <= NUM_SPECIAL {
            MaskAction::Kept
        } else {
            masked[p] = rng.gen_range(NUM_SPECIAL as u32..vocab_size as u32);
            MaskAction::Random
        };
        actions.push(action);
    }
    Ok((
        MlmMask {
            tokens: masked,
            positions,
            labels,
        },
        actions,
    ))
}
