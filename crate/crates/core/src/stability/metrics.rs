//! Evaluation metrics: Pearson correlation, accuracy and entity-level F1
//! over BIO-tagged sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample Pearson correlation. Needs two or more points and non-zero
/// variance on both sides.
pub fn pearson(preds: &[f64], golds: &[f64]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold values",
            preds.len(),
            golds.len()
        )));
    }
    let n = preds.len();
    if n < 2 {
        return Err(Error::invalid("pearson needs at least 2 points"));
    }
    if preds.iter().chain(golds).any(|v| !v.is_finite()) {
        return Err(Error::invalid("pearson input is not finite"));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / n as f64;
    let (mp, mg) = (mean(preds), mean(golds));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &g) in preds.iter().zip(golds) {
        let (dp, dg) = (p - mp, g - mg);
        sxy += dp * dg;
        sxx += dp * dp;
        syy += dg * dg;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson undefined: zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "accuracy over {} predictions and {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Share of the most frequent gold label.
pub fn majority_baseline(golds: &[usize]) -> f64 {
    if golds.is_empty() {
        return 0.0;
    }
    let max = golds.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &g in golds {
        counts[g] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / golds.len() as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub label: String,
}

/// Entities from BIO tags plus the number of `I-` tags that started a span
/// (treated as `B-`).
pub fn decode_bio<S: AsRef<str>>(tags: &[S]) -> (Vec<Entity>, usize) {
    let mut out = Vec::new();
    let mut repairs = 0;
    let mut open: Option<Entity> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (prefix, label) = match tag.split_once('-') {
            Some((p @ ("B" | "I"), l)) => (p, l),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && open.as_ref().is_some_and(|e| e.label == label);
        if continues {
            if let Some(e) = open.as_mut() {
                e.end = i + 1;
            }
            continue;
        }
        out.extend(open.take());
        if prefix == "O" {
            continue;
        }
        if prefix == "I" {
            repairs += 1;
        }
        open = Some(Entity {
            start: i,
            end: i + 1,
            label: label.to_string(),
        });
    }
    out.extend(open);
    (out, repairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Same span and label.
    Strict,
    /// Same label, predicted span equal to or inside a gold span.
    Lenient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(true_positives: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_positives, predicted);
        let recall = ratio(true_positives, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            true_positives,
            predicted,
            gold,
        }
    }
}

fn matches(mode: MatchMode, pred: &Entity, gold: &Entity) -> bool {
    pred.label == gold.label
        && match mode {
            MatchMode::Strict => pred.start == gold.start && pred.end == gold.end,
            MatchMode::Lenient => gold.start <= pred.start && pred.end <= gold.end,
        }
}

/// Matched predictions in one sentence: a maximum matching in which each
/// gold entity is used at most once (augmenting paths).
pub fn count_matches(gold: &[Entity], pred: &[Entity], mode: MatchMode) -> usize {
    fn augment(
        p: usize,
        edges: &[Vec<usize>],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &g in &edges[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].map_or(true, |q| augment(q, edges, owner, seen)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }
    let edges: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| (0..gold.len()).filter(|&j| matches(mode, p, &gold[j])).collect())
        .collect();
    let mut owner = vec![None; gold.len()];
    (0..pred.len())
        .filter(|&p| augment(p, &edges, &mut owner, &mut vec![false; gold.len()]))
        .count()
}

/// Micro-averaged entity precision, recall and F1 over sentences.
pub fn entity_f1(gold: &[Vec<Entity>], pred: &[Vec<Entity>], mode: MatchMode) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} gold sentences, {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        tp += count_matches(g, p, mode);
        np += p.len();
        ng += g.len();
    }
    Ok(Prf::from_counts(tp, np, ng))
}
