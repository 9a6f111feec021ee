//! Task heads on top of the encoder.

use rand::Rng;

use super::task::{TaskKind, TaskSpec};
use crate::encoder::{init_tensor, linear, Bound, EncodedVars, InitKind, Params};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub fn init_head<R: Rng + ?Sized>(spec: &TaskSpec, hidden: usize, rng: &mut R) -> Params {
    let out = spec.num_outputs();
    let mut p = Params::new();
    p.insert("head.weight".into(), init_tensor(&[hidden, out], InitKind::Weight, rng));
    p.insert("head.bias".into(), init_tensor(&[out], InitKind::Zero, rng));
    p
}

/// Sequence-level tasks read the pooled vector (`1 × outputs`); token tasks
/// read the final hidden states (`seq × labels`).
pub fn head_forward(tape: &mut Tape, spec: &TaskSpec, p: &Bound, encoded: &EncodedVars) -> Result<Var> {
    let width = tape.value(p.get("head.bias")?).numel();
    if width != spec.num_outputs() {
        return Err(Error::invalid(format!(
            "head has {width} outputs, task {} needs {}",
            spec.name,
            spec.num_outputs()
        )));
    }
    let x = match spec.kind {
        TaskKind::TokenClassification => encoded.last_hidden(),
        _ => encoded.pooled,
    };
    linear(tape, x, p, "head")
}

pub enum HeadTarget<'a> {
    Score(f64),
    Class(usize),
    /// Labels at the given rows; other rows (specials, continuation pieces)
    /// carry no loss.
    Tags { positions: &'a [usize], labels: &'a [usize] },
}

/// Squared error for regression, cross-entropy otherwise.
pub fn head_loss(tape: &mut Tape, logits: Var, target: HeadTarget<'_>) -> Result<Var> {
    match target {
        HeadTarget::Score(y) => tape.mse(logits, &Tensor::matrix(1, 1, vec![y])?),
        HeadTarget::Class(c) => tape.cross_entropy(logits, &[c], None),
        HeadTarget::Tags { positions, labels } => {
            if positions.is_empty() {
                return Ok(tape.constant(Tensor::scalar(0.0)));
            }
            let rows = tape.gather_rows(logits, positions)?;
            tape.cross_entropy(rows, labels, None)
        }
    }
}
