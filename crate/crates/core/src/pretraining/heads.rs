//! Pretraining heads: masked-token prediction (decoder tied to the token
//! table), next-sentence prediction and replaced-token detection.

use rand::Rng;

use crate::encoder::{init_tensor, linear, norm, Bound, InitKind, Params};
use crate::error::Result;
use crate::tensor::{Tape, Var};

fn push<R: Rng + ?Sized>(p: &mut Params, name: &str, shape: &[usize], kind: InitKind, rng: &mut R) {
    p.insert(name.to_string(), init_tensor(shape, kind, rng));
}

/// `mlm.transform` maps `hidden` to the embedding width; logits come from the
/// token table plus `mlm.output_bias`.
pub fn init_mlm_head<R: Rng + ?Sized>(hidden: usize, embedding: usize, vocab: usize, rng: &mut R) -> Params {
    let mut p = Params::new();
    push(&mut p, "mlm.transform.weight", &[hidden, embedding], InitKind::Weight, rng);
    push(&mut p, "mlm.transform.bias", &[embedding], InitKind::Zero, rng);
    push(&mut p, "mlm.ln.gain", &[embedding], InitKind::One, rng);
    push(&mut p, "mlm.ln.bias", &[embedding], InitKind::Zero, rng);
    push(&mut p, "mlm.output_bias", &[vocab], InitKind::Zero, rng);
    p
}

pub fn init_nsp_head<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Params {
    let mut p = Params::new();
    push(&mut p, "nsp.weight", &[hidden, 2], InitKind::Weight, rng);
    push(&mut p, "nsp.bias", &[2], InitKind::Zero, rng);
    p
}

pub fn init_disc_head<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Params {
    let mut p = Params::new();
    push(&mut p, "disc.dense.weight", &[hidden, hidden], InitKind::Weight, rng);
    push(&mut p, "disc.dense.bias", &[hidden], InitKind::Zero, rng);
    push(&mut p, "disc.out.weight", &[hidden, 1], InitKind::Weight, rng);
    push(&mut p, "disc.out.bias", &[1], InitKind::Zero, rng);
    p
}

/// Vocabulary logits (`positions × vocab`) at the given rows of `hidden`.
pub fn mlm_logits(
    tape: &mut Tape,
    p: &Bound,
    hidden: Var,
    positions: &[usize],
    token_table: Var,
    eps: f64,
) -> Result<Var> {
    let x = tape.gather_rows(hidden, positions)?;
    let x = linear(tape, x, p, "mlm.transform")?;
    let x = tape.gelu(x);
    let x = norm(tape, x, p, "mlm.ln", eps)?;
    let logits = tape.matmul_t(x, token_table)?;
    tape.add_row(logits, p.get("mlm.output_bias")?)
}

/// `1 × 2` logits from the pooled vector: class 0 is-next, class 1 not-next.
pub fn nsp_logits(tape: &mut Tape, p: &Bound, pooled: Var) -> Result<Var> {
    linear(tape, pooled, p, "nsp")
}

/// One replaced-token logit per position (`seq × 1`).
pub fn disc_logits(tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
    let x = linear(tape, hidden, p, "disc.dense")?;
    let x = tape.gelu(x);
    linear(tape, x, p, "disc.out")
}
