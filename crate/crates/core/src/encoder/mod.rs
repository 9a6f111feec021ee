//! BERT-style post-layernorm transformer encoder.
//!
//! Parameters live in a flat, ordered map keyed by hierarchical names
//! (`embeddings.*`, `layer.<i>.*`, `pooler.*`). Layer 0 sits directly on top of
//! the embeddings. Adaptation plans, checkpoints and surgery all address
//! parameters through these names.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::EncoderConfig;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Logit added to masked attention keys.
pub const MASK_LOGIT: f64 = -1e9;
pub const INIT_STD: f64 = 0.02;

pub type Params = IndexMap<String, Tensor>;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Embeddings,
    Layer(usize),
    Pooler,
    /// Anything else: task heads, pretraining heads.
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("embeddings.") {
            ParamGroup::Embeddings
        } else if let Some(rest) = name.strip_prefix("layer.") {
            rest.split('.')
                .next()
                .and_then(|i| i.parse().ok())
                .map(ParamGroup::Layer)
                .unwrap_or(ParamGroup::Head)
        } else if name.starts_with("pooler.") {
            ParamGroup::Pooler
        } else {
            ParamGroup::Head
        }
    }
}

/// Initialization rule for one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Weight,
    Zero,
    One,
}

/// Truncated normal at two standard deviations, rounded to `f32` so that
/// checkpoints store initial weights exactly.
pub fn init_tensor<R: Rng + ?Sized>(shape: &[usize], kind: InitKind, rng: &mut R) -> Tensor {
    match kind {
        InitKind::Zero => Tensor::zeros(shape),
        InitKind::One => Tensor::full(shape, 1.0),
        InitKind::Weight => {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v as f32 as f64;
                    }
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        }
    }
}

/// Tape leaves for a set of named parameters.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Registers every parameter on `tape`; those for which `trainable` is false
    /// become constants.
    pub fn new(tape: &mut Tape, params: &Params, trainable: impl Fn(&str) -> bool) -> Self {
        let mut bound = Self::default();
        bound.extend(tape, params, trainable);
        bound
    }

    pub fn extend(&mut self, tape: &mut Tape, params: &Params, trainable: impl Fn(&str) -> bool) {
        for (name, t) in params {
            let v = if trainable(name) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            self.vars.insert(name.clone(), v);
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of the trainable bound parameters among `params` (in `params`
    /// order) that pass `include`; parameters off the loss path get zeros.
    pub fn take_grads(
        &self,
        tape: &Tape,
        grads: &mut Gradients,
        params: &Params,
        include: impl Fn(&str) -> bool,
    ) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        for (name, t) in params {
            let Some(&v) = self.vars.get(name) else { continue };
            if !include(name) || !tape.requires_grad(v) {
                continue;
            }
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        out
    }

    /// Same bindings with a name prefix stripped, for heads nested under a prefix.
    pub fn view(&self, prefix: &str) -> Bound {
        Bound {
            vars: self
                .vars
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), *v)))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub token_ids: &'a [u32],
    pub segment_ids: &'a [u32],
    pub attention_mask: &'a [bool],
}

/// Forward results still on the tape.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    /// Embedding output followed by each layer's output.
    pub hidden_states: Vec<Var>,
    /// `1 × hidden` tanh-pooled first-token representation.
    pub pooled: Var,
    /// Attention probabilities per layer and head, each `seq × seq`.
    pub attention: Vec<Vec<Var>>,
}

impl EncodedVars {
    pub fn last_hidden(&self) -> Var {
        *self
            .hidden_states
            .last()
            .expect("at least the embedding output")
    }
}

/// Forward results copied off the tape.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden_states: Vec<Tensor>,
    pub pooled: Tensor,
    pub attention: Vec<Vec<Tensor>>,
}

pub(crate) fn linear(tape: &mut Tape, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub(crate) fn norm(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, eps: f64) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gain"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, 1, eps)
}

/// Runs the encoder on `tape` using the bound parameters.
///
/// With `dropout_rng` set the pass is in training mode and dropout (at the
/// configured rate) is active.
pub fn encode(
    config: &EncoderConfig,
    tape: &mut Tape,
    p: &Bound,
    input: EncoderInput<'_>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodedVars> {
    let n = input.token_ids.len();
    if input.segment_ids.len() != n || input.attention_mask.len() != n {
        return Err(Error::invalid(format!(
            "token/segment/mask lengths differ: {n}, {}, {}",
            input.segment_ids.len(),
            input.attention_mask.len()
        )));
    }
    if n == 0 || n > config.max_positions {
        return Err(Error::invalid(format!(
            "sequence length {n} not in 1..={}",
            config.max_positions
        )));
    }
    if let Some(&s) = input
        .segment_ids
        .iter()
        .find(|&&s| s as usize >= config.num_segments)
    {
        return Err(Error::invalid(format!(
            "segment id {s} not below num_segments {}",
            config.num_segments
        )));
    }
    let eps = config.layer_norm_eps;
    let rate = config.dropout;
    let train = dropout_rng.is_some();
    let mut drop = |tape: &mut Tape, x: Var| -> Result<Var> {
        match dropout_rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, rate, rng, train),
            None => Ok(x),
        }
    };

    let ids: Vec<usize> = input.token_ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let segments: Vec<usize> = input.segment_ids.iter().map(|&s| s as usize).collect();
    let tok = tape.embedding(p.get("embeddings.token")?, &ids)?;
    let pos = tape.embedding(p.get("embeddings.position")?, &positions)?;
    let seg = tape.embedding(p.get("embeddings.segment")?, &segments)?;
    let sum = tape.add(tok, pos)?;
    let sum = tape.add(sum, seg)?;
    let mut h = norm(tape, sum, p, "embeddings.ln", eps)?;
    h = drop(tape, h)?;
    if config.embedding_dim() != config.hidden_dim {
        h = linear(tape, h, p, "embeddings.project")?;
    }

    let mask_bias = tape.constant(Tensor::vector(
        input
            .attention_mask
            .iter()
            .map(|&keep| if keep { 0.0 } else { MASK_LOGIT })
            .collect(),
    ));
    let heads = config.num_heads;
    let head_dim = config.hidden_dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut hidden_states = vec![h];
    let mut attention = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let pre = format!("layer.{l}");
        let q = linear(tape, h, p, &format!("{pre}.attn.q"))?;
        let k = linear(tape, h, p, &format!("{pre}.attn.k"))?;
        let v = linear(tape, h, p, &format!("{pre}.attn.v"))?;
        let mut contexts = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for head in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                let start = head * head_dim;
                (
                    tape.slice_cols(q, start, head_dim)?,
                    tape.slice_cols(k, start, head_dim)?,
                    tape.slice_cols(v, start, head_dim)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add_row(scores, mask_bias)?;
            let pr = tape.softmax(scores, 1)?;
            probs.push(pr);
            let pr = drop(tape, pr)?;
            contexts.push(tape.matmul(pr, vh)?);
        }
        let ctx = if heads == 1 {
            contexts[0]
        } else {
            tape.concat_cols(&contexts)?
        };
        let attn = linear(tape, ctx, p, &format!("{pre}.attn.o"))?;
        let attn = drop(tape, attn)?;
        let res = tape.add(h, attn)?;
        let h1 = norm(tape, res, p, &format!("{pre}.attn.ln"), eps)?;

        let ff = linear(tape, h1, p, &format!("{pre}.ffn.w1"))?;
        let ff = tape.gelu(ff);
        let ff = linear(tape, ff, p, &format!("{pre}.ffn.w2"))?;
        let ff = drop(tape, ff)?;
        let res = tape.add(h1, ff)?;
        h = norm(tape, res, p, &format!("{pre}.ffn.ln"), eps)?;
        hidden_states.push(h);
        attention.push(probs);
    }

    let first = tape.gather_rows(h, &[0])?;
    let pooled = linear(tape, first, p, "pooler")?;
    let pooled = tape.tanh(pooled);
    Ok(EncodedVars {
        hidden_states,
        pooled,
        attention,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: Params,
}

impl EncoderModel {
    /// Fresh weights: truncated normal(0, 0.02) matrices, zero biases, unit
    /// layernorm gains. Deterministic per seed.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape, kind)| {
                let t = init_tensor(&shape, kind, &mut rng);
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles a model from loaded parameters, checking names and shapes.
    pub fn from_params(config: EncoderConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        let mut ordered = Params::with_capacity(specs.len());
        for (name, shape, _) in specs {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("from_params", t.shape(), &shape));
            }
            ordered.insert(name, t.clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Inference forward pass (no dropout).
    pub fn forward(
        &self,
        token_ids: &[u32],
        segment_ids: &[u32],
        attention_mask: &[bool],
    ) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.params, |_| false);
        let vars = encode(
            &self.config,
            &mut tape,
            &bound,
            EncoderInput {
                token_ids,
                segment_ids,
                attention_mask,
            },
            None,
        )?;
        Ok(EncoderOutput {
            hidden_states: vars
                .hidden_states
                .iter()
                .map(|v| tape.value(*v).clone())
                .collect(),
            pooled: Tensor::vector(tape.value(vars.pooled).data().to_vec()),
            attention: vars
                .attention
                .iter()
                .map(|hs| hs.iter().map(|v| tape.value(*v).clone()).collect())
                .collect(),
        })
    }

    /// Drops the top `k` layers; the rest, the embeddings and the pooler are kept.
    pub fn prune_top_layers(&self, k: usize) -> Result<Self> {
        let layers = self.config.num_layers;
        if k >= layers {
            return Err(Error::invalid(format!(
                "cannot remove {k} of {layers} layers"
            )));
        }
        let keep = layers - k;
        let mut config = self.config.clone();
        config.num_layers = keep;
        let params = self
            .params
            .iter()
            .filter(|(name, _)| !matches!(ParamGroup::of(name), ParamGroup::Layer(i) if i >= keep))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Ok(Self { config, params })
    }

    /// Fresh weights for the top `n` layers and the pooler (same scheme as
    /// [`EncoderModel::init`]). `n == 0` leaves the model unchanged.
    pub fn reinit_top_layers(&self, n: usize, seed: u64) -> Result<Self> {
        let layers = self.config.num_layers;
        if n > layers {
            return Err(Error::invalid(format!(
                "cannot reinitialize {n} of {layers} layers"
            )));
        }
        let mut out = self.clone();
        if n == 0 {
            return Ok(out);
        }
        let first = layers - n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape, kind) in self.config.param_specs() {
            let fresh = match ParamGroup::of(&name) {
                ParamGroup::Layer(i) => i >= first,
                ParamGroup::Pooler => true,
                _ => false,
            };
            if fresh {
                out.params[&name] = init_tensor(&shape, kind, &mut rng);
            }
        }
        Ok(out)
    }
}
