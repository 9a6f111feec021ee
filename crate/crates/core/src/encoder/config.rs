use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::InitKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
    pub max_positions: usize,
    /// 2 for sentence pairs, 1 for single-sequence pretraining.
    pub num_segments: usize,
    pub vocab_size: usize,
    /// Width of the embedding tables when it differs from `hidden_dim`; the
    /// embedding output is then projected to `hidden_dim`. Used by the ELECTRA
    /// generator, which shares the discriminator's embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-12
}

impl EncoderConfig {
    /// 4 layers, hidden 64, 4 heads.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            intermediate_dim: 128,
            max_positions: 128,
            num_segments: 2,
            vocab_size,
            embedding_dim: None,
            dropout: default_dropout(),
            layer_norm_eps: default_eps(),
        }
    }

    /// 8 layers, hidden 96, 6 heads: twice the depth of [`EncoderConfig::tiny`].
    pub fn toy_large(vocab_size: usize) -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 96,
            num_heads: 6,
            intermediate_dim: 192,
            ..Self::tiny(vocab_size)
        }
    }

    /// Looks up a preset by name (`tiny`, `toy-large`).
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "tiny" => Ok(Self::tiny(vocab_size)),
            "toy-large" => Ok(Self::toy_large(vocab_size)),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected tiny or toy-large)"
            ))),
        }
    }

    /// Generator sized to `1/divisor` of this model's width: heads and hidden
    /// size are divided (hidden rounded to a multiple of the head count), the
    /// layer count is kept and the embedding tables stay at this model's width.
    pub fn generator(&self, divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::Config("generator divisor must be positive".into()));
        }
        let div = |x: usize| ((x as f64 / divisor as f64).round() as usize).max(1);
        let heads = div(self.num_heads);
        let hidden = (div(self.hidden_dim) as f64 / heads as f64)
            .round()
            .max(1.0) as usize
            * heads;
        Ok(Self {
            hidden_dim: hidden,
            num_heads: heads,
            intermediate_dim: div(self.intermediate_dim),
            embedding_dim: Some(self.embedding_dim()),
            ..self.clone()
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim.unwrap_or(self.hidden_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, value) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("intermediate_dim", self.intermediate_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim()),
        ] {
            if value == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.num_heads > 0 && self.hidden_dim % self.num_heads != 0 {
            problems.push(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !(1..=2).contains(&self.num_segments) {
            problems.push(format!(
                "num_segments must be 1 or 2, got {}",
                self.num_segments
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            problems.push("layer_norm_eps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Canonical parameter list: name, shape and init rule, in storage order.
    pub(crate) fn param_specs(&self) -> Vec<(String, Vec<usize>, InitKind)> {
        use InitKind::*;
        let h = self.hidden_dim;
        let e = self.embedding_dim();
        let i = self.intermediate_dim;
        let mut specs = vec![
            (
                "embeddings.token".to_string(),
                vec![self.vocab_size, e],
                Weight,
            ),
            (
                "embeddings.position".into(),
                vec![self.max_positions, e],
                Weight,
            ),
            (
                "embeddings.segment".into(),
                vec![self.num_segments, e],
                Weight,
            ),
            ("embeddings.ln.gain".into(), vec![e], One),
            ("embeddings.ln.bias".into(), vec![e], Zero),
        ];
        if e != h {
            specs.push(("embeddings.project.weight".into(), vec![e, h], Weight));
            specs.push(("embeddings.project.bias".into(), vec![h], Zero));
        }
        for l in 0..self.num_layers {
            for m in ["q", "k", "v", "o"] {
                specs.push((format!("layer.{l}.attn.{m}.weight"), vec![h, h], Weight));
                specs.push((format!("layer.{l}.attn.{m}.bias"), vec![h], Zero));
            }
            specs.push((format!("layer.{l}.attn.ln.gain"), vec![h], One));
            specs.push((format!("layer.{l}.attn.ln.bias"), vec![h], Zero));
            specs.push((format!("layer.{l}.ffn.w1.weight"), vec![h, i], Weight));
            specs.push((format!("layer.{l}.ffn.w1.bias"), vec![i], Zero));
            specs.push((format!("layer.{l}.ffn.w2.weight"), vec![i, h], Weight));
            specs.push((format!("layer.{l}.ffn.w2.bias"), vec![h], Zero));
            specs.push((format!("layer.{l}.ffn.ln.gain"), vec![h], One));
            specs.push((format!("layer.{l}.ffn.ln.bias"), vec![h], Zero));
        }
        specs.push(("pooler.weight".into(), vec![h, h], Weight));
        specs.push(("pooler.bias".into(), vec![h], Zero));
        specs
    }

    /// `key=value` lines, as stored in checkpoints.
    pub(crate) fn to_text(&self) -> String {
        let mut s = String::new();
        let fields: [(&str, String); 10] = [
            ("num_layers", self.num_layers.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("intermediate_dim", self.intermediate_dim.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("num_segments", self.num_segments.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("embedding_dim", self.embedding_dim().to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("layer_norm_eps", format!("{:?}", self.layer_norm_eps)),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub(crate) fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::tiny(1);
        let mut embedding_dim = None;
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
            let bad = |_| Error::Checkpoint(format!("bad value for `{k}`: `{v}`"));
            let int = |v: &str| v.parse::<usize>().map_err(bad);
            match k {
                "num_layers" => cfg.num_layers = int(v)?,
                "hidden_dim" => cfg.hidden_dim = int(v)?,
                "num_heads" => cfg.num_heads = int(v)?,
                "intermediate_dim" => cfg.intermediate_dim = int(v)?,
                "max_positions" => cfg.max_positions = int(v)?,
                "num_segments" => cfg.num_segments = int(v)?,
                "vocab_size" => cfg.vocab_size = int(v)?,
                "embedding_dim" => embedding_dim = Some(int(v)?),
                "dropout" => {
                    cfg.dropout = v
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad value for `{k}`: `{v}`")))?
                }
                "layer_norm_eps" => {
                    cfg.layer_norm_eps = v
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad value for `{k}`: `{v}`")))?
                }
                other => return Err(Error::Checkpoint(format!("unknown config key `{other}`"))),
            }
            seen += 1;
        }
        if seen < 7 {
            return Err(Error::Checkpoint("incomplete model config".into()));
        }
        cfg.embedding_dim = embedding_dim.filter(|&e| e != cfg.hidden_dim);
        cfg.validate()?;
        Ok(cfg)
    }
}
