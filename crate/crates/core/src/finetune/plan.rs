//! Layer-specific adaptation strategies and their compiled per-parameter form.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, ParamGroup, Params};
use crate::error::{Error, Result};

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdaptationStrategy {
    None,
    /// Freeze the lowest `k` layers, and the embeddings unless switched off.
    LayerFreeze {
        k: usize,
        #[serde(default = "yes")]
        include_embeddings: bool,
    },
    /// Layer `i` of `L` trains at `d^(L-1-i)` times the base rate, the
    /// embeddings at `d^L`.
    LayerwiseDecay { d: f64 },
    /// Fresh weights for the top `n` layers and the pooler.
    ReinitTop { n: usize },
    /// Remove the top `k` layers before fine-tuning.
    PruneTop { k: usize },
    /// Applied left to right; multipliers multiply, freezing wins.
    Compose { steps: Vec<AdaptationStrategy> },
}

impl Default for AdaptationStrategy {
    fn default() -> Self {
        AdaptationStrategy::None
    }
}

impl AdaptationStrategy {
    /// Short stable name, e.g. `layerwise_decay(0.9)`.
    pub fn label(&self) -> String {
        match self {
            AdaptationStrategy::None => "none".into(),
            AdaptationStrategy::LayerFreeze { k, include_embeddings: true } => format!("layer_freeze({k})"),
            AdaptationStrategy::LayerFreeze { k, include_embeddings: false } => {
                format!("layer_freeze({k},keep_embeddings)")
            }
            AdaptationStrategy::LayerwiseDecay { d } => format!("layerwise_decay({d})"),
            AdaptationStrategy::ReinitTop { n } => format!("reinit_top({n})"),
            AdaptationStrategy::PruneTop { k } => format!("prune_top({k})"),
            AdaptationStrategy::Compose { steps } => {
                let parts: Vec<String> = steps.iter().map(|s| s.label()).collect();
                parts.join("+")
            }
        }
    }

    /// Parses the [`AdaptationStrategy::label`] form; `+` composes.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split('+').map(str::trim).collect();
        if parts.len() > 1 {
            let steps = parts.into_iter().map(Self::parse_one).collect::<Result<_>>()?;
            return Ok(AdaptationStrategy::Compose { steps });
        }
        Self::parse_one(parts[0])
    }

    fn parse_one(text: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "cannot parse strategy `{text}` (expected none, layer_freeze(k), layerwise_decay(d), reinit_top(n) or prune_top(k))"
            ))
        };
        if text == "none" {
            return Ok(AdaptationStrategy::None);
        }
        let (name, rest) = text.split_once('(').ok_or_else(bad)?;
        let args: Vec<&str> = rest.strip_suffix(')').ok_or_else(bad)?.split(',').map(str::trim).collect();
        let count = |s: &str| s.parse::<usize>().map_err(|_| bad());
        match (name.trim(), args.as_slice()) {
            ("layer_freeze", [k]) => Ok(AdaptationStrategy::LayerFreeze {
                k: count(k)?,
                include_embeddings: true,
            }),
            ("layer_freeze", [k, "keep_embeddings"]) => Ok(AdaptationStrategy::LayerFreeze {
                k: count(k)?,
                include_embeddings: false,
            }),
            ("layerwise_decay", [d]) => Ok(AdaptationStrategy::LayerwiseDecay {
                d: d.parse().map_err(|_| bad())?,
            }),
            ("reinit_top", [n]) => Ok(AdaptationStrategy::ReinitTop { n: count(n)? }),
            ("prune_top", [k]) => Ok(AdaptationStrategy::PruneTop { k: count(k)? }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for AdaptationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub trainable: bool,
    pub lr_multiplier: f64,
    /// Freshly initialized rather than taken from the checkpoint.
    pub reinit: bool,
}

impl PlanRecord {
    const DEFAULT: PlanRecord = PlanRecord {
        trainable: true,
        lr_multiplier: 1.0,
        reinit: false,
    };
}

/// One record per parameter of encoder and task head, in parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub records: IndexMap<String, PlanRecord>,
}

impl AdaptationPlan {
    pub fn get(&self, name: &str) -> Option<&PlanRecord> {
        self.records.get(name)
    }

    pub fn trainable(&self, name: &str) -> bool {
        self.records.get(name).is_some_and(|r| r.trainable)
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        self.records.get(name).map_or(0.0, |r| r.lr_multiplier)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.records
            .iter()
            .filter(|(_, r)| !r.trainable)
            .map(|(n, _)| n.as_str())
    }
}

/// Turns `strategy` into per-parameter records, performing any model surgery
/// (pruning, re-initialization with `seed`) on a copy of `model`. Task-head
/// parameters are always trainable at multiplier 1.
pub fn compile_plan(
    strategy: &AdaptationStrategy,
    model: &EncoderModel,
    head: &Params,
    seed: u64,
) -> Result<(AdaptationPlan, EncoderModel)> {
    let mut model = model.clone();
    let mut records: IndexMap<String, PlanRecord> = model
        .param_names()
        .map(|n| (n.to_string(), PlanRecord::DEFAULT))
        .collect();
    apply(strategy, &mut model, &mut records, seed)?;
    for name in head.keys() {
        if records.insert(name.clone(), PlanRecord::DEFAULT).is_some() {
            return Err(Error::invalid(format!("head parameter `{name}` collides with an encoder parameter")));
        }
    }
    Ok((AdaptationPlan { records }, model))
}

fn apply(
    strategy: &AdaptationStrategy,
    model: &mut EncoderModel,
    records: &mut IndexMap<String, PlanRecord>,
    seed: u64,
) -> Result<()> {
    let layers = model.config().num_layers;
    match strategy {
        AdaptationStrategy::None => {}
        AdaptationStrategy::LayerFreeze { k, include_embeddings } => {
            if *k > layers {
                return Err(Error::Config(format!("layer_freeze({k}) on a {layers}-layer model")));
            }
            for (name, r) in records.iter_mut() {
                let frozen = match ParamGroup::of(name) {
                    ParamGroup::Embeddings => *include_embeddings,
                    ParamGroup::Layer(i) => i < *k,
                    _ => false,
                };
                if frozen {
                    r.trainable = false;
                    r.lr_multiplier = 0.0;
                }
            }
        }
        AdaptationStrategy::LayerwiseDecay { d } => {
            if !(*d > 0.0 && *d <= 1.0) {
                return Err(Error::Config(format!("layerwise_decay factor must be in (0, 1], got {d}")));
            }
            for (name, r) in records.iter_mut() {
                let depth = match ParamGroup::of(name) {
                    ParamGroup::Embeddings => layers,
                    ParamGroup::Layer(i) => layers - 1 - i,
                    _ => 0,
                };
                // powi multiplies step by step and can land an ulp off the
                // rounded power; powf does not.
                r.lr_multiplier *= d.powf(depth as f64);
            }
        }
        AdaptationStrategy::ReinitTop { n } => {
            if *n == 0 || *n > layers {
                return Err(Error::Config(format!("reinit_top({n}) on a {layers}-layer model")));
            }
            *model = model.reinit_top_layers(*n, seed)?;
            for (name, r) in records.iter_mut() {
                if match ParamGroup::of(name) {
                    ParamGroup::Layer(i) => i >= layers - n,
                    ParamGroup::Pooler => true,
                    _ => false,
                } {
                    r.reinit = true;
                }
            }
        }
        AdaptationStrategy::PruneTop { k } => {
            if *k >= layers {
                return Err(Error::Config(format!("prune_top({k}) on a {layers}-layer model")));
            }
            *model = model.prune_top_layers(*k)?;
            records.retain(|name, _| model.param(name).is_some());
        }
        AdaptationStrategy::Compose { steps } => {
            for (i, s) in steps.iter().enumerate() {
                apply(s, model, records, crate::seed::derive_seed(seed, i as u64))?;
            }
        }
    }
    Ok(())
}
