//! A desk-scale laboratory for studying fine-tuning stability of BERT-style
//! encoders: subword vocabularies, a reverse-mode tensor engine, encoder
//! surgery, MLM/NSP/ELECTRA pretraining, layer-specific adaptation strategies
//! and multi-seed stability benchmarks on synthetic low-resource tasks.

pub mod encoder;
pub mod error;
pub mod finetune;
mod float_text;
pub mod optim;
pub mod pretraining;
pub mod seed;
pub mod stability;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
