//! The micro language model: tokenizer, transformer, sampling, training and
//! checkpoints.

mod checkpoint;
pub mod linalg;
mod model;
mod sample;
pub mod tokenizer;
mod train;

pub use checkpoint::{fingerprint, load_checkpoint, save_checkpoint, Checkpoint, Lineage};
pub use model::{DecodeState, ForwardCache, MicroLm, ModelConfig};
pub use sample::{sample, Generation, SampleParams};
pub use tokenizer::{TokenId, Tokenizer};
pub use train::{train, LossKind, OptimizerKind, Schedule, TrainConfig, TrainReport};
pub(crate) use train::{prepare, BatchSampler, Optimizer};
