//! Decoder-only toy language model, byte tokenizer, decoding and training.

mod decode;
mod model;
pub mod tokenizer;
mod train;

pub use decode::{DecodeMode, DecodingConfig};
pub use model::{HiddenTrace, LmConfig, LmInput, TapeTrace, ToyLm};
pub use tokenizer::TokenSeq;
pub use train::{train_lm, LossMask, TrainConfig, TrainExample, TrainReport};
