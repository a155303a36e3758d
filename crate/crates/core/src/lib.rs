//! Knowledge injection into a frozen toy language model through a single
//! projected continuous token, with training-free prototype routing across
//! domains.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod expert;
pub mod injection;
pub mod lm;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;
pub mod router;
pub mod server;
pub mod synth;
pub mod system;
pub mod template;

pub use error::{GagError, Result};
