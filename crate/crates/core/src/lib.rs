//! Masked latent prediction pretraining with a distance-weighted dense
//! context loss and multi-level (deep) self-supervision, together with the
//! frozen-backbone evaluations used to measure dense and global feature
//! quality.

pub mod ablation;
pub mod data;
pub mod dense_eval;
pub mod error;
pub mod masking;
pub mod model;
pub mod objective;
pub mod probes;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
