//! Skill Decision Transformer: unsupervised skill discovery from offline
//! trajectories with a vector-quantized state encoder, hindsight skill
//! histograms and a causal transformer policy.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod evaluator;
pub mod kmeans;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod quantizer;
pub mod relabel;
pub mod sdt;
pub mod smm;
pub mod tensor;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
