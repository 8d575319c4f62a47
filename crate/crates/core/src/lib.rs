//! Teachers trained alongside student branches, knowledge distillation
//! back-ends, similarity metrics and the experiment pipeline, built on
//! `sftn-tensor`.

pub mod arch;
pub mod blocknet;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod sftn;
pub mod trainer;

pub use error::{CoreError, Result};
