//! Knowledge distillation from a large teacher classifier into a lightweight
//! student using three kinds of knowledge: temperature-softened logits,
//! inter-instance embedding relations, and intra-instance channel relations,
//! optionally extended with a self-supervised transfer term.

pub mod cli;
pub mod data;
pub mod error;
pub mod explain;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod relations;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
