//! Random Hierarchy Model laboratory.
//!
//! Sample hierarchical classification tasks, compute their exact and
//! asymptotic correlation statistics, train small networks on them and
//! measure sample complexity and synonymic invariance.

pub mod clustering;
pub mod error;
pub mod grammar;
pub mod harness;
pub mod nn;
pub mod onestep;
pub mod seed;
pub mod sensitivity;
pub mod stats;

pub use error::{Result, RhmError};
pub use grammar::{sample_grammar, sample_uncorrelated_grammar, Dataset, Datum, GrammarInstance, RhmParams, RuleKind};
