//! Explain-away fusion and counterfactual inference for debiasing
//! three-branch (question, vision, multimodal) classifiers.
//!
//! - [`fusion`]: fusion functions `h(Z_q, Z_v, Z_k)` and their partials.
//! - [`causal`]: counterfactual realization, TE/NDE/TIE, TIE inference.
//! - [`model`]: tanh MLP encoders, losses, SGD training, checkpoints.
//! - [`datagen`]: confounded synthetic benchmark with shifted test priors,
//!   plus the JSON-lines dataset and logits formats.
//! - [`metrics`]: per-question-type accuracy and JS divergence.
//! - [`cli`]: the `pwvqa` command-line harness.

/// `Display` and `FromStr` through the type's `ALL` table and `name()`.
macro_rules! impl_named {
    ($ty:ty, $what:literal) => {
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }

        impl std::str::FromStr for $ty {
            type Err = crate::error::Error;

            fn from_str(s: &str) -> crate::error::Result<Self> {
                <$ty>::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
                    let names: Vec<_> = <$ty>::ALL.iter().map(|x| x.name()).collect();
                    crate::error::Error::Config(format!(
                        "unknown {} {s:?}; expected one of {}",
                        $what,
                        names.join(", ")
                    ))
                })
            }
        }
    };
}

pub mod causal;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod fusion;
pub mod jsonl;
pub mod logits;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
pub use logits::{BranchLogits, Logits};
