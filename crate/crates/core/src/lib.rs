//! Online test-time adaptation of batch-normalized classifiers.
//!
//! The crate provides the weak-confidence, balanced-categories and
//! low-saturation losses with analytic logit gradients ([`losses`]), a small
//! batch-normalized network with an exact backward pass ([`network`]), an
//! engine that adapts only the batch-norm scale and shift on an unlabeled
//! stream ([`adaptation`]), a seeded covariate-shift benchmark
//! ([`benchgen`]), and experiment orchestration ([`harness`]).

pub mod adaptation;
pub mod benchgen;
pub mod error;
pub mod harness;
pub mod losses;
pub mod matrix;
pub mod network;
pub mod optim;
pub mod prob;

pub use adaptation::{run_episode, Engine, EpisodeResult, LossChoice, TTAConfig};
pub use benchgen::{gen_task, LabeledSet, ShiftSpec, SyntheticTaskSpec, TargetStream, TrainConfig};
pub use error::{Error, Result};
pub use losses::{LossEval, LossWeights, Objective};
pub use matrix::Matrix;
pub use network::{ArchSpec, Network, NormMode, ParamMask};
pub use prob::{Logits, ProbVector};
