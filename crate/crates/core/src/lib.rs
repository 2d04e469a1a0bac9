//! Random-order degradation pre-training, integrated-gradient layer attribution
//! and contribution-based low-rank adaptation for a miniature image restoration
//! network.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autograd`]: dense tensors and a reverse-mode tape.
//! * [`degrade`]: parameterized degradations and replayable random recipes.
//! * [`net`] and [`checkpoint`]: the U-shaped restoration network and its file format.
//! * [`faig`]: layer attribution by integrated gradients between two checkpoints.
//! * [`colora`]: stage-wise rank planning, adapters, and merging.
//! * [`harness`]: optimizers, schedules, metrics, training and evaluation.

pub mod autograd;
pub mod checkpoint;
pub mod colora;
pub mod degrade;
pub mod error;
pub mod faig;
pub mod harness;
pub mod net;
pub mod tensor;

pub use error::{Error, Result};
pub use checkpoint::Checkpoint;
pub use net::{LayerId, ModelSpec, Stage};
pub use tensor::{Real, Tensor};
