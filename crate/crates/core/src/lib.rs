//! Knowledge distillation from a geometry-aware teacher into an RGB-only
//! student.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`], [`rng`], [`checkpoint`]: the dense
//!   numeric substrate with reverse-mode gradients.
//! * [`logit`]: classic KD, the target/non-target decomposition, DKD and the
//!   logit-wise weighted loss.
//! * [`dwc`]: the dynamic weight controller producing per-logit NCLD weights.
//! * [`feature`]: feature alignment, kernel recalibration and CKA.
//! * [`harness`]: synthetic RGB-D scenes, toy teacher/student networks,
//!   training loops and segmentation metrics.
//! * [`verify`]: the property suite behind `lix verify`.

pub mod checkpoint;
pub mod dwc;
pub mod error;
pub mod feature;
pub mod gradcheck;
pub mod harness;
pub mod logit;
mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
