//! Two-stage semi-supervised semantic segmentation with an error
//! localization network (ELN).
//!
//! Stage 1 trains a segmentation network together with deliberately weaker
//! auxiliary decoders and an ELN that learns where predictions are wrong.
//! Stage 2 runs mean-teacher training on unlabeled images, using the ELN's
//! rounded validity mask to drop unreliable pseudo labels from both the
//! self-training and the pixel contrastive loss.

pub mod checkpoint;
pub mod datagen;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod networks;
pub mod rng;
pub mod training;

mod error;

pub use error::{Error, Result};
