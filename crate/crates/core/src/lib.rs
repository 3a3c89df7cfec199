//! Training and evaluation stack for atypical-mitosis classification:
//! a small tensor engine with reverse-mode autodiff, a LoRA-adapted vision
//! transformer, stain normalization and histology augmentations, and the
//! data/optimizer/metrics plumbing to train and evaluate end to end on CPU.

pub mod augment;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod stain;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
