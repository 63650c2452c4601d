#![no_std]
extern crate alloc;

pub mod correlation;
pub mod cscl;
pub mod datagen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numkit;
pub mod trainer;

pub use datagen::{Dataset, GenConfig, LabelMatrix, PredictionLog, SimilarityBlock};
pub use error::{Error, Result};
pub use numkit::{Mat, Seed};
