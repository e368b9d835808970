//! Gradient-based data selection for finetuning: influence scoring against a
//! trusted seed set under a Kronecker-factored curvature, followed by
//! diversity resampling over clustered gradient features.

pub mod cli;
pub mod curvature;
pub mod error;
pub mod finetune;
pub mod gradfeat;
pub mod influence;
pub mod numkit;
pub mod oracle;
pub mod select;
pub mod toylm;

pub use error::{Error, Result};
