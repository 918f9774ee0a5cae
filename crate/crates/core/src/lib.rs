//! Model-based adversarial imitation from pixels with a world model whose
//! latent state is split into a task part and a background part.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agent;
pub mod buffer;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod discriminator;
pub mod env;
pub mod episode;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod trainer;
pub mod viz;
pub mod world_model;

pub use error::{Error, Result};
