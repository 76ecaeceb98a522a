//! Communication-efficient distributed training with learned global optimizers.

pub mod adam;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod desk;
pub mod error;
pub mod features;
pub mod global_opt;
pub mod local_sim;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{ArchKind, ArchSpec, Batch};
pub use rng::RngStream;
pub use tensor::{ModelParams, Tensor};
