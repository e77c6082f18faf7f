//! Hierarchical meta-reinforcement learning on planar manipulation tasks:
//! networks and optimizers, environments, hierarchy mechanics, latent task
//! inference, replay, training orchestration and run artifacts.

pub mod actor_critic;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod env;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod meta_train;
pub mod nets;
pub mod replay;
pub mod report;

pub use config::{RunConfig, Variant};
pub use error::{Error, Result};
pub use meta_train::{Learner, Trainer};
