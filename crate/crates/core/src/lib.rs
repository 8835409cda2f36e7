//! Exponential family networks: normalizing flows whose parameters are
//! produced from natural parameters by a second network, trained to
//! approximate every member of an exponential family at once.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod families;
pub mod flows;
pub mod param_net;
pub mod program;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
