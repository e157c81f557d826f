pub mod adaptation;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod delta;
pub mod error;
pub mod eval;
pub mod evolution;
pub mod model;
pub mod optim;
pub mod pruner;
pub mod topk;
pub mod train;

pub use error::{Error, Result};
