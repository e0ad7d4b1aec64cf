pub mod baselines;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod io;
pub mod linalg;
pub mod nnet;
pub mod series;
pub mod simgen;
pub mod train;

pub use error::{Error, Result};
