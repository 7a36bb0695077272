//! A desk-scale laboratory for neural language-model output layers.
pub mod autograd;
pub mod cnf;
pub mod data;
pub mod error;
pub mod heads;
pub mod nn;
pub mod ode;
pub mod rank;
pub mod sampling;
pub mod selfcheck;
pub mod train;

pub use autograd::{Tape, Tensor, Var};
pub use error::{Error, Result};
