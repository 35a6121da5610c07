//! Desk-scale laboratory for studying how rotation- and scale-equivariant
//! convolutions affect adversarial robustness: tensor engine with reverse-mode
//! autodiff, P4/scale equivariant layers, a small model zoo, FGSM/PGD attacks,
//! CLEVER-style certification, corruption benchmarking, and training.

pub mod attacks;
pub mod certify;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod report;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Padding, Tensor, Var};
