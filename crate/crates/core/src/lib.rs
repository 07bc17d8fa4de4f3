//! Memory-attention-composition (MAC) reasoning networks built on a small
//! reverse-mode autodiff engine, together with a synthetic grid-world
//! question-answering task to train and probe them on.

pub mod gridworld;
pub mod harness;
pub mod mac;
pub mod data;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use tensor::{Gradients, Tape, Tensor, TensorError, Var};
