//! Dense and sparse matrices, a reverse-mode tape, and Adam.

mod adam;
pub mod func;
pub mod gradcheck;
mod matrix;
mod sparse;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use func::{cosine_sim, cross_entropy, kl_div, softmax_rows, softplus};
pub use matrix::{argmax, Matrix};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Segment, Tape, Target, Var};
