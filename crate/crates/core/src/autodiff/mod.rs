//! Minimal reverse-mode automatic differentiation over small dense tensors.
//!
//! The tape is rebuilt for every optimisation step. [`Tape::stop_gradient`]
//! passes values through unchanged while contributing nothing to the reverse
//! pass; the meta-learner relies on it to treat the learner's gradient and
//! loss as constants.

mod tape;
mod tensor;

pub use tape::{Gradients, Node, NodeId, Op, Tape, NLL_PROB_FLOOR};
pub use tensor::Tensor;
