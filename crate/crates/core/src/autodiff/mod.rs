//! Reverse-mode differentiation, feed-forward networks and optimisers.

mod adam;
mod mlp;
mod tape;

pub use adam::{sgd_step, AdamState};
pub use mlp::{Activation, InitScale, LaneBuffers, MlpParams, MlpSpec};
pub use tape::{Gradient, Tape, Var};
