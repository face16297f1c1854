//! Layers, losses, initialization and the Adam optimizer.
//!
//! The reversed-gradient layer itself is a tape primitive
//! ([`Tape::grl`](crate::Tape::grl)); [`grl`] re-exports it under the name
//! the model code uses.

mod adam;
mod init;
mod layers;
mod loss;

pub use adam::{AdamConfig, AdamState};
pub use init::{init_layer, init_params};
pub use layers::{Activation, Layer, LayerKind, LayerSpec};
pub use loss::{bce, dice_macro, mae, BCE_CLAMP, DICE_SMOOTH};

use crate::autodiff::{Tape, Var};

/// Reversed-gradient layer: identity forward, gradient times −1 backward.
pub fn grl(tape: &mut Tape, x: Var) -> Var {
    tape.grl(x)
}

#[cfg(test)]
mod tests;
