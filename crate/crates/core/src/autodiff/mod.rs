//! Minimal reverse-mode autodiff over dense [`crate::grid::Grid`] values:
//! just the ops the 2D networks need, plus Adam.

mod adam;
pub(crate) mod ops;
mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{NodeId, Tape};
