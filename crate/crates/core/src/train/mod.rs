//! Training stages over the Gaussian field and the 2D networks.

pub mod losses;
pub mod stages;
pub mod synth;
