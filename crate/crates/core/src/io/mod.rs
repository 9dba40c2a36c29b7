pub mod ply;
pub mod png;
pub mod scene;
pub mod weights;
