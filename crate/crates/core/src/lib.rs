pub mod ablation;
pub mod anchors;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod selection;
pub mod targets;
pub mod train;

pub use error::{Error, Result};
