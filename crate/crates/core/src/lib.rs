//! Decomposed object reconstruction with compositional neural implicit
//! fields: a foreground SDF field and a background density field trained
//! jointly under point-wise max composition, supervised by RGB plus
//! binary and cluster masks derived from dense image descriptors.

pub mod diffcore;
pub mod fields;
pub mod geometry;
pub mod maskgen;
pub mod rendering;
pub mod scenes;
pub mod supervision;
pub mod error;

pub use error::{Error, Result};
