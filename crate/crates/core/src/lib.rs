//! Generative state-space tracking of a variable number of objects in image sequences.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod prob;
pub mod air;
pub mod checkpoint;
pub mod find;
pub mod model;
pub mod mot;
pub mod rect;
pub mod schedule;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
