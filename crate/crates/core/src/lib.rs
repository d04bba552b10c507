//! Subject-constrained knowledge editing on a toy transformer.

pub mod analysis;
pub mod config;
pub mod error;
pub mod eval;
pub mod facts;
pub mod keyspace;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod residual;
pub mod sweep;
pub mod train;
pub mod updater;

pub use error::{Error, Result};
