//! Fitting a forced, volume-constrained Allen-Cahn phase-field model to
//! snapshots of cell shapes by PDE-constrained optimal control.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod adjoint;
pub mod analysis;
pub mod forward;
pub mod ingest;
pub mod io;
pub mod mesh;
pub mod optimize;
pub mod phase_field;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
