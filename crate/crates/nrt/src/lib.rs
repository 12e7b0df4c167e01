//! No-response test for locating a cavity in a 2D heat conductor.
//!
//! Space-time fields on a boundary are stored time-major: the value at node
//! `j` and time cell `k` lives at index `k * n_nodes + j`. Operators are
//! therefore block matrices with one block per pair of time cells.

// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Quadrature loops index several arrays with the same node index.
#![allow(clippy::needless_range_loop)]

pub mod boundary_operators;
pub mod cli_io;
pub mod error;
pub mod extension_probe;
pub mod forward_solver;
pub mod geometry;
pub mod heat_kernel;
pub mod layers;
pub mod linalg;
pub mod nrt_indicator;
pub mod par;
pub mod scan_recon;
pub mod special;

pub use error::{NrtError, Result};
pub use geometry::Point;
