//! Berezin integration on supermanifolds with corners.
//!
//! The crate computes Berezin integrals of densities and forms on
//! superdomains, the boundary corrections produced by a change of retraction,
//! and the boundary terms of the super Stokes theorem.

pub mod berezin;
pub mod chart;
pub mod corners;
pub mod error;
pub mod expr;
pub mod grassmann;
pub mod parse;
pub mod quadrature;
pub mod scenario;
pub mod stokes;

pub use error::{Error, Result};
pub use expr::{Expr, Point};
pub use grassmann::{Parity, SuperNumber};
