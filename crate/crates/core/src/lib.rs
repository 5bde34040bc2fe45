//! Adaptive multidimensional assessment: graded-response IRT, calibration,
//! factor-structure discovery, embedding regression, D-optimal sessions and
//! simulation.

pub mod adaptive;
pub mod calibration;
pub mod catalog;
pub mod data;
pub mod efa;
pub mod error;
pub mod evaluation;
pub mod fixture;
pub mod grm;
pub mod langmodel;
pub mod linalg;
pub mod quadrature;
pub mod synth;

pub use error::{Error, Result};
