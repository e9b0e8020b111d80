//! Nash–Moser/KAM construction of response solutions for the forced
//! quasi-linear Airy equation on a truncated Fourier lattice.

pub mod analytic;
pub mod cli;
pub mod config;
pub mod conjugation;
pub mod error;
pub mod grid;
pub mod homological;
pub mod lattice;
pub mod nashmoser;
pub mod opalg;
pub mod reducibility;
pub mod smalldiv;

pub use error::{Error, Result};
