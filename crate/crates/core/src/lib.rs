//! Numerical toolkit for studying when the Girsanov log-density exponent of a
//! degenerate SDE is a function of the path endpoints alone.
//!
//! The library is organised around a pipeline:
//!
//! | module         | role                                                              |
//! |----------------|-------------------------------------------------------------------|
//! | [`model`]      | SDE coefficient bundles, built-in examples, hypothesis probes      |
//! | [`fields`]     | scalar fields `v(t, x)`, derivatives (analytic or FD), transforms  |
//! | [`simulate`]   | Euler-Maruyama paths, jump thinning, reproducible RNG streams      |
//! | [`girsanov`]   | exponent ledgers `Y_t`, densities `Z_t`, exponential moment probes |
//! | [`characterize`] | pointwise residuals of the characterizing PDE/PIDE systems       |
//! | [`verify`]     | Monte Carlo experiments tying simulation to characterization       |
//!
//! Everything is deterministic given a seed: paths are driven by per-path
//! counter-derived RNG streams, and parallel reductions aggregate in path-index
//! order, so results are bit-identical across platforms and worker counts.

pub mod characterize;
pub mod error;
pub mod fields;
pub mod girsanov;
pub mod linalg;
pub mod model;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};
