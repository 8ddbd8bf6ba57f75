//! Deterministic Monte Carlo simulation of twin-photon (SPDC) detector
//! calibration experiments, together with the full estimator stack: the
//! coincidence method, the conditional-polarization-rotation method, and the
//! analog-correlation method.
//!
//! The crate is organized along the experiment chain:
//!
//! - [`timebase`]: picosecond timestamps, reproducible random streams,
//!   Poisson event generation.
//! - [`source`]: SPDC pair generation for Type I / Type II phase matching.
//! - [`optics`]: loss elements, polarizers, polarizing beam splitter, fiber
//!   delay, and the triggered Pockels cell.
//! - [`detection`]: photon-counting detectors (efficiency, dark counts,
//!   jitter, non-paralyzable dead time) and analog photocurrent traces.
//! - [`electronics`]: the TAC+MCA+SCA chain, the time interval counter, and
//!   the AND gate, plus accidental/background estimation.
//! - [`estimators`]: efficiency estimators and correction factors. These see
//!   only blind click/count data, never ground truth.
//! - [`scenario`] / [`runner`]: configuration, end-to-end orchestration,
//!   multi-trial statistics.
//! - [`report`]: report records and CSV sidecar formats.

// Negated comparisons like `!(x > 0.0)` are used on purpose: they reject
// NaN along with the out-of-range values. Index loops stay in the small
// dense matrix routines where they mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod detection;
pub mod electronics;
pub mod error;
pub mod estimators;
pub mod optics;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod source;
pub mod timebase;

pub use error::{Error, Result};
pub use timebase::{Duration, RandomStream, TimeStamp};
