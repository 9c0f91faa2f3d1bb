//! Simulation and analysis toolkit for NV-center temperature sensing.
//!
//! The crate models the full measurement chain of a CW-ODMR diamond
//! thermometer operated in two modes:
//!
//! * **Zero-field (ZFS) mode** — no bias field, the resonance is split only
//!   by the transverse strain parameter `E` and must be fitted with a
//!   two-cumulative Lorentzian.
//! * **Zeeman mode** — a bias field along the [111] crystal direction splits
//!   the four NV orientations into two pairs of resonances; the outer pair
//!   belongs to a single axis and its midpoint tracks the axial zero-field
//!   splitting `D` while being first-order immune to field fluctuations.
//!
//! Module layout follows the processing chain:
//!
//! 1. [`spin`] — ground-state spin Hamiltonian per NV axis, exact eigenvalues
//!    and the linear Zeeman approximation of the transition frequencies.
//! 2. [`lineshape`] — synthesis of normalized fluorescence spectra (Lorentzian
//!    dips on a unit baseline) with seeded Gaussian noise.
//! 3. [`fitting`] — peak detection and damped nonlinear least-squares fitting
//!    of N-cumulative Lorentzian models with covariance reporting.
//! 4. [`calibration`] — extraction of `D` from fitted spectra, the linear
//!    `D`–`T` calibration and its inversion for thermometry.
//! 5. [`sensitivity`] — scale factors from fitted lineshapes, Welch power
//!    spectral density and the temperature sensitivity spectrum η(f).
//! 6. [`config`], [`io`], [`pipeline`] — run configuration, CSV ingestion and
//!    the end-to-end simulate → fit → calibrate → sense orchestration.

pub mod calibration;
pub mod config;
pub mod fitting;
pub mod io;
pub mod lineshape;
pub mod pipeline;
pub mod sensitivity;
pub mod spin;

pub use calibration::{CalibrationFit, CalibrationRecord, DExtraction, ExtractionMode};
pub use config::RunConfig;
pub use fitting::{FitModel, FitOptions, FitResult};
pub use lineshape::{LorentzianPeak, Spectrum};
pub use pipeline::{run_pipeline, PipelineReport};
pub use sensitivity::{PsdEstimate, ScaleFactor, SensitivityReport, TimeSeries};
pub use spin::{NVAxisSet, SpinParams, TransitionPair};
