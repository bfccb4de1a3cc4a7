//! Measurement-chain toolkit for single-photon detector efficiency
//! metrology.
//!
//! The crate covers the full desk-scale workflow:
//!
//! - [`uncertainty`]: first-order error propagation with shared base
//!   variables, so correlated quantities cancel exactly.
//! - [`nonlin`]: power-meter nonlinearity calibration (per-range
//!   polynomials, shared step transmission, range discontinuity factors).
//! - [`instrument`]: optical-switch ratio and attenuator calibration.
//! - [`sde`]: detection-efficiency estimation from count scans, photon-rate
//!   arithmetic, and dead-time pile-up bounds.
//! - [`polarization`] and [`stability`]: polarization-sweep sensitivity and
//!   Allan-deviation source-stability analysis.
//! - [`sim`]: a deterministic virtual laboratory that executes the
//!   acquisition procedures against configurable ground truth; it is the
//!   oracle for the integration and acceptance tests.
//! - [`session`]: the on-disk session formats (CSV + JSON) shared by the
//!   simulator, the analyses, and the command-line tool.
//!
//! Each major capability has a runnable example under `examples/`.

pub mod error;
pub mod instrument;
pub mod nonlin;
pub mod polarization;
pub mod report;
pub mod sde;
pub mod session;
pub mod sim;
pub mod stability;
pub mod stats;
pub mod uncertainty;

pub use error::{Error, Result};
pub use uncertainty::UncertainValue;
