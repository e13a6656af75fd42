//! Desk-scale numerics for the random tensor product covariance model.
//!
//! Columns of the data matrix are built from `n` i.i.d. symmetric scalars by
//! taking every product over a `d`-subset of indices, so the feature dimension
//! is `N = C(n, d)`. The crate samples such matrices, computes their empirical
//! spectra with an in-repo symmetric eigensolver, and compares them against
//! Marchenko–Pastur laws (closed form for isotropic populations, a damped
//! fixed-point solver for anisotropic ones). It also evaluates the exact
//! variance and moment combinatorics of the model and checks the resolvent
//! identities the limiting theory rests on, instance by instance.
//!
//! Module map:
//!
//! - [`tensor_model`]: subset indexing, scalar laws, column and matrix sampling
//! - [`eigensolve`]: covariance, eigenvalues, empirical spectra, resolvents
//! - [`mp_law`]: Marchenko–Pastur density, CDF, moments, Stieltjes transform
//! - [`general_mp`]: fixed-point equation for discrete population spectra
//! - [`moments`]: norm variance formula and bounds, tensor moments
//! - [`identities`]: numerical checks of resolvent and rank-one identities
//! - [`metrics`]: KS distance, spectral moments, histograms
//! - [`experiments`]: batch runners behind the `rtp-lab` binary

pub mod eigensolve;
pub mod error;
pub mod experiments;
pub mod general_mp;
pub mod identities;
pub mod matrix;
pub mod metrics;
pub mod moments;
pub mod mp_law;
pub mod numeric;
pub mod tensor_model;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use numeric::ComplexValue;

/// Version string echoed into every JSON output.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
