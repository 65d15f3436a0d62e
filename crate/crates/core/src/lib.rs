//! Collisionless Vlasov transport on `T^2 x R_+` with a gravity-confined gas,
//! an optional vertical magnetic field or small perturbation potential, and a
//! non-isothermal diffuse-reflection wall.
//!
//! The crate builds stationary solutions through the boundary outgoing flux,
//! evolves signed-weight particle ensembles to measure mixing, and checks the
//! change-of-variable and minorization estimates numerically.

pub mod boundary;
pub mod characteristics;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod fields;
pub mod quadrature;
pub mod rng;
pub mod run;
pub mod stationary;
pub mod stats;
pub mod verification;

pub use error::{Error, Result};
pub use expr::Expr;
pub use fields::{FieldConfig, Regime, TemperatureField};
