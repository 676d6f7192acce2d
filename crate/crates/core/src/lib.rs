//! Certified inner approximations of the steady-state security region of
//! AC power networks.
//!
//! The power flow is written in admittance form around a solved base point
//! as a fixed-point problem `x = J⁻¹ R u + φ(x)`. A pair of boxes
//! `(ℓ_x, ℓ_u)` that satisfies the self-mapping condition certifies, via
//! Brouwer's theorem, that every input in the `ℓ_u` box has a power flow
//! solution inside the `ℓ_x` box which also meets the operational limits.
//!
//! Typical use:
//!
//! ```no_run
//! use secregion::{network::parse_matpower, setup::{Setup, Study}, certifier::{maximize, Objective, SearchOptions}};
//!
//! let net = parse_matpower(&std::fs::read_to_string("cases/case9.m").unwrap()).unwrap();
//! let setup = Setup::screening(&net);
//! let study = Study::prepare(net, &setup).unwrap();
//! let cert = maximize(&study, &Objective::robustness_free(&study), &SearchOptions::default()).unwrap();
//! println!("lambda = {}", cert.value);
//! ```

pub mod bounds;
pub mod certifier;
pub mod error;
pub mod linalg;
pub mod model;
pub mod network;
pub mod powerflow;
pub mod setup;
pub mod validator;

pub use error::{Error, Result};
