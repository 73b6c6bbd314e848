//! Certification of ReLU network robustness against l-infinity input
//! perturbations via a lifted SDP relaxation strengthened with
//! secant-approximated non-convex cuts.
//!
//! The pipeline: [`network`] models the ReLU MLP and the verification
//! instance, [`bounds`] derives sound activation bounds, [`lifted`] builds
//! the SDP relaxation over the lifted variables `(x~, X~)`, [`solver`]
//! solves the resulting conic programs and LPs, [`cuts`] generates valid
//! linear cuts from secant disjunctions through a cut-generating LP, and
//! [`verifier`] runs the sequential strengthen-and-resolve loop that turns
//! all of this into certification decisions. [`geometry`] provides Gram
//! factorization diagnostics of solved relaxations.

pub mod bounds;
pub mod cuts;
pub mod error;
pub mod geometry;
pub mod lifted;
pub mod network;
pub mod par;
pub mod report;
pub mod solver;
pub mod verifier;

pub use error::{Error, Result};
pub use network::{InputBox, Network, SafeSet};
