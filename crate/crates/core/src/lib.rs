//! Truncated Wigner simulation of driven-dissipative Bose-Hubbard chains with
//! n-photon boundary drive.
//!
//! The crate integrates the stochastic Langevin equations of a chain driven at
//! site 1 and lossy at both ends, and turns the resulting phase-space samples
//! into photon statistics, phase order parameters, local Wigner functions,
//! scrambling diagnostics and local thermodynamic fits. A quantum-jump oracle
//! validates the sampler on small chains.

pub mod model;
pub mod engine;
pub mod observables;
pub mod otoc;
pub mod thermofit;
pub mod oracle;
pub mod harness;
mod simplex;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/observables.md")]
    mod observables {}
    #[doc = include_str!("../../../book/src/otoc.md")]
    mod otoc {}
    #[doc = include_str!("../../../book/src/thermofit.md")]
    mod thermofit {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
