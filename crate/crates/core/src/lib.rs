//! Adaptive shields for controllers acting in stochastic environments whose
//! dynamics are learned and may change over time.
//!
//! The guide in `book/` walks through the modules in order; its code
//! listings run as doc-tests of this crate.

pub mod abstraction;
pub mod config;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod mdp;
pub mod shield;
pub mod solver;
pub mod traffic;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/abstraction.md")]
    mod abstraction {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/runtime.md")]
    mod runtime {}
    #[doc = include_str!("../../../book/src/traffic.md")]
    mod traffic {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
