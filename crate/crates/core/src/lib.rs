//! Physics-informed neural networks trained by natural evolution strategies,
//! with transfer of experiential priors between related problems.

pub mod adam;
pub mod error;
pub mod harness;
pub mod jet;
pub mod network;
pub mod objective;
pub mod priors;
pub mod problems;
pub mod seeding;
pub mod transfer;
pub mod xnes;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/jets.md")]
    mod jets {}
    #[doc = include_str!("../../../book/src/pinn.md")]
    mod pinn {}
    #[doc = include_str!("../../../book/src/xnes.md")]
    mod xnes {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
