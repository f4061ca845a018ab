//! Intra-camera supervised person re-identification.
//!
//! Identity labels are annotated independently in every camera. A shared
//! encoder is trained with one classifier head per camera, identities are
//! linked across cameras by cyclic agreement of the heads' predictions under
//! an annealed threshold, and the links become extra labels in a multi-label
//! loss.
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled and run as doctests of this crate.

pub mod assoc;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod net;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

// Each guide chapter becomes a module so a failing listing points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/multitask.md")]
    mod multitask {}
    #[doc = include_str!("../../../book/src/association.md")]
    mod association {}
    #[doc = include_str!("../../../book/src/curriculum.md")]
    mod curriculum {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
