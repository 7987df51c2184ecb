//! Online class-incremental continual learning with experience replay and
//! feature-level regularizers.

pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

mod container;

pub use error::{Error, Result};

/// Tasks are numbered from 1 in stream order.
pub type TaskId = u32;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/kisp.md")]
    mod kisp {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
