pub mod controller;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod modelbuilder;
pub mod orchestrator;
pub mod searchspace;
pub mod tensorkit;
pub mod trainer;
pub mod weightcache;

pub use error::{Error, Result};

/// Guide chapters, compiled as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/search-space.md")]
    mod search_space {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/controller.md")]
    mod controller {}
    #[doc = include_str!("../../../book/src/weight-sharing.md")]
    mod weight_sharing {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
