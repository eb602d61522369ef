//! Search loop, evaluators, the four-phase pipeline and log replay.

mod evaluators;
mod pipeline;
mod replay;
mod search;

pub use evaluators::*;
pub use pipeline::*;
pub use replay::*;
pub use search::*;
