pub mod checkpoint;
pub mod config;
pub mod error;
pub mod ingest;
pub mod loss;
pub mod memory;
pub mod model;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod report;
pub mod score;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/own-data.md")]
    mod own_data {}
}
