pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod image_io;
pub mod latent;
pub mod metrics;
pub mod model;
mod ops;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/latents.md")]
    mod latents {}
    #[doc = include_str!("../../../book/src/periodic.md")]
    mod periodic {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
