//! One-to-many image super-resolution.
//!
//! A generator maps a low-resolution image and a noise vector to a
//! high-resolution image and its gradient-magnitude map: the zero vector
//! reconstructs the original, nonzero vectors hallucinate diverse
//! alternatives that still downscale back to the input. Two multi-scale
//! discriminators (one per domain), a diversity objective on the gradient
//! maps, and a quantized consistency map conditioning the image
//! discriminator provide the training pressure.
//!
//! Everything runs on the CPU over a small deterministic autodiff engine;
//! training runs are reproducible to the byte and checkpoints round-trip
//! bit-exactly. The `hallucsr` binary exposes `train`, `eval`, and
//! `hallucinate`. The `book/` directory of the repository walks through the
//! concepts chapter by chapter; its code snippets compile and run as this
//! crate's doctests.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod imagecore;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// The guide's code blocks, compiled and executed with the test suite.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/image-primitives.md")]
    mod image_primitives {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
