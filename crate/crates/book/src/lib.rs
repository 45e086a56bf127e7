//! Compiles and runs every listing of the guide in `book/src` as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/features.md")]
pub mod features {}
#[doc = include_str!("../../../book/src/autograd.md")]
pub mod autograd {}
#[doc = include_str!("../../../book/src/encoder.md")]
pub mod encoder {}
#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../../book/src/scoring.md")]
pub mod scoring {}
#[doc = include_str!("../../../book/src/corpus.md")]
pub mod corpus {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
