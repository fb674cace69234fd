//! Model, loss and analysis core for self-supervised monocular depth
//! estimation with a hybrid CNN-Transformer encoder.
//!
//! The crate is `no_std` (with `alloc`) so the numerical pieces can be reused
//! anywhere; file formats, dataset IO and the command line live in the
//! `monoformer` companion crate.
//!
//! Layout:
//!
//! * [`autograd`]: a tape-based reverse-mode differentiator over [`Tensor`]s.
//! * [`networks`]: the CNN stem, patch embedding, transformer layers and the
//!   pose network.
//! * [`acm_ffd`]: position/channel attention, the feature fusion decoder and
//!   the disparity head.
//! * [`geometry`] and [`losses`]: differentiable view synthesis and the
//!   self-supervised objective.
//! * [`texture`], [`cka`], [`metrics`]: the generality-analysis toolkit.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod acm_ffd;
pub mod autograd;
pub mod camera;
pub mod cka;
mod error;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod networks;
pub mod optim;
pub mod params;
pub mod sample;
pub mod synthetic;
mod tensor;
pub mod texture;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
