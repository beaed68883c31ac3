//! Pure algorithms behind a semi-supervised, cross-modality vessel
//! segmentation framework: a style-based generator/discriminator pair, a
//! label-conditioned encoder that inverts the generator for reconstruction
//! and domain translation, a pointwise label-synthesis head, plus the
//! surrounding image processing (phantom synthesis, preprocessing, Hessian
//! vesselness) and evaluation metrics.
//!
//! The crate is `no_std` with `alloc`. The default `std` feature only enables
//! runtime CPU feature detection in the GEMM backend and `std` math.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod data;
pub mod domain;
pub mod error;
pub mod image;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod optim;
pub mod phase1;
pub mod phase2;
pub mod preproc;
pub mod rng;
pub mod sato;
pub mod scalar;
pub mod synthgen;
pub mod tensor;

pub use domain::DomainLabel;
pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;
