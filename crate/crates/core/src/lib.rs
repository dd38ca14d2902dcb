//! Temporal-style-modulated inversion video generation at desk scale.
//!
//! A frozen style-based image decoder renders every frame. Motion comes from
//! an inversion encoder that maps the first frame to a latent residual while
//! being modulated by a temporal style derived from a first-frame-aware
//! acyclic positional encoding. All networks are generic over [`Scalar`];
//! training runs in `f32`, gradient checks in `f64`.

pub mod ape;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod discriminator;
pub mod dual;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generate;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod style;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type DecoderF32 = decoder::LatentDecoder<f32>;
pub type DecoderF64 = decoder::LatentDecoder<f64>;
pub type StyleInvF32 = encoder::StyleInv<f32>;
pub type StyleInvF64 = encoder::StyleInv<f64>;
pub type InversionEncoderF32 = encoder::InversionEncoder<f32>;
pub type InversionEncoderF64 = encoder::InversionEncoder<f64>;
