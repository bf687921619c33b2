//! Contrastive disentangling toolkit.
//!
//! A shared encoder feeds an instance projector and a sigmoid feature
//! predictor. Training minimizes an instance-level NT-Xent loss over the
//! projected batch plus a feature-level NT-Xent loss over the transposed
//! prediction matrix, minus a normalized binary entropy bonus that keeps
//! feature heads from collapsing. Representations are scored by K-means
//! clustering against held-out labels (NMI, ARI, ACC).
//!
//! The numeric stack ([`Tensor`], [`Tape`], [`nn`], [`losses`]) is generic
//! over [`Scalar`]; training, checkpoints and the CLI run in `f64`.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, ImageGeom, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = nn::CdModel<f64>;
pub type Model32 = nn::CdModel<f32>;
pub type LossBreakdown64 = losses::LossBreakdown<f64>;
