//! Data-free spectral analysis of LoRA adapters.
//!
//! Each layer update `ΔW = A·B` is decomposed with a magnitude-aware,
//! spherically normalized robust SVD ([`mas_svd`]), scored by its spectral
//! sharpness index ([`ssi`]), and the sharpest layers can be pruned by zeroing
//! their LoRA factors in the checkpoint ([`adapter`]).
//!
//! The numeric kernels are generic over [`Scalar`] (`f32`/`f64`); the
//! aliases below fix the working precision used by the checkpoint pipeline.

pub mod adapter;
pub mod linalg;
pub mod mas_svd;
pub mod scalar;
pub mod ssi;

pub use adapter::{AdapterBundle, LayerId, Projection};
pub use linalg::{LinalgError, Matrix, SvdTriple};
pub use mas_svd::{mas_svd, MasSvdConfig, SpectralResult};
pub use scalar::Scalar;

/// Working-precision matrix used by the checkpoint pipeline.
pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type SvdTriple64 = SvdTriple<f64>;
pub type SvdTriple32 = SvdTriple<f32>;
pub type SpectralResult64 = SpectralResult<f64>;
