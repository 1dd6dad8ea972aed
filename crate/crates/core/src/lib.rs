//! Memory-keyed attention (MKA) on the CPU.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major tensors, matmul, stable softmax, head reshapes.
//! - [`memory`]: the three memory levels (local tokens, causal summary,
//!   hashed long-term chunk store) and the chunk-store snapshot format.
//! - [`routing`]: the per-token routing gate over memory levels.
//! - [`engines`]: reference causal MHA, symbolic MKA, route-fused MKA with a
//!   fused-KV cache, the gated-mixture family and blockwise MKA.
//! - [`diffcheck`]: analytic gradients and a central finite-difference oracle.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Double precision is
//! the reference precision used by the equivalence checks.

pub mod diffcheck;
pub mod engines;
pub mod error;
pub mod memory;
pub mod routing;
pub mod scalar;
pub mod tensor;

pub use error::{MkaError, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{ModelDims, Tensor};
