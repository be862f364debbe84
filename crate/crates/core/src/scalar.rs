//! Scalar abstraction for the numeric core.
//!
//! Everything under `graph`/`vit`/`policy` is written against [`Scalar`]
//! so the same code runs in `f64` (default, used for all gradient
//! verification) or `f32` (optional, for speed).

use std::fmt::{Debug, Display};

/// Floating-point scalar usable by the tensor/autodiff core.
pub trait Scalar: num_traits::Float + Debug + Display + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    /// Little-endian byte encoding of the value widened to `f64`.
    ///
    /// Checkpoint payloads are always 64-bit floats; widening `f32` is exact,
    /// so save/load round-trips bit-exactly for both precisions.
    fn to_le_f64_bytes(self) -> [u8; 8] {
        self.into_f64().to_le_bytes()
    }

    fn from_le_f64_bytes(bytes: [u8; 8]) -> Self {
        Self::from_f64(f64::from_le_bytes(bytes))
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}
