//! Scalar abstraction so the numeric core works with both `f32` and `f64`.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar used throughout the library.
///
/// Blanket-implemented for every type that satisfies the bounds, which in
/// practice means `f32` and `f64`. Algorithms whose accuracy contracts are
/// stated in absolute terms (the incomplete beta function, the leak
/// dictionary) evaluate internally in `f64` regardless of the caller's
/// scalar; everything on the data path (contexts, rewards, distances,
/// kernel weights) stays in the caller's type.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + core::fmt::Debug
    + core::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, panicking only if the value is unrepresentable
    /// (never the case for `f32`/`f64`, which saturate to infinity instead).
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 not representable in this scalar type")
    }

    /// Converts to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + core::fmt::Debug
        + core::fmt::Display
        + Default
        + Send
        + Sync
        + 'static
{
}
