//! Nadaraya-Watson kernel-weighted reward estimation over a neighbor set.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Kernel family. Only the Gaussian kernel is implemented; it keeps every
/// weight strictly positive, so the weighted average never divides by zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[non_exhaustive]
pub enum KernelFamily {
    #[default]
    Gaussian,
}

/// A kernel with its bandwidth (in distance units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec<R> {
    pub bandwidth: R,
    pub family: KernelFamily,
}

impl<R: Real> KernelSpec<R> {
    /// Gaussian kernel with the given bandwidth.
    ///
    /// # Errors
    /// `InvalidParameter` unless the bandwidth is strictly positive.
    pub fn gaussian(bandwidth: R) -> Result<Self> {
        if bandwidth.is_nan() || bandwidth <= R::zero() {
            return Err(Error::invalid(format!(
                "kernel bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(KernelSpec {
            bandwidth,
            family: KernelFamily::Gaussian,
        })
    }
}

/// Kernel weight exp(−(d/h)²/2) for a distance d ≥ 0.
pub fn kernel_weight<R: Real>(spec: &KernelSpec<R>, distance: R) -> R {
    let z = distance / spec.bandwidth;
    (R::of(-0.5) * z * z).exp()
}

/// Nadaraya-Watson estimate over (distance, reward) neighbors: the
/// kernel-weighted mean of the rewards.
///
/// Weights are computed relative to the smallest distance in the set, which
/// leaves the estimate unchanged (the common factor cancels) but avoids
/// all-zero weights when every distance is many bandwidths away.
///
/// # Errors
/// `EmptyInput` when the neighbor set is empty.
pub fn nw_estimate<R: Real>(spec: &KernelSpec<R>, neighbors: &[(R, R)]) -> Result<R> {
    if neighbors.is_empty() {
        return Err(Error::EmptyInput("kernel estimate over no neighbors"));
    }
    let d_min = neighbors
        .iter()
        .map(|&(d, _)| d)
        .fold(R::infinity(), R::min);
    let half = R::of(-0.5);
    let mut num = R::zero();
    let mut den = R::zero();
    for &(d, r) in neighbors {
        let z = d / spec.bandwidth;
        let z0 = d_min / spec.bandwidth;
        let w = (half * (z * z - z0 * z0)).exp();
        num = num + w * r;
        den = den + w;
    }
    Ok(num / den)
}
