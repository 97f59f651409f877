//! Special functions and statistical primitives shared by the other modules.
//!
//! The incomplete beta function is evaluated in `f64` no matter the caller's
//! scalar type; its accuracy contract (absolute error at most 1e-10 for
//! integer shapes up to 1e5) is only meaningful at double precision.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Natural log of the gamma function.
///
/// Uses the Stirling series after shifting the argument above 10 with the
/// recurrence ln Γ(x) = ln Γ(x+1) − ln x. Absolute error is below 1e-13 over
/// the positive axis.
pub fn ln_gamma(x: f64) -> f64 {
    assert!(x > 0.0, "ln_gamma requires a positive argument, got {x}");
    let mut shift = 0.0;
    let mut z = x;
    while z < 10.0 {
        shift -= z.ln();
        z += 1.0;
    }
    shift + stirling_ln_gamma(z)
}

/// Stirling expansion of ln Γ(z), valid for z ≥ 10.
fn stirling_ln_gamma(z: f64) -> f64 {
    const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;
    (z - 0.5) * z.ln() - z + HALF_LN_TWO_PI + stirling_correction(z)
}

/// The series S(z) = ln Γ(z) − [(z−1/2)ln z − z + ln√(2π)], for z ≥ 10.
fn stirling_correction(z: f64) -> f64 {
    let r = 1.0 / z;
    let r2 = r * r;
    r * (1.0 / 12.0
        + r2 * (-1.0 / 360.0
            + r2 * (1.0 / 1260.0
                + r2 * (-1.0 / 1680.0 + r2 * (1.0 / 1188.0 - r2 * (691.0 / 360_360.0))))))
}

/// Product `a * b` split into a rounded part and its exact residual.
#[inline]
fn two_product(a: f64, b: f64) -> (f64, f64) {
    let hi = a * b;
    let lo = a.mul_add(b, -hi);
    (hi, lo)
}

/// Neumaier compensated sum of (value, residual) pairs.
fn compensated_sum(terms: &[(f64, f64)]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &(hi, lo) in terms {
        for v in [hi, lo] {
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
        }
    }
    sum + comp
}

/// Log of the leading factor x^a (1−x)^b / B(a,b), arranged so that every
/// accumulated term has the same order of magnitude as the result. A naive
/// ln Γ difference loses ~1e-10 absolute at shapes near 1e5 because the
/// intermediate terms reach 1e6; the grouped form stays at the scale of the
/// final exponent.
fn ln_beta_factor(a: f64, b: f64, x: f64) -> f64 {
    if a <= 50.0 && b <= 50.0 {
        return a * x.ln() + b * (-x).ln_1p() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    }
    let n = a + b;
    // d = x·(a+b) − a, the signed offset of x from the beta mean a/(a+b),
    // computed exactly to one rounding via FMA.
    let d = x.mul_add(n, -a);
    if a > 50.0 && b > 50.0 {
        let g1 = if (d / a).abs() <= 0.5 {
            (d / a).ln_1p()
        } else {
            (x * n / a).ln()
        };
        let g2 = if (d / b).abs() <= 0.5 {
            (-d / b).ln_1p()
        } else {
            ((1.0 - x) * n / b).ln()
        };
        const LN_TWO_PI: f64 = 1.837_877_066_409_345_6;
        let half_log = 0.5 * ((a * b / n).ln() - LN_TWO_PI);
        let tail =
            half_log + stirling_correction(n) - stirling_correction(a) - stirling_correction(b);
        compensated_sum(&[two_product(a, g1), two_product(b, g2), (tail, 0.0)])
    } else {
        // One small shape s, one large shape g. ln Γ(s+g) − ln Γ(g) is
        // expanded so no term exceeds ~s·ln(n) in magnitude.
        let (s, g, ls, lg) = if a <= b {
            (a, b, x.ln(), (-x).ln_1p())
        } else {
            (b, a, (-x).ln_1p(), x.ln())
        };
        let small_terms = [
            two_product(s, ls),
            two_product(s, n.ln()),
            two_product(g - 0.5, (s / g).ln_1p()),
            (-s, 0.0),
            (
                stirling_correction(n) - stirling_correction(g) - ln_gamma(s),
                0.0,
            ),
        ];
        compensated_sum(&small_terms) + g * lg
    }
}

/// Regularized incomplete beta function I_x(a, b).
///
/// Continued-fraction evaluation (modified Lentz) with the usual symmetry
/// split at x = (a+1)/(a+b+2). Returns a value in [0, 1], nondecreasing in
/// x, with absolute error at most 1e-10 for integer shapes up to 1e5.
///
/// # Errors
/// `InvalidParameter` if the shapes are nonpositive or x lies outside [0, 1].
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if a.is_nan() || a <= 0.0 || b.is_nan() || b <= 0.0 {
        return Err(Error::invalid(format!(
            "beta shapes must be positive, got a={a}, b={b}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("x must lie in [0,1], got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        let front = (ln_beta_factor(a, b, x)).exp();
        front * beta_cont_frac(a, b, x) / a
    } else {
        let front = (ln_beta_factor(b, a, 1.0 - x)).exp();
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Continued fraction for the incomplete beta function, evaluated with the
/// modified Lentz algorithm. Assumes x is below the symmetry split point so
/// the fraction converges quickly.
fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 500;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        // Even step.
        let num = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let num = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Linear-interpolation quantile of an ascending-sorted slice.
///
/// Uses the convention h = (n−1)q with interpolation between the two
/// bracketing order statistics (the default of most numeric libraries).
pub fn quantile<R: Real>(sorted: &[R], q: f64) -> Result<R> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput("quantile of empty slice"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0,1]")));
    }
    let n = sorted.len();
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = R::of(h - lo as f64);
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Silverman rule-of-thumb bandwidth over a sample of distances.
///
/// Returns max(floor, 0.9·min(σ̂, IQR/1.34)·n^(−1/5)), where σ̂ is the
/// sample standard deviation (n−1 denominator) and IQR the interquartile
/// range. Degenerate samples (fewer than two points, or zero spread) fall
/// back to the floor.
///
/// # Errors
/// `EmptyInput` when `values` is empty; `InvalidParameter` when the floor is
/// not strictly positive.
pub fn silverman_bandwidth<R: Real>(values: &[R], floor: R) -> Result<R> {
    if values.is_empty() {
        return Err(Error::EmptyInput("bandwidth of empty sample"));
    }
    if floor.is_nan() || floor <= R::zero() {
        return Err(Error::invalid("bandwidth floor must be positive"));
    }
    let n = values.len();
    if n < 2 {
        return Ok(floor);
    }
    let nf = R::of(n as f64);
    let mean = values.iter().fold(R::zero(), |acc, &v| acc + v) / nf;
    let ss = values
        .iter()
        .fold(R::zero(), |acc, &v| acc + (v - mean) * (v - mean));
    let std = (ss / R::of(n as f64 - 1.0)).sqrt();

    let mut sorted = values.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("non-finite value in bandwidth input"));
    let iqr = quantile(&sorted, 0.75)? - quantile(&sorted, 0.25)?;

    let spread = std.min(iqr / R::of(1.34));
    let bw = R::of(0.9) * spread * R::of((n as f64).powf(-0.2));
    Ok(bw.max(floor))
}

/// Rule-of-thumb bandwidth for kernel weights over distances to a query:
/// max(floor, 0.9·RMS·n^(−1/5)), where RMS is the root mean square of the
/// values. The dispersion is measured about zero rather than the sample
/// mean because the kernel argument is already a deviation from the query;
/// a spread-based bandwidth collapses when all distances are similar, as
/// nearest-neighbor distances in high dimension tend to be.
///
/// # Errors
/// `EmptyInput` when `values` is empty; `InvalidParameter` when the floor is
/// not strictly positive.
pub fn rms_bandwidth<R: Real>(values: &[R], floor: R) -> Result<R> {
    if values.is_empty() {
        return Err(Error::EmptyInput("bandwidth of empty sample"));
    }
    if floor.is_nan() || floor <= R::zero() {
        return Err(Error::invalid("bandwidth floor must be positive"));
    }
    let n = values.len();
    let rms = (values
        .iter()
        .fold(R::zero(), |acc, &v| acc + v * v)
        / R::of(n as f64))
    .sqrt();
    let bw = R::of(0.9) * rms * R::of((n as f64).powf(-0.2));
    Ok(bw.max(floor))
}
