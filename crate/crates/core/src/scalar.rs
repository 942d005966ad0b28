//! Scalar abstraction shared by the numeric core.
//!
//! The dense algebra, autodiff tape, covariance builders and pointwise
//! likelihoods are written against [`Scalar`], so they run on `f32` as well
//! as `f64`. The model layers (including the sparse SPDE code), trainer and
//! I/O are fixed to `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point type usable by the numeric core: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Every supported type can represent (a
    /// rounded version of) any finite `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in float")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function (Lanczos approximation, reflection for
/// `x < 0.5`).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    if x < half {
        let pi = T::lit(std::f64::consts::PI);
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(LANCZOS[0]);
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += T::lit(*c) / (x + T::from_usize_lossy(i));
    }
    let t = x + T::lit(LANCZOS_G) + half;
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln()) + (x + half) * t.ln() - t + acc.ln()
}

/// Digamma function: recurrence up to `x >= 10`, then the asymptotic series.
pub fn digamma<T: Scalar>(x: T) -> T {
    let mut x = x;
    let mut acc = T::zero();
    if x <= T::zero() && x == x.floor() {
        return T::nan();
    }
    if x < T::zero() {
        // reflection: psi(1-x) - psi(x) = pi cot(pi x)
        let pi = T::lit(std::f64::consts::PI);
        return digamma(T::one() - x) - pi / (pi * x).tan();
    }
    while x < T::lit(10.0) {
        acc -= T::one() / x;
        x += T::one();
    }
    let inv = T::one() / x;
    let inv2 = inv * inv;
    let series = inv2
        * (T::lit(1.0 / 12.0)
            - inv2
                * (T::lit(1.0 / 120.0)
                    - inv2 * (T::lit(1.0 / 252.0) - inv2 * (T::lit(1.0 / 240.0) - inv2 * T::lit(1.0 / 132.0)))));
    acc + x.ln() - T::lit(0.5) * inv - series
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..=20u32 {
            // Gamma(n + 1) = n!
            fact *= n as f64;
            let lg = ln_gamma(n as f64 + 1.0);
            assert!((lg - fact.ln()).abs() < 1e-9, "n={n}: {lg} vs {}", fact.ln());
        }
        assert!(ln_gamma(1.0f64).abs() < 1e-13);
        assert!((ln_gamma(0.5f64) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn digamma_known_values() {
        let euler = 0.577_215_664_901_532_9;
        assert!((digamma(1.0f64) + euler).abs() < 1e-12);
        assert!((digamma(0.5f64) + euler + 2.0 * 2f64.ln()).abs() < 1e-12);
        // derivative of ln_gamma by central differences
        for &x in &[0.3f64, 1.7, 4.2, 11.0] {
            let h = 1e-6;
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((fd - digamma(x)).abs() < 1e-7, "x={x}");
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(40.0f64) - 40.0).abs() < 1e-12);
        assert!(softplus(-800.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
