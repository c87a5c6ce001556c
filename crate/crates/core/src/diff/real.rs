//! Scalar abstraction shared by plain `f64`, forward-mode [`Dual`] numbers and
//! reverse-mode tape variables.
//!
//! Every numerical kernel that must be differentiated (ODE steps, network
//! layers, likelihood terms) is written once against [`Real`]. Branching is
//! always done on [`Real::value`], so the derivative of a kernel is the
//! derivative of the computation that actually ran with its control flow
//! frozen.
//!
//! [`Dual`]: super::Dual

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    /// Lift a constant (zero derivative).
    fn cst(v: f64) -> Self;

    /// Primal value.
    fn value(self) -> f64;

    /// Apply a scalar function given its value `f` and derivative `df` at
    /// `self.value()`.
    fn apply(self, f: f64, df: f64) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    /// True for plain floats, which carry no derivative information.
    fn is_primal() -> bool {
        false
    }

    fn exp(self) -> Self {
        let e = self.value().exp();
        self.apply(e, e)
    }

    fn ln(self) -> Self {
        let x = self.value();
        self.apply(x.ln(), 1.0 / x)
    }

    fn log10(self) -> Self {
        let x = self.value();
        self.apply(x.log10(), 1.0 / (x * std::f64::consts::LN_10))
    }

    fn sqrt(self) -> Self {
        let s = self.value().sqrt();
        self.apply(s, 0.5 / s)
    }

    fn powi(self, n: i32) -> Self {
        let x = self.value();
        let d = if n == 0 {
            0.0
        } else {
            f64::from(n) * x.powi(n - 1)
        };
        self.apply(x.powi(n), d)
    }

    fn recip(self) -> Self {
        let x = self.value();
        self.apply(1.0 / x, -1.0 / (x * x))
    }

    fn tanh(self) -> Self {
        let t = self.value().tanh();
        self.apply(t, 1.0 - t * t)
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid(self.value());
        self.apply(s, s * (1.0 - s))
    }

    /// Exact GELU, `x·Φ(x)`.
    fn gelu(self) -> Self {
        let x = self.value();
        let cdf = normal_cdf(x);
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        self.apply(x * cdf, cdf + x * pdf)
    }

    fn is_finite(self) -> bool {
        self.value().is_finite()
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = Self::zero();
        for (x, y) in a.iter().zip(b) {
            acc += *x * *y;
        }
        acc
    }

    fn sum(xs: &[Self]) -> Self {
        let mut acc = Self::zero();
        for x in xs {
            acc += *x;
        }
        acc
    }

    /// `Σ c_k x_k` with constant coefficients.
    fn weighted_sum(coeffs: &[f64], xs: &[Self]) -> Self {
        debug_assert_eq!(coeffs.len(), xs.len());
        let mut acc = Self::zero();
        for (c, x) in coeffs.iter().zip(xs) {
            if *c != 0.0 {
                acc += *x * *c;
            }
        }
        acc
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn apply(self, f: f64, _df: f64) -> Self {
        f
    }

    fn is_primal() -> bool {
        true
    }

    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }

    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }

    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }

    #[inline]
    fn weighted_sum(coeffs: &[f64], xs: &[Self]) -> Self {
        coeffs.iter().zip(xs).map(|(c, x)| c * x).sum()
    }
}
