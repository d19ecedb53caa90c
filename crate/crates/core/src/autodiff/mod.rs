//! Differentiation engine for the fixed operation vocabulary of the ansatz.
//!
//! The wavefunction is written once, generically over [`Scalar`], and
//! evaluated with one of three number types:
//!
//! * `f64` for plain values,
//! * [`Lap`], which carries a value, its gradient with respect to a fixed set
//!   of input coordinates and the sum of its second derivatives along those
//!   coordinates (forward Laplacian propagation),
//! * [`Var`], a node on a reverse-mode [`Tape`].
//!
//! Complex quantities are represented by [`Cx`] over any scalar, and
//! [`log_det`] evaluates a complex log-determinant by pivoted LU so that it can
//! be differentiated by either mode.

mod complex;
mod lap;
mod tape;

pub use complex::{log_det, Cx};
pub use lap::Lap;
pub use tape::{Tape, Var};

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Real scalar supported by the ansatz evaluation.
pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// A constant (zero derivative) scalar.
    fn cst(x: f64) -> Self;

    fn value(&self) -> f64;

    /// Applies a unary function given its value `f`, first derivative `df`
    /// and second derivative `d2f` at `self.value()`.
    fn map(&self, f: f64, df: f64, d2f: f64) -> Self;

    /// Complex logarithm of `re + i im`, returned as `(ln|z|, arg z)`.
    fn clog(re: &Self, im: &Self) -> (Self, Self);

    /// `sum_k w[k] * x[k] + b`.
    fn affine(w: &[Self], x: &[Self], b: Option<&Self>) -> Self {
        debug_assert_eq!(w.len(), x.len());
        let mut acc = match b {
            Some(b) => b.clone(),
            None => Self::cst(0.0),
        };
        for (wk, xk) in w.iter().zip(x) {
            acc = acc + wk.clone() * xk.clone();
        }
        acc
    }

    /// `sum_k c[k] * x[k]` with constant coefficients.
    fn lincomb(c: &[f64], x: &[Self]) -> Self {
        let mut acc = Self::cst(0.0);
        for (ck, xk) in c.iter().zip(x) {
            acc = acc + xk.scale(*ck);
        }
        acc
    }

    fn scale(&self, c: f64) -> Self {
        self.map(self.value() * c, c, 0.0)
    }

    fn add_cst(&self, c: f64) -> Self {
        self.map(self.value() + c, 1.0, 0.0)
    }

    fn sin(&self) -> Self {
        let v = self.value();
        let (s, c) = v.sin_cos();
        self.map(s, c, -s)
    }

    fn cos(&self) -> Self {
        let v = self.value();
        let (s, c) = v.sin_cos();
        self.map(c, -s, -c)
    }

    fn exp(&self) -> Self {
        let e = self.value().exp();
        self.map(e, e, e)
    }

    fn sqrt(&self) -> Self {
        let s = self.value().sqrt();
        self.map(s, 0.5 / s, -0.25 / (s * s * s))
    }

    fn square(&self) -> Self {
        let v = self.value();
        self.map(v * v, 2.0 * v, 2.0)
    }

    fn recip(&self) -> Self {
        let v = self.value();
        let r = 1.0 / v;
        self.map(r, -r * r, 2.0 * r * r * r)
    }

    fn tanh(&self) -> Self {
        let t = self.value().tanh();
        let d = 1.0 - t * t;
        self.map(t, d, -2.0 * t * d)
    }

    /// GELU in its tanh form.
    fn gelu(&self) -> Self {
        let (f, df, d2f) = gelu_derivs(self.value());
        self.map(f, df, d2f)
    }
}

/// Value, first and second derivative of the tanh-form GELU.
pub fn gelu_derivs(x: f64) -> (f64, f64, f64) {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    let d2u = GELU_C * 6.0 * GELU_A * x;
    let t = u.tanh();
    let s = 1.0 - t * t;
    let f = 0.5 * x * (1.0 + t);
    let df = 0.5 * (1.0 + t) + 0.5 * x * s * du;
    let d2f = s * du + 0.5 * x * (-2.0 * t * s * du * du + s * d2u);
    (f, df, d2f)
}

impl Scalar for f64 {
    fn cst(x: f64) -> Self {
        x
    }

    fn value(&self) -> f64 {
        *self
    }

    fn map(&self, f: f64, _df: f64, _d2f: f64) -> Self {
        f
    }

    fn clog(re: &Self, im: &Self) -> (Self, Self) {
        (0.5 * (re * re + im * im).ln(), im.atan2(*re))
    }

    fn affine(w: &[Self], x: &[Self], b: Option<&Self>) -> Self {
        let mut acc = b.copied().unwrap_or(0.0);
        for (wk, xk) in w.iter().zip(x) {
            acc += wk * xk;
        }
        acc
    }

    fn lincomb(c: &[f64], x: &[Self]) -> Self {
        c.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}
