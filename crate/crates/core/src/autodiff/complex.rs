use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

/// Complex number over a differentiable real scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Cx<S> {
    pub re: S,
    pub im: S,
}

impl<S: Scalar> Cx<S> {
    pub fn new(re: S, im: S) -> Self {
        Cx { re, im }
    }

    pub fn zero() -> Self {
        Cx { re: S::cst(0.0), im: S::cst(0.0) }
    }

    pub fn real(re: S) -> Self {
        Cx { re, im: S::cst(0.0) }
    }

    /// `exp(i theta)`.
    pub fn expi(theta: &S) -> Self {
        Cx { re: theta.cos(), im: theta.sin() }
    }

    pub fn norm_sqr_value(&self) -> f64 {
        let (a, b) = (self.re.value(), self.im.value());
        a * a + b * b
    }

    pub fn ln(&self) -> Self {
        let (re, im) = S::clog(&self.re, &self.im);
        Cx { re, im }
    }

    pub fn scale_real(&self, s: &S) -> Self {
        Cx { re: self.re.clone() * s.clone(), im: self.im.clone() * s.clone() }
    }

    pub fn values(&self) -> (f64, f64) {
        (self.re.value(), self.im.value())
    }
}

impl<S: Scalar> Add for Cx<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Cx { re: self.re + o.re, im: self.im + o.im }
    }
}

impl<S: Scalar> Sub for Cx<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Cx { re: self.re - o.re, im: self.im - o.im }
    }
}

impl<S: Scalar> Mul for Cx<S> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Cx {
            re: self.re.clone() * o.re.clone() - self.im.clone() * o.im.clone(),
            im: self.re * o.im + self.im * o.re,
        }
    }
}

impl<S: Scalar> Div for Cx<S> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let den = (o.re.clone() * o.re.clone() + o.im.clone() * o.im.clone()).recip();
        let re = self.re.clone() * o.re.clone() + self.im.clone() * o.im.clone();
        let im = self.im * o.re - self.re * o.im;
        Cx { re: re * den.clone(), im: im * den }
    }
}

impl<S: Scalar> Neg for Cx<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Cx { re: -self.re, im: -self.im }
    }
}

/// Logarithm of the determinant of a row-major `n x n` complex matrix.
///
/// Uses LU factorization with partial pivoting on the values; the pivot
/// sequence is piecewise constant so derivatives propagate through the
/// elimination exactly. Returns `None` for an exactly singular matrix.
pub fn log_det<S: Scalar>(mut m: Vec<Cx<S>>, n: usize) -> Option<Cx<S>> {
    debug_assert_eq!(m.len(), n * n);
    let mut acc = Cx::<S>::zero();
    let mut odd = false;
    for k in 0..n {
        let (p, best) = (k..n)
            .map(|i| (i, m[i * n + k].norm_sqr_value()))
            .fold((k, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        if !(best > 0.0) || !best.is_finite() {
            return None;
        }
        if p != k {
            for j in 0..n {
                m.swap(k * n + j, p * n + j);
            }
            odd = !odd;
        }
        let piv = m[k * n + k].clone();
        acc = acc + piv.ln();
        if k + 1 == n {
            break;
        }
        let one = Cx::real(S::cst(1.0));
        let inv = one / piv;
        for i in k + 1..n {
            let f = m[i * n + k].clone() * inv.clone();
            for j in k + 1..n {
                let upd = f.clone() * m[k * n + j].clone();
                m[i * n + j] = m[i * n + j].clone() - upd;
            }
        }
    }
    if odd {
        acc.im = acc.im.add_cst(std::f64::consts::PI);
    }
    Some(acc)
}
