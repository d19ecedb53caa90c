use std::ops::{Add, Div, Mul, Neg, Sub};

use smallvec::SmallVec;

use super::Scalar;

type Grad = SmallVec<[f64; 16]>;

/// Forward-mode number carrying value, gradient and Laplacian.
///
/// The gradient is taken with respect to a fixed list of input coordinates;
/// an empty gradient denotes a constant. `l` is the sum over all coordinates
/// of the second derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct Lap {
    pub v: f64,
    pub g: Grad,
    pub l: f64,
}

impl Lap {
    pub fn constant(v: f64) -> Self {
        Lap { v, g: Grad::new(), l: 0.0 }
    }

    /// Independent input coordinate `index` out of `n`.
    pub fn seed(v: f64, index: usize, n: usize) -> Self {
        let mut g = Grad::from_elem(0.0, n);
        g[index] = 1.0;
        Lap { v, g, l: 0.0 }
    }

    pub fn is_const(&self) -> bool {
        self.g.is_empty()
    }

    /// Gradient component `k`, treating constants as zero.
    pub fn grad(&self, k: usize) -> f64 {
        self.g.get(k).copied().unwrap_or(0.0)
    }

    fn gdot(&self, other: &Lap) -> f64 {
        self.g.iter().zip(&other.g).map(|(a, b)| a * b).sum()
    }

    fn norm2(&self) -> f64 {
        self.g.iter().map(|a| a * a).sum()
    }

    /// `a * x + b * y` on the derivative parts.
    fn combine(a: f64, x: &Lap, b: f64, y: &Lap, v: f64, extra_l: f64) -> Lap {
        let g = match (x.is_const(), y.is_const()) {
            (true, true) => Grad::new(),
            (false, true) => x.g.iter().map(|xi| a * xi).collect(),
            (true, false) => y.g.iter().map(|yi| b * yi).collect(),
            (false, false) => x.g.iter().zip(&y.g).map(|(xi, yi)| a * xi + b * yi).collect(),
        };
        Lap { v, g, l: a * x.l + b * y.l + extra_l }
    }
}

impl Add for Lap {
    type Output = Lap;
    fn add(self, o: Lap) -> Lap {
        if o.is_const() {
            return Lap { v: self.v + o.v, ..self };
        }
        if self.is_const() {
            return Lap { v: self.v + o.v, ..o };
        }
        let mut g = self.g;
        for (a, b) in g.iter_mut().zip(&o.g) {
            *a += b;
        }
        Lap { v: self.v + o.v, g, l: self.l + o.l }
    }
}

impl Sub for Lap {
    type Output = Lap;
    fn sub(self, o: Lap) -> Lap {
        Lap::combine(1.0, &self, -1.0, &o, self.v - o.v, 0.0)
    }
}

impl Mul for Lap {
    type Output = Lap;
    fn mul(self, o: Lap) -> Lap {
        let cross = 2.0 * self.gdot(&o);
        Lap::combine(o.v, &self, self.v, &o, self.v * o.v, cross)
    }
}

impl Div for Lap {
    type Output = Lap;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Lap) -> Lap {
        if o.is_const() {
            return self.scale(1.0 / o.v);
        }
        self * o.recip()
    }
}

impl Neg for Lap {
    type Output = Lap;
    fn neg(self) -> Lap {
        self.scale(-1.0)
    }
}

impl Scalar for Lap {
    fn cst(x: f64) -> Self {
        Lap::constant(x)
    }

    fn value(&self) -> f64 {
        self.v
    }

    fn map(&self, f: f64, df: f64, d2f: f64) -> Self {
        if self.is_const() {
            return Lap::constant(f);
        }
        let n2 = self.norm2();
        Lap {
            v: f,
            g: self.g.iter().map(|x| df * x).collect(),
            l: df * self.l + d2f * n2,
        }
    }

    fn scale(&self, c: f64) -> Self {
        Lap {
            v: self.v * c,
            g: self.g.iter().map(|x| c * x).collect(),
            l: self.l * c,
        }
    }

    fn add_cst(&self, c: f64) -> Self {
        Lap { v: self.v + c, ..self.clone() }
    }

    fn clog(re: &Self, im: &Self) -> (Self, Self) {
        // log is holomorphic: grad w = grad z / z, lap w = lap z / z - (grad z)^2 / z^2
        let (a, b) = (re.v, im.v);
        let m2 = a * a + b * b;
        let (ir, ii) = (a / m2, -b / m2); // 1/z
        let (i2r, i2i) = (ir * ir - ii * ii, 2.0 * ir * ii); // 1/z^2
        let n = re.g.len().max(im.g.len());
        let mut gr = Grad::with_capacity(n);
        let mut gi = Grad::with_capacity(n);
        let (mut sq_r, mut sq_i) = (0.0, 0.0);
        for k in 0..n {
            let (zr, zi) = (re.grad(k), im.grad(k));
            gr.push(zr * ir - zi * ii);
            gi.push(zr * ii + zi * ir);
            sq_r += zr * zr - zi * zi;
            sq_i += 2.0 * zr * zi;
        }
        let (lr, li) = (re.l, im.l);
        let lap_r = lr * ir - li * ii - (sq_r * i2r - sq_i * i2i);
        let lap_i = lr * ii + li * ir - (sq_r * i2i + sq_i * i2r);
        (
            Lap { v: 0.5 * m2.ln(), g: gr, l: lap_r },
            Lap { v: b.atan2(a), g: gi, l: lap_i },
        )
    }

    fn affine(w: &[Self], x: &[Self], b: Option<&Self>) -> Self {
        if w.iter().any(|wk| !wk.is_const()) {
            let mut acc = b.cloned().unwrap_or_else(|| Lap::constant(0.0));
            for (wk, xk) in w.iter().zip(x) {
                acc = acc + wk.clone() * xk.clone();
            }
            return acc;
        }
        let c: SmallVec<[f64; 64]> = w.iter().map(|wk| wk.v).collect();
        let mut out = Self::lincomb(&c, x);
        if let Some(b) = b {
            out = out + b.clone();
        }
        out
    }

    fn lincomb(c: &[f64], x: &[Self]) -> Self {
        let n = x.iter().map(|xk| xk.g.len()).max().unwrap_or(0);
        let mut g = Grad::from_elem(0.0, n);
        let (mut v, mut l) = (0.0, 0.0);
        for (ck, xk) in c.iter().zip(x) {
            v += ck * xk.v;
            l += ck * xk.l;
            for (gi, xi) in g.iter_mut().zip(&xk.g) {
                *gi += ck * xi;
            }
        }
        Lap { v, g, l }
    }
}
