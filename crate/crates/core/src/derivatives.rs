//! Derivatives of `log psi`: position gradient and Laplacian by forward-mode
//! propagation, parameter gradients `O_k = d log psi / d theta_k` by reverse
//! mode, and a finite-difference oracle for both.

use num_complex::Complex64;

use crate::ansatz::Ansatz;
use crate::autodiff::{Lap, Scalar, Tape, Var};
use crate::hamiltonian::{Hamiltonian, HamiltonianError, LocalEnergyParts};
use crate::lattice::Vec2;

/// `log psi` with its derivatives in the electron coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PositionDerivatives {
    pub log_psi: Complex64,
    /// Interleaved `x, y` per electron.
    pub grad: Vec<Complex64>,
    pub laplacian: Complex64,
}

impl PositionDerivatives {
    /// Drift `grad Re log psi`, interleaved.
    pub fn drift(&self) -> Vec<f64> {
        self.grad.iter().map(|g| g.re).collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("configuration lies on a node of the wavefunction")]
    Node,
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error("non-finite local energy")]
    NonFinite,
}

pub fn position_derivatives(ans: &Ansatz, params: &[f64], x: &[Vec2]) -> Option<PositionDerivatives> {
    let dim = 2 * x.len();
    let seeded: Vec<[Lap; 2]> =
        x.iter().enumerate().map(|(i, r)| [Lap::seed(r[0], 2 * i, dim), Lap::seed(r[1], 2 * i + 1, dim)]).collect();
    let lp = ans.forward::<Lap, [f64]>(params, &seeded)?.total();
    let grad = (0..dim).map(|k| Complex64::new(lp.re.grad(k), lp.im.grad(k))).collect();
    Some(PositionDerivatives {
        log_psi: Complex64::new(lp.re.v, lp.im.v),
        grad,
        laplacian: Complex64::new(lp.re.l, lp.im.l),
    })
}

/// Local energy together with the position derivatives it was built from.
pub fn local_energy(
    ham: &Hamiltonian,
    ans: &Ansatz,
    params: &[f64],
    x: &[Vec2],
) -> Result<(LocalEnergyParts, PositionDerivatives), EvalError> {
    let d = position_derivatives(ans, params, x).ok_or(EvalError::Node)?;
    let parts = ham.local_energy(x, &d.grad, d.laplacian)?;
    if !parts.is_finite() {
        return Err(EvalError::NonFinite);
    }
    Ok((parts, d))
}

/// `log psi` and `O_k = d log psi / d theta_k` for every parameter.
pub fn param_gradient(ans: &Ansatz, params: &[f64], x: &[Vec2]) -> Option<(Complex64, Vec<Complex64>)> {
    let tape = Tape::with_capacity(params.len() * 4, params.len() * 8);
    let leaves: Vec<Var<'_>> = params.iter().map(|&p| tape.var(p)).collect();
    let xs: Vec<[Var<'_>; 2]> = x.iter().map(|r| [Var::cst(r[0]), Var::cst(r[1])]).collect();
    let lp = ans.forward::<Var<'_>, [Var<'_>]>(&leaves, &xs)?.total();
    let n = params.len();
    let re = tape.adjoints(&lp.re);
    let im = tape.adjoints(&lp.im);
    let o = (0..n).map(|k| Complex64::new(re[k], im[k])).collect();
    Some((Complex64::new(lp.re.value(), lp.im.value()), o))
}

fn central<F: FnMut(f64) -> Complex64>(mut f: F, h: f64) -> Complex64 {
    let d1 = (f(h) - f(-h)) / (2.0 * h);
    let d2 = (f(0.5 * h) - f(-0.5 * h)) / h;
    (4.0 * d2 - d1) / 3.0
}

/// Phase-continuous difference of two `log psi` values.
fn unwrap(a: Complex64, base: Complex64) -> Complex64 {
    let tau = 2.0 * std::f64::consts::PI;
    let k = ((a.im - base.im) / tau).round();
    Complex64::new(a.re, a.im - k * tau)
}

/// Richardson-extrapolated central differences of `log psi` in parameters.
pub fn fd_param_gradient(ans: &Ansatz, params: &[f64], x: &[Vec2], h: f64) -> Option<Vec<Complex64>> {
    let base = ans.log_psi(params, x)?;
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let mut f = |e: f64| {
            p[k] = params[k] + e;
            let v = ans.log_psi(&p, x).map_or(Complex64::new(f64::NAN, f64::NAN), |v| unwrap(v, base));
            p[k] = params[k];
            v
        };
        let d = central(&mut f, h);
        if !d.re.is_finite() {
            return None;
        }
        out.push(d);
    }
    Some(out)
}

/// Finite-difference gradient and Laplacian of `log psi` in positions.
pub fn fd_position_derivatives(ans: &Ansatz, params: &[f64], x: &[Vec2], h: f64) -> Option<PositionDerivatives> {
    let base = ans.log_psi(params, x)?;
    let mut grad = Vec::with_capacity(2 * x.len());
    let mut lap = Complex64::new(0.0, 0.0);
    for k in 0..2 * x.len() {
        let eval = |e: f64| {
            let mut y = x.to_vec();
            y[k / 2][k % 2] += e;
            ans.log_psi(params, &y).map_or(Complex64::new(f64::NAN, f64::NAN), |v| unwrap(v, base))
        };
        grad.push(central(&eval, h));
        let second = |s: f64| (eval(s) - 2.0 * base + eval(-s)) / (s * s);
        lap += (4.0 * second(0.5 * h) - second(h)) / 3.0;
    }
    if !lap.re.is_finite() {
        return None;
    }
    Some(PositionDerivatives { log_psi: base, grad, laplacian: lap })
}
