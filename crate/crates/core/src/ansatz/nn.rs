use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layout::ParamLayout;
use crate::autodiff::{Scalar, Var};

/// Source of parameter values for a forward pass over scalars `S`.
///
/// Plain `f64` parameters enter as constants; tape variables make the pass
/// differentiable with respect to the parameters.
pub trait Weights<S: Scalar> {
    fn param(&self, i: usize) -> S;

    /// `sum_k w[offset + k] x[k]` plus the parameter at `bias`, if any.
    fn affine(&self, offset: usize, x: &[S], bias: Option<usize>) -> S;
}

impl<S: Scalar> Weights<S> for [f64] {
    fn param(&self, i: usize) -> S {
        S::cst(self[i])
    }

    fn affine(&self, offset: usize, x: &[S], bias: Option<usize>) -> S {
        let y = S::lincomb(&self[offset..offset + x.len()], x);
        match bias {
            Some(b) if self[b] != 0.0 => y.add_cst(self[b]),
            _ => y,
        }
    }
}

impl<'t> Weights<Var<'t>> for [Var<'t>] {
    fn param(&self, i: usize) -> Var<'t> {
        self[i]
    }

    fn affine(&self, offset: usize, x: &[Var<'t>], bias: Option<usize>) -> Var<'t> {
        Var::affine(&self[offset..offset + x.len()], x, bias.map(|b| &self[b]))
    }
}

/// Fully connected layer: weights row-major `n_out x n_in`, then bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: usize,
    pub b: Option<usize>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new(layout: &mut ParamLayout, name: &str, n_in: usize, n_out: usize, bias: bool) -> Dense {
        let w = layout.add(format!("{name}.w"), &[n_out, n_in]);
        let b = bias.then(|| layout.add(format!("{name}.b"), &[n_out]));
        Dense { w, b, n_in, n_out }
    }

    pub fn apply<S: Scalar, W: Weights<S> + ?Sized>(&self, w: &W, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.n_in);
        (0..self.n_out).map(|o| w.affine(self.w + o * self.n_in, x, self.b.map(|b| b + o))).collect()
    }

    /// Draws weights from `N(0, gain^2 / n_in)`; biases start at zero.
    pub fn init(&self, params: &mut [f64], gain: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, gain / (self.n_in as f64).sqrt()).expect("finite scale");
        for p in &mut params[self.w..self.w + self.n_in * self.n_out] {
            *p = normal.sample(rng);
        }
        if let Some(b) = self.b {
            params[b..b + self.n_out].fill(0.0);
        }
    }
}

/// Dense layers with GELU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `depth` layers `n_in -> width -> ... -> n_out`.
    pub fn new(layout: &mut ParamLayout, name: &str, n_in: usize, width: usize, n_out: usize, depth: usize) -> Mlp {
        assert!(depth >= 1, "an MLP needs at least one layer");
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let a = if l == 0 { n_in } else { width };
            let b = if l + 1 == depth { n_out } else { width };
            layers.push(Dense::new(layout, &format!("{name}.{l}"), a, b, true));
        }
        Mlp { layers }
    }

    pub fn apply<S: Scalar, W: Weights<S> + ?Sized>(&self, w: &W, x: &[S]) -> Vec<S> {
        let mut h = self.layers[0].apply(w, x);
        for layer in &self.layers[1..] {
            let act: Vec<S> = h.iter().map(|v| v.gelu()).collect();
            h = layer.apply(w, &act);
        }
        h
    }

    /// Unit gain on hidden layers, `final_gain` on the output layer.
    pub fn init(&self, params: &mut [f64], final_gain: f64, rng: &mut impl Rng) {
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.init(params, if l + 1 == n { final_gain } else { 1.0 }, rng);
        }
    }
}
