use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

#[derive(Default)]
struct Nodes {
    // node i owns parent entries offsets[i]..offsets[i + 1]
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order; a backward
/// sweep over the tape yields adjoints of every node.
pub struct Tape {
    nodes: RefCell<Nodes>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let nodes = Nodes { offsets: vec![0], ..Default::default() };
        Tape { nodes: RefCell::new(nodes) }
    }

    pub fn with_capacity(nodes: usize, entries: usize) -> Self {
        let mut offsets = Vec::with_capacity(nodes + 1);
        offsets.push(0);
        Tape {
            nodes: RefCell::new(Nodes {
                offsets,
                parents: Vec::with_capacity(entries),
                partials: Vec::with_capacity(entries),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates an independent variable.
    pub fn var(&self, v: f64) -> Var<'_> {
        let idx = self.push(std::iter::empty());
        Var { val: v, idx, tape: Some(self) }
    }

    fn push(&self, entries: impl IntoIterator<Item = (u32, f64)>) -> u32 {
        let mut n = self.nodes.borrow_mut();
        for (p, d) in entries {
            n.parents.push(p);
            n.partials.push(d);
        }
        let end = n.parents.len() as u32;
        n.offsets.push(end);
        (n.offsets.len() - 2) as u32
    }

    /// Adjoints d(output)/d(node) for every node on the tape.
    pub fn adjoints(&self, output: &Var<'_>) -> Vec<f64> {
        let n = self.nodes.borrow();
        let len = n.offsets.len() - 1;
        let mut adj = vec![0.0; len];
        if output.tape.is_none() {
            return adj;
        }
        adj[output.idx as usize] = 1.0;
        for i in (0..len).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (n.offsets[i] as usize, n.offsets[i + 1] as usize);
            for k in s..e {
                adj[n.parents[k] as usize] += a * n.partials[k];
            }
        }
        adj
    }
}

/// A scalar recorded on a [`Tape`], or a constant when `tape` is `None`.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    val: f64,
    idx: u32,
    tape: Option<&'t Tape>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var({} @{})", self.val, self.idx),
            None => write!(f, "Var({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> Option<usize> {
        self.tape.map(|_| self.idx as usize)
    }

    fn unary(&self, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var { val, idx: 0, tape: None },
            Some(t) => Var { val, idx: t.push([(self.idx, d)]), tape: Some(t) },
        }
    }

    fn binary(a: &Self, b: &Self, val: f64, da: f64, db: f64) -> Self {
        match (a.tape, b.tape) {
            (None, None) => Var { val, idx: 0, tape: None },
            (Some(t), None) => Var { val, idx: t.push([(a.idx, da)]), tape: Some(t) },
            (None, Some(t)) => Var { val, idx: t.push([(b.idx, db)]), tape: Some(t) },
            (Some(t), Some(_)) => Var {
                val,
                idx: t.push([(a.idx, da), (b.idx, db)]),
                tape: Some(t),
            },
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Var::binary(&self, &o, self.val + o.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Var::binary(&self, &o, self.val - o.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Var::binary(&self, &o, self.val * o.val, o.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let r = 1.0 / o.val;
        Var::binary(&self, &o, self.val * r, r, -self.val * r * r)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl Scalar for Var<'_> {
    fn cst(x: f64) -> Self {
        Var { val: x, idx: 0, tape: None }
    }

    fn value(&self) -> f64 {
        self.val
    }

    fn map(&self, f: f64, df: f64, _d2f: f64) -> Self {
        self.unary(f, df)
    }

    fn clog(re: &Self, im: &Self) -> (Self, Self) {
        let (a, b) = (re.val, im.val);
        let m2 = a * a + b * b;
        let lr = Var::binary(re, im, 0.5 * m2.ln(), a / m2, b / m2);
        let li = Var::binary(re, im, b.atan2(a), -b / m2, a / m2);
        (lr, li)
    }

    fn affine(w: &[Self], x: &[Self], b: Option<&Self>) -> Self {
        let mut val = b.map(|b| b.val).unwrap_or(0.0);
        let mut tape = b.and_then(|b| b.tape);
        for (wk, xk) in w.iter().zip(x) {
            val += wk.val * xk.val;
            tape = tape.or(wk.tape).or(xk.tape);
        }
        let Some(t) = tape else {
            return Var::cst(val);
        };
        let weights = w.iter().zip(x).filter(|(wk, _)| wk.tape.is_some()).map(|(wk, xk)| (wk.idx, xk.val));
        let inputs = w.iter().zip(x).filter(|(_, xk)| xk.tape.is_some()).map(|(wk, xk)| (xk.idx, wk.val));
        let bias = b.filter(|b| b.tape.is_some()).map(|b| (b.idx, 1.0));
        let idx = t.push(weights.chain(inputs).chain(bias));
        Var { val, idx, tape: Some(t) }
    }

    fn lincomb(c: &[f64], x: &[Self]) -> Self {
        let val = c.iter().zip(x).map(|(ck, xk)| ck * xk.val).sum();
        let Some(t) = x.iter().find_map(|xk| xk.tape) else {
            return Var::cst(val);
        };
        let idx = t.push(c.iter().zip(x).filter(|(_, xk)| xk.tape.is_some()).map(|(ck, xk)| (xk.idx, *ck)));
        Var { val, idx, tape: Some(t) }
    }
}
