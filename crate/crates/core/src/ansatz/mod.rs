//! Neural-network wavefunction: periodic pair features, attention message
//! passing, backflow quasipositions, plane-wave orbitals with Slater or BCS
//! determinant heads, a neural Jastrow factor and an analytic cusp Jastrow.
//!
//! Electrons `0..n_up` are spin up and `n_up..N` spin down. Parameters live
//! in one flat `f64` vector described by a [`ParamLayout`]; complex orbital
//! coefficients are stored as separate real and imaginary tensors.

mod layout;
mod nn;
pub mod planewaves;

pub use layout::{ParamLayout, TensorSpec};
pub use nn::{Dense, Mlp, Weights};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{log_det, Cx, Scalar};
use crate::lattice::{Mat2, SimulationCell, Vec2};

#[derive(Debug, Error, PartialEq)]
pub enum AnsatzError {
    #[error("BCS mode needs equal spin populations, got {0} up and {1} down")]
    UnequalSpins(usize, usize),
    #[error("plane-wave basis of {available} vectors cannot hold {needed} orbitals")]
    TooFewPlaneWaves { available: usize, needed: usize },
    #[error("invalid ansatz configuration: {0}")]
    Config(String),
    #[error("parameter vector has length {got}, layout expects {expected}")]
    ParamLength { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Slater,
    Bcs,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnsatzConfig {
    pub mode: Mode,
    /// Message-passing iterations `L`.
    pub layers: usize,
    /// Width of the query and key maps.
    pub attention_dim: usize,
    /// Width of the message map `F_m` and the attention output.
    pub message_dim: usize,
    /// One-body hidden width and the width of `F_1`.
    pub one_body_dim: usize,
    pub one_body_depth: usize,
    /// Two-body hidden width and the width of `F_2`.
    pub two_body_dim: usize,
    pub two_body_depth: usize,
    pub jastrow_dim: usize,
    pub jastrow_depth: usize,
    pub backflow_depth: usize,
    pub backflow: bool,
    pub neural_jastrow: bool,
    pub cusp: bool,
    /// Explicit minimum plane-wave count; otherwise `planewave_factor * max(n_up, n_down)`.
    pub n_planewaves: Option<usize>,
    pub planewave_factor: usize,
    /// BCS orbital dimension; defaults to `n_up + n_down`, at least `n_up`.
    pub n_orbitals: Option<usize>,
    /// Initialization gain on the output layers of the backflow and Jastrow heads.
    pub final_gain: f64,
}

impl Default for AnsatzConfig {
    fn default() -> Self {
        AnsatzConfig {
            mode: Mode::Slater,
            layers: 3,
            attention_dim: 32,
            message_dim: 32,
            one_body_dim: 32,
            one_body_depth: 2,
            two_body_dim: 26,
            two_body_depth: 2,
            jastrow_dim: 32,
            jastrow_depth: 3,
            backflow_depth: 2,
            backflow: true,
            neural_jastrow: true,
            cusp: true,
            n_planewaves: None,
            planewave_factor: 4,
            n_orbitals: None,
            final_gain: 0.1,
        }
    }
}

/// Number of pair feature channels.
pub const PAIR_FEATURES: usize = 7;
/// Number of one-body feature channels.
pub const ONE_BODY_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
struct MpLayer {
    wq: Dense,
    wk: Dense,
    fm: Dense,
    attn: Dense,
    f1: Mlp,
    f2: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
struct OrbitalTensors {
    up_re: usize,
    up_im: usize,
    down_re: usize,
    down_im: usize,
    /// Real pairing amplitudes in BCS mode.
    pairing: Option<usize>,
}

/// Visible features of a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures {
    /// `v_ij` for ordered pairs at `i * N + j`.
    pub v_ij: Vec<Vec<f64>>,
    pub v_i: Vec<[f64; ONE_BODY_FEATURES]>,
}

/// Hidden state after the last message-passing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h_i: Vec<Vec<f64>>,
    /// `h_ij` at `i * N + j`.
    pub h_ij: Vec<Vec<f64>>,
}

/// Terms of `log psi` for one configuration.
#[derive(Clone, Debug)]
pub struct Parts<S> {
    pub log_det: Cx<S>,
    pub cusp: S,
    pub jastrow: S,
}

impl<S: Scalar> Parts<S> {
    pub fn total(self) -> Cx<S> {
        let re = self.log_det.re + self.cusp + self.jastrow;
        Cx::new(re, self.log_det.im)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ansatz {
    pub config: AnsatzConfig,
    pub cell: SimulationCell,
    pub layout: ParamLayout,
    pub planewaves: Vec<Vec2>,
    /// Orbitals per spin channel.
    pub n_orb: usize,
    /// Unlike-spin cusp slope in `1/a_B*`.
    pub cusp_coupling: f64,
    /// Radius beyond which the cusp Jastrow vanishes.
    pub cusp_cutoff: f64,
    length: f64,
    frac: Mat2,
    layers: Vec<MpLayer>,
    backflow: Option<Mlp>,
    jastrow: Option<Mlp>,
    orbitals: OrbitalTensors,
    cusp_len: Option<usize>,
}

fn to_cx(z: Cx<f64>) -> Complex64 {
    Complex64::new(z.re, z.im)
}

impl Ansatz {
    /// Builds the parameter layout. `cusp_coupling` is the unlike-spin cusp
    /// slope required by the Hamiltonian (zero for softened interactions).
    pub fn new(cell: &SimulationCell, config: &AnsatzConfig, cusp_coupling: f64) -> Result<Ansatz, AnsatzError> {
        let c = config;
        let (n_up, n_down) = (cell.n_up, cell.n_down);
        if c.mode == Mode::Bcs && n_up != n_down {
            return Err(AnsatzError::UnequalSpins(n_up, n_down));
        }
        if c.layers > 0 && (c.one_body_depth == 0 || c.two_body_depth == 0) {
            return Err(AnsatzError::Config("MLP depths must be at least 1".into()));
        }
        if c.jastrow_depth == 0 || c.backflow_depth == 0 {
            return Err(AnsatzError::Config("MLP depths must be at least 1".into()));
        }
        let n_orb = match c.mode {
            Mode::Slater => n_up.max(n_down),
            Mode::Bcs => c.n_orbitals.unwrap_or(n_up + n_down),
        };
        if c.mode == Mode::Bcs && n_orb < n_up {
            return Err(AnsatzError::Config(format!("n_orbitals = {n_orb} is below the {n_up} electrons per spin")));
        }
        let wanted = c.n_planewaves.unwrap_or(c.planewave_factor * n_up.max(n_down)).max(n_orb);
        let planewaves = planewaves::planewave_set(cell, wanted);
        if planewaves.len() < n_orb {
            return Err(AnsatzError::TooFewPlaneWaves { available: planewaves.len(), needed: n_orb });
        }
        let nk = planewaves.len();

        let mut layout = ParamLayout::default();
        let network = c.backflow || c.neural_jastrow;
        let mut layers = Vec::new();
        if network {
            let g_ij = PAIR_FEATURES + c.two_body_dim;
            for t in 0..c.layers {
                let name = |s: &str| format!("layer{t}.{s}");
                layers.push(MpLayer {
                    wq: Dense::new(&mut layout, &name("wq"), g_ij, c.attention_dim, false),
                    wk: Dense::new(&mut layout, &name("wk"), g_ij, c.attention_dim, false),
                    fm: Dense::new(&mut layout, &name("fm"), g_ij, c.message_dim, true),
                    attn: Dense::new(&mut layout, &name("attn_out"), c.attention_dim, c.message_dim, true),
                    f1: Mlp::new(
                        &mut layout,
                        &name("f1"),
                        c.message_dim + c.one_body_dim,
                        c.one_body_dim,
                        c.one_body_dim,
                        c.one_body_depth,
                    ),
                    f2: Mlp::new(
                        &mut layout,
                        &name("f2"),
                        c.message_dim + g_ij,
                        c.two_body_dim,
                        c.two_body_dim,
                        c.two_body_depth,
                    ),
                });
            }
        }
        let backflow = c
            .backflow
            .then(|| Mlp::new(&mut layout, "backflow", c.one_body_dim, c.one_body_dim, 2, c.backflow_depth));
        let jastrow = c.neural_jastrow.then(|| {
            Mlp::new(&mut layout, "jastrow", ONE_BODY_FEATURES + c.one_body_dim, c.jastrow_dim, 1, c.jastrow_depth)
        });
        let (prefix, rows) = match c.mode {
            Mode::Slater => ("orb", [n_up, n_down]),
            Mode::Bcs => ("bcs", [n_orb, n_orb]),
        };
        let orbitals = OrbitalTensors {
            up_re: layout.add(format!("{prefix}_up.re"), &[rows[0], nk]),
            up_im: layout.add(format!("{prefix}_up.im"), &[rows[0], nk]),
            down_re: layout.add(format!("{prefix}_down.re"), &[rows[1], nk]),
            down_im: layout.add(format!("{prefix}_down.im"), &[rows[1], nk]),
            pairing: (c.mode == Mode::Bcs).then(|| layout.add("pairing", &[n_orb])),
        };
        let cusp_len = c.cusp.then(|| layout.add("cusp.log_len", &[2]));
        Ok(Ansatz {
            config: c.clone(),
            cell: cell.clone(),
            layout,
            planewaves,
            n_orb,
            cusp_coupling,
            cusp_cutoff: cell.wigner_seitz_radius(),
            length: cell.r_s,
            frac: cell.fractional_matrix(),
            layers,
            backflow,
            jastrow,
            orbitals,
            cusp_len,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn n_electrons(&self) -> usize {
        self.cell.n_electrons()
    }

    fn network_active(&self) -> bool {
        self.backflow.is_some() || self.jastrow.is_some()
    }

    pub fn check_params(&self, params: &[f64]) -> Result<(), AnsatzError> {
        if params.len() != self.layout.total {
            return Err(AnsatzError::ParamLength { got: params.len(), expected: self.layout.total });
        }
        Ok(())
    }

    /// Initial parameters: network weights drawn at small scale, orbitals on
    /// the lowest plane waves (same for both spins), pairing selecting the
    /// occupied orbitals, cusp length equal to the natural length.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.layout.total];
        for layer in &self.layers {
            layer.wq.init(&mut p, 1.0, rng);
            layer.wk.init(&mut p, 1.0, rng);
            layer.fm.init(&mut p, 1.0, rng);
            layer.attn.init(&mut p, 1.0, rng);
            layer.f1.init(&mut p, 1.0, rng);
            layer.f2.init(&mut p, 1.0, rng);
        }
        let g = self.config.final_gain;
        if let Some(bf) = &self.backflow {
            bf.init(&mut p, g, rng);
        }
        if let Some(j) = &self.jastrow {
            j.init(&mut p, g, rng);
        }
        let nk = self.planewaves.len();
        let o = &self.orbitals;
        let rows_up = self.layout.tensors.iter().find(|t| t.offset == o.up_re).map(|t| t.shape[0]).unwrap_or(0);
        let rows_down = self.layout.tensors.iter().find(|t| t.offset == o.down_re).map(|t| t.shape[0]).unwrap_or(0);
        for a in 0..rows_up {
            p[o.up_re + a * nk + a] = 1.0;
        }
        for a in 0..rows_down {
            p[o.down_re + a * nk + a] = 1.0;
        }
        if let Some(s) = o.pairing {
            for a in 0..self.cell.n_up {
                p[s + a] = 1.0;
            }
        }
        if let Some(c) = self.cusp_len {
            let f = self.length.min(0.5 * self.cusp_cutoff).ln();
            p[c] = f;
            p[c + 1] = f;
        }
        p
    }

    fn fractional<S: Scalar>(&self, x: &[[S; 2]]) -> Vec<[S; 2]> {
        let m = &self.frac;
        x.iter().map(|r| [S::lincomb(&m[0], r), S::lincomb(&m[1], r)]).collect()
    }

    fn spin_sign(&self, i: usize, j: usize) -> f64 {
        let up = |k: usize| k < self.cell.n_up;
        if up(i) == up(j) {
            1.0
        } else {
            -1.0
        }
    }

    /// `[cos 2 pi f (2), sin 2 pi f (2), |sin pi f|, |cos pi f|, s_ij]` per ordered pair.
    fn pair_features_generic<S: Scalar>(&self, f: &[[S; 2]]) -> Vec<Vec<S>> {
        let n = f.len();
        let tau = 2.0 * std::f64::consts::PI;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let s = S::cst(self.spin_sign(i, j));
                if i == j {
                    let c = |v: f64| S::cst(v);
                    out.push(vec![c(1.0), c(1.0), c(0.0), c(0.0), c(0.0), c(2f64.sqrt()), s]);
                    continue;
                }
                let d0 = (f[i][0].clone() - f[j][0].clone()).scale(tau);
                let d1 = (f[i][1].clone() - f[j][1].clone()).scale(tau);
                let (c0, c1, s0, s1) = (d0.cos(), d1.cos(), d0.sin(), d1.sin());
                // sin^2(pi f) = (1 - cos 2 pi f) / 2 and cos^2(pi f) = (1 + cos 2 pi f) / 2
                let csum = c0.clone() + c1.clone();
                let ns = csum.scale(-0.5).add_cst(1.0).sqrt();
                let nc = csum.scale(0.5).add_cst(1.0).sqrt();
                out.push(vec![c0, c1, s0, s1, ns, nc, s]);
            }
        }
        out
    }

    fn one_body_features<S: Scalar>(f: &[[S; 2]]) -> Vec<Vec<S>> {
        let tau = 2.0 * std::f64::consts::PI;
        f.iter()
            .map(|fi| {
                let a = fi[0].scale(tau);
                let b = fi[1].scale(tau);
                vec![a.sin(), b.sin(), a.cos(), b.cos()]
            })
            .collect()
    }

    /// Runs the message-passing layers; returns `(h_i, h_ij)`.
    fn message_pass_generic<S: Scalar, W: Weights<S> + ?Sized>(&self, w: &W, v_ij: &[Vec<S>]) -> (Vec<Vec<S>>, Vec<Vec<S>>) {
        let c = &self.config;
        let n = (v_ij.len() as f64).sqrt().round() as usize;
        let mut h_i: Vec<Vec<S>> = vec![vec![S::cst(0.0); c.one_body_dim]; n];
        let mut h_ij: Vec<Vec<S>> = vec![vec![S::cst(0.0); c.two_body_dim]; n * n];
        let inv_sqrt_n = 1.0 / (n as f64).sqrt();
        for layer in &self.layers {
            let g_ij: Vec<Vec<S>> = v_ij
                .iter()
                .zip(&h_ij)
                .map(|(v, h)| v.iter().chain(h.iter()).cloned().collect())
                .collect();
            let q: Vec<Vec<S>> = g_ij.iter().map(|g| layer.wq.apply(w, g)).collect();
            let k: Vec<Vec<S>> = g_ij.iter().map(|g| layer.wk.apply(w, g)).collect();
            let mut m: Vec<Vec<S>> = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    let a: Vec<S> = (0..c.attention_dim)
                        .map(|d| {
                            let mut acc = q[i * n][d].clone() * k[j][d].clone();
                            for l in 1..n {
                                acc = acc + q[i * n + l][d].clone() * k[l * n + j][d].clone();
                            }
                            acc.scale(inv_sqrt_n).gelu()
                        })
                        .collect();
                    let att = layer.attn.apply(w, &a);
                    let fm = layer.fm.apply(w, &g_ij[i * n + j]);
                    m.push(att.into_iter().zip(fm).map(|(x, y)| x * y).collect());
                }
            }
            let mut new_h_i = Vec::with_capacity(n);
            for i in 0..n {
                let mut sum: Vec<S> = vec![S::cst(0.0); c.message_dim];
                for j in (0..n).filter(|&j| j != i) {
                    for (s, mj) in sum.iter_mut().zip(&m[i * n + j]) {
                        *s = s.clone() + mj.clone();
                    }
                }
                let input: Vec<S> = sum.into_iter().chain(h_i[i].iter().cloned()).collect();
                let out = layer.f1.apply(w, &input);
                new_h_i.push(out.into_iter().zip(&h_i[i]).map(|(o, h)| o + h.clone()).collect());
            }
            let mut new_h_ij = Vec::with_capacity(n * n);
            for p in 0..n * n {
                let input: Vec<S> = m[p].iter().chain(g_ij[p].iter()).cloned().collect();
                let out = layer.f2.apply(w, &input);
                new_h_ij.push(out.into_iter().zip(&h_ij[p]).map(|(o, h)| o + h.clone()).collect());
            }
            h_i = new_h_i;
            h_ij = new_h_ij;
        }
        (h_i, h_ij)
    }

    /// Complex orbital values `phi_a(q)` for rows `rows` of the tensors at `re`/`im`.
    fn orbital_row<S: Scalar, W: Weights<S> + ?Sized>(&self, w: &W, re: usize, im: usize, rows: usize, q: &[S; 2]) -> Vec<Cx<S>> {
        let nk = self.planewaves.len();
        let mut cos = Vec::with_capacity(nk);
        let mut sin = Vec::with_capacity(nk);
        for g in &self.planewaves {
            let ph = S::lincomb(g, q);
            cos.push(ph.cos());
            sin.push(ph.sin());
        }
        (0..rows)
            .map(|a| {
                let (r, i) = (re + a * nk, im + a * nk);
                let phi_re = w.affine(r, &cos, None) - w.affine(i, &sin, None);
                let phi_im = w.affine(i, &cos, None) + w.affine(r, &sin, None);
                Cx::new(phi_re, phi_im)
            })
            .collect()
    }

    /// Orbital matrices: rows are electrons of one spin, columns orbitals.
    fn orbital_matrices<S: Scalar, W: Weights<S> + ?Sized>(&self, w: &W, q: &[[S; 2]]) -> (Vec<Vec<Cx<S>>>, Vec<Vec<Cx<S>>>) {
        let (n_up, n_down) = (self.cell.n_up, self.cell.n_down);
        let o = &self.orbitals;
        let (ru, rd) = match self.config.mode {
            Mode::Slater => (n_up, n_down),
            Mode::Bcs => (self.n_orb, self.n_orb),
        };
        let up = q[..n_up].iter().map(|qi| self.orbital_row(w, o.up_re, o.up_im, ru, qi)).collect();
        let down = q[n_up..n_up + n_down].iter().map(|qi| self.orbital_row(w, o.down_re, o.down_im, rd, qi)).collect();
        (up, down)
    }

    fn log_det_head<S: Scalar, W: Weights<S> + ?Sized>(&self, w: &W, q: &[[S; 2]]) -> Option<Cx<S>> {
        let (up, down) = self.orbital_matrices(w, q);
        match self.orbitals.pairing {
            None => {
                let lu = log_det(up.into_iter().flatten().collect(), self.cell.n_up)?;
                let ld = log_det(down.into_iter().flatten().collect(), self.cell.n_down)?;
                Some(lu + ld)
            }
            Some(s_off) => {
                let n = self.cell.n_up;
                let s: Vec<S> = (0..self.n_orb).map(|a| w.param(s_off + a)).collect();
                let scaled: Vec<Vec<Cx<S>>> =
                    down.iter().map(|row| row.iter().zip(&s).map(|(p, sa)| p.scale_real(sa)).collect()).collect();
                let mut m = Vec::with_capacity(n * n);
                for up_row in &up {
                    for down_row in &scaled {
                        let (mut re, mut im) = (Vec::with_capacity(2 * self.n_orb), Vec::with_capacity(2 * self.n_orb));
                        // sum_a up[a] * down[a] as four real inner products
                        let ur: Vec<S> = up_row.iter().map(|z| z.re.clone()).collect();
                        let ui: Vec<S> = up_row.iter().map(|z| z.im.clone()).collect();
                        let dr: Vec<S> = down_row.iter().map(|z| z.re.clone()).collect();
                        let di: Vec<S> = down_row.iter().map(|z| z.im.clone()).collect();
                        re.push(S::affine(&ur, &dr, None));
                        re.push(-S::affine(&ui, &di, None));
                        im.push(S::affine(&ur, &di, None));
                        im.push(S::affine(&ui, &dr, None));
                        m.push(Cx::new(re[0].clone() + re[1].clone(), im[0].clone() + im[1].clone()));
                    }
                }
                log_det(m, n)
            }
        }
    }

    fn cusp_generic<S: Scalar, W: Weights<S> + ?Sized>(&self, w: &W, x: &[[S; 2]]) -> S {
        let Some(off) = self.cusp_len else {
            return S::cst(0.0);
        };
        if self.cusp_coupling == 0.0 {
            return S::cst(0.0);
        }
        let rc = self.cusp_cutoff;
        let lens = [w.param(off).exp(), w.param(off + 1).exp()];
        let n = x.len();
        let mut acc = S::cst(0.0);
        for i in 0..n {
            for j in i + 1..n {
                let dv = [x[i][0].value() - x[j][0].value(), x[i][1].value() - x[j][1].value()];
                let mi = self.cell.minimum_image(dv);
                if mi[0] * mi[0] + mi[1] * mi[1] >= rc * rc {
                    continue;
                }
                let d0 = (x[i][0].clone() - x[j][0].clone()).add_cst(mi[0] - dv[0]);
                let d1 = (x[i][1].clone() - x[j][1].clone()).add_cst(mi[1] - dv[1]);
                let r = (d0.square() + d1.square()).sqrt();
                let like = self.spin_sign(i, j) > 0.0;
                let (gamma, f) = if like { (1.0 / 3.0, &lens[0]) } else { (1.0, &lens[1]) };
                let wv = f.clone() * (-(r.clone() / f.clone())).exp().scale(-1.0).add_cst(1.0);
                let t = r.scale(-1.0 / rc).add_cst(1.0);
                let t3 = t.clone() * t.square();
                acc = acc + (wv * t3).scale(gamma * self.cusp_coupling);
            }
        }
        acc
    }

    /// Full forward pass over generic scalars.
    pub fn forward<S: Scalar, W: Weights<S> + ?Sized>(&self, w: &W, x: &[[S; 2]]) -> Option<Parts<S>> {
        let f = self.fractional(x);
        let mut q: Vec<[S; 2]> = x.to_vec();
        let mut jastrow = S::cst(0.0);
        if self.network_active() {
            let v_ij = self.pair_features_generic(&f);
            let (h_i, _) = self.message_pass_generic(w, &v_ij);
            if let Some(bf) = &self.backflow {
                for (qi, hi) in q.iter_mut().zip(&h_i) {
                    let d = bf.apply(w, hi);
                    qi[0] = qi[0].clone() + d[0].scale(self.length);
                    qi[1] = qi[1].clone() + d[1].scale(self.length);
                }
            }
            if let Some(jm) = &self.jastrow {
                let v_i = Self::one_body_features(&f);
                for (vi, hi) in v_i.iter().zip(&h_i) {
                    let input: Vec<S> = vi.iter().chain(hi.iter()).cloned().collect();
                    jastrow = jastrow + jm.apply(w, &input).swap_remove(0);
                }
            }
        }
        let log_det = self.log_det_head(w, &q)?;
        let cusp = self.cusp_generic(w, x);
        Some(Parts { log_det, cusp, jastrow })
    }

    fn positions_f64(x: &[Vec2]) -> Vec<[f64; 2]> {
        x.to_vec()
    }

    /// `log psi` at a configuration; `None` on an exact node.
    pub fn log_psi(&self, params: &[f64], x: &[Vec2]) -> Option<Complex64> {
        self.forward::<f64, [f64]>(params, &Self::positions_f64(x)).map(|p| to_cx(p.total()))
    }

    /// The separate terms of `log psi`.
    pub fn log_psi_parts(&self, params: &[f64], x: &[Vec2]) -> Option<(Complex64, f64, f64)> {
        self.forward::<f64, [f64]>(params, &Self::positions_f64(x))
            .map(|p| (to_cx(p.log_det), p.cusp, p.jastrow))
    }

    pub fn pair_features(&self, x: &[Vec2]) -> PairFeatures {
        let f = self.fractional(&Self::positions_f64(x));
        let v_i = Self::one_body_features(&f).into_iter().map(|v| [v[0], v[1], v[2], v[3]]).collect();
        PairFeatures { v_ij: self.pair_features_generic(&f), v_i }
    }

    /// Hidden state after all message-passing layers.
    pub fn message_pass(&self, params: &[f64], x: &[Vec2]) -> HiddenState {
        let feats = self.pair_features(x);
        let (h_i, h_ij) = self.message_pass_generic::<f64, [f64]>(params, &feats.v_ij);
        HiddenState { h_i, h_ij }
    }

    /// Backflow quasipositions `q_i = r_i + l F_bf(h_i)`.
    pub fn quasipositions(&self, params: &[f64], x: &[Vec2]) -> Vec<Vec2> {
        let mut q = x.to_vec();
        if let Some(bf) = &self.backflow {
            let h = self.message_pass(params, x);
            for (qi, hi) in q.iter_mut().zip(&h.h_i) {
                let d = bf.apply(params, hi);
                qi[0] += self.length * d[0];
                qi[1] += self.length * d[1];
            }
        }
        q
    }

    /// Orbital matrix of one spin channel evaluated at quasipositions `q`
    /// (all electrons, both spins); rows are that channel's electrons.
    pub fn orbital_matrix(&self, params: &[f64], q: &[Vec2], spin_up: bool) -> DMatrix<Complex64> {
        let (up, down) = self.orbital_matrices::<f64, [f64]>(params, q);
        let rows = if spin_up { up } else { down };
        let ncol = rows.first().map_or(0, |r| r.len());
        DMatrix::from_fn(rows.len(), ncol, |i, a| to_cx(rows[i][a].clone()))
    }

    /// Determinant head only (Slater product or BCS pairing determinant).
    pub fn log_det(&self, params: &[f64], x: &[Vec2]) -> Option<Complex64> {
        let q = self.quasipositions(params, x);
        self.log_det_head::<f64, [f64]>(params, &q).map(to_cx)
    }

    pub fn neural_jastrow(&self, params: &[f64], x: &[Vec2]) -> f64 {
        self.log_psi_parts(params, x).map_or_else(
            || {
                // the Jastrow does not depend on the determinant; recompute it directly
                let f = self.fractional(&Self::positions_f64(x));
                let Some(jm) = &self.jastrow else { return 0.0 };
                let h = self.message_pass(params, x);
                Self::one_body_features(&f)
                    .iter()
                    .zip(&h.h_i)
                    .map(|(v, hi)| {
                        let input: Vec<f64> = v.iter().chain(hi.iter()).cloned().collect();
                        jm.apply(params, &input)[0]
                    })
                    .sum()
            },
            |p| p.2,
        )
    }

    pub fn cck_jastrow(&self, params: &[f64], x: &[Vec2]) -> f64 {
        self.cusp_generic::<f64, [f64]>(params, &Self::positions_f64(x))
    }

    /// Pair function `u(r)` of the cusp Jastrow for like or unlike spins.
    pub fn cusp_pair(&self, params: &[f64], r: f64, like: bool) -> f64 {
        let Some(off) = self.cusp_len else { return 0.0 };
        if r >= self.cusp_cutoff {
            return 0.0;
        }
        let (gamma, f) = if like { (1.0 / 3.0, params[off].exp()) } else { (1.0, params[off + 1].exp()) };
        gamma * self.cusp_coupling * f * (1.0 - (-r / f).exp()) * (1.0 - r / self.cusp_cutoff).powi(3)
    }

    /// Singular values of the plane-wave pair amplitude `F = A_down^T S A_up`,
    /// descending, truncated to the orbital count.
    pub fn occupation_amplitudes(&self, params: &[f64]) -> Option<Vec<f64>> {
        let s_off = self.orbitals.pairing?;
        let nk = self.planewaves.len();
        let o = &self.orbitals;
        let mat = |re: usize, im: usize| DMatrix::from_fn(self.n_orb, nk, |a, k| Complex64::new(params[re + a * nk + k], params[im + a * nk + k]));
        let a_up = mat(o.up_re, o.up_im);
        let a_down = mat(o.down_re, o.down_im);
        let s = DMatrix::from_fn(self.n_orb, self.n_orb, |a, b| Complex64::new(if a == b { params[s_off + a] } else { 0.0 }, 0.0));
        let f = a_down.transpose() * s * a_up;
        let mut sv: Vec<f64> = f.singular_values().iter().cloned().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // rank is at most n_orb
        sv.truncate(self.n_orb);
        Some(sv)
    }

    /// BCS parameters reproducing a Slater parameter set of `slater`:
    /// shared tensors are copied by name, the occupied orbitals fill the
    /// first rows of each pairing orbital matrix and the pairing amplitudes
    /// select them.
    pub fn embed_slater(&self, slater: &Ansatz, slater_params: &[f64]) -> Result<Vec<f64>, AnsatzError> {
        if self.config.mode != Mode::Bcs || slater.config.mode != Mode::Slater {
            return Err(AnsatzError::Config("embedding maps a Slater ansatz into a BCS ansatz".into()));
        }
        if slater.planewaves != self.planewaves {
            return Err(AnsatzError::Config("plane-wave bases differ".into()));
        }
        let mut p = vec![0.0; self.layout.total];
        for t in &slater.layout.tensors {
            if let Some(dst) = self.layout.get(&t.name) {
                if dst.shape == t.shape {
                    p[dst.range()].copy_from_slice(&slater_params[t.range()]);
                }
            }
        }
        let nk = self.planewaves.len();
        let pairs = [("orb_up.re", "bcs_up.re"), ("orb_up.im", "bcs_up.im"), ("orb_down.re", "bcs_down.re"), ("orb_down.im", "bcs_down.im")];
        for (src, dst) in pairs {
            let s = slater.layout.get(src).expect("slater orbital tensor");
            let d = self.layout.get(dst).expect("bcs orbital tensor");
            let rows = s.shape[0];
            p[d.offset..d.offset + rows * nk].copy_from_slice(&slater_params[s.range()]);
        }
        let s_off = self.orbitals.pairing.expect("pairing tensor");
        for a in 0..self.n_orb {
            p[s_off + a] = if a < self.cell.n_up { 1.0 } else { 0.0 };
        }
        Ok(p)
    }
}
