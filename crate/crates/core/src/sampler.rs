//! Metropolis-adjusted Langevin sampling of `|psi|^2`.
//!
//! Proposals are `r' = r + tau * grad log|psi|^2 + sqrt(tau) * eps` over all
//! `2N` coordinates, accepted with the exact Gaussian proposal densities in
//! both directions. Several proposals are chained per retained sample and the
//! step size is adapted during warmup toward a target harmonic-mean
//! acceptance, then frozen.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::Ansatz;
use crate::derivatives::{position_derivatives, PositionDerivatives};
use crate::lattice::{MoireGeometry, SimulationCell, Vec2};

/// Floor applied to per-proposal acceptance probabilities in the harmonic mean.
pub const ACCEPT_FLOOR: f64 = 1e-6;
/// Minimum proposals in an adaptation window.
pub const ADAPT_WINDOW: u64 = 100;

/// A density sampled by MALA.
pub trait Target: Sync {
    /// Data kept alongside each accepted configuration.
    type Cache: Clone + Send + Sync;

    /// `log p`, `grad log p` (interleaved) and the cache, or `None` where `p = 0`.
    fn evaluate(&self, x: &[Vec2]) -> Option<Evaluation<Self::Cache>>;

    /// Maps an accepted configuration into the canonical domain; must leave `p` unchanged.
    fn wrap(&self, _x: &mut [Vec2]) {}
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation<C> {
    pub log_prob: f64,
    pub grad: Vec<f64>,
    pub cache: C,
}

/// Running acceptance statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptStats {
    pub proposals: u64,
    pub accepted: u64,
    /// Proposals rejected because the target was zero or non-finite there.
    pub invalid: u64,
    /// Sum of `1 / max(p, floor)` over proposals.
    pub inv_sum: f64,
}

impl AcceptStats {
    pub fn record(&mut self, prob: f64, accepted: bool) {
        self.proposals += 1;
        self.accepted += accepted as u64;
        self.inv_sum += 1.0 / prob.max(ACCEPT_FLOOR);
    }

    pub fn harmonic_mean(&self) -> f64 {
        if self.proposals == 0 {
            return f64::NAN;
        }
        self.proposals as f64 / self.inv_sum
    }

    pub fn merge(&mut self, o: &AcceptStats) {
        self.proposals += o.proposals;
        self.accepted += o.accepted;
        self.invalid += o.invalid;
        self.inv_sum += o.inv_sum;
    }
}

#[derive(Clone, Debug)]
pub struct Walker<C> {
    pub x: Vec<Vec2>,
    pub eval: Evaluation<C>,
    pub rng: ChaCha8Rng,
    /// Statistics since the last [`sweep_all`] collected them.
    pub stats: AcceptStats,
}

/// `log q(to | from)` up to the shared normalization.
fn log_proposal(to: &[Vec2], from: &[Vec2], grad_from: &[f64], tau: f64) -> f64 {
    let mut s = 0.0;
    for (i, (t, f)) in to.iter().zip(from).enumerate() {
        for a in 0..2 {
            let d = t[a] - f[a] - tau * grad_from[2 * i + a];
            s += d * d;
        }
    }
    -s / (2.0 * tau)
}

/// Log Metropolis-Hastings ratio for moving `x -> y`.
pub fn log_acceptance(x: &[Vec2], lp_x: f64, g_x: &[f64], y: &[Vec2], lp_y: f64, g_y: &[f64], tau: f64) -> f64 {
    lp_y - lp_x + log_proposal(x, y, g_y, tau) - log_proposal(y, x, g_x, tau)
}

impl<C: Clone + Send + Sync> Walker<C> {
    pub fn new<T: Target<Cache = C>>(target: &T, mut x: Vec<Vec2>, rng: ChaCha8Rng) -> Option<Walker<C>> {
        target.wrap(&mut x);
        let eval = target.evaluate(&x)?;
        Some(Walker { x, eval, rng, stats: AcceptStats::default() })
    }

    /// Like [`Walker::new`], but a configuration where the target vanishes
    /// gets `log p = -inf` so that the first valid proposal is accepted.
    pub fn new_lenient<T: Target<Cache = C>>(target: &T, mut x: Vec<Vec2>, rng: ChaCha8Rng) -> Walker<C>
    where
        C: Default,
    {
        target.wrap(&mut x);
        let eval = target.evaluate(&x).unwrap_or_else(|| Evaluation {
            log_prob: f64::NEG_INFINITY,
            grad: vec![0.0; 2 * x.len()],
            cache: C::default(),
        });
        Walker { x, eval, rng, stats: AcceptStats::default() }
    }

    /// Recomputes the cached evaluation, e.g. after a parameter change.
    pub fn refresh<T: Target<Cache = C>>(&mut self, target: &T)
    where
        C: Default,
    {
        let x = std::mem::take(&mut self.x);
        let rng = self.rng.clone();
        let stats = std::mem::take(&mut self.stats);
        *self = Walker::new_lenient(target, x, rng);
        self.stats = stats;
    }

    pub fn is_valid(&self) -> bool {
        self.eval.log_prob.is_finite()
    }

    /// One MALA proposal; returns whether it was accepted.
    pub fn mala_step<T: Target<Cache = C>>(&mut self, target: &T, tau: f64) -> bool {
        let sq = tau.sqrt();
        let y: Vec<Vec2> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let e0: f64 = self.rng.sample(StandardNormal);
                let e1: f64 = self.rng.sample(StandardNormal);
                [r[0] + tau * self.eval.grad[2 * i] + sq * e0, r[1] + tau * self.eval.grad[2 * i + 1] + sq * e1]
            })
            .collect();
        let u: f64 = self.rng.random();
        let proposal = target.evaluate(&y).filter(|e| e.log_prob.is_finite() && e.grad.iter().all(|g| g.is_finite()));
        let Some(ey) = proposal else {
            self.stats.record(0.0, false);
            self.stats.invalid += 1;
            return false;
        };
        let la = log_acceptance(&self.x, self.eval.log_prob, &self.eval.grad, &y, ey.log_prob, &ey.grad, tau);
        let prob = if la >= 0.0 { 1.0 } else { la.exp() };
        let accept = u < prob;
        self.stats.record(prob, accept);
        if accept {
            let mut y = y;
            target.wrap(&mut y);
            self.x = y;
            self.eval = ey;
        }
        accept
    }

    /// Chains `n_props` proposals; the final state is the retained sample.
    pub fn sweep<T: Target<Cache = C>>(&mut self, target: &T, tau: f64, n_props: usize) {
        for _ in 0..n_props {
            self.mala_step(target, tau);
        }
    }
}

/// Step size shared by all walkers.
///
/// Adaptation steers an exponentially weighted running harmonic mean of the
/// pooled per-proposal acceptance probabilities toward the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSize {
    pub tau: f64,
    pub tau_max: f64,
    pub target_acceptance: f64,
    /// Running statistics with weights decayed by [`RUNNING_DECAY`] per update.
    pub running: AcceptStats,
    pub pending: AcceptStats,
}

/// Weight kept by older statistics at each adaptation.
pub const RUNNING_DECAY: f64 = 0.8;

impl StepSize {
    pub fn new(tau: f64, tau_max: f64, target_acceptance: f64) -> StepSize {
        StepSize { tau, tau_max, target_acceptance, running: AcceptStats::default(), pending: AcceptStats::default() }
    }

    pub fn harmonic_mean(&self) -> f64 {
        self.running.harmonic_mean()
    }

    /// Adds pooled statistics and updates `tau` once enough proposals are pending.
    pub fn adapt(&mut self, stats: &AcceptStats) {
        self.pending.merge(stats);
        if self.pending.proposals < ADAPT_WINDOW {
            return;
        }
        // decayed counts are kept in inv_sum and a fractional proposal count
        let r = &mut self.running;
        let n = RUNNING_DECAY * r.proposals as f64 + self.pending.proposals as f64;
        r.inv_sum = RUNNING_DECAY * r.inv_sum + self.pending.inv_sum;
        r.proposals = n.round() as u64;
        r.accepted += self.pending.accepted;
        r.invalid += self.pending.invalid;
        let h = n / r.inv_sum;
        self.tau = adapt_step(self.tau, h, self.target_acceptance, self.tau_max);
        self.pending = AcceptStats::default();
    }
}

/// `tau * clamp(sqrt(h / target), 0.8, 1.25)`, kept in `[1e-6, tau_max]`.
pub fn adapt_step(tau: f64, harmonic_mean: f64, target_accept: f64, tau_max: f64) -> f64 {
    let f = (harmonic_mean / target_accept).sqrt().clamp(0.8, 1.25);
    (tau * f).clamp(1e-6, tau_max.max(1e-6))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_walkers: usize,
    pub proposals_per_sweep: usize,
    pub warmup_sweeps: usize,
    pub target_acceptance: f64,
    /// Initial step size in units of `a_B*^2`; defaults to `0.02 r_s^2`.
    pub initial_tau: Option<f64>,
    pub init: InitStrategy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_walkers: 1024,
            proposals_per_sweep: 20,
            warmup_sweeps: 2000,
            target_acceptance: 0.65,
            initial_tau: None,
            init: InitStrategy::Minima,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    Uniform,
    Minima,
}

/// Independent reproducible stream for walker `id`.
pub fn walker_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Initial configurations and rng streams.
///
/// The minima strategy places electrons on distinct randomly chosen moiré
/// minima (reusing sites only when there are more electrons than minima)
/// with a uniform jitter of radius `a_m / 8`.
pub fn init_walkers(
    cell: &SimulationCell,
    geometry: &MoireGeometry,
    n_walkers: usize,
    seed: u64,
    strategy: InitStrategy,
) -> Vec<(Vec<Vec2>, ChaCha8Rng)> {
    let n = cell.n_electrons();
    (0..n_walkers)
        .map(|w| {
            let mut rng = walker_rng(seed, w as u64);
            let x: Vec<Vec2> = match strategy {
                InitStrategy::Minima if !geometry.minima_sites.is_empty() => {
                    let sites = &geometry.minima_sites;
                    let mut order: Vec<usize> = (0..sites.len()).collect();
                    let mut x = Vec::with_capacity(n);
                    for i in 0..n {
                        let k = i % sites.len();
                        if k == 0 {
                            shuffle(&mut order, &mut rng);
                        }
                        let s = sites[order[k]];
                        let r = 0.125 * cell.moire_constant * rng.random::<f64>().sqrt();
                        let t = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                        x.push(cell.wrap([s[0] + r * t.cos(), s[1] + r * t.sin()]));
                    }
                    x
                }
                _ => (0..n).map(|_| cell.cartesian([rng.random(), rng.random()])).collect(),
            };
            (x, rng)
        })
        .collect()
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Advances every walker by one sweep and returns their pooled statistics.
pub fn sweep_all<T: Target>(walkers: &mut [Walker<T::Cache>], target: &T, tau: f64, n_props: usize) -> AcceptStats {
    walkers.par_iter_mut().for_each(|w| w.sweep(target, tau, n_props));
    let mut out = AcceptStats::default();
    for w in walkers {
        out.merge(&w.stats);
        w.stats = AcceptStats::default();
    }
    out
}

/// `|psi|^2` of an ansatz at fixed parameters.
pub struct AnsatzTarget<'a> {
    pub ansatz: &'a Ansatz,
    pub params: &'a [f64],
}

impl Target for AnsatzTarget<'_> {
    type Cache = PositionDerivatives;

    fn evaluate(&self, x: &[Vec2]) -> Option<Evaluation<PositionDerivatives>> {
        let d = position_derivatives(self.ansatz, self.params, x)?;
        let log_prob = 2.0 * d.log_psi.re;
        if !log_prob.is_finite() {
            return None;
        }
        Some(Evaluation { log_prob, grad: d.grad.iter().map(|g| 2.0 * g.re).collect(), cache: d })
    }

    fn wrap(&self, x: &mut [Vec2]) {
        for r in x {
            *r = self.ansatz.cell.wrap(*r);
        }
    }
}

/// Gaussian debug density with independent coordinates.
pub struct GaussianTarget {
    pub mean: Vec2,
    pub sigma: f64,
    pub n_particles: usize,
}

impl Target for GaussianTarget {
    type Cache = ();

    fn evaluate(&self, x: &[Vec2]) -> Option<Evaluation<()>> {
        let s2 = self.sigma * self.sigma;
        let mut lp = 0.0;
        let mut grad = Vec::with_capacity(2 * x.len());
        for r in x {
            for a in 0..2 {
                let d = r[a] - self.mean[a];
                lp -= 0.5 * d * d / s2;
                grad.push(-d / s2);
            }
        }
        Some(Evaluation { log_prob: lp, grad, cache: () })
    }
}

/// Writes walker snapshots as `walker_id,electron_id,spin,x,y` rows.
pub fn export_walkers<W: Write>(out: &mut W, configs: &[Vec<Vec2>], n_up: usize) -> std::io::Result<()> {
    writeln!(out, "walker_id,electron_id,spin,x,y")?;
    for (w, x) in configs.iter().enumerate() {
        for (i, r) in x.iter().enumerate() {
            let spin = if i < n_up { "up" } else { "down" };
            writeln!(out, "{w},{i},{spin},{:.17e},{:.17e}", r[0], r[1])?;
        }
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("line {0}: {1}")]
    Parse(usize, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads snapshots written by [`export_walkers`]; returns configurations and `n_up`.
pub fn import_walkers<R: std::io::BufRead>(input: R) -> Result<(Vec<Vec<Vec2>>, usize), SnapshotError> {
    let mut configs: Vec<Vec<Vec2>> = Vec::new();
    let mut n_up = 0;
    for (ln, line) in input.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| SnapshotError::Parse(ln + 1, m.to_string());
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let w: usize = f[0].parse().map_err(|_| bad("walker_id"))?;
        let e: usize = f[1].parse().map_err(|_| bad("electron_id"))?;
        let x: f64 = f[3].parse().map_err(|_| bad("x"))?;
        let y: f64 = f[4].parse().map_err(|_| bad("y"))?;
        if w != configs.len() && w + 1 != configs.len() {
            return Err(bad("walker ids must be contiguous"));
        }
        if w == configs.len() {
            configs.push(Vec::new());
        }
        if e != configs[w].len() {
            return Err(bad("electron ids must be contiguous"));
        }
        match f[2] {
            "up" if w == 0 => n_up += 1,
            "up" | "down" => {}
            _ => return Err(bad("spin must be up or down")),
        }
        configs[w].push([x, y]);
    }
    Ok((configs, n_up))
}
