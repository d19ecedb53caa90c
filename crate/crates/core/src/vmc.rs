//! Variational Monte Carlo driver: walkers, energy estimation and SPRING
//! training steps.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ansatz::Ansatz;
use crate::derivatives::{param_gradient, PositionDerivatives};
use crate::hamiltonian::{Hamiltonian, LocalEnergyParts};
use crate::lattice::{MoireGeometry, Vec2};
use crate::optimizer::{spring_update, EnergyGradientBatch, OptimizerError, SpringConfig, SpringState};
use crate::sampler::{init_walkers, sweep_all, AcceptStats, AnsatzTarget, SamplerConfig, StepSize, Walker};

#[derive(Debug, Error)]
pub enum VmcError {
    #[error("parameter vector has {got} entries, ansatz expects {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("all {0} samples were flagged")]
    AllFlagged(usize),
    #[error("optimizer: {0}")]
    Optimizer(#[from] OptimizerError),
    #[error("parameters became non-finite at step {0} again after recovery")]
    Diverged(u64),
    #[error("walker state mismatch: {0}")]
    Walkers(String),
    #[error("{flagged} of {total} samples flagged, above the {FLAG_LIMIT} limit")]
    TooManyFlagged { flagged: u64, total: u64 },
}

/// Largest tolerated fraction of flagged samples over a run.
pub const FLAG_LIMIT: f64 = 1e-3;
/// Samples seen before the flagged fraction is enforced.
pub const FLAG_MIN_SAMPLES: u64 = 10_000;

/// One line of the training log. Energies are per electron, in W.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub energy_mean: f64,
    pub energy_se: f64,
    pub var_el: f64,
    pub acceptance_hmean: f64,
    pub tau: f64,
    pub eta: f64,
    pub grad_norm: f64,
    pub dtheta_norm: f64,
    pub n_flagged: usize,
}

impl StepLog {
    pub const CSV_HEADER: &'static str =
        "step,energy_mean,energy_se,var_EL,acceptance_hmean,tau,eta,grad_norm,dtheta_norm,n_flagged";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.12e},{:.6e},{:.6e},{:.6},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            self.step,
            self.energy_mean,
            self.energy_se,
            self.var_el,
            self.acceptance_hmean,
            self.tau,
            self.eta,
            self.grad_norm,
            self.dtheta_norm,
            self.n_flagged
        )
    }
}

/// Mean, standard error and variance of real samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub variance: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Estimate {
        let n = v.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, se: f64::NAN, variance: f64::NAN, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Estimate { mean, se: (variance / n as f64).sqrt(), variance, n }
    }
}

/// Serializable walker state: positions and rng stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkerSnapshot {
    pub x: Vec<Vec2>,
    pub rng: rand_chacha::ChaCha8Rng,
}

pub struct Vmc<'a> {
    pub ham: &'a Hamiltonian,
    pub ansatz: &'a Ansatz,
    pub params: Vec<f64>,
    pub spring: SpringState,
    pub spring_config: SpringConfig,
    pub step_size: StepSize,
    pub sampler: SamplerConfig,
    pub walkers: Vec<Walker<PositionDerivatives>>,
    /// Whether `eta0` has already been halved after a divergence.
    pub recovered: bool,
    /// Samples and flagged samples seen by training steps.
    pub samples_seen: u64,
    pub samples_flagged: u64,
}

/// Per-sample outputs used by a training step.
struct SampleRow {
    e: Complex64,
    o: Vec<Complex64>,
}

impl<'a> Vmc<'a> {
    pub fn new(
        ham: &'a Hamiltonian,
        ansatz: &'a Ansatz,
        geometry: &MoireGeometry,
        params: Vec<f64>,
        sampler: SamplerConfig,
        spring_config: SpringConfig,
        seed: u64,
    ) -> Result<Vmc<'a>, VmcError> {
        if params.len() != ansatz.n_params() {
            return Err(VmcError::ParamLength { got: params.len(), expected: ansatz.n_params() });
        }
        spring_config.validate()?;
        let cell = &ansatz.cell;
        let init = init_walkers(cell, geometry, sampler.n_walkers, seed, sampler.init);
        let snaps: Vec<WalkerSnapshot> = init.into_iter().map(|(x, rng)| WalkerSnapshot { x, rng }).collect();
        let tau0 = sampler.initial_tau.unwrap_or(0.02 * cell.r_s * cell.r_s);
        let step_size = StepSize::new(tau0, cell.area(), sampler.target_acceptance);
        let n = params.len();
        let mut vmc = Vmc {
            ham,
            ansatz,
            params,
            spring: SpringState::new(n),
            spring_config,
            step_size,
            sampler,
            walkers: Vec::new(),
            recovered: false,
            samples_seen: 0,
            samples_flagged: 0,
        };
        vmc.set_walkers(&snaps)?;
        Ok(vmc)
    }

    pub fn set_walkers(&mut self, snaps: &[WalkerSnapshot]) -> Result<(), VmcError> {
        let n = self.ansatz.n_electrons();
        if let Some(s) = snaps.iter().find(|s| s.x.len() != n) {
            return Err(VmcError::Walkers(format!("walker has {} electrons, system has {n}", s.x.len())));
        }
        let target = AnsatzTarget { ansatz: self.ansatz, params: &self.params };
        self.walkers = snaps.par_iter().map(|s| Walker::new_lenient(&target, s.x.clone(), s.rng.clone())).collect();
        Ok(())
    }

    pub fn walker_snapshots(&self) -> Vec<WalkerSnapshot> {
        self.walkers.iter().map(|w| WalkerSnapshot { x: w.x.clone(), rng: w.rng.clone() }).collect()
    }

    pub fn configurations(&self) -> Vec<Vec<Vec2>> {
        self.walkers.iter().map(|w| w.x.clone()).collect()
    }

    /// One sweep of every walker; adapts the shared step size when asked.
    pub fn sweep(&mut self, adapt: bool) -> AcceptStats {
        let target = AnsatzTarget { ansatz: self.ansatz, params: &self.params };
        let stats = sweep_all(&mut self.walkers, &target, self.step_size.tau, self.sampler.proposals_per_sweep);
        if adapt {
            self.step_size.adapt(&stats);
        }
        stats
    }

    pub fn warmup(&mut self, sweeps: usize) {
        for _ in 0..sweeps {
            self.sweep(true);
        }
    }

    fn refresh(&mut self) {
        let target = AnsatzTarget { ansatz: self.ansatz, params: &self.params };
        self.walkers.par_iter_mut().for_each(|w| w.refresh(&target));
    }

    /// Local energies at the current walker positions from cached derivatives.
    pub fn local_energies(&self) -> Vec<Option<LocalEnergyParts>> {
        self.walkers
            .par_iter()
            .map(|w| {
                if !w.is_valid() {
                    return None;
                }
                let d = &w.eval.cache;
                self.ham.local_energy(&w.x, &d.grad, d.laplacian).ok().filter(|p| p.is_finite())
            })
            .collect()
    }

    /// Energy per electron over the current walkers.
    pub fn energy(&self) -> (Estimate, usize) {
        let n = self.ansatz.n_electrons() as f64;
        let e: Vec<Option<LocalEnergyParts>> = self.local_energies();
        let flagged = e.iter().filter(|v| v.is_none()).count();
        let vals: Vec<f64> = e.into_iter().flatten().map(|p| p.total().re / n).collect();
        (Estimate::from_samples(&vals), flagged)
    }

    fn rows(&self) -> Vec<Option<SampleRow>> {
        self.walkers
            .par_iter()
            .map(|w| {
                if !w.is_valid() {
                    return None;
                }
                let d = &w.eval.cache;
                let parts = self.ham.local_energy(&w.x, &d.grad, d.laplacian).ok().filter(|p| p.is_finite())?;
                let (_, o) = param_gradient(self.ansatz, &self.params, &w.x)?;
                if o.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                    return None;
                }
                Some(SampleRow { e: parts.total(), o })
            })
            .collect()
    }

    /// Sampling sweep followed by one SPRING update. The step size keeps
    /// adapting between steps because the sampled density changes.
    pub fn train_step(&mut self) -> Result<StepLog, VmcError> {
        self.refresh();
        let stats = self.sweep(true);
        let rows = self.rows();
        let n_flagged = rows.iter().filter(|r| r.is_none()).count();
        let rows: Vec<SampleRow> = rows.into_iter().flatten().collect();
        self.samples_seen += self.walkers.len() as u64;
        self.samples_flagged += n_flagged as u64;
        if self.samples_seen >= FLAG_MIN_SAMPLES && self.samples_flagged as f64 > FLAG_LIMIT * self.samples_seen as f64 {
            return Err(VmcError::TooManyFlagged { flagged: self.samples_flagged, total: self.samples_seen });
        }
        if rows.len() < 2 {
            return Err(VmcError::AllFlagged(self.walkers.len()));
        }
        let ne = self.ansatz.n_electrons() as f64;
        let est = Estimate::from_samples(&rows.iter().map(|r| r.e.re / ne).collect::<Vec<_>>());
        // the optimizer works in effective Hartree units, W = Ha* / l^2
        let to_hartree = 1.0 / self.ham.length_scale().powi(2);
        let (o, e): (Vec<Vec<Complex64>>, Vec<Complex64>) = rows.into_iter().map(|r| (r.o, r.e * to_hartree)).unzip();
        let batch = EnergyGradientBatch::new(&o, &e, None)?;
        let step = self.spring.step;
        let backup = (self.params.clone(), self.spring.clone());
        let (eta, grad_norm, dtheta_norm) = match spring_update(&self.spring_config, &mut self.spring, &batch, &mut self.params) {
            Ok(s) => (s.eta, s.grad_norm, s.update_norm),
            // skipped step; damping is boosted for the next one
            Err(OptimizerError::Solve | OptimizerError::NonFinite) => (0.0, batch.energy_gradient().norm(), 0.0),
            Err(e) => return Err(e.into()),
        };
        if self.params.iter().any(|p| !p.is_finite()) {
            if self.recovered {
                return Err(VmcError::Diverged(step));
            }
            self.params = backup.0;
            self.spring = backup.1;
            self.spring_config.eta0 *= 0.5;
            self.recovered = true;
        }
        Ok(StepLog {
            step,
            energy_mean: est.mean,
            energy_se: est.se,
            var_el: est.variance,
            acceptance_hmean: stats.harmonic_mean(),
            tau: self.step_size.tau,
            eta,
            grad_norm,
            dtheta_norm,
            n_flagged,
        })
    }

    /// Frozen-step-size sampling: `sweeps` retained samples per walker,
    /// passed to `visit` after each sweep.
    pub fn measure(&mut self, sweeps: usize, mut visit: impl FnMut(&Vmc<'a>)) -> AcceptStats {
        self.refresh();
        let mut total = AcceptStats::default();
        for _ in 0..sweeps {
            total.merge(&self.sweep(false));
            visit(self);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::{AnsatzConfig, Mode};
    use crate::hamiltonian::HamiltonianParams;
    use crate::lattice::{build_cell, CellShape};
    use crate::sampler::InitStrategy;
    use rand::SeedableRng;

    #[test]
    fn free_fermion_energy_is_exact_and_constant() {
        // 1 + 6 plane waves per spin fill a closed shell
        let cell = build_cell(CellShape::Triangular, 2, 2, 5.0, 1.75, 7, 7).unwrap();
        let geo = MoireGeometry::new(&cell, std::f64::consts::PI / 3.0).unwrap();
        let ham = Hamiltonian::new(&cell, &geo, &HamiltonianParams::new(0.0, 0.0)).unwrap();
        let cfg = AnsatzConfig { backflow: false, neural_jastrow: false, cusp: false, n_planewaves: Some(7), ..AnsatzConfig::default() };
        let ans = Ansatz::new(&cell, &cfg, 0.0).unwrap();
        let params = ans.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let sampler = SamplerConfig { n_walkers: 16, proposals_per_sweep: 5, init: InitStrategy::Uniform, ..SamplerConfig::default() };
        let mut vmc = Vmc::new(&ham, &ans, &geo, params, sampler, SpringConfig::default(), 7).unwrap();
        vmc.warmup(5);
        let l = cell.r_s;
        let exact: f64 = 2.0 * ans.planewaves.iter().map(|g| 0.5 * l * l * (g[0] * g[0] + g[1] * g[1])).sum::<f64>() / 14.0;
        for _ in 0..3 {
            let log = vmc.train_step().unwrap();
            assert!((log.energy_mean - exact).abs() < 1e-10 * exact, "{} vs {exact}", log.energy_mean);
            assert!(log.var_el < 1e-16 * exact * exact);
            assert_eq!(log.n_flagged, 0);
        }
    }

    #[test]
    fn training_lowers_a_trial_energy() {
        let cell = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.25, 1, 1).unwrap();
        let geo = MoireGeometry::new(&cell, std::f64::consts::PI / 3.0).unwrap();
        let hp = HamiltonianParams::softened(2.0, 10.0, 0.1 * cell.moire_constant);
        let ham = Hamiltonian::new(&cell, &geo, &hp).unwrap();
        let cfg = AnsatzConfig {
            mode: Mode::Slater,
            layers: 1,
            attention_dim: 4,
            message_dim: 4,
            one_body_dim: 6,
            two_body_dim: 4,
            jastrow_dim: 6,
            ..AnsatzConfig::default()
        };
        let ans = Ansatz::new(&cell, &cfg, ham.cusp_coupling()).unwrap();
        let params = ans.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let sampler = SamplerConfig { n_walkers: 64, proposals_per_sweep: 5, ..SamplerConfig::default() };
        let spring = SpringConfig { eta0: 0.05, ..SpringConfig::default() };
        let mut vmc = Vmc::new(&ham, &ans, &geo, params, sampler, spring, 3).unwrap();
        vmc.warmup(30);
        let first: Vec<f64> = (0..5).map(|_| vmc.train_step().unwrap().energy_mean).collect();
        for _ in 0..40 {
            vmc.train_step().unwrap();
        }
        let last: Vec<f64> = (0..5).map(|_| vmc.train_step().unwrap().energy_mean).collect();
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(m(&last) < m(&first), "{first:?} -> {last:?}");
    }
}
