//! SPRING natural-gradient updates solved in sample space (minSR).
//!
//! Complex log-derivatives are stacked as real rows `[Re O; Im O]`, so the
//! Fisher matrix `S = X^T X` is real symmetric and the kernel `X X^T` has
//! twice as many rows as there are samples.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimizerError {
    #[error("need at least 2 unflagged samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample-space kernel could not be factorized")]
    Solve,
    #[error("update is not finite")]
    NonFinite,
    #[error("invalid optimizer setting: {0}")]
    BadParameter(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpringConfig {
    pub lambda: f64,
    pub mu: f64,
    pub eta0: f64,
    pub decay: f64,
}

impl Default for SpringConfig {
    fn default() -> Self {
        SpringConfig { lambda: 1e-3, mu: 0.9, eta0: 0.1, decay: 1000.0 }
    }
}

impl SpringConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: &str| Err(OptimizerError::BadParameter(m.into()));
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(0.0..1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1)");
        }
        if !(self.eta0 > 0.0) || !(self.decay > 0.0) {
            return bad("eta0 and decay must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringState {
    pub prev_update: Vec<f64>,
    pub step: u64,
    /// Multiplier on lambda after a failed solve; reset by the next success.
    pub lambda_boost: f64,
}

impl SpringState {
    pub fn new(n_params: usize) -> SpringState {
        SpringState { prev_update: vec![0.0; n_params], step: 0, lambda_boost: 1.0 }
    }
}

/// `eta_0 / (1 + step / decay)`.
pub fn lr_schedule(step: u64, eta0: f64, decay: f64) -> f64 {
    eta0 / (1.0 + step as f64 / decay)
}

/// Centered, weighted and real-stacked log-derivatives with local energies.
#[derive(Clone, Debug)]
pub struct EnergyGradientBatch {
    /// `2 N_s x N_p`; rows `s` and `N_s + s` hold `sqrt(w_s) Re/Im (O_s - <O>)`.
    pub x: DMatrix<f64>,
    /// `sqrt(w_s) (E_s - <E>)`.
    pub e_centered: Vec<Complex64>,
    pub energy_mean: Complex64,
    pub n_samples: usize,
}

impl EnergyGradientBatch {
    /// Builds a batch from per-sample rows. Weights are normalized internally.
    pub fn new(o: &[Vec<Complex64>], e_loc: &[Complex64], weights: Option<&[f64]>) -> Result<Self, OptimizerError> {
        let ns = o.len();
        if ns < 2 || e_loc.len() != ns {
            return Err(OptimizerError::TooFewSamples(ns));
        }
        let np = o[0].len();
        let w: Vec<f64> = match weights {
            Some(w) => {
                let t: f64 = w.iter().sum();
                w.iter().map(|v| v / t).collect()
            }
            None => vec![1.0 / ns as f64; ns],
        };
        let mut mean = vec![Complex64::new(0.0, 0.0); np];
        for (row, ws) in o.iter().zip(&w) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += ws * v;
            }
        }
        let e_mean: Complex64 = e_loc.iter().zip(&w).map(|(e, ws)| ws * e).sum();
        let mut x = DMatrix::zeros(2 * ns, np);
        for (s, row) in o.iter().enumerate() {
            let sw = w[s].sqrt();
            for (k, v) in row.iter().enumerate() {
                let d = v - mean[k];
                x[(s, k)] = sw * d.re;
                x[(ns + s, k)] = sw * d.im;
            }
        }
        let e_centered = e_loc.iter().zip(&w).map(|(e, ws)| ws.sqrt() * (e - e_mean)).collect();
        Ok(EnergyGradientBatch { x, e_centered, energy_mean: e_mean, n_samples: ns })
    }

    /// `g = 2 Re <(O - <O>)^* (E_L - <E>)>`.
    pub fn energy_gradient(&self) -> DVector<f64> {
        let ns = self.n_samples;
        let er = DVector::from_iterator(2 * ns, self.e_centered.iter().map(|e| e.re).chain(self.e_centered.iter().map(|e| e.im)));
        self.x.tr_mul(&er) * 2.0
    }

    /// Dense Fisher matrix `S = X^T X`, for tests and small problems.
    pub fn fisher(&self) -> DMatrix<f64> {
        self.x.tr_mul(&self.x)
    }
}

/// Solves `(X^T X + lambda I) u = v` through the sample-space kernel.
pub fn minsr_solve(x: &DMatrix<f64>, v: &DVector<f64>, lambda: f64) -> Result<DVector<f64>, OptimizerError> {
    let mut k = x * x.transpose();
    for i in 0..k.nrows() {
        k[(i, i)] += lambda;
    }
    let chol = k.cholesky().ok_or(OptimizerError::Solve)?;
    let xv = x * v;
    let y = chol.solve(&xv);
    let u = (v - x.tr_mul(&y)) / lambda;
    if u.iter().all(|a| a.is_finite()) {
        Ok(u)
    } else {
        Err(OptimizerError::NonFinite)
    }
}

/// Result of one SPRING step.
#[derive(Clone, Debug, PartialEq)]
pub struct SpringStep {
    pub eta: f64,
    pub grad_norm: f64,
    pub update_norm: f64,
}

/// `d_t = (S + lambda I)^{-1} (g + lambda mu d_{t-1})`, `theta <- theta - eta_t d_t`.
///
/// On a failed solve the parameters and state are left untouched except for
/// a tenfold lambda boost used by the next call.
pub fn spring_update(
    cfg: &SpringConfig,
    state: &mut SpringState,
    batch: &EnergyGradientBatch,
    params: &mut [f64],
) -> Result<SpringStep, OptimizerError> {
    let g = batch.energy_gradient();
    let lambda = cfg.lambda * state.lambda_boost;
    let prev = DVector::from_column_slice(&state.prev_update);
    let v = &g + &prev * (lambda * cfg.mu);
    let d = match minsr_solve(&batch.x, &v, lambda) {
        Ok(d) => d,
        Err(e) => {
            state.lambda_boost *= 10.0;
            return Err(e);
        }
    };
    let eta = lr_schedule(state.step, cfg.eta0, cfg.decay);
    for (p, dk) in params.iter_mut().zip(d.iter()) {
        *p -= eta * dk;
    }
    state.prev_update = d.as_slice().to_vec();
    state.step += 1;
    state.lambda_boost = 1.0;
    Ok(SpringStep { eta, grad_norm: g.norm(), update_norm: d.norm() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(ns: usize, np: usize, seed: u64) -> (Vec<Vec<Complex64>>, Vec<Complex64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = || Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let o = (0..ns).map(|_| (0..np).map(|_| c()).collect()).collect();
        let e = (0..ns).map(|_| c()).collect();
        (o, e)
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn sample_space_solve_matches_dense() {
        let (o, e) = synthetic(50, 200, 1);
        let batch = EnergyGradientBatch::new(&o, &e, None).unwrap();
        let v = DVector::from_fn(200, |i, _| (i as f64 * 0.3).sin());
        for lambda in [1e-3, 1e-1, 10.0] {
            let mut s = batch.fisher();
            for i in 0..200 {
                s[(i, i)] += lambda;
            }
            let dense = s.cholesky().unwrap().solve(&v);
            let fast = minsr_solve(&batch.x, &v, lambda).unwrap();
            assert!(rel(&fast, &dense) < 1e-9, "lambda {lambda}: {}", rel(&fast, &dense));
        }
    }

    #[test]
    fn zero_momentum_is_stochastic_reconfiguration() {
        let (o, e) = synthetic(20, 50, 2);
        let batch = EnergyGradientBatch::new(&o, &e, None).unwrap();
        let cfg = SpringConfig { mu: 0.0, ..SpringConfig::default() };
        let mut state = SpringState::new(50);
        state.prev_update = vec![1.0; 50];
        let mut p = vec![0.0; 50];
        spring_update(&cfg, &mut state, &batch, &mut p).unwrap();
        let mut s = batch.fisher();
        for i in 0..50 {
            s[(i, i)] += cfg.lambda;
        }
        let sr = s.cholesky().unwrap().solve(&batch.energy_gradient());
        let got = DVector::from_column_slice(&state.prev_update);
        assert!(rel(&got, &sr) < 1e-10);
        let expect: Vec<f64> = sr.iter().map(|d| -cfg.eta0 * d).collect();
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn large_damping_keeps_the_momentum_term() {
        let (o, e) = synthetic(10, 30, 3);
        let batch = EnergyGradientBatch::new(&o, &e, None).unwrap();
        let cfg = SpringConfig { lambda: 1e8, ..SpringConfig::default() };
        let mut state = SpringState::new(30);
        state.prev_update = (0..30).map(|i| 1.0 + i as f64).collect();
        let prev = DVector::from_column_slice(&state.prev_update);
        let mut p = vec![0.0; 30];
        spring_update(&cfg, &mut state, &batch, &mut p).unwrap();
        let got = DVector::from_column_slice(&state.prev_update);
        assert!(rel(&got, &(prev * cfg.mu)) < 1e-6);
    }

    #[test]
    fn stationary_inputs_give_no_update() {
        let (o, _) = synthetic(10, 30, 4);
        let e = vec![Complex64::new(-1.5, 0.0); 10];
        let batch = EnergyGradientBatch::new(&o, &e, None).unwrap();
        assert!(batch.energy_gradient().norm() < 1e-15);
        let mut state = SpringState::new(30);
        let mut p = vec![0.5; 30];
        let step = spring_update(&SpringConfig::default(), &mut state, &batch, &mut p).unwrap();
        assert!(step.update_norm < 1e-12);
        assert!(p.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn weights_are_normalized_and_columns_centered() {
        let (o, e) = synthetic(12, 8, 5);
        let w1 = vec![1.0; 12];
        let w2 = vec![2.0; 12];
        let a = EnergyGradientBatch::new(&o, &e, Some(&w1)).unwrap();
        let b = EnergyGradientBatch::new(&o, &e, Some(&w2)).unwrap();
        assert!((a.energy_gradient() - b.energy_gradient()).norm() < 1e-14);
        for k in 0..8 {
            let col: f64 = (0..24).map(|r| a.x[(r, k)]).sum();
            assert!(col.abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_halves_at_decay() {
        assert_eq!(lr_schedule(0, 0.1, 1000.0), 0.1);
        assert!((lr_schedule(1000, 0.1, 1000.0) - 0.05).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for s in 0..5000 {
            let e = lr_schedule(s, 0.1, 1000.0);
            assert!(e <= last);
            last = e;
        }
    }

    #[test]
    fn failed_solve_boosts_damping() {
        let mut state = SpringState::new(2);
        let batch = EnergyGradientBatch {
            x: DMatrix::from_element(2, 2, f64::NAN),
            e_centered: vec![Complex64::new(0.0, 0.0)],
            energy_mean: Complex64::new(0.0, 0.0),
            n_samples: 1,
        };
        let mut p = vec![1.0, 2.0];
        assert!(spring_update(&SpringConfig::default(), &mut state, &batch, &mut p).is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(state.lambda_boost, 10.0);
    }
}
