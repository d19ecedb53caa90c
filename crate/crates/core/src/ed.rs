//! Exact diagonalization of the two-electron (one up, one down) problem on a
//! real-space grid, used as a reference energy for small cells.
//!
//! The two-particle wavefunction lives on the product of two periodic grids
//! spanned by the supercell vectors. The Laplacian uses the 6-point stencil
//! on triangular grids and the 5-point stencil on rectangular ones; both are
//! second-order accurate, so two grids related by a factor 3/2 give an
//! `h^2` extrapolation. The lowest eigenvalue is found by Lanczos iteration
//! with a matrix-free product.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hamiltonian::{Hamiltonian, HamiltonianError, HamiltonianParams};
use crate::lattice::{dot, norm, MoireGeometry, SimulationCell};

#[derive(Debug, Error)]
pub enum EdError {
    #[error("the grid oracle handles exactly one up and one down electron, got {0} up and {1} down")]
    ElectronCount(usize, usize),
    #[error("grid_n must be even and in 4..=40, got {0}")]
    GridSize(usize),
    #[error("grid {grid_n}^4 needs {needed} bytes, above the limit of {limit} bytes")]
    Memory { grid_n: usize, needed: usize, limit: usize },
    #[error("the grid oracle needs a softened interaction")]
    NotSoftened,
    #[error("unsupported cell for the finite-difference stencil: {0}")]
    Stencil(String),
    #[error("Lanczos did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
}

/// Default limit on the memory held by the Lanczos vectors.
pub const DEFAULT_MEMORY_LIMIT: usize = 1 << 30;

/// Ground energies on the grid pair `(n, 3n/2)` and their extrapolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdReport {
    pub grid_n: usize,
    pub energy: f64,
    pub refined_grid_n: usize,
    pub refined_energy: f64,
    /// `h^2` extrapolation to the continuum.
    pub extrapolated: f64,
}

/// Periodic single-particle grid with a stencil for `sum (f_nbr - f_0)` weights.
struct Grid {
    n: usize,
    /// Neighbor offsets in grid units with stencil weights (already divided by h^2).
    stencil: Vec<(i64, i64, f64)>,
}

impl Grid {
    fn new(cell: &SimulationCell, n: usize) -> Result<Grid, EdError> {
        let a = &cell.lattice;
        let (l0, l1) = (norm(a[0]), norm(a[1]));
        let cosang = dot(a[0], a[1]) / (l0 * l1);
        let (h0, h1) = (l0 / n as f64, l1 / n as f64);
        let stencil = if cosang.abs() < 1e-12 {
            vec![
                (1, 0, 1.0 / (h0 * h0)),
                (-1, 0, 1.0 / (h0 * h0)),
                (0, 1, 1.0 / (h1 * h1)),
                (0, -1, 1.0 / (h1 * h1)),
            ]
        } else if (cosang - 0.5).abs() < 1e-12 && (l0 - l1).abs() < 1e-12 * l0 {
            let w = 2.0 / (3.0 * h0 * h0);
            vec![(1, 0, w), (-1, 0, w), (0, 1, w), (0, -1, w), (1, -1, w), (-1, 1, w)]
        } else {
            return Err(EdError::Stencil(format!("angle cosine {cosang}, lengths {l0} and {l1}")));
        };
        Ok(Grid { n, stencil })
    }

    fn points(&self) -> usize {
        self.n * self.n
    }

    /// Neighbor index tables and total diagonal weight.
    fn neighbors(&self) -> (Vec<Vec<usize>>, Vec<f64>, f64) {
        let n = self.n as i64;
        let mut tables = Vec::new();
        for &(di, dj, _) in &self.stencil {
            let mut t = Vec::with_capacity(self.points());
            for i in 0..n {
                for j in 0..n {
                    t.push(((i + di).rem_euclid(n) * n + (j + dj).rem_euclid(n)) as usize);
                }
            }
            tables.push(t);
        }
        let weights: Vec<f64> = self.stencil.iter().map(|s| s.2).collect();
        let diag = weights.iter().sum();
        (tables, weights, diag)
    }

    fn position(&self, cell: &SimulationCell, i: usize, j: usize) -> [f64; 2] {
        cell.cartesian([i as f64 / self.n as f64, j as f64 / self.n as f64])
    }
}

/// Lowest eigenvalue of a real symmetric operator by Lanczos iteration
/// without reorthogonalization, started from `start`.
pub fn lanczos_lowest(start: Vec<f64>, apply: impl Fn(&[f64], &mut [f64]), tol: f64, max_iter: usize) -> Result<f64, EdError> {
    let dim = start.len();
    let nrm = start.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v: Vec<f64> = start.iter().map(|x| x / nrm).collect();
    let mut v_prev = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut last = f64::INFINITY;
    for it in 0..max_iter {
        apply(&v, &mut w);
        let alpha: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let beta_prev = betas.last().copied().unwrap_or(0.0);
        for k in 0..dim {
            w[k] -= alpha * v[k] + beta_prev * v_prev[k];
        }
        alphas.push(alpha);
        let beta = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let check = (it + 1) % 10 == 0 || beta < 1e-14 || it + 1 == max_iter || it + 1 == dim;
        if check {
            let m = alphas.len();
            let t = DMatrix::from_fn(m, m, |i, j| {
                if i == j {
                    alphas[i]
                } else if i == j + 1 {
                    betas[j]
                } else if j == i + 1 {
                    betas[i]
                } else {
                    0.0
                }
            });
            let low = SymmetricEigen::new(t).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if (low - last).abs() <= tol * low.abs().max(1.0) || beta < 1e-14 || it + 1 == dim {
                return Ok(low);
            }
            last = low;
        }
        betas.push(beta);
        for k in 0..dim {
            let next = w[k] / beta;
            v_prev[k] = v[k];
            v[k] = next;
        }
    }
    Err(EdError::NoConvergence(max_iter))
}

const LANCZOS_TOL: f64 = 1e-12;
const LANCZOS_MAX: usize = 5000;

/// Lowest single-particle energy on an `n x n` grid with the moiré potential.
pub fn single_particle_ground_energy(cell: &SimulationCell, geometry: &MoireGeometry, v_m_over_w: f64, n: usize) -> Result<f64, EdError> {
    let grid = Grid::new(cell, n)?;
    let h = Hamiltonian::new(cell, geometry, &HamiltonianParams::softened(v_m_over_w, 0.0, 1.0))?;
    let l2 = h.length_scale().powi(2);
    let (tables, weights, diag) = grid.neighbors();
    let pot: Vec<f64> = (0..grid.points()).map(|p| h.moire_potential_value(grid.position(cell, p / n, p % n))).collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        for p in 0..x.len() {
            let mut lap = -diag * x[p];
            for (t, w) in tables.iter().zip(&weights) {
                lap += w * x[t[p]];
            }
            y[p] = -0.5 * l2 * lap + pot[p] * x[p];
        }
    };
    lanczos_lowest(vec![1.0; grid.points()], apply, LANCZOS_TOL, LANCZOS_MAX)
}

/// Two-electron ground energy (one up, one down) on an `n x n` grid per electron.
pub fn ground_energy_on_grid(
    cell: &SimulationCell,
    geometry: &MoireGeometry,
    params: &HamiltonianParams,
    n: usize,
    memory_limit: usize,
) -> Result<f64, EdError> {
    if cell.n_up != 1 || cell.n_down != 1 {
        return Err(EdError::ElectronCount(cell.n_up, cell.n_down));
    }
    if params.softening.is_none() {
        return Err(EdError::NotSoftened);
    }
    let points = n * n;
    let dim = points * points;
    let needed = dim * std::mem::size_of::<f64>() * 5;
    if needed > memory_limit {
        return Err(EdError::Memory { grid_n: n, needed, limit: memory_limit });
    }
    let grid = Grid::new(cell, n)?;
    let h = Hamiltonian::new(cell, geometry, params)?;
    let l2 = h.length_scale().powi(2);
    let (tables, weights, diag) = grid.neighbors();
    let one: Vec<f64> = (0..points).map(|p| h.moire_potential_value(grid.position(cell, p / n, p % n))).collect();
    // pair potential depends only on the grid difference
    let pair: Vec<f64> = (0..points)
        .map(|p| {
            let d = grid.position(cell, p / n, p % n);
            h.ee_energy(&[d, [0.0, 0.0]]).unwrap_or(f64::INFINITY)
        })
        .collect();
    let mut diag_pot = vec![0.0; dim];
    for p1 in 0..points {
        let (i1, j1) = (p1 / n, p1 % n);
        for p2 in 0..points {
            let (i2, j2) = (p2 / n, p2 % n);
            let d = ((i1 + n - i2) % n) * n + (j1 + n - j2) % n;
            diag_pot[p1 * points + p2] = one[p1] + one[p2] + pair[d];
        }
    }
    let apply = |x: &[f64], y: &mut [f64]| {
        for p1 in 0..points {
            let row = p1 * points;
            for p2 in 0..points {
                let idx = row + p2;
                let mut lap = -2.0 * diag * x[idx];
                for (t, w) in tables.iter().zip(&weights) {
                    lap += w * (x[t[p1] * points + p2] + x[row + t[p2]]);
                }
                y[idx] = -0.5 * l2 * lap + diag_pot[idx] * x[idx];
            }
        }
    };
    lanczos_lowest(vec![1.0; dim], apply, LANCZOS_TOL, LANCZOS_MAX)
}

/// Ground energy on the grid pair `(grid_n, 3 grid_n / 2)` with extrapolation.
pub fn ed_oracle(
    cell: &SimulationCell,
    geometry: &MoireGeometry,
    params: &HamiltonianParams,
    grid_n: usize,
    memory_limit: usize,
) -> Result<EdReport, EdError> {
    if grid_n % 2 != 0 || !(4..=40).contains(&grid_n) {
        return Err(EdError::GridSize(grid_n));
    }
    let refined = grid_n * 3 / 2;
    let e1 = ground_energy_on_grid(cell, geometry, params, grid_n, memory_limit)?;
    let e2 = ground_energy_on_grid(cell, geometry, params, refined, memory_limit)?;
    let (n1, n2) = ((grid_n * grid_n) as f64, (refined * refined) as f64);
    Ok(EdReport {
        grid_n,
        energy: e1,
        refined_grid_n: refined,
        refined_energy: e2,
        extrapolated: (e2 * n2 - e1 * n1) / (n2 - n1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_cell, CellShape};
    use std::f64::consts::PI;

    fn cell() -> (SimulationCell, MoireGeometry) {
        let c = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.25, 1, 1).unwrap();
        let g = MoireGeometry::new(&c, PI / 3.0).unwrap();
        (c, g)
    }

    #[test]
    fn free_particles_have_zero_energy() {
        let (c, g) = cell();
        let p = HamiltonianParams::softened(0.0, 0.0, 1.0);
        let e = ground_energy_on_grid(&c, &g, &p, 8, DEFAULT_MEMORY_LIMIT).unwrap();
        assert!(e.abs() < 1e-10, "{e}");
    }

    #[test]
    fn non_interacting_energy_is_separable() {
        let (c, g) = cell();
        let p = HamiltonianParams::softened(5.0, 0.0, 1.0);
        let e2 = ground_energy_on_grid(&c, &g, &p, 10, DEFAULT_MEMORY_LIMIT).unwrap();
        let e1 = single_particle_ground_energy(&c, &g, 5.0, 10).unwrap();
        assert!((e2 - 2.0 * e1).abs() < 1e-9 * e1.abs(), "{e2} {e1}");
    }

    #[test]
    fn single_particle_plane_wave_spectrum() {
        // lowest nonzero level of the free grid Hamiltonian: a single plane wave
        // is an eigenvector with the stencil's dispersion; the ground state is k = 0
        let (c, g) = cell();
        let e = single_particle_ground_energy(&c, &g, 0.0, 12).unwrap();
        assert!(e.abs() < 1e-12);
    }

    #[test]
    fn lanczos_on_diagonal_matrix() {
        let d: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 3.0 + i as f64 * 0.01).collect();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let e = lanczos_lowest(vec![1.0; 200], |x, y| {
            for i in 0..x.len() {
                y[i] = d[i] * x[i];
            }
        }, 1e-13, 1000)
        .unwrap();
        assert!((e - min).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_requests() {
        let (c, g) = cell();
        let p = HamiltonianParams::softened(1.0, 1.0, 1.0);
        assert!(matches!(ed_oracle(&c, &g, &p, 42, DEFAULT_MEMORY_LIMIT), Err(EdError::GridSize(42))));
        assert!(matches!(ground_energy_on_grid(&c, &g, &p, 30, 1000), Err(EdError::Memory { .. })));
        let ewald = HamiltonianParams::new(1.0, 1.0);
        assert!(matches!(ground_energy_on_grid(&c, &g, &ewald, 8, DEFAULT_MEMORY_LIMIT), Err(EdError::NotSoftened)));
        let c3 = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.5, 2, 2).unwrap();
        assert!(matches!(ground_energy_on_grid(&c3, &g, &p, 8, DEFAULT_MEMORY_LIMIT), Err(EdError::ElectronCount(2, 2))));
    }
}
