//! Moiré continuum Hamiltonian in units of the Fermi energy `W` of the
//! unpolarized gas.
//!
//! Positions are in effective Bohr radii. With `l = r_s a_B*` the natural
//! length, `W = 1 / r_s^2` Hartree* and the Hamiltonian reads
//!
//! ```text
//! H / W = -(l^2 / 2) sum_i lap_i - (V_m / W) sum_i Lambda(r_i) + coupling * l * sum_{i<j} v(r_ij)
//! ```
//!
//! where `v` is the periodic Coulomb kernel (Ewald) or a softened
//! minimum-image kernel. `coupling` equals `r_s` for the physical model but is
//! kept separate so that the interaction can be switched off.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::lattice::{dot, norm, MoireGeometry, SimulationCell, Vec2};

#[derive(Debug, Error, PartialEq)]
pub enum HamiltonianError {
    #[error("electrons {0} and {1} coincide (distance {2:e}); Coulomb energy is infinite")]
    Coincident(usize, usize, f64),
    #[error("invalid Hamiltonian parameter: {0}")]
    BadParameter(String),
}

/// Parameters of the model Hamiltonian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianParams {
    /// Moiré depth `V_m / W`.
    pub v_m_over_w: f64,
    /// Interaction prefactor.
    pub r_s: f64,
    /// Ewald splitting parameter in `1/a_B*`; default `sqrt(pi / A)`.
    #[serde(default)]
    pub ewald_alpha: Option<f64>,
    /// Reciprocal-space cutoff in `1/a_B*`; default `13 alpha`.
    #[serde(default)]
    pub ewald_kmax: Option<f64>,
    /// Real-space cutoff in `a_B*`; default `6.5 / alpha`.
    #[serde(default)]
    pub ewald_rmax: Option<f64>,
    /// Softening length in `a_B*`. When set, the interaction is the
    /// minimum-image kernel `1/sqrt(r^2 + s^2)` without background.
    #[serde(default)]
    pub softening: Option<f64>,
}

impl HamiltonianParams {
    pub fn new(v_m_over_w: f64, r_s: f64) -> Self {
        HamiltonianParams {
            v_m_over_w,
            r_s,
            ewald_alpha: None,
            ewald_kmax: None,
            ewald_rmax: None,
            softening: None,
        }
    }

    pub fn softened(v_m_over_w: f64, r_s: f64, s: f64) -> Self {
        HamiltonianParams { softening: Some(s), ..Self::new(v_m_over_w, r_s) }
    }
}

/// Local energy split into its terms. All parts are totals over the
/// configuration in units of `W`; `madelung` is `N` times the per-electron
/// self-image constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalEnergyParts {
    pub kinetic: Complex64,
    pub potential_moire: f64,
    pub potential_ee: f64,
    pub madelung: f64,
}

impl LocalEnergyParts {
    pub fn total(&self) -> Complex64 {
        self.kinetic + self.potential_moire + self.potential_ee + self.madelung
    }

    pub fn is_finite(&self) -> bool {
        self.kinetic.re.is_finite()
            && self.kinetic.im.is_finite()
            && self.potential_moire.is_finite()
            && self.potential_ee.is_finite()
            && self.madelung.is_finite()
    }
}

/// Periodic Coulomb kernel for a 2D lattice of point charges in 3D space,
/// with a uniform neutralizing background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ewald {
    pub alpha: f64,
    pub r_max: f64,
    pub k_max: f64,
    area: f64,
    /// Real-space translations, including zero.
    translations: Vec<Vec2>,
    /// One of each `+-G` pair with the coefficient `2 * (2 pi / A) erfc(G / 2 alpha) / G`.
    recip: Vec<(Vec2, f64)>,
    /// Self-image energy per particle.
    pub xi: f64,
}

impl Ewald {
    pub fn new(cell: &SimulationCell, alpha: Option<f64>, r_max: Option<f64>, k_max: Option<f64>) -> Result<Ewald, HamiltonianError> {
        let area = cell.area();
        let alpha = alpha.unwrap_or((std::f64::consts::PI / area).sqrt());
        let r_max = r_max.unwrap_or(6.5 / alpha);
        let k_max = k_max.unwrap_or(13.0 * alpha);
        for (name, v) in [("ewald_alpha", alpha), ("ewald_rmax", r_max), ("ewald_kmax", k_max)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(HamiltonianError::BadParameter(format!("{name} must be positive, got {v}")));
            }
        }
        // minimum-image displacements are bounded by the cell circumradius
        let reach = r_max + norm(cell.lattice[0]) + norm(cell.lattice[1]);
        let a = &cell.lattice;
        let shortest = cell.wigner_seitz_radius() * 2.0;
        let m = (reach / (shortest * 0.5)).ceil() as i64 + 1;
        let mut translations = Vec::new();
        for n0 in -m..=m {
            for n1 in -m..=m {
                let l = [n0 as f64 * a[0][0] + n1 as f64 * a[1][0], n0 as f64 * a[0][1] + n1 as f64 * a[1][1]];
                if norm(l) <= reach {
                    translations.push(l);
                }
            }
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut recip = Vec::new();
        for g in cell.reciprocal_lattice_points(k_max) {
            let gn = norm(g);
            if gn == 0.0 {
                continue;
            }
            // keep one member of each +-G pair
            if g[1] < 0.0 || (g[1] == 0.0 && g[0] < 0.0) {
                continue;
            }
            recip.push((g, 2.0 * two_pi / area * erfc(gn / (2.0 * alpha)) / gn));
        }
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut real_self = 0.0;
        for l in &translations {
            let d = norm(*l);
            if d > 0.0 && d < r_max {
                real_self += erfc(alpha * d) / d;
            }
        }
        let recip_self: f64 = recip.iter().map(|(_, c)| c).sum();
        let xi = 0.5 * (real_self + recip_self - 2.0 * sqrt_pi / (alpha * area) - 2.0 * alpha / sqrt_pi);
        Ok(Ewald { alpha, r_max, k_max, area, translations, recip, xi })
    }

    /// Pair kernel at a minimum-imaged displacement `r`, including the
    /// background contribution.
    pub fn pair(&self, r: Vec2) -> f64 {
        let mut real = 0.0;
        for l in &self.translations {
            let d = norm([r[0] + l[0], r[1] + l[1]]);
            if d < self.r_max {
                real += erfc(self.alpha * d) / d;
            }
        }
        let mut rec = 0.0;
        for (g, c) in &self.recip {
            rec += c * dot(*g, r).cos();
        }
        real + rec - 2.0 * std::f64::consts::PI.sqrt() / (self.alpha * self.area)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Interaction {
    Ewald(Box<Ewald>),
    Softened(f64),
}

/// Evaluator for the model Hamiltonian on one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hamiltonian {
    pub cell: SimulationCell,
    pub g_vectors: [Vec2; 3],
    pub phi: f64,
    pub params: HamiltonianParams,
    interaction: Interaction,
}

impl Hamiltonian {
    pub fn new(cell: &SimulationCell, geometry: &MoireGeometry, params: &HamiltonianParams) -> Result<Hamiltonian, HamiltonianError> {
        if !params.v_m_over_w.is_finite() || !params.r_s.is_finite() || params.r_s < 0.0 {
            return Err(HamiltonianError::BadParameter(format!(
                "need finite V_m/W and non-negative r_s, got {} and {}",
                params.v_m_over_w, params.r_s
            )));
        }
        let interaction = match params.softening {
            Some(s) if s > 0.0 && s.is_finite() => Interaction::Softened(s),
            Some(s) => return Err(HamiltonianError::BadParameter(format!("softening must be positive, got {s}"))),
            None => Interaction::Ewald(Box::new(Ewald::new(cell, params.ewald_alpha, params.ewald_rmax, params.ewald_kmax)?)),
        };
        Ok(Hamiltonian {
            cell: cell.clone(),
            g_vectors: geometry.g_vectors,
            phi: geometry.phi,
            params: params.clone(),
            interaction,
        })
    }

    /// Natural length `l = r_s a_B*` of the cell.
    pub fn length_scale(&self) -> f64 {
        self.cell.r_s
    }

    /// Prefactor turning a kernel in `1/a_B*` into units of `W`.
    fn coulomb_scale(&self) -> f64 {
        self.params.r_s * self.length_scale()
    }

    /// Cusp slope of the pair Jastrow needed to cancel the Coulomb
    /// divergence for unlike spins, in `1/a_B*`. Zero for softened kernels.
    pub fn cusp_coupling(&self) -> f64 {
        match self.interaction {
            Interaction::Ewald(_) => self.params.r_s / self.length_scale(),
            Interaction::Softened(_) => 0.0,
        }
    }

    pub fn ewald(&self) -> Option<&Ewald> {
        match &self.interaction {
            Interaction::Ewald(e) => Some(e),
            Interaction::Softened(_) => None,
        }
    }

    /// Moiré potential energy of one electron, `-(V_m/W) Lambda(r)`.
    pub fn moire_potential_value(&self, r: Vec2) -> f64 {
        if self.params.v_m_over_w == 0.0 {
            return 0.0;
        }
        -self.params.v_m_over_w * crate::lattice::lambda(&self.g_vectors, self.phi, r)
    }

    pub fn moire_energy(&self, positions: &[Vec2]) -> f64 {
        positions.iter().map(|r| self.moire_potential_value(*r)).sum()
    }

    /// Interaction kernel (in `1/a_B*`) at a displacement.
    pub fn pair_kernel(&self, d: Vec2) -> f64 {
        let r = self.cell.minimum_image(d);
        match &self.interaction {
            Interaction::Ewald(e) => e.pair(r),
            Interaction::Softened(s) => 1.0 / (dot(r, r) + s * s).sqrt(),
        }
    }

    /// Electron-electron energy without the self-image constant, in `W`.
    pub fn ee_energy(&self, positions: &[Vec2]) -> Result<f64, HamiltonianError> {
        if self.params.r_s == 0.0 {
            return Ok(0.0);
        }
        let mut sum = 0.0;
        let tiny = 1e-12 * self.length_scale();
        for i in 0..positions.len() {
            for j in i + 1..positions.len() {
                let d = self.cell.minimum_image([positions[i][0] - positions[j][0], positions[i][1] - positions[j][1]]);
                if self.params.softening.is_none() && norm(d) < tiny {
                    return Err(HamiltonianError::Coincident(i, j, norm(d)));
                }
                sum += self.pair_kernel(d);
            }
        }
        Ok(sum * self.coulomb_scale())
    }

    /// Self-image (Madelung) energy per electron in `W`.
    pub fn madelung_per_electron(&self) -> f64 {
        match &self.interaction {
            Interaction::Ewald(e) => e.xi * self.coulomb_scale(),
            Interaction::Softened(_) => 0.0,
        }
    }

    /// Full periodic Coulomb energy in `W` including the self-image term.
    pub fn ewald_ee_energy(&self, positions: &[Vec2]) -> Result<f64, HamiltonianError> {
        Ok(self.ee_energy(positions)? + positions.len() as f64 * self.madelung_per_electron())
    }

    /// Kinetic energy from log-derivatives, `-(l^2/2) [lap + sum (grad)^2]`.
    pub fn kinetic(&self, grad_log_psi: &[Complex64], laplacian_log_psi: Complex64) -> Complex64 {
        let sq: Complex64 = grad_log_psi.iter().map(|g| g * g).sum();
        let l = self.length_scale();
        -0.5 * l * l * (laplacian_log_psi + sq)
    }

    /// Local energy at a configuration given `grad log psi` (interleaved
    /// `x, y` per electron) and the summed Laplacian of `log psi`.
    pub fn local_energy(
        &self,
        positions: &[Vec2],
        grad_log_psi: &[Complex64],
        laplacian_log_psi: Complex64,
    ) -> Result<LocalEnergyParts, HamiltonianError> {
        Ok(LocalEnergyParts {
            kinetic: self.kinetic(grad_log_psi, laplacian_log_psi),
            potential_moire: self.moire_energy(positions),
            potential_ee: self.ee_energy(positions)?,
            madelung: positions.len() as f64 * self.madelung_per_electron(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_cell, CellShape};
    use std::f64::consts::PI;

    const PHI: f64 = PI / 3.0;

    fn setup(v: f64, rs: f64) -> (SimulationCell, Hamiltonian) {
        let cell = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.25, 1, 1).unwrap();
        let geo = MoireGeometry::new(&cell, PHI).unwrap();
        let h = Hamiltonian::new(&cell, &geo, &HamiltonianParams::new(v, rs)).unwrap();
        (cell, h)
    }

    #[test]
    fn moire_potential_minimum_and_periodicity() {
        let (cell, h) = setup(1.0, 0.0);
        let geo = MoireGeometry::new(&cell, PHI).unwrap();
        // minimize -Lambda on a dense grid over one moire cell
        let a = cell.moire_lattice;
        let mut best = f64::INFINITY;
        for i in 0..300 {
            for j in 0..300 {
                let (u, v) = (i as f64 / 300.0, j as f64 / 300.0);
                let r = [u * a[0][0] + v * a[1][0], u * a[0][1] + v * a[1][1]];
                best = best.min(h.moire_potential_value(r));
            }
        }
        assert!((best + 3.0).abs() < 1e-3);
        for s in &geo.minima_sites {
            assert!((h.moire_potential_value(*s) + 3.0).abs() < 1e-12);
        }
        let r = [1.3, -2.7];
        for t in a {
            let shifted = h.moire_potential_value([r[0] + t[0], r[1] + t[1]]);
            assert!((shifted - h.moire_potential_value(r)).abs() < 1e-12);
        }
        let (_, h0) = setup(0.0, 0.0);
        assert_eq!(h0.moire_potential_value(r), 0.0);
    }

    fn random_positions(cell: &SimulationCell, n: usize, seed: u64) -> Vec<Vec2> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| cell.cartesian([rng.random::<f64>(), rng.random::<f64>()])).collect()
    }

    #[test]
    fn ewald_independent_of_splitting() {
        let cell = build_cell(CellShape::Triangular, 3, 3, 10.0, 0.5, 5, 4).unwrap();
        let base = Ewald::new(&cell, None, None, None).unwrap();
        for seed in 0..100 {
            let pos = random_positions(&cell, 9, seed);
            let energy = |alpha: f64| {
                let e = Ewald::new(&cell, Some(alpha), None, None).unwrap();
                let mut s = 9.0 * e.xi;
                for i in 0..9 {
                    for j in i + 1..9 {
                        s += e.pair(cell.minimum_image([pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]]));
                    }
                }
                s
            };
            let e0 = energy(base.alpha);
            for f in [0.8, 1.2] {
                let e1 = energy(base.alpha * f);
                assert!((e1 - e0).abs() < 1e-10 * e0.abs().max(1.0), "{e0} {e1}");
            }
        }
    }

    #[test]
    fn ewald_cutoffs_converged() {
        let cell = build_cell(CellShape::Rectangular, 2, 4, 10.0, 0.5, 4, 4).unwrap();
        let a = Ewald::new(&cell, None, None, None).unwrap();
        let b = Ewald::new(&cell, Some(a.alpha * 1.1), Some(8.0 / a.alpha), Some(16.0 * a.alpha)).unwrap();
        assert!((a.xi - b.xi).abs() < 1e-9 * a.xi.abs());
        for seed in 0..100 {
            let p = random_positions(&cell, 2, 1000 + seed);
            let d = cell.minimum_image([p[0][0] - p[1][0], p[0][1] - p[1][1]]);
            if norm(d) < 1e-3 {
                continue;
            }
            assert!((a.pair(d) - b.pair(d)).abs() < 1e-9 * a.pair(d).abs().max(1.0));
        }
    }

    #[test]
    fn energy_translation_invariant_and_linear_in_coupling() {
        let cell = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.5, 2, 2).unwrap();
        let geo = MoireGeometry::new(&cell, PHI).unwrap();
        let h1 = Hamiltonian::new(&cell, &geo, &HamiltonianParams::new(0.0, 10.0)).unwrap();
        let h2 = Hamiltonian::new(&cell, &geo, &HamiltonianParams::new(0.0, 20.0)).unwrap();
        let p = random_positions(&cell, 4, 7);
        let e = h1.ewald_ee_energy(&p).unwrap();
        let shifted: Vec<Vec2> = p.iter().map(|r| [r[0] + 3.1, r[1] - 0.4]).collect();
        assert!((h1.ewald_ee_energy(&shifted).unwrap() - e).abs() < 1e-10 * e.abs());
        assert!((h2.ewald_ee_energy(&p).unwrap() - 2.0 * e).abs() < 1e-12 * e.abs());
        let coincident = vec![p[0], p[0], p[2], p[3]];
        assert!(matches!(h1.ee_energy(&coincident), Err(HamiltonianError::Coincident(0, 1, _))));
    }

    #[test]
    fn kinetic_energy_of_plane_wave() {
        let (cell, h) = setup(0.0, 0.0);
        // log psi = i k.r for one electron: grad = i k, lap = 0
        let k = cell.reciprocal[0];
        let g = vec![Complex64::new(0.0, k[0]), Complex64::new(0.0, k[1])];
        let t = h.kinetic(&g, Complex64::new(0.0, 0.0));
        let l = h.length_scale();
        assert!((t.re - 0.5 * l * l * dot(k, k)).abs() < 1e-12);
        assert!(t.im.abs() < 1e-15);
    }

    #[test]
    fn softened_kernel_has_no_background() {
        let cell = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.25, 1, 1).unwrap();
        let geo = MoireGeometry::new(&cell, PHI).unwrap();
        let s = 0.1 * cell.moire_constant;
        let h = Hamiltonian::new(&cell, &geo, &HamiltonianParams::softened(2.0, 10.0, s)).unwrap();
        assert_eq!(h.madelung_per_electron(), 0.0);
        assert_eq!(h.cusp_coupling(), 0.0);
        let p = vec![[0.0, 0.0], [0.0, 0.0]];
        let e = h.ee_energy(&p).unwrap();
        assert!((e - 10.0 * 10.0 / s).abs() < 1e-12);
    }
}
