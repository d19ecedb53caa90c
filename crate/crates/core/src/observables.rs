//! Estimators over sampled configurations: complex polarization, spin
//! densities, pair correlations, molecular localization and the statistics
//! of two-electron molecules on hexagonal rings.
//!
//! Every accumulator merges associatively so per-walker partials can be
//! reduced in any order. Configurations list the `n_up` spin-up electrons
//! first.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::lattice::{
    bin_center, dot, grid_dims, norm, GeometryError, MoireGeometry, SimulationCell, Vec2, VoronoiPartition,
};

#[derive(Debug, thiserror::Error)]
pub enum ObservableError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("accumulators have different shapes")]
    Shape,
    #[error("no samples accumulated")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// Smallest nonzero reciprocal vector of the supercell.
pub fn polarization_vector(cell: &SimulationCell) -> Vec2 {
    let b = &cell.reciprocal;
    let g_max = norm(b[0]).min(norm(b[1]));
    cell.reciprocal_lattice_points(g_max)
        .into_iter()
        .find(|g| norm(*g) > 1e-12 * g_max)
        .expect("reciprocal basis is nonzero")
}

/// `exp(-i g . sum_i r_i)` for one configuration.
pub fn polarization_sample(g: Vec2, x: &[Vec2]) -> Complex64 {
    let phase: f64 = x.iter().map(|r| dot(g, *r)).sum();
    Complex64::from_polar(1.0, -phase)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polarization {
    pub z: Complex64,
    pub abs: f64,
    /// Jackknife standard error of `|Z|`.
    pub se: f64,
}

/// Blocks used by the jackknife; samples are split into contiguous blocks,
/// which should hold whole Markov chains (walker-major order) to be independent.
pub const JACKKNIFE_BLOCKS: usize = 64;

/// Mean of the per-sample phases with a blocked jackknife error on `|Z|`.
pub fn complex_polarization(samples: &[Complex64]) -> Result<Polarization, ObservableError> {
    let n = samples.len();
    if n == 0 {
        return Err(ObservableError::Empty);
    }
    let total: Complex64 = samples.iter().sum();
    let z = total / n as f64;
    let nb = JACKKNIFE_BLOCKS.min(n);
    if nb < 2 {
        return Ok(Polarization { z, abs: z.norm(), se: f64::NAN });
    }
    let mut leave_out = Vec::with_capacity(nb);
    for b in 0..nb {
        let (lo, hi) = (b * n / nb, (b + 1) * n / nb);
        let part: Complex64 = samples[lo..hi].iter().sum();
        leave_out.push(((total - part) / (n - (hi - lo)) as f64).norm());
    }
    let mean = leave_out.iter().sum::<f64>() / nb as f64;
    let var = leave_out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (nb - 1) as f64 / nb as f64;
    Ok(Polarization { z, abs: z.norm(), se: var.sqrt() })
}

/// Per-spin histograms on the Voronoi grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub dims: [usize; 2],
    pub counts_up: Vec<f64>,
    pub counts_down: Vec<f64>,
    pub n_samples: u64,
}

impl DensityGrid {
    pub fn new(partition: &VoronoiPartition) -> DensityGrid {
        let n = partition.n_points();
        DensityGrid { dims: partition.dims, counts_up: vec![0.0; n], counts_down: vec![0.0; n], n_samples: 0 }
    }

    pub fn accumulate(&mut self, cell: &SimulationCell, partition: &VoronoiPartition, x: &[Vec2], n_up: usize) {
        for (i, r) in x.iter().enumerate() {
            let b = partition.bin_of(cell, *r);
            if i < n_up {
                self.counts_up[b] += 1.0;
            } else {
                self.counts_down[b] += 1.0;
            }
        }
        self.n_samples += 1;
    }

    pub fn merge(&mut self, other: &DensityGrid) -> Result<(), ObservableError> {
        if self.dims != other.dims {
            return Err(ObservableError::Shape);
        }
        for (a, b) in self.counts_up.iter_mut().zip(&other.counts_up) {
            *a += b;
        }
        for (a, b) in self.counts_down.iter_mut().zip(&other.counts_down) {
            *a += b;
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    fn bin_area(&self, cell: &SimulationCell) -> f64 {
        cell.area() / (self.dims[0] * self.dims[1]) as f64
    }

    /// `(rho_up, rho_down)` per bin; the cell integral of both is `N_e`.
    pub fn rho(&self, cell: &SimulationCell) -> (Vec<f64>, Vec<f64>) {
        let s = 1.0 / (self.n_samples.max(1) as f64 * self.bin_area(cell));
        (self.counts_up.iter().map(|c| c * s).collect(), self.counts_down.iter().map(|c| c * s).collect())
    }

    /// Expected electrons per bin, both spins.
    pub fn bin_occupancy(&self) -> Vec<f64> {
        let s = 1.0 / self.n_samples.max(1) as f64;
        self.counts_up.iter().zip(&self.counts_down).map(|(u, d)| (u + d) * s).collect()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W, cell: &SimulationCell) -> std::io::Result<()> {
        let (up, down) = self.rho(cell);
        writeln!(out, "x,y,rho_up,rho_down")?;
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                let r = bin_center(cell, self.dims, i, j);
                let k = i * self.dims[1] + j;
                writeln!(out, "{:.10e},{:.10e},{:.10e},{:.10e}", r[0], r[1], up[k], down[k])?;
            }
        }
        Ok(())
    }
}

/// Ordered-pair displacement histograms on a periodic grid over the cell.
///
/// `g_{ss'}(r) = A / (N_s N_s') <sum_{i in s, j in s', i != j} delta(r - r_ij)>`,
/// so the spin-summed `g` of an ideal gas is `1 - 1/N` and
/// `(N/A) int (g - 1) = -1` holds exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub dims: [usize; 2],
    pub n_up: usize,
    pub n_down: usize,
    /// Counts indexed by `[up-up, up-down, down-up, down-down]`.
    pub counts: [Vec<f64>; 4],
    pub n_samples: u64,
}

/// Default displacement bins per moiré lattice constant.
pub const PAIR_GRID_RESOLUTION: usize = 16;

/// One output bin; `None` marks an empty bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationBin {
    pub dx: f64,
    pub dy: f64,
    pub g: Option<f64>,
    pub g_s: Option<f64>,
    pub se: Option<f64>,
}

impl PairCorrelation {
    pub fn new(cell: &SimulationCell, resolution: usize, n_up: usize, n_down: usize) -> PairCorrelation {
        let dims = grid_dims(cell, resolution);
        let n = dims[0] * dims[1];
        PairCorrelation { dims, n_up, n_down, counts: std::array::from_fn(|_| vec![0.0; n]), n_samples: 0 }
    }

    fn bin(&self, cell: &SimulationCell, d: Vec2) -> usize {
        let f = cell.fractional(d);
        let idx = |x: f64, n: usize| (((x - x.floor()) * n as f64).floor() as usize).min(n - 1);
        idx(f[0], self.dims[0]) * self.dims[1] + idx(f[1], self.dims[1])
    }

    pub fn accumulate(&mut self, cell: &SimulationCell, x: &[Vec2]) {
        let n_up = self.n_up;
        for (i, ri) in x.iter().enumerate() {
            for (j, rj) in x.iter().enumerate() {
                if i == j {
                    continue;
                }
                let c = 2 * (i >= n_up) as usize + (j >= n_up) as usize;
                let b = self.bin(cell, sub(*ri, *rj));
                self.counts[c][b] += 1.0;
            }
        }
        self.n_samples += 1;
    }

    pub fn merge(&mut self, other: &PairCorrelation) -> Result<(), ObservableError> {
        if self.dims != other.dims || self.n_up != other.n_up || self.n_down != other.n_down {
            return Err(ObservableError::Shape);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    fn n_electrons(&self) -> usize {
        self.n_up + self.n_down
    }

    /// `A / (n_samples * bin area)`, the factor turning counts into pair densities.
    fn scale(&self) -> f64 {
        (self.dims[0] * self.dims[1]) as f64 / self.n_samples.max(1) as f64
    }

    fn spin_counts(&self) -> [usize; 4] {
        [self.n_up * self.n_up, self.n_up * self.n_down, self.n_down * self.n_up, self.n_down * self.n_down]
    }

    /// Spin-resolved `g_{ss'}` in the order of [`PairCorrelation::counts`];
    /// empty bins and channels without pairs are `None`.
    pub fn spin_resolved(&self) -> [Vec<Option<f64>>; 4] {
        let s = self.scale();
        let nn = self.spin_counts();
        std::array::from_fn(|c| {
            self.counts[c]
                .iter()
                .map(|&k| (k > 0.0 && nn[c] > 0).then(|| s * k / nn[c] as f64))
                .collect()
        })
    }

    fn total(&self, b: usize) -> f64 {
        self.counts.iter().map(|c| c[b]).sum()
    }

    /// Spin-summed `g` per bin.
    pub fn g(&self) -> Vec<Option<f64>> {
        let n2 = (self.n_electrons() * self.n_electrons()) as f64;
        let s = self.scale();
        (0..self.counts[0].len()).map(|b| {
            let t = self.total(b);
            (t > 0.0).then(|| s * t / n2)
        }).collect()
    }

    /// `g_s` from same-spin minus opposite-spin counts.
    pub fn g_s_direct(&self) -> Vec<Option<f64>> {
        let n2 = (self.n_electrons() * self.n_electrons()) as f64;
        let s = self.scale();
        (0..self.counts[0].len()).map(|b| {
            let same = self.counts[0][b] + self.counts[3][b];
            let opposite = self.counts[1][b] + self.counts[2][b];
            (same + opposite > 0.0).then(|| s * (same - opposite) / n2)
        }).collect()
    }

    /// `g_s = sum_{ss'} (2 delta_{ss'} - 1) (N_s N_s' / N^2) g_{ss'}`.
    pub fn g_s_recombined(&self) -> Vec<Option<f64>> {
        let n2 = (self.n_electrons() * self.n_electrons()) as f64;
        let nn = self.spin_counts();
        let g = self.spin_resolved();
        (0..self.counts[0].len()).map(|b| {
            if self.total(b) == 0.0 {
                return None;
            }
            let mut acc = 0.0;
            for c in 0..4 {
                let sign = if c == 0 || c == 3 { 1.0 } else { -1.0 };
                acc += sign * nn[c] as f64 / n2 * g[c][b].unwrap_or(0.0);
            }
            Some(acc)
        }).collect()
    }

    /// Poisson error on `g` per bin.
    pub fn se(&self) -> Vec<Option<f64>> {
        self.g().iter().enumerate().map(|(b, g)| g.map(|g| g / self.total(b).sqrt())).collect()
    }

    /// `(N/A) int (g - 1) d^2r`, with empty bins contributing `g = 0`.
    pub fn sum_rule(&self, cell: &SimulationCell) -> f64 {
        let nb = (self.dims[0] * self.dims[1]) as f64;
        let da = cell.area() / nb;
        let integral: f64 = self.g().iter().map(|g| g.unwrap_or(0.0) - 1.0).sum::<f64>() * da;
        self.n_electrons() as f64 / cell.area() * integral
    }

    /// Bins with minimum-image displacement coordinates.
    pub fn bins(&self, cell: &SimulationCell) -> Vec<CorrelationBin> {
        let (g, g_s, se) = (self.g(), self.g_s_direct(), self.se());
        let mut out = Vec::with_capacity(g.len());
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                let k = i * self.dims[1] + j;
                let d = cell.minimum_image(bin_center(cell, self.dims, i, j));
                out.push(CorrelationBin { dx: d[0], dy: d[1], g: g[k], g_s: g_s[k], se: se[k] });
            }
        }
        out
    }

    /// Writes `dx,dy,g,g_s,se`; missing values are empty fields.
    pub fn write_csv<W: Write>(&self, out: &mut W, cell: &SimulationCell) -> std::io::Result<()> {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.10e}")).unwrap_or_default();
        writeln!(out, "dx,dy,g,g_s,se")?;
        for b in self.bins(cell) {
            writeln!(out, "{:.10e},{:.10e},{},{},{}", b.dx, b.dy, f(b.g), f(b.g_s), f(b.se))?;
        }
        Ok(())
    }
}

/// Molecular localization of a density under the best ring registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub f_o: f64,
    pub f_u: f64,
    pub f_m: f64,
    pub registration: (usize, usize),
    pub occupied_rings: Vec<usize>,
}

/// Sites belonging to any of `rings`.
fn occupied_sites(cell: &SimulationCell, geometry: &MoireGeometry, rings: &[usize]) -> Vec<bool> {
    let mut occ = vec![false; geometry.minima_sites.len()];
    for &r in rings {
        for s in geometry.ring_sites(cell, r) {
            occ[s] = true;
        }
    }
    occ
}

/// Per-site electron counts from per-bin occupancies.
///
/// Grid summation leaves small errors in the Voronoi areas, which are equal
/// for every honeycomb site in the continuum. Counts are rescaled by the
/// exact-to-grid area ratio and renormalized to the original total, so a
/// uniform field gives identical occupancies on every site.
pub fn site_occupancies(cell: &SimulationCell, partition: &VoronoiPartition, bin_occupancy: &[f64]) -> Vec<f64> {
    let raw = partition.integrate(bin_occupancy);
    let areas = partition.site_areas(cell);
    let nominal = cell.area() / partition.n_sites as f64;
    let corrected: Vec<f64> = raw.iter().zip(&areas).map(|(n, a)| n * nominal / a).collect();
    let total: f64 = raw.iter().sum();
    let ctot: f64 = corrected.iter().sum();
    if ctot == 0.0 {
        return corrected;
    }
    corrected.iter().map(|c| c * total / ctot).collect()
}

/// `f_o`, `f_u` and `f_m = 3 (f_o - f_u)` for given site occupancies,
/// maximizing `f_o` over the four ring registrations.
pub fn molecular_localization(
    cell: &SimulationCell,
    geometry: &MoireGeometry,
    occupancy: &[f64],
) -> Result<Localization, ObservableError> {
    let mut best: Option<Localization> = None;
    for (p, q) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        let rings = geometry.registration(cell, p, q)?;
        let occ = occupied_sites(cell, geometry, &rings);
        let (mut so, mut no, mut su, mut nu) = (0.0, 0usize, 0.0, 0usize);
        for (n, &o) in occupancy.iter().zip(&occ) {
            if o {
                so += n;
                no += 1;
            } else {
                su += n;
                nu += 1;
            }
        }
        let f_o = if no > 0 { so / no as f64 } else { 0.0 };
        let f_u = if nu > 0 { su / nu as f64 } else { 0.0 };
        if best.as_ref().is_none_or(|b| f_o > b.f_o) {
            best = Some(Localization { f_o, f_u, f_m: 3.0 * (f_o - f_u), registration: (p, q), occupied_rings: rings });
        }
    }
    Ok(best.expect("four registrations tried"))
}

/// An up and a down electron sharing one occupied ring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Molecule {
    pub ring: usize,
    pub up: usize,
    pub down: usize,
}

/// Assigns electrons to their nearest occupied ring. Returns `None` unless
/// every occupied ring hosts exactly one up and one down electron.
pub fn molecule_assignment(
    cell: &SimulationCell,
    geometry: &MoireGeometry,
    occupied_rings: &[usize],
    x: &[Vec2],
    n_up: usize,
) -> Option<Vec<Molecule>> {
    let mut up: Vec<Vec<usize>> = vec![Vec::new(); occupied_rings.len()];
    let mut down: Vec<Vec<usize>> = vec![Vec::new(); occupied_rings.len()];
    for (i, r) in x.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (k, &ring) in occupied_rings.iter().enumerate() {
            let d = norm(cell.minimum_image(sub(*r, geometry.ring_centers[ring])));
            if d < best.0 {
                best = (d, k);
            }
        }
        if i < n_up {
            up[best.1].push(i);
        } else {
            down[best.1].push(i);
        }
    }
    occupied_rings
        .iter()
        .enumerate()
        .map(|(k, &ring)| match (up[k].as_slice(), down[k].as_slice()) {
            ([u], [d]) => Some(Molecule { ring, up: *u, down: *d }),
            _ => None,
        })
        .collect()
}

/// Signed angle from `(r_up - c)` to `(r_down - c)` about the ring center, in `[0, 2 pi)`.
pub fn pair_angle(cell: &SimulationCell, center: Vec2, r_up: Vec2, r_down: Vec2) -> f64 {
    let a = cell.minimum_image(sub(r_up, center));
    let b = cell.minimum_image(sub(r_down, center));
    let t = (a[0] * b[1] - a[1] * b[0]).atan2(dot(a, b));
    if t < 0.0 {
        t + 2.0 * PI
    } else {
        t
    }
}

/// Dipole `p = minimage(r_up - r_down)` and center of mass
/// `c + (minimage(r_up - c) + minimage(r_down - c)) / 2`.
pub fn dipole_and_com(cell: &SimulationCell, center: Vec2, r_up: Vec2, r_down: Vec2) -> (Vec2, Vec2) {
    let p = cell.minimum_image(sub(r_up, r_down));
    let a = cell.minimum_image(sub(r_up, center));
    let b = cell.minimum_image(sub(r_down, center));
    (p, [center[0] + 0.5 * (a[0] + b[0]), center[1] + 0.5 * (a[1] + b[1])])
}

/// Histogram on `[lo, hi)`. Periodic histograms center bin `k` on `lo + k w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub periodic: bool,
    pub counts: Vec<f64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize, periodic: bool) -> Histogram {
        Histogram { lo, hi, periodic, counts: vec![0.0; bins.max(1)] }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let n = self.counts.len();
        let u = (v - self.lo) / self.width();
        if self.periodic {
            (u.round().rem_euclid(n as f64) as usize) % n
        } else {
            (u.floor().max(0.0) as usize).min(n - 1)
        }
    }

    pub fn center(&self, k: usize) -> f64 {
        let off = if self.periodic { 0.0 } else { 0.5 };
        self.lo + (k as f64 + off) * self.width()
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1.0;
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<(), ObservableError> {
        if self.counts.len() != other.counts.len() || self.lo != other.lo || self.hi != other.hi {
            return Err(ObservableError::Shape);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Probabilities summing to one (all zero when empty).
    pub fn normalized(&self) -> Vec<f64> {
        let t = self.total();
        self.counts.iter().map(|c| if t > 0.0 { c / t } else { 0.0 }).collect()
    }
}

/// COM distances below this multiple of the superlattice constant count as nearest neighbours.
pub const NEIGHBOR_FACTOR: f64 = 1.2;
pub const ANGLE_BINS: usize = 36;

/// Statistics of molecules over snapshots, for a fixed registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolecularStats {
    pub occupied_rings: Vec<usize>,
    pub theta: Histogram,
    pub delta_theta: Histogram,
    pub com: PairCorrelation,
    pub n_snapshots: u64,
    pub n_valid: u64,
    /// Molecules skipped in alignment statistics for a vanishing dipole.
    pub n_degenerate: u64,
}

impl MolecularStats {
    pub fn new(cell: &SimulationCell, occupied_rings: Vec<usize>, resolution: usize) -> MolecularStats {
        let n_mol = occupied_rings.len();
        MolecularStats {
            occupied_rings,
            theta: Histogram::new(0.0, 2.0 * PI, ANGLE_BINS, true),
            delta_theta: Histogram::new(0.0, PI, ANGLE_BINS / 2, false),
            com: PairCorrelation::new(cell, resolution, n_mol, 0),
            n_snapshots: 0,
            n_valid: 0,
            n_degenerate: 0,
        }
    }

    pub fn accumulate(&mut self, cell: &SimulationCell, geometry: &MoireGeometry, x: &[Vec2], n_up: usize) {
        self.n_snapshots += 1;
        let Some(mols) = molecule_assignment(cell, geometry, &self.occupied_rings, x, n_up) else {
            return;
        };
        self.n_valid += 1;
        let mut dipoles = Vec::with_capacity(mols.len());
        let mut coms = Vec::with_capacity(mols.len());
        for m in &mols {
            let c = geometry.ring_centers[m.ring];
            self.theta.add(pair_angle(cell, c, x[m.up], x[m.down]));
            let (p, com) = dipole_and_com(cell, c, x[m.up], x[m.down]);
            coms.push(com);
            if norm(p) < 1e-8 * cell.moire_constant {
                self.n_degenerate += 1;
                dipoles.push(None);
            } else {
                let n = norm(p);
                dipoles.push(Some([p[0] / n, p[1] / n]));
            }
        }
        let cutoff = NEIGHBOR_FACTOR * 2.0 * cell.moire_constant;
        for i in 0..mols.len() {
            for j in i + 1..mols.len() {
                let (Some(pi), Some(pj)) = (dipoles[i], dipoles[j]) else { continue };
                if norm(cell.minimum_image(sub(coms[i], coms[j]))) < cutoff {
                    self.delta_theta.add(dot(pi, pj).clamp(-1.0, 1.0).acos());
                }
            }
        }
        self.com.accumulate(cell, &coms);
    }

    pub fn merge(&mut self, other: &MolecularStats) -> Result<(), ObservableError> {
        if self.occupied_rings != other.occupied_rings {
            return Err(ObservableError::Shape);
        }
        self.theta.merge(&other.theta)?;
        self.delta_theta.merge(&other.delta_theta)?;
        self.com.merge(&other.com)?;
        self.n_snapshots += other.n_snapshots;
        self.n_valid += other.n_valid;
        self.n_degenerate += other.n_degenerate;
        Ok(())
    }

    pub fn validity_fraction(&self) -> f64 {
        if self.n_snapshots == 0 {
            0.0
        } else {
            self.n_valid as f64 / self.n_snapshots as f64
        }
    }

    /// Writes `bin_center,probability` rows.
    pub fn write_histogram<W: Write>(h: &Histogram, out: &mut W, label: &str) -> std::io::Result<()> {
        writeln!(out, "{label},probability")?;
        for (k, p) in h.normalized().iter().enumerate() {
            writeln!(out, "{:.10e},{:.10e}", h.center(k), p)?;
        }
        Ok(())
    }
}

/// Scalar summary written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct Report {
    pub Z_re: f64,
    pub Z_im: f64,
    pub absZ: f64,
    pub se: f64,
    pub f_o: Option<f64>,
    pub f_u: Option<f64>,
    pub f_m: Option<f64>,
    pub validity_fraction: Option<f64>,
}

/// All estimators over a set of snapshots.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub polarization: Polarization,
    pub density: DensityGrid,
    pub pairs: PairCorrelation,
    /// `None` when the cell admits no ring registration.
    pub localization: Option<Localization>,
    pub molecules: Option<MolecularStats>,
}

impl Analysis {
    pub fn report(&self) -> Report {
        let p = &self.polarization;
        Report {
            Z_re: p.z.re,
            Z_im: p.z.im,
            absZ: p.abs,
            se: p.se,
            f_o: self.localization.as_ref().map(|l| l.f_o),
            f_u: self.localization.as_ref().map(|l| l.f_u),
            f_m: self.localization.as_ref().map(|l| l.f_m),
            validity_fraction: self.molecules.as_ref().map(|m| m.validity_fraction()),
        }
    }
}

/// Runs every estimator over `snapshots`. The registration is fixed from
/// the accumulated density before molecules are assigned.
pub fn analyze(
    cell: &SimulationCell,
    geometry: &MoireGeometry,
    partition: &VoronoiPartition,
    snapshots: &[Vec<Vec2>],
    n_up: usize,
) -> Result<Analysis, ObservableError> {
    if snapshots.is_empty() {
        return Err(ObservableError::Empty);
    }
    let n_down = snapshots[0].len() - n_up;
    let g = polarization_vector(cell);
    let z: Vec<Complex64> = snapshots.iter().map(|x| polarization_sample(g, x)).collect();
    let polarization = complex_polarization(&z)?;
    let mut density = DensityGrid::new(partition);
    let mut pairs = PairCorrelation::new(cell, PAIR_GRID_RESOLUTION, n_up, n_down);
    for x in snapshots {
        density.accumulate(cell, partition, x, n_up);
        pairs.accumulate(cell, x);
    }
    let occ = site_occupancies(cell, partition, &density.bin_occupancy());
    let localization = match molecular_localization(cell, geometry, &occ) {
        Ok(l) => Some(l),
        Err(ObservableError::Geometry(GeometryError::IncompatibleRegistration)) => None,
        Err(e) => return Err(e),
    };
    let molecules = localization.as_ref().map(|l| {
        let mut m = MolecularStats::new(cell, l.occupied_rings.clone(), PAIR_GRID_RESOLUTION);
        for x in snapshots {
            m.accumulate(cell, geometry, x, n_up);
        }
        m
    });
    Ok(Analysis { polarization, density, pairs, localization, molecules })
}

#[cfg(test)]
mod tests;
