//! Periodic simulation cell, moiré reciprocal vectors, honeycomb minima,
//! hexagon ring centers and the Voronoi partition of the cell.
//!
//! Lengths are in effective Bohr radii. Lattice matrices store lattice vectors
//! as rows, so a position is `r = f[0] * a[0] + f[1] * a[1]` for fractional
//! coordinates `f`, and `reciprocal * lattice^T = 2 pi I`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("r_s must be positive and finite, got {0}")]
    BadDensity(f64),
    #[error("filling must be positive and finite, got {0}")]
    BadFilling(f64),
    #[error(
        "{n_up}+{n_down} electrons do not match filling {nu_m} on {n_cells} moire cells \
         (expected 2 * nu_m * n_cells = {expected} electrons)"
    )]
    InconsistentCount { n_up: usize, n_down: usize, nu_m: f64, n_cells: usize, expected: f64 },
    #[error("tiling {0}x{1} is empty")]
    EmptyTiling(usize, usize),
    #[error("rectangular cells need an even number of rows along y, got {0}")]
    OddRectangular(usize),
    #[error("phase {0} rad is not in the honeycomb family 60deg + n*120deg")]
    NotHoneycomb(f64),
    #[error("ring registrations need an even tiling compatible with the 2x2 superlattice")]
    IncompatibleRegistration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellShape {
    Triangular,
    Rectangular,
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Rows `b_i` with `b_i . a_j = 2 pi delta_ij` for lattice rows `a_j`.
pub fn reciprocal_of(a: &Mat2) -> Mat2 {
    let d = det(a);
    let s = 2.0 * PI / d;
    [[a[1][1] * s, -a[1][0] * s], [-a[0][1] * s, a[0][0] * s]]
}

/// Periodic supercell with electron content and density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationCell {
    pub shape: CellShape,
    pub n_cells_x: usize,
    pub n_cells_y: usize,
    pub r_s: f64,
    pub nu_m: f64,
    pub n_up: usize,
    pub n_down: usize,
    /// Moiré lattice constant `a_m`.
    pub moire_constant: f64,
    /// Moiré primitive vectors as rows.
    pub moire_lattice: Mat2,
    /// Supercell lattice vectors as rows.
    pub lattice: Mat2,
    pub reciprocal: Mat2,
}

/// Builds the simulation cell, solving the moiré constant from the density.
///
/// The triangular moiré Bravais lattice has cell area `(sqrt 3 / 2) a_m^2`
/// and the supercell holds `n_cells_x * n_cells_y` moiré cells, so
/// `n_cells (sqrt 3/2) a_m^2 = N pi r_s^2`.
pub fn build_cell(
    shape: CellShape,
    n_cells_x: usize,
    n_cells_y: usize,
    r_s: f64,
    nu_m: f64,
    n_up: usize,
    n_down: usize,
) -> Result<SimulationCell, GeometryError> {
    if !(r_s > 0.0) || !r_s.is_finite() {
        return Err(GeometryError::BadDensity(r_s));
    }
    if !(nu_m > 0.0) || !nu_m.is_finite() {
        return Err(GeometryError::BadFilling(nu_m));
    }
    if n_cells_x == 0 || n_cells_y == 0 {
        return Err(GeometryError::EmptyTiling(n_cells_x, n_cells_y));
    }
    let n_cells = n_cells_x * n_cells_y;
    let n_e = n_up + n_down;
    let expected = 2.0 * nu_m * n_cells as f64;
    if n_e == 0 || (n_e as f64 - expected).abs() > 1e-9 * expected.max(1.0) {
        return Err(GeometryError::InconsistentCount { n_up, n_down, nu_m, n_cells, expected });
    }
    let a_m = (n_e as f64 * PI * r_s * r_s / (n_cells as f64 * 3f64.sqrt() / 2.0)).sqrt();
    let a1 = [a_m, 0.0];
    let a2 = [0.5 * a_m, 0.5 * 3f64.sqrt() * a_m];
    let lattice = match shape {
        CellShape::Triangular => [
            [n_cells_x as f64 * a1[0], n_cells_x as f64 * a1[1]],
            [n_cells_y as f64 * a2[0], n_cells_y as f64 * a2[1]],
        ],
        CellShape::Rectangular => {
            if n_cells_y % 2 != 0 {
                return Err(GeometryError::OddRectangular(n_cells_y));
            }
            // rows of the rectangle are (2 a2 - a1) = (0, sqrt3 a_m)
            [[n_cells_x as f64 * a_m, 0.0], [0.0, (n_cells_y / 2) as f64 * 3f64.sqrt() * a_m]]
        }
    };
    Ok(SimulationCell {
        shape,
        n_cells_x,
        n_cells_y,
        r_s,
        nu_m,
        n_up,
        n_down,
        moire_constant: a_m,
        moire_lattice: [a1, a2],
        lattice,
        reciprocal: reciprocal_of(&lattice),
    })
}

impl SimulationCell {
    /// A square cell of side `side` for debugging and oracle checks.
    /// The moiré lattice is set to the supercell itself.
    pub fn square_debug(side: f64, n_up: usize, n_down: usize) -> SimulationCell {
        let n_e = (n_up + n_down) as f64;
        let lattice = [[side, 0.0], [0.0, side]];
        SimulationCell {
            shape: CellShape::Rectangular,
            n_cells_x: 1,
            n_cells_y: 1,
            r_s: (side * side / (n_e * PI)).sqrt(),
            nu_m: n_e / 2.0,
            n_up,
            n_down,
            moire_constant: side,
            moire_lattice: lattice,
            lattice,
            reciprocal: reciprocal_of(&lattice),
        }
    }

    pub fn n_electrons(&self) -> usize {
        self.n_up + self.n_down
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells_x * self.n_cells_y
    }

    pub fn area(&self) -> f64 {
        det(&self.lattice).abs()
    }

    /// Fractional coordinates `f_i = b_i . r / 2 pi`.
    pub fn fractional(&self, r: Vec2) -> Vec2 {
        [dot(self.reciprocal[0], r) / (2.0 * PI), dot(self.reciprocal[1], r) / (2.0 * PI)]
    }

    pub fn cartesian(&self, f: Vec2) -> Vec2 {
        let a = &self.lattice;
        [f[0] * a[0][0] + f[1] * a[1][0], f[0] * a[0][1] + f[1] * a[1][1]]
    }

    /// Matrix `M` with `f = M r`, rows `b_i / 2 pi`.
    pub fn fractional_matrix(&self) -> Mat2 {
        let b = &self.reciprocal;
        let s = 1.0 / (2.0 * PI);
        [[b[0][0] * s, b[0][1] * s], [b[1][0] * s, b[1][1] * s]]
    }

    /// Wraps a position into the cell, fractional coordinates in `[0, 1)`.
    /// Positions already inside are returned unchanged, so wrapping is idempotent.
    pub fn wrap(&self, r: Vec2) -> Vec2 {
        let mut f = self.fractional(r);
        if f.iter().all(|x| (0.0..1.0).contains(x)) {
            return r;
        }
        for x in &mut f {
            *x -= x.floor();
            if *x >= 1.0 {
                *x = 0.0;
            }
        }
        self.cartesian(f)
    }

    /// Lattice translation `n0 a0 + n1 a1`.
    pub fn translation(&self, n0: i64, n1: i64) -> Vec2 {
        self.cartesian([n0 as f64, n1 as f64])
    }

    /// Shortest periodic image of `d`, searched over the 3x3 shell around the
    /// fractional-rounded image.
    pub fn minimum_image(&self, d: Vec2) -> Vec2 {
        let f = self.fractional(d);
        let base = self.cartesian([f[0] - f[0].round(), f[1] - f[1].round()]);
        let mut best = base;
        let mut best_n2 = dot(base, base);
        for n0 in -1..=1 {
            for n1 in -1..=1 {
                if n0 == 0 && n1 == 0 {
                    continue;
                }
                let t = self.translation(n0, n1);
                let c = [base[0] + t[0], base[1] + t[1]];
                let n2 = dot(c, c);
                if n2 < best_n2 {
                    best = c;
                    best_n2 = n2;
                }
            }
        }
        best
    }

    /// Radius of the largest disk inscribed in the Wigner-Seitz cell.
    pub fn wigner_seitz_radius(&self) -> f64 {
        let mut shortest = f64::INFINITY;
        for n0 in -2i64..=2 {
            for n1 in -2i64..=2 {
                if n0 == 0 && n1 == 0 {
                    continue;
                }
                shortest = shortest.min(norm(self.translation(n0, n1)));
            }
        }
        0.5 * shortest
    }

    /// Supercell reciprocal lattice vectors with `|G| <= g_max`, sorted by length.
    pub fn reciprocal_lattice_points(&self, g_max: f64) -> Vec<Vec2> {
        let b = &self.reciprocal;
        let bmin = norm(b[0]).min(norm(b[1]));
        // the reduced basis here is at most 60deg skewed; a generous bound suffices
        let m = (2.0 * g_max / bmin).ceil() as i64 + 2;
        let mut out = Vec::new();
        for i in -m..=m {
            for j in -m..=m {
                let g = [i as f64 * b[0][0] + j as f64 * b[1][0], i as f64 * b[0][1] + j as f64 * b[1][1]];
                if norm(g) <= g_max * (1.0 + 1e-12) {
                    out.push(g);
                }
            }
        }
        out.sort_by(|x, y| dot(*x, *x).partial_cmp(&dot(*y, *y)).unwrap());
        out
    }
}

/// Moiré potential geometry: `Lambda(r) = 2 sum_j cos(g_j . r + phi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoireGeometry {
    pub g_vectors: [Vec2; 3],
    pub phi: f64,
    pub minima_sites: Vec<Vec2>,
    pub ring_centers: Vec<Vec2>,
    /// Moiré-lattice integer labels `(i, j)` of each ring center.
    pub ring_labels: Vec<(usize, usize)>,
}

/// The three smallest moiré reciprocal vectors, summing to zero.
pub fn reciprocal_vectors(cell: &SimulationCell) -> [Vec2; 3] {
    let b = reciprocal_of(&cell.moire_lattice);
    [b[0], b[1], [-(b[0][0] + b[1][0]), -(b[0][1] + b[1][1])]]
}

/// `Lambda(r)` with its gradient and Hessian.
pub fn lambda_with_derivs(g: &[Vec2; 3], phi: f64, r: Vec2) -> (f64, Vec2, Mat2) {
    let mut val = 0.0;
    let mut grad = [0.0; 2];
    let mut hess = [[0.0; 2]; 2];
    for gj in g {
        let a = dot(*gj, r) + phi;
        let (s, c) = a.sin_cos();
        val += 2.0 * c;
        for p in 0..2 {
            grad[p] -= 2.0 * s * gj[p];
            for q in 0..2 {
                hess[p][q] -= 2.0 * c * gj[p] * gj[q];
            }
        }
    }
    (val, grad, hess)
}

pub fn lambda(g: &[Vec2; 3], phi: f64, r: Vec2) -> f64 {
    g.iter().map(|gj| 2.0 * (dot(*gj, r) + phi).cos()).sum()
}

/// Index `n` with `phi = 60deg + n 120deg`, if `phi` is in the honeycomb family.
fn honeycomb_branch(phi: f64) -> Result<i64, GeometryError> {
    let x = (phi - PI / 3.0) / (2.0 * PI / 3.0);
    let n = x.round();
    if (x - n).abs() > 1e-9 || !phi.is_finite() {
        return Err(GeometryError::NotHoneycomb(phi));
    }
    Ok((n as i64).rem_euclid(3))
}

/// Newton refinement of a stationary point of `Lambda`.
fn newton_refine(g: &[Vec2; 3], phi: f64, mut r: Vec2) -> Vec2 {
    for _ in 0..50 {
        let (_, gr, h) = lambda_with_derivs(g, phi, r);
        let d = det(&h);
        let step = [(h[1][1] * gr[0] - h[0][1] * gr[1]) / d, (-h[1][0] * gr[0] + h[0][0] * gr[1]) / d];
        r = [r[0] - step[0], r[1] - step[1]];
        if norm(step) < 1e-15 * (1.0 + norm(r)) {
            break;
        }
    }
    r
}

/// Positions (in one moiré cell) of the two honeycomb sites and the ring center.
fn basis_points(cell: &SimulationCell, g: &[Vec2; 3], phi: f64) -> Result<([Vec2; 2], Vec2), GeometryError> {
    let n = honeycomb_branch(phi)? as f64;
    let a = &cell.moire_lattice;
    let at = |f: f64| [f * (a[0][0] + a[1][0]), f * (a[0][1] + a[1][1])];
    let s1 = newton_refine(g, phi, at(-n / 3.0));
    let s2 = newton_refine(g, phi, at(-(n + 1.0) / 3.0));
    let c = newton_refine(g, phi, at((1.0 - n) / 3.0));
    Ok(([s1, s2], c))
}

/// Honeycomb minima of the moiré potential `-Lambda` in the supercell.
pub fn find_minima(cell: &SimulationCell, phi: f64) -> Result<Vec<Vec2>, GeometryError> {
    let g = reciprocal_vectors(cell);
    let (sites, _) = basis_points(cell, &g, phi)?;
    let mut out = Vec::with_capacity(2 * cell.n_cells());
    for (i, j) in moire_cell_labels(cell) {
        for s in &sites {
            out.push(cell.wrap(moire_translate(cell, *s, i, j)));
        }
    }
    Ok(out)
}

/// Hexagon centers (maxima of `-Lambda`), one per moiré cell, with labels.
pub fn ring_centers(cell: &SimulationCell, phi: f64) -> Result<(Vec<Vec2>, Vec<(usize, usize)>), GeometryError> {
    let g = reciprocal_vectors(cell);
    let (_, c) = basis_points(cell, &g, phi)?;
    let labels = moire_cell_labels(cell);
    let centers = labels.iter().map(|&(i, j)| cell.wrap(moire_translate(cell, c, i, j))).collect();
    Ok((centers, labels))
}

fn moire_cell_labels(cell: &SimulationCell) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(cell.n_cells());
    for j in 0..cell.n_cells_y {
        for i in 0..cell.n_cells_x {
            v.push((i, j));
        }
    }
    v
}

fn moire_translate(cell: &SimulationCell, r: Vec2, i: usize, j: usize) -> Vec2 {
    let a = &cell.moire_lattice;
    let (i, j) = (i as f64, j as f64);
    [r[0] + i * a[0][0] + j * a[1][0], r[1] + i * a[0][1] + j * a[1][1]]
}

impl MoireGeometry {
    /// Honeycomb geometry with phase `phi` (radians).
    pub fn new(cell: &SimulationCell, phi: f64) -> Result<MoireGeometry, GeometryError> {
        let minima_sites = find_minima(cell, phi)?;
        let (ring_centers, ring_labels) = ring_centers(cell, phi)?;
        Ok(MoireGeometry { g_vectors: reciprocal_vectors(cell), phi, minima_sites, ring_centers, ring_labels })
    }

    pub fn lambda(&self, r: Vec2) -> f64 {
        lambda(&self.g_vectors, self.phi, r)
    }

    /// Index of the site nearest to `r` under the minimum-image metric.
    pub fn nearest_site(&self, cell: &SimulationCell, r: Vec2) -> usize {
        nearest(cell, &self.minima_sites, r)
    }

    pub fn nearest_ring(&self, cell: &SimulationCell, r: Vec2) -> usize {
        nearest(cell, &self.ring_centers, r)
    }

    /// Ring-center indices occupied under registration `(p, q)`: those whose
    /// moiré labels are congruent to `(p, q)` mod 2.
    pub fn registration(&self, cell: &SimulationCell, p: usize, q: usize) -> Result<Vec<usize>, GeometryError> {
        check_registration_compatible(cell)?;
        Ok(self
            .ring_labels
            .iter()
            .enumerate()
            .filter(|(_, &(i, j))| i % 2 == p % 2 && j % 2 == q % 2)
            .map(|(k, _)| k)
            .collect())
    }

    /// The minima sites lying on the hexagon around ring center `ring`.
    pub fn ring_sites(&self, cell: &SimulationCell, ring: usize) -> Vec<usize> {
        let c = self.ring_centers[ring];
        let rad = cell.moire_constant / 3f64.sqrt();
        self.minima_sites
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                let d = cell.minimum_image([s[0] - c[0], s[1] - c[1]]);
                (norm(d) - rad).abs() < 1e-6 * cell.moire_constant
            })
            .map(|(k, _)| k)
            .collect()
    }
}

fn check_registration_compatible(cell: &SimulationCell) -> Result<(), GeometryError> {
    let ok = match cell.shape {
        CellShape::Triangular => cell.n_cells_x % 2 == 0 && cell.n_cells_y % 2 == 0,
        CellShape::Rectangular => cell.n_cells_x % 2 == 0 && cell.n_cells_y % 4 == 0,
    };
    if ok {
        Ok(())
    } else {
        Err(GeometryError::IncompatibleRegistration)
    }
}

fn nearest(cell: &SimulationCell, points: &[Vec2], r: Vec2) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, p) in points.iter().enumerate() {
        let d = cell.minimum_image([r[0] - p[0], r[1] - p[1]]);
        let d2 = dot(d, d);
        if d2 < best_d {
            best_d = d2;
            best = k;
        }
    }
    best
}

/// Assignment of a regular grid over the supercell to the nearest minima site.
///
/// Each grid bin is represented by its center. Bins cut by a Voronoi edge are
/// resolved on a finer sub-grid and recorded in `shared` with the fraction
/// of the bin belonging to each site; integration uses those fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoronoiPartition {
    /// Points per moiré lattice constant.
    pub grid_resolution: usize,
    /// Grid points along the two supercell vectors.
    pub dims: [usize; 2],
    /// Site index of grid point `(i, j)` at `i * dims[1] + j`.
    pub site_assignment: Vec<usize>,
    /// `(grid point, [(site, fraction)])` for bins cut by a Voronoi edge.
    pub shared: Vec<(usize, Vec<(usize, f64)>)>,
    pub n_sites: usize,
}

pub const DEFAULT_GRID_RESOLUTION: usize = 48;

const SUBDIVISION: usize = 4;
const TIE_TOL: f64 = 1e-9;

/// Grid dimensions along the supercell vectors for a resolution per moiré constant.
pub fn grid_dims(cell: &SimulationCell, resolution: usize) -> [usize; 2] {
    let a = &cell.lattice;
    let n0 = (resolution as f64 * norm(a[0]) / cell.moire_constant).round().max(1.0) as usize;
    let n1 = (resolution as f64 * norm(a[1]) / cell.moire_constant).round().max(1.0) as usize;
    [n0, n1]
}

/// Cartesian point at fractional grid coordinates `(x, y)` in bin units.
fn grid_point(cell: &SimulationCell, dims: [usize; 2], x: f64, y: f64) -> Vec2 {
    cell.cartesian([x / dims[0] as f64, y / dims[1] as f64])
}

/// Cartesian center of grid bin `(i, j)`.
pub fn bin_center(cell: &SimulationCell, dims: [usize; 2], i: usize, j: usize) -> Vec2 {
    grid_point(cell, dims, i as f64 + 0.5, j as f64 + 0.5)
}

/// Squared minimum-image distances from `r` to every site.
fn site_distances(cell: &SimulationCell, sites: &[Vec2], r: Vec2, out: &mut [f64]) {
    for (k, p) in sites.iter().enumerate() {
        let d = cell.minimum_image([r[0] - p[0], r[1] - p[1]]);
        out[k] = dot(d, d);
    }
}

pub fn voronoi_assign(geometry: &MoireGeometry, cell: &SimulationCell, grid_resolution: usize) -> VoronoiPartition {
    let dims = grid_dims(cell, grid_resolution);
    let sites = &geometry.minima_sites;
    let a = &cell.lattice;
    let diam = norm([a[0][0] / dims[0] as f64, a[0][1] / dims[0] as f64])
        + norm([a[1][0] / dims[1] as f64, a[1][1] / dims[1] as f64]);
    let tol = TIE_TOL * cell.moire_constant * cell.moire_constant;
    let mut site_assignment = Vec::with_capacity(dims[0] * dims[1]);
    let mut shared = Vec::new();
    let mut d2 = vec![0.0; sites.len()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            site_distances(cell, sites, bin_center(cell, dims, i, j), &mut d2);
            let (mut best, mut second) = (f64::INFINITY, f64::INFINITY);
            let mut best_k = 0;
            for (k, &d) in d2.iter().enumerate() {
                if d < best {
                    second = best;
                    best = d;
                    best_k = k;
                } else if d < second {
                    second = d;
                }
            }
            site_assignment.push(best_k);
            if second.sqrt() - best.sqrt() > diam {
                continue;
            }
            // the bin may straddle an edge: split it on a sub-grid
            let mut frac: Vec<(usize, f64)> = Vec::new();
            let w = 1.0 / (SUBDIVISION * SUBDIVISION) as f64;
            for si in 0..SUBDIVISION {
                for sj in 0..SUBDIVISION {
                    let x = i as f64 + (si as f64 + 0.5) / SUBDIVISION as f64;
                    let y = j as f64 + (sj as f64 + 0.5) / SUBDIVISION as f64;
                    site_distances(cell, sites, grid_point(cell, dims, x, y), &mut d2);
                    let m = d2.iter().cloned().fold(f64::INFINITY, f64::min);
                    let near: SmallVec<[usize; 4]> = (0..sites.len()).filter(|&k| d2[k] - m <= tol).collect();
                    for &k in &near {
                        let share = w / near.len() as f64;
                        match frac.iter_mut().find(|(s, _)| *s == k) {
                            Some(e) => e.1 += share,
                            None => frac.push((k, share)),
                        }
                    }
                }
            }
            if frac.len() > 1 {
                shared.push((site_assignment.len() - 1, frac));
            }
        }
    }
    VoronoiPartition { grid_resolution, dims, site_assignment, shared, n_sites: sites.len() }
}

impl VoronoiPartition {
    pub fn n_points(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Grid bin containing `r` (after wrapping into the cell).
    pub fn bin_of(&self, cell: &SimulationCell, r: Vec2) -> usize {
        let f = cell.fractional(r);
        let idx = |x: f64, n: usize| {
            let w = x - x.floor();
            ((w * n as f64).floor() as usize).min(n - 1)
        };
        idx(f[0], self.dims[0]) * self.dims[1] + idx(f[1], self.dims[1])
    }

    pub fn site_of(&self, cell: &SimulationCell, r: Vec2) -> usize {
        self.site_assignment[self.bin_of(cell, r)]
    }

    /// Integrates a per-bin field (already multiplied by bin area) per site.
    pub fn integrate(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_sites];
        for (w, &s) in weights.iter().zip(&self.site_assignment) {
            out[s] += w;
        }
        for (p, frac) in &self.shared {
            let w = weights[*p];
            out[self.site_assignment[*p]] -= w;
            for &(s, f) in frac {
                out[s] += w * f;
            }
        }
        out
    }

    /// Area of each Voronoi region, by grid summation.
    pub fn site_areas(&self, cell: &SimulationCell) -> Vec<f64> {
        let da = cell.area() / self.n_points() as f64;
        self.integrate(&vec![da; self.n_points()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PHI: f64 = PI / 3.0;

    fn cell66() -> SimulationCell {
        build_cell(CellShape::Triangular, 6, 6, 10.0, 0.25, 9, 9).unwrap()
    }

    #[test]
    fn builds_paper_cells() {
        let c = cell66();
        assert_eq!(c.n_electrons(), 18);
        assert_eq!(c.n_cells(), 36);
        let c4 = build_cell(CellShape::Triangular, 4, 4, 10.0, 0.25, 4, 4).unwrap();
        assert_eq!(c4.n_electrons(), 8);
        let rect = build_cell(CellShape::Rectangular, 6, 8, 10.0, 0.25, 12, 12).unwrap();
        assert!((rect.area() - 24.0 * PI * 100.0).abs() < 1e-9 * rect.area());
    }

    #[test]
    fn moire_constant_solves_area_constraint() {
        let c = cell66();
        let expected = 10.0 * (PI / 3f64.sqrt()).sqrt();
        assert!((c.moire_constant - expected).abs() < 1e-12 * expected);
        // numerical area: sum of a fine grid of parallelogram bins
        let n = 200;
        let a = &c.lattice;
        let mut area = 0.0;
        for _ in 0..n * n {
            area += (a[0][0] * a[1][1] - a[0][1] * a[1][0]).abs() / (n * n) as f64;
        }
        assert!((area - 18.0 * PI * 100.0).abs() < 1e-9 * area);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            build_cell(CellShape::Triangular, 6, 6, 10.0, 0.25, 9, 8),
            Err(GeometryError::InconsistentCount { .. })
        ));
        let err = build_cell(CellShape::Triangular, 6, 6, 10.0, 0.25, 9, 8).unwrap_err();
        assert!(err.to_string().contains("expected"));
        assert_eq!(build_cell(CellShape::Triangular, 6, 6, 0.0, 0.25, 9, 9), Err(GeometryError::BadDensity(0.0)));
        assert_eq!(build_cell(CellShape::Triangular, 6, 6, -1.0, 0.25, 9, 9), Err(GeometryError::BadDensity(-1.0)));
    }

    #[test]
    fn reciprocal_relation_and_g_vectors() {
        let c = cell66();
        for i in 0..2 {
            for j in 0..2 {
                let v = dot(c.reciprocal[i], c.lattice[j]);
                let expected = if i == j { 2.0 * PI } else { 0.0 };
                assert!((v - expected).abs() < 1e-12);
            }
        }
        let g = reciprocal_vectors(&c);
        let len = 4.0 * PI / (3f64.sqrt() * c.moire_constant);
        for gj in &g {
            assert!((norm(*gj) - len).abs() < 1e-12);
        }
        for (a, b) in [(0, 1), (1, 2), (0, 2)] {
            let cosang = dot(g[a], g[b]) / (len * len);
            assert!((cosang + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn square_cell_reciprocal_length() {
        let c = SimulationCell::square_debug(5.0, 1, 1);
        let g = reciprocal_vectors(&c);
        assert!((norm(g[0]) - 2.0 * PI / 5.0).abs() < 1e-14);
    }

    #[test]
    fn g_vectors_rotate_with_lattice() {
        let c = cell66();
        let th: f64 = 0.37;
        let rot = |v: Vec2| [th.cos() * v[0] - th.sin() * v[1], th.sin() * v[0] + th.cos() * v[1]];
        let mut rc = c.clone();
        rc.moire_lattice = [rot(c.moire_lattice[0]), rot(c.moire_lattice[1])];
        let g = reciprocal_vectors(&c);
        let gr = reciprocal_vectors(&rc);
        for k in 0..3 {
            let e = rot(g[k]);
            assert!((e[0] - gr[k][0]).abs() < 1e-12 && (e[1] - gr[k][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn minimum_image_basics() {
        let c = cell66();
        assert_eq!(c.minimum_image([0.0, 0.0]), [0.0, 0.0]);
        let d = c.minimum_image(c.lattice[0]);
        assert!(norm(d) < 1e-10);
    }

    proptest! {
        #[test]
        fn minimum_image_matches_brute_force(fx in -3.0f64..3.0, fy in -3.0f64..3.0, rect in any::<bool>()) {
            let c = if rect {
                build_cell(CellShape::Rectangular, 6, 8, 10.0, 0.25, 12, 12).unwrap()
            } else {
                cell66()
            };
            let d = c.cartesian([fx, fy]);
            let mi = c.minimum_image(d);
            // brute force over a 5x5 shell around the rounded image
            let f = c.fractional(d);
            let mut best = f64::INFINITY;
            for n0 in -2..=2 {
                for n1 in -2..=2 {
                    let t = c.translation(n0 - f[0].round() as i64, n1 - f[1].round() as i64);
                    best = best.min(norm([d[0] + t[0], d[1] + t[1]]));
                }
            }
            prop_assert!((norm(mi) - best).abs() < 1e-9);
            // and the result differs from d by a lattice vector
            let fd = c.fractional([mi[0] - d[0], mi[1] - d[1]]);
            prop_assert!((fd[0] - fd[0].round()).abs() < 1e-9 && (fd[1] - fd[1].round()).abs() < 1e-9);
        }

        #[test]
        fn voronoi_assignment_translation_invariant(fx in 0.0f64..1.0, fy in 0.0f64..1.0, n0 in -3i64..3, n1 in -3i64..3) {
            let c = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.25, 1, 1).unwrap();
            let geo = MoireGeometry::new(&c, PHI).unwrap();
            let part = voronoi_assign(&geo, &c, 32);
            let r = c.cartesian([fx, fy]);
            let t = c.translation(n0, n1);
            let rt = [r[0] + t[0], r[1] + t[1]];
            prop_assert_eq!(part.site_of(&c, r), part.site_of(&c, rt));
            prop_assert_eq!(geo.nearest_ring(&c, r), geo.nearest_ring(&c, rt));
            let d1 = norm(c.minimum_image(r));
            let d2 = norm(c.minimum_image(rt));
            prop_assert!((d1 - d2).abs() < 1e-9);
        }
    }

    #[test]
    fn minima_are_honeycomb_minima() {
        let c1 = build_cell(CellShape::Triangular, 1, 1, 10.0, 0.5, 1, 0).unwrap();
        assert_eq!(find_minima(&c1, PHI).unwrap().len(), 2);
        let c = cell66();
        let geo = MoireGeometry::new(&c, PHI).unwrap();
        assert_eq!(geo.minima_sites.len(), 72);
        for s in &geo.minima_sites {
            let (v, gr, h) = lambda_with_derivs(&geo.g_vectors, PHI, *s);
            // minimum of -Lambda: gradient zero, Hessian of -Lambda positive definite
            assert!(norm(gr) < 1e-8);
            assert!(-h[0][0] > 0.0 && det(&h) > 0.0);
            assert!((v - 3.0).abs() < 1e-12);
        }
        // nearest-neighbour distance a_m / sqrt 3 and three neighbours each
        let nn = c.moire_constant / 3f64.sqrt();
        for s in &geo.minima_sites {
            let count = geo
                .minima_sites
                .iter()
                .filter(|t| (norm(c.minimum_image([t[0] - s[0], t[1] - s[1]])) - nn).abs() < 1e-8)
                .count();
            assert_eq!(count, 3);
        }
    }

    #[test]
    fn minima_count_from_dense_seed_search() {
        // independent count: Newton from a dense grid of seeds, dedupe converged minima
        let c = cell66();
        let g = reciprocal_vectors(&c);
        let mut found: Vec<Vec2> = Vec::new();
        let n = 60;
        for i in 0..n {
            for j in 0..n {
                let mut r = c.cartesian([(i as f64 + 0.25) / n as f64, (j as f64 + 0.25) / n as f64]);
                // gradient ascent on Lambda into the basin, then Newton
                for _ in 0..200 {
                    let (_, gr, _) = lambda_with_derivs(&g, PHI, r);
                    r = [r[0] + 0.5 * gr[0], r[1] + 0.5 * gr[1]];
                }
                let r = newton_refine(&g, PHI, r);
                let (v, _, _) = lambda_with_derivs(&g, PHI, r);
                if (v - 3.0).abs() > 1e-9 {
                    continue;
                }
                let w = c.wrap(r);
                if !found.iter().any(|f| norm(c.minimum_image([f[0] - w[0], f[1] - w[1]])) < 1e-6) {
                    found.push(w);
                }
            }
        }
        assert_eq!(found.len(), 72);
    }

    #[test]
    fn other_honeycomb_branches_and_rejection() {
        let c = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.25, 1, 1).unwrap();
        for n in [-1.0, 1.0, 2.0] {
            let phi = PI / 3.0 + n * 2.0 * PI / 3.0;
            let sites = find_minima(&c, phi).unwrap();
            let g = reciprocal_vectors(&c);
            for s in sites {
                assert!((lambda(&g, phi, s) - 3.0).abs() < 1e-12);
            }
        }
        assert!(matches!(find_minima(&c, 0.3), Err(GeometryError::NotHoneycomb(_))));
    }

    #[test]
    fn minima_value_is_global_extremum_on_dense_grid() {
        let c = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.25, 1, 1).unwrap();
        let geo = MoireGeometry::new(&c, PHI).unwrap();
        let mut best = f64::NEG_INFINITY;
        let n = 400;
        for i in 0..n {
            for j in 0..n {
                best = best.max(geo.lambda(c.cartesian([i as f64 / n as f64, j as f64 / n as f64])));
            }
        }
        for s in &geo.minima_sites {
            assert!((geo.lambda(*s) - 3.0).abs() < 1e-12);
        }
        assert!(best <= 3.0 + 1e-12 && best > 3.0 - 1e-3);
    }

    #[test]
    fn ring_centers_geometry() {
        let c = cell66();
        let geo = MoireGeometry::new(&c, PHI).unwrap();
        assert_eq!(geo.ring_centers.len(), 36);
        let rad = c.moire_constant / 3f64.sqrt();
        for (k, rc) in geo.ring_centers.iter().enumerate() {
            let mut d: Vec<f64> = geo
                .minima_sites
                .iter()
                .map(|s| norm(c.minimum_image([s[0] - rc[0], s[1] - rc[1]])))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for x in &d[..6] {
                assert!((x - rad).abs() < 1e-9);
            }
            assert!(d[6] > rad + 1e-3);
            assert_eq!(geo.ring_sites(&c, k).len(), 6);
            assert!((geo.lambda(*rc) + 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_centers_and_sites_c6_symmetric() {
        let c = cell66();
        let geo = MoireGeometry::new(&c, PHI).unwrap();
        let center = geo.ring_centers[7];
        let rot = |p: Vec2| {
            let (s, co) = (PI / 3.0).sin_cos();
            let d = [p[0] - center[0], p[1] - center[1]];
            [center[0] + co * d[0] - s * d[1], center[1] + s * d[0] + co * d[1]]
        };
        let contains = |set: &[Vec2], p: Vec2| set.iter().any(|q| norm(c.minimum_image([q[0] - p[0], q[1] - p[1]])) < 1e-8);
        for rc in &geo.ring_centers {
            assert!(contains(&geo.ring_centers, rot(*rc)));
        }
        for s in &geo.minima_sites {
            assert!(contains(&geo.minima_sites, rot(*s)));
        }
    }

    #[test]
    fn voronoi_areas_and_assignments() {
        for c in [
            build_cell(CellShape::Triangular, 4, 4, 10.0, 0.25, 4, 4).unwrap(),
            build_cell(CellShape::Rectangular, 4, 4, 10.0, 0.25, 4, 4).unwrap(),
        ] {
            check_voronoi(&c);
        }
    }

    fn check_voronoi(c: &SimulationCell) {
        let c = c.clone();
        let geo = MoireGeometry::new(&c, PHI).unwrap();
        let part = voronoi_assign(&geo, &c, 32);
        let areas = part.site_areas(&c);
        let total: f64 = areas.iter().sum();
        assert!((total - c.area()).abs() < 1e-9 * c.area());
        let mean = c.area() / areas.len() as f64;
        for a in &areas {
            assert!((a - mean).abs() < 0.02 * mean, "{a} vs {mean}");
        }
        // uniform density -> 1 / n_sites per site
        let w = vec![1.0 / part.n_points() as f64; part.n_points()];
        for x in part.integrate(&w) {
            assert!((x - 1.0 / 32.0).abs() < 0.02 / 32.0);
        }
        // a point mass at a site goes to that site
        for (k, s) in geo.minima_sites.iter().enumerate() {
            assert_eq!(part.site_of(&c, *s), k);
        }
    }

    #[test]
    fn registrations_partition_rings() {
        let c = build_cell(CellShape::Triangular, 4, 4, 10.0, 0.25, 4, 4).unwrap();
        let geo = MoireGeometry::new(&c, PHI).unwrap();
        let mut all = Vec::new();
        for p in 0..2 {
            for q in 0..2 {
                let occ = geo.registration(&c, p, q).unwrap();
                assert_eq!(occ.len(), 4);
                // occupied rings do not share minima sites
                let mut sites: Vec<usize> = occ.iter().flat_map(|&r| geo.ring_sites(&c, r)).collect();
                sites.sort();
                sites.dedup();
                assert_eq!(sites.len(), 24);
                all.extend(occ);
            }
        }
        all.sort();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        let odd = build_cell(CellShape::Triangular, 3, 2, 10.0, 0.25, 3, 0).unwrap();
        let g3 = MoireGeometry::new(&odd, PHI).unwrap();
        assert_eq!(g3.registration(&odd, 0, 0), Err(GeometryError::IncompatibleRegistration));
    }
}
