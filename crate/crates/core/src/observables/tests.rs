use super::*;
use crate::lattice::{build_cell, voronoi_assign, CellShape, DEFAULT_GRID_RESOLUTION};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PHI: f64 = PI / 3.0;

fn cell44() -> (SimulationCell, MoireGeometry) {
    let c = build_cell(CellShape::Triangular, 4, 4, 10.0, 0.25, 4, 4).unwrap();
    let g = MoireGeometry::new(&c, PHI).unwrap();
    (c, g)
}

fn uniform_config(cell: &SimulationCell, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec2> {
    (0..n).map(|_| cell.cartesian([rng.random::<f64>(), rng.random::<f64>()])).collect()
}

/// One up and one down electron on two vertices of each occupied ring.
fn pwc_snapshot(cell: &SimulationCell, geo: &MoireGeometry, rings: &[usize], k: usize) -> Vec<Vec2> {
    let mut up = Vec::new();
    let mut down = Vec::new();
    let rad = cell.moire_constant / 3f64.sqrt();
    // vertex directions are shared by all rings
    let c0 = geo.ring_centers[rings[0]];
    let d = cell.minimum_image(sub(geo.minima_sites[geo.ring_sites(cell, rings[0])[0]], c0));
    let a0 = d[1].atan2(d[0]);
    let a1 = a0 + k as f64 * PI / 3.0;
    for &r in rings {
        let c = geo.ring_centers[r];
        up.push(cell.wrap([c[0] + rad * a0.cos(), c[1] + rad * a0.sin()]));
        down.push(cell.wrap([c[0] + rad * a1.cos(), c[1] + rad * a1.sin()]));
    }
    up.extend(down);
    up
}

#[test]
fn pinned_electrons_have_unit_polarization() {
    let (c, _) = cell44();
    let g = polarization_vector(&c);
    let x = vec![[0.3, 1.7], [5.0, -2.0]];
    let z: Vec<Complex64> = (0..50).map(|_| polarization_sample(g, &x)).collect();
    let p = complex_polarization(&z).unwrap();
    assert!((p.abs - 1.0).abs() < 1e-12);
    assert!(p.se < 1e-12);
}

#[test]
fn polarization_vector_is_shortest() {
    let (c, _) = cell44();
    let g = polarization_vector(&c);
    let b = c.reciprocal;
    assert!((norm(g) - norm(b[0]).min(norm(b[1]))).abs() < 1e-12);
    // exp(-i g . r) is periodic over the supercell
    let r = [1.3, 2.9];
    let t = c.translation(1, -2);
    let d = dot(g, [r[0] + t[0], r[1] + t[1]]) - dot(g, r);
    assert!((d / (2.0 * PI) - (d / (2.0 * PI)).round()).abs() < 1e-10);
}

#[test]
fn duplicated_samples_keep_polarization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z: Vec<Complex64> = (0..300).map(|_| Complex64::from_polar(1.0, rng.random::<f64>() * 0.8)).collect();
    let mut zz = z.clone();
    zz.extend_from_slice(&z);
    let (a, b) = (complex_polarization(&z).unwrap(), complex_polarization(&zz).unwrap());
    assert!((a.abs - b.abs).abs() < 1e-12);
}

#[test]
fn density_integrates_to_electron_count() {
    let (c, g) = cell44();
    let part = voronoi_assign(&g, &c, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut a = DensityGrid::new(&part);
    let mut b = DensityGrid::new(&part);
    for k in 0..200 {
        let x = uniform_config(&c, 8, &mut rng);
        if k % 2 == 0 { a.accumulate(&c, &part, &x, 4) } else { b.accumulate(&c, &part, &x, 4) }
    }
    a.merge(&b).unwrap();
    let da = c.area() / part.n_points() as f64;
    let (up, down) = a.rho(&c);
    let tot: f64 = up.iter().chain(&down).sum::<f64>() * da;
    assert!((tot - 8.0).abs() < 1e-6);
    assert!(up.iter().chain(&down).all(|v| *v >= 0.0));
}

#[test]
fn single_configuration_gives_delta_spikes() {
    let (c, g) = cell44();
    let part = voronoi_assign(&g, &c, 12);
    let mut d = DensityGrid::new(&part);
    let x = vec![[1.0, 2.0], [30.0, 10.0]];
    d.accumulate(&c, &part, &x, 1);
    assert_eq!(d.counts_up.iter().filter(|v| **v > 0.0).count(), 1);
    assert_eq!(d.counts_down.iter().filter(|v| **v > 0.0).count(), 1);
    assert_eq!(d.counts_up[part.bin_of(&c, x[0])], 1.0);
}

#[test]
fn uniform_sampler_gives_flat_density() {
    let (c, g) = cell44();
    let part = voronoi_assign(&g, &c, 4);
    let mut d = DensityGrid::new(&part);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..4000 {
        d.accumulate(&c, &part, &uniform_config(&c, 8, &mut rng), 4);
    }
    // multinomial: each bin holds Binomial(8 * samples, 1 / bins)
    let nb = part.n_points() as f64;
    let trials = 8.0 * 4000.0;
    let mean = trials / nb;
    let sd = (trials * (1.0 / nb) * (1.0 - 1.0 / nb)).sqrt();
    let outliers = d.counts_up.iter().zip(&d.counts_down).filter(|(u, v)| ((*u + *v) - mean).abs() > 4.0 * sd).count();
    assert_eq!(outliers, 0);
}

#[test]
fn uniform_density_has_zero_localization() {
    let (c, g) = cell44();
    let part = voronoi_assign(&g, &c, DEFAULT_GRID_RESOLUTION);
    let occ = site_occupancies(&c, &part, &vec![8.0 / part.n_points() as f64; part.n_points()]);
    let l = molecular_localization(&c, &g, &occ).unwrap();
    assert!((l.f_o - 0.25).abs() < 1e-12, "{}", l.f_o);
    assert!((l.f_u - 0.25).abs() < 1e-12);
    assert!(l.f_m.abs() < 1e-12);
}

#[test]
fn ideal_rings_have_unit_localization() {
    let (c, g) = cell44();
    let part = voronoi_assign(&g, &c, DEFAULT_GRID_RESOLUTION);
    let rings = g.registration(&c, 1, 0).unwrap();
    let mut d = DensityGrid::new(&part);
    for k in 0..6 {
        d.accumulate(&c, &part, &pwc_snapshot(&c, &g, &rings, k), 4);
    }
    let l = molecular_localization(&c, &g, &site_occupancies(&c, &part, &d.bin_occupancy())).unwrap();
    assert_eq!(l.registration, (1, 0));
    assert!((l.f_o - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(l.f_u, 0.0);
    assert!((l.f_m - 1.0).abs() < 1e-12);
}

#[test]
fn synthetic_density_matches_quadrature() {
    let (c, g) = cell44();
    let part = voronoi_assign(&g, &c, DEFAULT_GRID_RESOLUTION);
    let rings = g.registration(&c, 0, 1).unwrap();
    let occ = occupied_sites(&c, &g, &rings);
    let sigma = 0.2 * c.moire_constant;
    // Gaussian bumps at every site with 4x the weight on occupied ones
    let field = |r: Vec2| -> f64 {
        g.minima_sites.iter().enumerate().map(|(s, p)| {
            let d = c.minimum_image(sub(r, *p));
            let w = if occ[s] { 4.0 } else { 1.0 };
            w * (-dot(d, d) / (2.0 * sigma * sigma)).exp()
        }).sum()
    };
    let bins: Vec<f64> = (0..part.dims[0])
        .flat_map(|i| (0..part.dims[1]).map(move |j| (i, j)))
        .map(|(i, j)| field(bin_center(&c, part.dims, i, j)))
        .collect();
    let norm8 = 8.0 / bins.iter().sum::<f64>();
    let bins: Vec<f64> = bins.iter().map(|b| b * norm8).collect();
    let l = molecular_localization(&c, &g, &site_occupancies(&c, &part, &bins)).unwrap();
    // oracle: midpoint quadrature on a finer grid with direct nearest-site lookup
    let n = 3 * part.dims[0];
    let mut site_int = vec![0.0; g.minima_sites.len()];
    for i in 0..n {
        for j in 0..n {
            let r = c.cartesian([(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]);
            site_int[g.nearest_site(&c, r)] += field(r);
        }
    }
    let total: f64 = site_int.iter().sum();
    let scale = bins.iter().sum::<f64>() / total;
    let (mut so, mut no, mut su, mut nu) = (0.0, 0.0, 0.0, 0.0);
    for (s, v) in site_int.iter().enumerate() {
        if occ[s] { so += v * scale; no += 1.0 } else { su += v * scale; nu += 1.0 }
    }
    let f_m = 3.0 * (so / no - su / nu);
    assert!(l.f_m > 0.3 && l.f_m < 1.0, "{}", l.f_m);
    assert!((l.f_m - f_m).abs() < 2e-3 * f_m.abs(), "{} vs {f_m}", l.f_m);
}

#[test]
fn ideal_gas_pair_correlation() {
    let (c, _) = cell44();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pc = PairCorrelation::new(&c, 2, 4, 4);
    for _ in 0..20000 {
        pc.accumulate(&c, &uniform_config(&c, 8, &mut rng));
    }
    assert!((pc.sum_rule(&c) + 1.0).abs() < 1e-12);
    let (g, se) = (pc.g(), pc.se());
    let mut chi2 = 0.0;
    for (v, s) in g.iter().zip(&se) {
        let (v, s) = (v.unwrap(), s.unwrap());
        chi2 += ((v - (1.0 - 1.0 / 8.0)) / s).powi(2);
    }
    let nb = g.len() as f64;
    assert!((chi2 - nb).abs() < 5.0 * (2.0 * nb).sqrt(), "chi2 {chi2} over {nb} bins");
}

#[test]
fn spin_correlation_two_ways_and_missing_bins() {
    let (c, _) = cell44();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut pc = PairCorrelation::new(&c, 8, 5, 3);
    for _ in 0..30 {
        pc.accumulate(&c, &uniform_config(&c, 8, &mut rng));
    }
    let (a, b) = (pc.g_s_direct(), pc.g_s_recombined());
    assert!(a.iter().any(|v| v.is_none()));
    for (x, y) in a.iter().zip(&b) {
        match (x, y) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
            (None, None) => {}
            _ => panic!("missing bins differ"),
        }
    }
    let mut buf = Vec::new();
    pc.write_csv(&mut buf, &c).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert!(s.starts_with("dx,dy,g,g_s,se\n"));
    assert!(s.lines().any(|l| l.ends_with(",,,")));
}

#[test]
fn molecule_assignment_validity() {
    let (c, g) = cell44();
    let rings = g.registration(&c, 0, 0).unwrap();
    let x = pwc_snapshot(&c, &g, &rings, 3);
    let mols = molecule_assignment(&c, &g, &rings, &x, 4).unwrap();
    assert_eq!(mols.len(), 4);
    let mut bad = x.clone();
    bad.swap(1, 4);
    // electron 4 (down, ring 0) now sits on ring 1 and vice versa: ring 0 has two ups
    let mut two_up = x.clone();
    two_up[1] = x[0];
    assert!(molecule_assignment(&c, &g, &rings, &two_up, 4).is_none());
    assert!(molecule_assignment(&c, &g, &rings, &bad, 4).is_none());
}

#[test]
fn uniform_validity_fraction_matches_combinatorics() {
    let (c, g) = cell44();
    let rings = g.registration(&c, 0, 0).unwrap();
    let mut st = MolecularStats::new(&c, rings, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 20000;
    for _ in 0..n {
        st.accumulate(&c, &g, &uniform_config(&c, 8, &mut rng), 4);
    }
    // each electron lands on one of four equivalent rings: (4!/4^4)^2
    let p = (24.0f64 / 256.0).powi(2);
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    assert!((st.validity_fraction() - p).abs() < 3.0 * sd, "{} vs {p}", st.validity_fraction());
}

#[test]
fn pair_angles_on_ring_vertices() {
    let (c, g) = cell44();
    let rings = g.registration(&c, 0, 0).unwrap();
    for k in 0..6 {
        let mut st = MolecularStats::new(&c, rings.clone(), 4);
        let x = pwc_snapshot(&c, &g, &rings, k);
        st.accumulate(&c, &g, &x, 4);
        let h = st.theta.normalized();
        let b = st.theta.bin_of(k as f64 * PI / 3.0);
        assert!((h[b] - 1.0).abs() < 1e-12, "k = {k}");
    }
    let ctr = [1.0, 1.0];
    assert!((pair_angle(&c, ctr, [2.0, 1.0], [0.0, 1.0]) - PI).abs() < 1e-12);
    assert!((pair_angle(&c, ctr, [2.0, 1.0], [1.0, 0.0]) - 1.5 * PI).abs() < 1e-12);
}

#[test]
fn dipole_alignment_histograms() {
    let (c, g) = cell44();
    let rings = g.registration(&c, 0, 0).unwrap();
    let mut aligned = MolecularStats::new(&c, rings.clone(), 4);
    aligned.accumulate(&c, &g, &pwc_snapshot(&c, &g, &rings, 3), 4);
    assert_eq!(aligned.delta_theta.counts[0], aligned.delta_theta.total());
    // in a 2x2 superlattice every pair of the 4 molecules are nearest neighbours
    assert_eq!(aligned.delta_theta.total(), 6.0);

    // flip the dipole of one sublattice of molecules in a 4x4 cell
    let mut x = pwc_snapshot(&c, &g, &rings, 3);
    for m in [0, 3] {
        x.swap(m, 4 + m);
    }
    let mut anti = MolecularStats::new(&c, rings, 4);
    anti.accumulate(&c, &g, &x, 4);
    let last = anti.delta_theta.counts.len() - 1;
    assert_eq!(anti.delta_theta.counts[0] + anti.delta_theta.counts[last], anti.delta_theta.total());
    assert!(anti.delta_theta.counts[last] > 0.0);
}

#[test]
fn com_correlation_of_perfect_lattice() {
    let (c, g) = cell44();
    let rings = g.registration(&c, 0, 0).unwrap();
    let mut st = MolecularStats::new(&c, rings.clone(), 8);
    st.accumulate(&c, &g, &pwc_snapshot(&c, &g, &rings, 3), 4);
    // antipodal pairs put every COM on its ring center, so displacements are
    // half supercell vectors
    let dims = st.com.dims;
    let mut filled = 0;
    for (k, v) in st.com.g().iter().enumerate() {
        if v.is_none() {
            continue;
        }
        filled += 1;
        let f = [((k / dims[1]) as f64 + 0.5) / dims[0] as f64, ((k % dims[1]) as f64 + 0.5) / dims[1] as f64];
        for (x, n) in f.iter().zip(dims) {
            assert!((2.0 * x - (2.0 * x).round()).abs() <= 2.0 / n as f64 + 1e-12);
        }
    }
    // exact half-cell displacements may round into a neighbouring bin
    assert!((3..=12).contains(&filled), "{filled}");
    assert!((st.com.sum_rule(&c) + 1.0).abs() < 1e-12);
}

#[test]
fn accumulators_merge_associatively() {
    let (c, g) = cell44();
    let part = voronoi_assign(&g, &c, 8);
    let rings = g.registration(&c, 0, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<Vec<Vec2>> = (0..30).map(|_| uniform_config(&c, 8, &mut rng)).collect();
    let build = |r: std::ops::Range<usize>| {
        let mut p = PairCorrelation::new(&c, 4, 4, 4);
        let mut m = MolecularStats::new(&c, rings.clone(), 4);
        let mut d = DensityGrid::new(&part);
        for x in &xs[r] {
            p.accumulate(&c, x);
            m.accumulate(&c, &g, x, 4);
            d.accumulate(&c, &part, x, 4);
        }
        (p, m, d)
    };
    let (mut p, mut m, mut d) = build(0..10);
    let (p2, m2, d2) = build(10..30);
    p.merge(&p2).unwrap();
    m.merge(&m2).unwrap();
    d.merge(&d2).unwrap();
    let (pa, ma, da) = build(0..30);
    assert_eq!(p, pa);
    assert_eq!(m, ma);
    assert_eq!(d, da);
}

#[test]
fn analysis_report_fields() {
    let (c, g) = cell44();
    let part = voronoi_assign(&g, &c, 12);
    let rings = g.registration(&c, 1, 1).unwrap();
    let xs: Vec<Vec<Vec2>> = (0..6).map(|k| pwc_snapshot(&c, &g, &rings, k)).collect();
    let a = analyze(&c, &g, &part, &xs, 4).unwrap();
    let r = a.report();
    assert_eq!(r.validity_fraction, Some(1.0));
    assert!((r.f_m.unwrap() - 1.0).abs() < 1e-12);
    let json = serde_json::to_string(&r).unwrap();
    for k in ["Z_re", "Z_im", "absZ", "se", "f_o", "f_u", "f_m", "validity_fraction"] {
        assert!(json.contains(&format!("\"{k}\"")));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn correlations_invariant_under_translation_and_relabeling(seed in 0u64..1000, tx in -20.0f64..20.0, ty in -20.0f64..20.0) {
        let c = build_cell(CellShape::Triangular, 2, 2, 10.0, 0.5, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform_config(&c, 4, &mut rng);
        let mut y: Vec<Vec2> = x.iter().map(|r| [r[0] + tx, r[1] + ty]).collect();
        y.swap(0, 1);
        y.swap(2, 3);
        let (mut a, mut b) = (PairCorrelation::new(&c, 6, 2, 2), PairCorrelation::new(&c, 6, 2, 2));
        a.accumulate(&c, &x);
        b.accumulate(&c, &y);
        prop_assert_eq!(&a.counts, &b.counts);
        let g = polarization_vector(&c);
        let (za, zb) = (polarization_sample(g, &x), polarization_sample(g, &y));
        prop_assert!((za.norm() - zb.norm()).abs() < 1e-12);
    }
}
