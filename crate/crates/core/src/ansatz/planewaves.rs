use crate::lattice::{norm, SimulationCell, Vec2};

/// Supercell reciprocal vectors grouped into stars of equal length.
pub fn stars(cell: &SimulationCell, count_at_least: usize) -> Vec<Vec<Vec2>> {
    let b = &cell.reciprocal;
    let bmin = norm(b[0]).min(norm(b[1]));
    let mut g_max = bmin * 2.0;
    loop {
        let points = cell.reciprocal_lattice_points(g_max);
        let groups = group_by_length(points);
        // the outermost group may be cut by the search radius; only count inner ones
        let mut total = 0;
        let mut out = Vec::new();
        for grp in groups.iter().take(groups.len().saturating_sub(1)) {
            total += grp.len();
            out.push(grp.clone());
            if total >= count_at_least {
                return out;
            }
        }
        g_max *= 1.5;
    }
}

fn group_by_length(points: Vec<Vec2>) -> Vec<Vec<Vec2>> {
    let mut groups: Vec<Vec<Vec2>> = Vec::new();
    for p in points {
        let len = norm(p);
        match groups.last_mut() {
            Some(g) if (norm(g[0]) - len).abs() <= 1e-9 * len.max(1e-300) => g.push(p),
            _ => groups.push(vec![p]),
        }
    }
    groups
}

/// Plane-wave basis made of the smallest closed stars holding at least
/// `count` vectors.
///
/// Vectors are ordered star by star. Inside a star they are sorted by polar
/// angle and then reordered as even-indexed followed by odd-indexed entries,
/// so that partially filling a star picks a rotationally symmetric subset.
pub fn planewave_set(cell: &SimulationCell, count: usize) -> Vec<Vec2> {
    let mut out = Vec::new();
    for star in stars(cell, count.max(1)) {
        let mut s = star;
        s.sort_by(|a, b| angle(*a).partial_cmp(&angle(*b)).unwrap());
        let evens = s.iter().step_by(2).copied();
        let odds = s.iter().skip(1).step_by(2).copied();
        out.extend(evens.chain(odds));
    }
    out
}

fn angle(g: Vec2) -> f64 {
    let a = g[1].atan2(g[0]);
    if a < 0.0 {
        a + 2.0 * std::f64::consts::PI
    } else {
        a
    }
}
