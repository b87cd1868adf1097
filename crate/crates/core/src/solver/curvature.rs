//! Mean curvature of a level set, `kappa = div(grad phi / |grad phi|)`.

use crate::grid::{sample_lattice, Lattice};

/// Curvature at every cell center from central differences, clamped to
/// `|kappa| <= 1/h`. Degenerate gradients give zero.
pub fn curvature_field<const D: usize>(phi: &[f64], res: [usize; D], h: f64) -> Vec<f64> {
    let cells = Lattice::new(res);
    (0..cells.len()).map(|i| curvature_at_cell(phi, cells, h, cells.coords(i))).collect()
}

/// Curvature at a single cell center.
pub fn curvature_at_cell<const D: usize>(phi: &[f64], cells: Lattice<D>, h: f64, c: [usize; D]) -> f64 {
    let at = |off: [i64; D]| -> f64 {
        let q: [usize; D] = std::array::from_fn(|a| {
            (c[a] as i64 + off[a]).clamp(0, cells.dims[a] as i64 - 1) as usize
        });
        phi[cells.index(q)]
    };
    let unit = |a: usize, s: i64| -> [i64; D] {
        let mut o = [0i64; D];
        o[a] = s;
        o
    };
    let centre = at([0; D]);
    let mut grad = [0.0; D];
    let mut hess = [[0.0; D]; D];
    for a in 0..D {
        let p = at(unit(a, 1));
        let m = at(unit(a, -1));
        grad[a] = (p - m) / (2.0 * h);
        hess[a][a] = (p - 2.0 * centre + m) / (h * h);
        for b in (a + 1)..D {
            let mut pp = [0i64; D];
            pp[a] = 1;
            pp[b] = 1;
            let mut mm = [0i64; D];
            mm[a] = -1;
            mm[b] = -1;
            let mut pm = [0i64; D];
            pm[a] = 1;
            pm[b] = -1;
            let mut mp = [0i64; D];
            mp[a] = -1;
            mp[b] = 1;
            let v = (at(pp) - at(pm) - at(mp) + at(mm)) / (4.0 * h * h);
            hess[a][b] = v;
            hess[b][a] = v;
        }
    }
    let g2: f64 = grad.iter().map(|g| g * g).sum();
    let gn = g2.sqrt();
    if gn < 1e-8 {
        return 0.0;
    }
    let trace: f64 = (0..D).map(|a| hess[a][a]).sum();
    let mut ghg = 0.0;
    for a in 0..D {
        for b in 0..D {
            ghg += grad[a] * hess[a][b] * grad[b];
        }
    }
    let kappa = (g2 * trace - ghg) / (g2 * gn);
    kappa.clamp(-1.0 / h, 1.0 / h)
}

/// Curvature interpolated to an arbitrary position.
pub fn compute_curvature<const D: usize>(phi: &[f64], res: [usize; D], h: f64, pos: [f64; D]) -> f64 {
    let cells = Lattice::new(res);
    // only the 2^D cells around pos are needed
    let mut local = vec![0.0; cells.len()];
    let mut base = [0usize; D];
    for a in 0..D {
        let g = (pos[a] / h - 0.5).clamp(0.0, (res[a] - 1) as f64);
        base[a] = (g.floor() as usize).min(res[a].saturating_sub(2));
    }
    for corner in 0..(1usize << D) {
        let c: [usize; D] = std::array::from_fn(|a| (base[a] + (corner >> a & 1)).min(res[a] - 1));
        local[cells.index(c)] = curvature_at_cell(phi, cells, h, c);
    }
    sample_lattice(&local, res, h, [0.5; D], pos)
}
