//! Pressure projection with ghost-fluid free-surface and surface-tension
//! boundary conditions.

use crate::error::{Error, Result};
use crate::grid::{CellFlag, MacGrid};

use super::curvature::curvature_field;

/// Smallest admissible interface fraction on a fluid-air face.
const MIN_THETA: f64 = 1e-2;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionStats {
    pub iterations: usize,
    /// `||b - A p|| / ||b||` at exit (0 when the right-hand side vanishes).
    pub relative_residual: f64,
    /// Max `|div u|` over fluid cells before and after the solve, 1/s.
    pub max_divergence_before: f64,
    pub max_divergence_after: f64,
    pub fluid_cells: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionSettings {
    pub density: f64,
    pub surface_tension: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

/// Face between cells `lo` (minus side) and `hi` (plus side) along `axis`.
#[derive(Clone, Copy)]
enum FaceKind {
    Wall,
    FluidFluid(usize, usize),
    /// fluid cell, air cell, fluid on the minus side
    FluidAir { fluid: usize, air: usize, fluid_lo: bool },
    Air,
}

fn classify_face<const D: usize>(grid: &MacGrid<D>, axis: usize, fc: [usize; D]) -> FaceKind {
    let cells = grid.cells();
    if fc[axis] == 0 || fc[axis] == grid.res[axis] {
        return FaceKind::Wall;
    }
    let hi = cells.index(fc);
    let mut lc = fc;
    lc[axis] -= 1;
    let lo = cells.index(lc);
    match (grid.flags[lo], grid.flags[hi]) {
        (CellFlag::Solid, _) | (_, CellFlag::Solid) => FaceKind::Wall,
        (CellFlag::Fluid, CellFlag::Fluid) => FaceKind::FluidFluid(lo, hi),
        (CellFlag::Fluid, CellFlag::Empty) => FaceKind::FluidAir { fluid: lo, air: hi, fluid_lo: true },
        (CellFlag::Empty, CellFlag::Fluid) => FaceKind::FluidAir { fluid: hi, air: lo, fluid_lo: false },
        _ => FaceKind::Air,
    }
}

fn interface_fraction(phi_fluid: f64, phi_air: f64) -> f64 {
    let t = phi_fluid / (phi_fluid - phi_air);
    if t.is_finite() {
        t.clamp(MIN_THETA, 1.0)
    } else {
        1.0
    }
}

/// Sparse symmetric system over fluid cells (5/7-point structure).
struct System {
    diag: Vec<f64>,
    /// (row, col) pairs with col < row, value -1 each
    lower: Vec<Vec<usize>>,
    upper: Vec<Vec<usize>>,
}

impl System {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..x.len() {
            let mut s = self.diag[i] * x[i];
            for &j in &self.lower[i] {
                s -= x[j];
            }
            for &j in &self.upper[i] {
                s -= x[j];
            }
            y[i] = s;
        }
    }
}

/// Incomplete Cholesky, zero fill-in: `L` shares the lower structure of `A`.
struct IncompleteCholesky {
    /// 1 / L_ii
    inv_diag: Vec<f64>,
}

impl IncompleteCholesky {
    fn new(sys: &System) -> Self {
        let n = sys.diag.len();
        let mut inv_diag = vec![0.0; n];
        for i in 0..n {
            // L_ij = A_ij / L_jj = -inv_diag[j]
            let mut e = sys.diag[i];
            for &j in &sys.lower[i] {
                e -= inv_diag[j] * inv_diag[j];
            }
            if e < 0.25 * sys.diag[i] {
                e = sys.diag[i];
            }
            inv_diag[i] = 1.0 / e.sqrt();
        }
        Self { inv_diag }
    }

    fn apply(&self, sys: &System, r: &[f64], z: &mut [f64]) {
        let n = r.len();
        // L q = r
        for i in 0..n {
            let mut t = r[i];
            for &j in &sys.lower[i] {
                t += self.inv_diag[j] * z[j];
            }
            z[i] = t * self.inv_diag[i];
        }
        // L^T z = q
        for i in (0..n).rev() {
            let mut t = z[i];
            for &j in &sys.upper[i] {
                t += self.inv_diag[i] * z[j];
            }
            z[i] = t * self.inv_diag[i];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pcg(sys: &System, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<(usize, f64)> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    x.iter_mut().for_each(|v| *v = 0.0);
    if bnorm == 0.0 {
        return Ok((0, 0.0));
    }
    let pre = IncompleteCholesky::new(sys);
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    pre.apply(sys, &r, &mut z);
    let mut s = z.clone();
    let mut rho = dot(&r, &z);
    let mut q = vec![0.0; n];
    for it in 1..=max_iter {
        sys.apply(&s, &mut q);
        let sq = dot(&s, &q);
        if sq <= 0.0 {
            break;
        }
        let alpha = rho / sq;
        for i in 0..n {
            x[i] += alpha * s[i];
            r[i] -= alpha * q[i];
        }
        let rel = dot(&r, &r).sqrt() / bnorm;
        if rel <= tol {
            return Ok((it, rel));
        }
        pre.apply(sys, &r, &mut z);
        let rho_new = dot(&r, &z);
        let beta = rho_new / rho;
        rho = rho_new;
        for i in 0..n {
            s[i] = z[i] + beta * s[i];
        }
    }
    let rel = dot(&r, &r).sqrt() / bnorm;
    if rel <= tol {
        return Ok((max_iter, rel));
    }
    Err(Error::PressureNotConverged {
        iterations: max_iter,
        residual: rel,
    })
}

fn max_fluid_divergence<const D: usize>(grid: &MacGrid<D>) -> f64 {
    let cells = grid.cells();
    (0..cells.len())
        .filter(|&i| grid.flags[i] == CellFlag::Fluid)
        .map(|i| grid.divergence(cells.coords(i)).abs())
        .fold(0.0, f64::max)
}

/// Make `grid.u` discrete-divergence-free on fluid cells.
///
/// Walls (domain boundary and obstacle faces) get zero normal velocity.
/// At fluid-air faces the interface is located by linear interpolation of
/// `phi` and the pressure there is `surface_tension * kappa`. Returns the
/// mask of faces that received a valid velocity (walls, and faces touching
/// a fluid cell); the rest should be extrapolated.
pub fn project_pressure<const D: usize>(
    grid: &mut MacGrid<D>,
    settings: &ProjectionSettings,
    dt: f64,
) -> Result<(ProjectionStats, [Vec<bool>; D])> {
    let cells = grid.cells();
    let h = grid.h;
    let n_cells = cells.len();

    for axis in 0..D {
        let faces = grid.faces(axis);
        for fi in 0..faces.len() {
            if let FaceKind::Wall = classify_face(grid, axis, faces.coords(fi)) {
                grid.u[axis][fi] = 0.0;
            }
        }
    }
    let max_div_before = max_fluid_divergence(grid);

    let mut unknown = vec![usize::MAX; n_cells];
    let mut fluid_cells = Vec::new();
    for i in 0..n_cells {
        if grid.flags[i] == CellFlag::Fluid {
            unknown[i] = fluid_cells.len();
            fluid_cells.push(i);
        }
    }
    let n = fluid_cells.len();
    let kappa = if settings.surface_tension != 0.0 {
        curvature_field(&grid.phi, grid.res, h)
    } else {
        Vec::new()
    };
    let interface_pressure = |fluid: usize, air: usize, theta: f64| -> f64 {
        if settings.surface_tension == 0.0 {
            0.0
        } else {
            let k = (1.0 - theta) * kappa[fluid] + theta * kappa[air];
            settings.surface_tension * k.clamp(-1.0 / h, 1.0 / h)
        }
    };

    let mut sys = System {
        diag: vec![0.0; n],
        lower: vec![Vec::new(); n],
        upper: vec![Vec::new(); n],
    };
    let mut rhs = vec![0.0; n];
    let scale = settings.density * h / dt;
    for axis in 0..D {
        let faces = grid.faces(axis);
        for fi in 0..faces.len() {
            let fc = faces.coords(fi);
            let u = grid.u[axis][fi];
            match classify_face(grid, axis, fc) {
                FaceKind::Wall => {
                    // u = 0 already; its divergence contribution vanishes
                    if fc[axis] > 0 && fc[axis] < grid.res[axis] {
                        let mut lc = fc;
                        lc[axis] -= 1;
                        let lo = cells.index(lc);
                        let hi = cells.index(fc);
                        if unknown[lo] != usize::MAX {
                            rhs[unknown[lo]] -= scale * u;
                        }
                        if unknown[hi] != usize::MAX {
                            rhs[unknown[hi]] += scale * u;
                        }
                    }
                }
                FaceKind::FluidFluid(lo, hi) => {
                    let (a, b) = (unknown[lo], unknown[hi]);
                    sys.diag[a] += 1.0;
                    sys.diag[b] += 1.0;
                    sys.upper[a].push(b);
                    sys.lower[b].push(a);
                    rhs[a] -= scale * u;
                    rhs[b] += scale * u;
                }
                FaceKind::FluidAir { fluid, air, fluid_lo } => {
                    let k = unknown[fluid];
                    let theta = interface_fraction(grid.phi[fluid], grid.phi[air]);
                    sys.diag[k] += 1.0 / theta;
                    rhs[k] += interface_pressure(fluid, air, theta) / theta;
                    if fluid_lo {
                        rhs[k] -= scale * u;
                    } else {
                        rhs[k] += scale * u;
                    }
                }
                FaceKind::Air => {}
            }
        }
    }
    for i in 0..n {
        sys.lower[i].sort_unstable();
        sys.upper[i].sort_unstable();
    }

    let mut p = vec![0.0; n];
    let (iterations, relative_residual) =
        pcg(&sys, &rhs, &mut p, settings.tolerance, settings.max_iterations)?;

    grid.pressure.iter_mut().for_each(|v| *v = 0.0);
    for (k, &i) in fluid_cells.iter().enumerate() {
        grid.pressure[i] = p[k];
    }

    let coef = dt / (settings.density * h);
    let mut valid: [Vec<bool>; D] = std::array::from_fn(|a| vec![false; grid.faces(a).len()]);
    for axis in 0..D {
        let faces = grid.faces(axis);
        for fi in 0..faces.len() {
            let fc = faces.coords(fi);
            match classify_face(grid, axis, fc) {
                FaceKind::Wall => {
                    grid.u[axis][fi] = 0.0;
                    valid[axis][fi] = true;
                }
                FaceKind::FluidFluid(lo, hi) => {
                    grid.u[axis][fi] -= coef * (grid.pressure[hi] - grid.pressure[lo]);
                    valid[axis][fi] = true;
                }
                FaceKind::FluidAir { fluid, air, fluid_lo } => {
                    let theta = interface_fraction(grid.phi[fluid], grid.phi[air]);
                    let pg = interface_pressure(fluid, air, theta);
                    let diff = if fluid_lo {
                        pg - grid.pressure[fluid]
                    } else {
                        grid.pressure[fluid] - pg
                    };
                    grid.u[axis][fi] -= coef * diff / theta;
                    valid[axis][fi] = true;
                }
                FaceKind::Air => {}
            }
        }
    }

    let stats = ProjectionStats {
        iterations,
        relative_residual,
        max_divergence_before: max_div_before,
        max_divergence_after: max_fluid_divergence(grid),
        fluid_cells: n,
    };
    Ok((stats, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath::dist;

    fn settings(sigma: f64) -> ProjectionSettings {
        ProjectionSettings {
            density: 1000.0,
            surface_tension: sigma,
            tolerance: 1e-5,
            max_iterations: 2000,
        }
    }

    /// Pool of depth `depth` with an exact signed-distance surface.
    fn pool(res: [usize; 2], h: f64, depth: f64) -> MacGrid<2> {
        let mut g = MacGrid::<2>::new(res, h);
        for i in 0..g.num_cells() {
            let x = g.cell_center(g.cells().coords(i));
            g.phi[i] = x[1] - depth;
        }
        g.flags_from_phi();
        g
    }

    #[test]
    fn hydrostatic_pressure() {
        let h = 0.01;
        let dt = 0.01;
        let g_acc = -9.81;
        let depth = 0.203;
        let mut g = pool([16, 32], h, depth);
        g.u[1].iter_mut().for_each(|v| *v = g_acc * dt);
        let (stats, valid) = project_pressure(&mut g, &settings(0.0), dt).unwrap();
        assert!(stats.relative_residual <= 1e-5);
        assert!(stats.max_divergence_after * dt <= 1e-5 * stats.max_divergence_before.max(1.0) * dt);
        for i in 0..g.num_cells() {
            if g.flags[i] != CellFlag::Fluid {
                continue;
            }
            let x = g.cell_center(g.cells().coords(i));
            let expect = 1000.0 * 9.81 * (depth - x[1]);
            assert!((g.pressure[i] - expect).abs() <= 0.02 * expect, "{} vs {}", g.pressure[i], expect);
        }
        let vmax = g.u[1]
            .iter()
            .zip(&valid[1])
            .filter(|(_, &ok)| ok)
            .fold(0.0f64, |m, (v, _)| m.max(v.abs()));
        assert!(vmax < 1e-5, "residual velocity {vmax}");
    }

    #[test]
    fn divergence_free_field_is_unchanged() {
        // discrete curl field: u = d(psi)/dy, v = -d(psi)/dx on the MAC grid
        let h = 0.05;
        let res = [12, 12];
        let mut g = pool(res, h, 0.45);
        let psi = |x: f64, y: f64| (x * 3.0).sin() * (y * 2.0).sin() * x * (0.6 - x) * y * (0.6 - y);
        let fx = g.faces(0);
        for fi in 0..fx.len() {
            let c = fx.coords(fi);
            let x = c[0] as f64 * h;
            let y0 = c[1] as f64 * h;
            g.u[0][fi] = (psi(x, y0 + h) - psi(x, y0)) / h;
        }
        let fy = g.faces(1);
        for fi in 0..fy.len() {
            let c = fy.coords(fi);
            let x0 = c[0] as f64 * h;
            let y = c[1] as f64 * h;
            g.u[1][fi] = -(psi(x0 + h, y) - psi(x0, y)) / h;
        }
        let before = g.u.clone();
        let (stats, _) = project_pressure(&mut g, &settings(0.0), 0.01).unwrap();
        assert!(stats.max_divergence_before < 1e-12);
        for a in 0..2 {
            for (x, y) in before[a].iter().zip(&g.u[a]) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn young_laplace_drop() {
        let h = 0.001;
        let res = [48, 48];
        let r = 0.012;
        let centre = [0.024, 0.024];
        let mut g = MacGrid::<2>::new(res, h);
        for i in 0..g.num_cells() {
            let x = g.cell_center(g.cells().coords(i));
            g.phi[i] = dist(x, centre) - r;
        }
        g.flags_from_phi();
        let sigma = 0.073;
        project_pressure(&mut g, &settings(sigma), 1e-3).unwrap();
        let c = g.cell_index_of(centre);
        let jump = g.pressure[c];
        let expect = sigma / r;
        assert!((jump - expect).abs() <= 0.15 * expect, "{jump} vs {expect}");
    }

    #[test]
    fn reports_non_convergence() {
        let mut g = pool([8, 8], 0.01, 0.05);
        g.u[1].iter_mut().for_each(|v| *v = -0.1);
        let mut s = settings(0.0);
        s.max_iterations = 1;
        s.tolerance = 1e-14;
        match project_pressure(&mut g, &s, 0.01) {
            Err(Error::PressureNotConverged { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
