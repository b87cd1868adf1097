//! Particle level sets and redistancing.

use crate::grid::{level_set_sentinel, Lattice};
use crate::vecmath::{axpy, dist, dot, scale, sub};

/// Default particle radius for the union-of-spheres surface, in cells.
pub const DEFAULT_RADIUS_CELLS: f64 = 0.8;

/// A point on the zero level set with its unit normal (zero when unknown).
#[derive(Clone, Copy, Debug, PartialEq)]
struct SurfacePoint<const D: usize> {
    p: [f64; D],
    n: [f64; D],
}

impl<const D: usize> SurfacePoint<D> {
    /// Distance estimate from `x` to the surface near this point: the
    /// tangent-plane distance when its foot lies within half a cell of the
    /// point, the point distance otherwise.
    fn distance_from(&self, x: [f64; D], h: f64) -> f64 {
        let e = dist(x, self.p);
        if self.n.iter().all(|&v| v == 0.0) {
            return e;
        }
        let t = dot(sub(self.p, x), self.n);
        let foot = axpy(x, t, self.n);
        if dist(foot, self.p) <= 0.5 * h {
            t.abs().min(e)
        } else {
            e
        }
    }
}

fn cell_centre<const D: usize>(c: [usize; D], h: f64) -> [f64; D] {
    std::array::from_fn(|a| (c[a] as f64 + 0.5) * h)
}

/// Visit every cell of the box `[lo, hi]` (inclusive).
fn for_each_in_box<const D: usize>(lo: [usize; D], hi: [usize; D], mut f: impl FnMut([usize; D])) {
    if (0..D).any(|a| lo[a] > hi[a]) {
        return;
    }
    let mut c = lo;
    loop {
        f(c);
        let mut a = 0;
        while a < D {
            if c[a] < hi[a] {
                c[a] += 1;
                break;
            }
            c[a] = lo[a];
            a += 1;
        }
        if a == D {
            return;
        }
    }
}

/// Union-of-spheres level set around `positions`, as a signed distance.
/// Cells containing a particle are always inside.
///
/// Outside the union (up to a few cells) the distance to the nearest sphere
/// is exact, and the nearest sphere points seed the interior, which is
/// filled by closest-point sweeping. An empty position list yields the
/// positive sentinel everywhere.
pub fn build_level_set<const D: usize>(
    positions: impl IntoIterator<Item = [f64; D]>,
    res: [usize; D],
    h: f64,
    radius: f64,
) -> Vec<f64> {
    let cells = Lattice::new(res);
    let n = cells.len();
    let sentinel = level_set_sentinel(res, h);
    let pts: Vec<[f64; D]> = positions.into_iter().collect();
    let mut phi = vec![sentinel; n];
    if pts.is_empty() {
        return phi;
    }
    let home_of = |p: [f64; D]| -> [usize; D] {
        std::array::from_fn(|a| ((p[a] / h).floor().max(0.0) as usize).min(res[a] - 1))
    };
    // particle indices bucketed by cell, for coverage queries
    let mut bucket_start = vec![0usize; n + 1];
    for &p in &pts {
        bucket_start[cells.index(home_of(p)) + 1] += 1;
    }
    for i in 0..n {
        bucket_start[i + 1] += bucket_start[i];
    }
    let mut fill = bucket_start.clone();
    let mut bucketed = vec![0usize; pts.len()];
    for (k, &p) in pts.iter().enumerate() {
        let i = cells.index(home_of(p));
        bucketed[fill[i]] = k;
        fill[i] += 1;
    }

    let mut nearest = vec![usize::MAX; n];
    let mut occupied = vec![false; n];
    let reach = radius + 3.5 * h;
    for (k, &p) in pts.iter().enumerate() {
        let lo: [usize; D] = std::array::from_fn(|a| ((p[a] - reach) / h - 0.5).ceil().max(0.0) as usize);
        let hi: [usize; D] = std::array::from_fn(|a| {
            (((p[a] + reach) / h - 0.5).floor().max(0.0) as usize).min(res[a] - 1)
        });
        occupied[cells.index(home_of(p))] = true;
        for_each_in_box(lo, hi, |c| {
            let d = dist(cell_centre(c, h), p) - radius;
            let i = cells.index(c);
            if d < phi[i] {
                phi[i] = d;
                nearest[i] = k;
            }
        });
    }

    let overlapping = overlap_lists(&pts, radius, &cells, h, &bucket_start, &bucketed);
    // whether `q`, a point on sphere `a` (and `b`), lies strictly inside
    // another sphere; only spheres intersecting `a` can contain it
    let covered = |q: [f64; D], a: usize, b: usize| -> bool {
        overlapping[a]
            .iter()
            .any(|&k| k != b && dist(pts[k], q) < radius * (1.0 - 1e-9))
    };

    // Exterior cells: the nearest sphere gives the exact distance. Interior
    // cells: `radius - |x - c|` of the deepest sphere is a lower bound on the
    // depth, and exact when the exit point along that sphere's normal is not
    // covered by another sphere.
    let mut surf: Vec<Option<SurfacePoint<D>>> = vec![None; n];
    let mut fixed = vec![false; n];
    let mut d = vec![f64::INFINITY; n];
    let mut lower = vec![0.0; n];
    let mut inside = vec![false; n];
    for i in 0..n {
        if nearest[i] == usize::MAX {
            inside[i] = occupied[i];
            continue;
        }
        let x = cell_centre(cells.coords(i), h);
        let c = pts[nearest[i]];
        let r = dist(x, c);
        let nrm = if r > 1e-12 * h { scale(sub(x, c), 1.0 / r) } else { [0.0; D] };
        let q = axpy(c, radius, nrm);
        inside[i] = phi[i] < 0.0 || occupied[i];
        if !inside[i] {
            fixed[i] = true;
            d[i] = phi[i];
            surf[i] = Some(SurfacePoint { p: q, n: nrm });
        } else {
            lower[i] = (-phi[i]).max(0.0);
            if r > 1e-12 * h && !covered(q, nearest[i], nearest[i]) {
                fixed[i] = true;
                d[i] = lower[i];
                surf[i] = Some(SurfacePoint { p: q, n: nrm });
            }
        }
    }
    sweep(&cells, h, &fixed, &mut surf, &mut d, 1);

    // Close to the surface, resolve the remaining interior cells exactly:
    // the closest boundary point is either the radial exit point of one
    // sphere or lies where two spheres intersect. The resolved points then
    // seed a second sweep into the interior.
    let exact_depth = 2.0 * h;
    let mut near = Vec::new();
    for i in 0..n {
        if !inside[i] || fixed[i] || !(d[i] <= exact_depth) {
            continue;
        }
        let x = cell_centre(cells.coords(i), h);
        let ub = d[i];
        let hc = home_of(x);
        let w = ((radius + ub) / h).ceil() as usize + 1;
        let lo: [usize; D] = std::array::from_fn(|a| hc[a].saturating_sub(w));
        let hi: [usize; D] = std::array::from_fn(|a| (hc[a] + w).min(res[a] - 1));
        near.clear();
        for_each_in_box(lo, hi, |c| {
            let ci = cells.index(c);
            for &k in &bucketed[bucket_start[ci]..bucket_start[ci + 1]] {
                if dist(pts[k], x) <= radius + ub {
                    near.push(k);
                }
            }
        });
        let mut best = ub;
        let mut best_p = None;
        for &a in near.iter() {
            let ca = pts[a];
            let ra = dist(x, ca);
            if (radius - ra).abs() >= best {
                continue;
            }
            if ra > 1e-12 * h {
                let qa = axpy(ca, radius / ra, sub(x, ca));
                if !covered(qa, a, a) {
                    best = (radius - ra).abs();
                    best_p = Some(SurfacePoint { p: qa, n: scale(sub(x, ca), 1.0 / ra) });
                }
            }
            for &b in &overlapping[a] {
                let cb = pts[b];
                if b < a || ((radius - dist(x, cb)).abs()) >= best {
                    continue;
                }
                let sep = dist(ca, cb);
                if sep < 1e-12 * h {
                    continue;
                }
                let axis = scale(sub(cb, ca), 1.0 / sep);
                let cc = axpy(ca, 0.5 * sep, axis);
                let rho = (radius * radius - 0.25 * sep * sep).sqrt();
                let v = sub(x, cc);
                let along = dot(v, axis);
                let perp = axpy(v, -along, axis);
                let lp = dot(perp, perp).sqrt();
                // distance from x to the intersection is at least this
                if along.abs().max((lp - rho).abs()) >= best {
                    continue;
                }
                let dirs: Vec<[f64; D]> = if lp > 1e-9 * h {
                    let u = scale(perp, 1.0 / lp);
                    vec![u, scale(u, -1.0)]
                } else {
                    // x on the axis: the whole intersection is equally far
                    perpendicular_directions(axis)
                };
                for u in dirs {
                    let q = axpy(cc, rho, u);
                    let e = dist(x, q);
                    if e < best && !covered(q, a, b) {
                        best = e;
                        best_p = Some(SurfacePoint { p: q, n: [0.0; D] });
                    }
                }
            }
        }
        if let Some(sp) = best_p {
            d[i] = best;
            surf[i] = Some(sp);
            fixed[i] = true;
        }
    }
    sweep(&cells, h, &fixed, &mut surf, &mut d, 2);

    for i in 0..n {
        let mag = if d[i].is_finite() { d[i].max(lower[i]) } else { sentinel };
        phi[i] = if inside[i] { -mag.max(1e-9 * h) } else { mag };
    }
    phi
}

/// For every sphere, the other spheres it intersects.
fn overlap_lists<const D: usize>(
    pts: &[[f64; D]],
    radius: f64,
    cells: &Lattice<D>,
    h: f64,
    bucket_start: &[usize],
    bucketed: &[usize],
) -> Vec<Vec<usize>> {
    let w = (2.0 * radius / h).ceil() as usize + 1;
    pts.iter()
        .enumerate()
        .map(|(a, &p)| {
            let hc: [usize; D] = std::array::from_fn(|k| ((p[k] / h).floor().max(0.0) as usize).min(cells.dims[k] - 1));
            let lo: [usize; D] = std::array::from_fn(|k| hc[k].saturating_sub(w));
            let hi: [usize; D] = std::array::from_fn(|k| (hc[k] + w).min(cells.dims[k] - 1));
            let mut out = Vec::new();
            for_each_in_box(lo, hi, |c| {
                let i = cells.index(c);
                for &b in &bucketed[bucket_start[i]..bucket_start[i + 1]] {
                    if b != a && dist(pts[b], p) < 2.0 * radius {
                        out.push(b);
                    }
                }
            });
            out
        })
        .collect()
}

/// Unit vectors perpendicular to `axis`: both normals in 2D, twelve
/// directions around the axis in 3D.
fn perpendicular_directions<const D: usize>(axis: [f64; D]) -> Vec<[f64; D]> {
    let k = (0..D)
        .min_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs()))
        .unwrap_or(0);
    let mut e = [0.0; D];
    e[k] = 1.0;
    let u = axpy(e, -dot(e, axis), axis);
    let u = scale(u, 1.0 / dot(u, u).sqrt());
    if D < 3 {
        return vec![u, scale(u, -1.0)];
    }
    // w = axis x u, written for the three-component case
    let mut w = [0.0; D];
    w[0] = axis[1] * u[2] - axis[2] * u[1];
    w[1] = axis[2] * u[0] - axis[0] * u[2];
    w[2] = axis[0] * u[1] - axis[1] * u[0];
    (0..12)
        .map(|j| {
            let t = j as f64 / 12.0 * std::f64::consts::TAU;
            axpy(scale(u, t.cos()), t.sin(), w)
        })
        .collect()
}

/// Replace `phi` by the signed distance to its zero crossing, keeping signs.
///
/// Cells next to a sign change get a closest-point estimate from the linear
/// crossings along each axis or a Newton step along the local gradient,
/// whichever is closer. The surface points are then propagated by repeated
/// sweeps in all `2^D` axis orderings. Regions with no interface receive the
/// sentinel magnitude.
pub fn redistance<const D: usize>(phi: &mut [f64], res: [usize; D], h: f64) {
    let cells = Lattice::new(res);
    let n = cells.len();
    let sentinel = level_set_sentinel(res, h);
    let inside: Vec<bool> = phi.iter().map(|&v| v < 0.0).collect();
    let mut surf: Vec<Option<SurfacePoint<D>>> = vec![None; n];
    let mut d = vec![f64::INFINITY; n];
    let mut seed = vec![false; n];

    for i in 0..n {
        let c = cells.coords(i);
        let x = cell_centre(c, h);
        let mut da = [f64::INFINITY; D];
        let mut sa = [0.0f64; D];
        let mut hit = false;
        for a in 0..D {
            for dir in [-1i32, 1] {
                if let Some(nc) = cells.neighbor(c, a, dir) {
                    let j = cells.index(nc);
                    if inside[j] != inside[i] {
                        let theta = phi[i] / (phi[i] - phi[j]);
                        let theta = if theta.is_finite() { theta.clamp(0.0, 1.0) } else { 0.5 };
                        let dd = theta * h;
                        if dd < da[a] {
                            da[a] = dd;
                            sa[a] = dir as f64;
                            hit = true;
                        }
                    }
                }
            }
        }
        if !hit {
            continue;
        }
        seed[i] = true;
        let mut grad = [0.0; D];
        for (a, g) in grad.iter_mut().enumerate() {
            let lo = cells.neighbor(c, a, -1).map(|nc| phi[cells.index(nc)]);
            let hi = cells.neighbor(c, a, 1).map(|nc| phi[cells.index(nc)]);
            *g = match (lo, hi) {
                (Some(l), Some(u)) => (u - l) / (2.0 * h),
                (Some(l), None) => (phi[i] - l) / h,
                (None, Some(u)) => (u - phi[i]) / h,
                (None, None) => 0.0,
            };
        }
        let g2 = dot(grad, grad);
        let nrm = if g2 > 1e-16 { scale(grad, 1.0 / g2.sqrt()) } else { [0.0; D] };
        if da.contains(&0.0) {
            surf[i] = Some(SurfacePoint { p: x, n: nrm });
            d[i] = 0.0;
            continue;
        }
        let inv2: f64 = da.iter().filter(|v| v.is_finite()).map(|v| 1.0 / (v * v)).sum();
        let mut dist0 = 1.0 / inv2.sqrt();
        let mut p: [f64; D] = std::array::from_fn(|a| {
            if da[a].is_finite() {
                x[a] + dist0 * dist0 * sa[a] / da[a]
            } else {
                x[a]
            }
        });
        // a Newton step resolves slanted surfaces that cross only one axis
        if g2 > 1e-16 {
            let dn = phi[i].abs() / g2.sqrt();
            if dn < dist0 {
                dist0 = dn;
                p = std::array::from_fn(|a| x[a] - phi[i] * grad[a] / g2);
            }
        }
        surf[i] = Some(SurfacePoint { p, n: nrm });
        d[i] = dist0;
    }

    let fixed = vec![false; n];
    sweep(&cells, h, &fixed, &mut surf, &mut d, 1);
    refine_band(&cells, h, &seed, &surf, &mut d);

    for i in 0..n {
        let mag = if d[i].is_finite() { d[i] } else { sentinel };
        phi[i] = if inside[i] { -mag.max(1e-9 * h) } else { mag };
    }
}

/// Closest-point propagation: every non-fixed cell repeatedly adopts the
/// neighbor surface point that gives it the smallest distance estimate.
fn sweep<const D: usize>(
    cells: &Lattice<D>,
    h: f64,
    fixed: &[bool],
    surf: &mut [Option<SurfacePoint<D>>],
    d: &mut [f64],
    window: usize,
) {
    if surf.iter().all(|s| s.is_none()) {
        return;
    }
    let n = cells.len();
    let res = cells.dims;
    for _ in 0..8 {
        let mut changed = false;
        for order in 0..(1usize << D) {
            for k in 0..n {
                // walk the grid with axis `a` reversed when bit `a` of `order` is set
                let mut c = cells.coords(k);
                for a in 0..D {
                    if order >> a & 1 == 1 {
                        c[a] = res[a] - 1 - c[a];
                    }
                }
                let i = cells.index(c);
                if fixed[i] {
                    continue;
                }
                let x = cell_centre(c, h);
                let mut best = d[i];
                let mut best_s = surf[i];
                let mut consider = |j: usize| {
                    if let Some(s) = surf[j] {
                        let e = s.distance_from(x, h);
                        if e < best - 1e-12 * h {
                            best = e;
                            best_s = Some(s);
                        }
                    }
                };
                if window <= 1 {
                    cells.for_each_neighbor(i, consider);
                } else {
                    let lo: [usize; D] = std::array::from_fn(|a| c[a].saturating_sub(window));
                    let hi: [usize; D] = std::array::from_fn(|a| (c[a] + window).min(res[a] - 1));
                    for_each_in_box(lo, hi, |nc| consider(cells.index(nc)));
                }
                if best_s != surf[i] {
                    d[i] = best;
                    surf[i] = best_s;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Within three cells of the surface, lower each distance to the nearest
/// point on the polyline (polygon edges in 3D) joining the surface points of
/// face-adjacent seed cells.
fn refine_band<const D: usize>(
    cells: &Lattice<D>,
    h: f64,
    seed: &[bool],
    surf: &[Option<SurfacePoint<D>>],
    d: &mut [f64],
) {
    let band = 3.5 * h;
    for i in 0..cells.len() {
        if !(d[i] <= band) || d[i] == 0.0 {
            continue;
        }
        let c = cells.coords(i);
        let x = cell_centre(c, h);
        let w = (d[i] / h).ceil() as usize + 1;
        let lo: [usize; D] = std::array::from_fn(|a| c[a].saturating_sub(w));
        let hi: [usize; D] = std::array::from_fn(|a| (c[a] + w).min(cells.dims[a] - 1));
        let mut best = d[i];
        for_each_in_box(lo, hi, |s| {
            let si = cells.index(s);
            if !seed[si] {
                return;
            }
            let Some(q) = surf[si] else { return };
            best = best.min(dist(x, q.p));
            for a in 0..D {
                if let Some(t) = cells.neighbor(s, a, 1) {
                    let ti = cells.index(t);
                    if let (true, Some(r)) = (seed[ti], surf[ti]) {
                        if let Some(p) = closest_on_segment(x, q.p, r.p, 1.5 * h) {
                            best = best.min(dist(x, p));
                        }
                    }
                }
            }
        });
        d[i] = best;
    }
}

/// Closest point to `x` on the segment `[a, b]`, or `None` when the segment
/// is longer than `max_len`, degenerate, or `x` projects onto an endpoint.
fn closest_on_segment<const D: usize>(x: [f64; D], a: [f64; D], b: [f64; D], max_len: f64) -> Option<[f64; D]> {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 < 1e-30 || len2 > max_len * max_len {
        return None;
    }
    let t = dot(sub(x, a), ab) / len2;
    if t <= 0.0 || t >= 1.0 {
        return None;
    }
    Some(axpy(a, t, ab))
}

/// Signed distance to an obstacle mask (negative inside obstacles).
pub fn solid_distance<const D: usize>(solid: &[bool], res: [usize; D], h: f64) -> Vec<f64> {
    let mut phi: Vec<f64> = solid.iter().map(|&s| if s { -0.5 * h } else { 0.5 * h }).collect();
    redistance(&mut phi, res, h);
    phi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MacGrid;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_particle_marks_only_its_cell() {
        let h = 0.1;
        let res = [9, 9];
        let phi = build_level_set([[0.45, 0.45]], res, h, 0.8 * h);
        let cells = Lattice::new(res);
        for i in 0..cells.len() {
            let c = cells.coords(i);
            let centre = [(c[0] as f64 + 0.5) * h, (c[1] as f64 + 0.5) * h];
            let within = dist(centre, [0.45, 0.45]) < 0.8 * h;
            assert_eq!(phi[i] < 0.0, within, "cell {c:?}");
        }
    }

    #[test]
    fn disjoint_particles_give_two_regions() {
        let h = 0.1;
        let res = [20, 6];
        let phi = build_level_set([[0.35, 0.25], [1.35, 0.25]], res, h, 0.8 * h);
        let mask: Vec<bool> = phi.iter().map(|&v| v < 0.0).collect();
        let lab = crate::components::label_components(&mask, res);
        assert_eq!(lab.sizes.len(), 2);
    }

    #[test]
    fn empty_set_gives_positive_sentinel() {
        let phi = build_level_set(Vec::<[f64; 2]>::new(), [4, 4], 0.1, 0.08);
        assert!(phi.iter().all(|&v| v > 0.0 && v == phi[0]));
    }

    #[test]
    fn redistance_reproduces_plane_and_circle() {
        let h = 0.05;
        let mut g = MacGrid::<2>::new([40, 40], h);
        let cells = g.cells();
        // distorted (non-distance) plane: phi = 3 * (y - 1.01)
        for i in 0..cells.len() {
            let x = g.cell_center(cells.coords(i));
            g.phi[i] = 3.0 * (x[1] - 1.01);
        }
        redistance(&mut g.phi, g.res, h);
        for i in 0..cells.len() {
            let x = g.cell_center(cells.coords(i));
            assert!((g.phi[i] - (x[1] - 1.01)).abs() < 1e-9);
        }
        for i in 0..cells.len() {
            let x = g.cell_center(cells.coords(i));
            let r = dist(x, [1.0, 1.0]);
            g.phi[i] = r * r - 0.49;
        }
        redistance(&mut g.phi, g.res, h);
        for i in 0..cells.len() {
            let x = g.cell_center(cells.coords(i));
            let exact = dist(x, [1.0, 1.0]) - 0.7;
            if exact.abs() < 3.0 * h {
                assert!((g.phi[i] - exact).abs() < 0.1 * h, "{} vs {}", g.phi[i], exact);
            }
        }
    }

    /// Signed distance to the boundary of a union of discs, from points
    /// sampled densely on every circle that are not covered by another disc.
    fn union_of_discs_oracle(centres: &[[f64; 2]], r: f64, x: [f64; 2]) -> f64 {
        let mut best = f64::INFINITY;
        let mut order: Vec<&[f64; 2]> = centres.iter().collect();
        order.sort_by(|a, b| dist(**a, x).total_cmp(&dist(**b, x)));
        for c in order {
            if (dist(*c, x) - r).abs() > best {
                continue;
            }
            let close: Vec<&[f64; 2]> = centres.iter().filter(|o| dist(**o, *c) < 2.0 * r).collect();
            for k in 0..720 {
                let t = k as f64 / 720.0 * std::f64::consts::TAU;
                let q = [c[0] + r * t.cos(), c[1] + r * t.sin()];
                if close.iter().any(|o| dist(**o, q) < r - 1e-12) {
                    continue;
                }
                best = best.min(dist(x, q));
            }
        }
        let inside = centres.iter().any(|c| dist(*c, x) < r);
        if inside {
            -best
        } else {
            best
        }
    }

    #[test]
    fn dense_block_matches_distance_oracle() {
        let h = 0.05;
        let res = [32, 32];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pts = crate::particles::seed_particles(res, h, 4, 0.0, &mut rng, |p| dist(p, [0.8, 0.8]) < 0.4);
        let phi = build_level_set(pts.iter().copied(), res, h, 0.8 * h);
        let cells = Lattice::new(res);
        let mut checked = 0;
        for i in 0..cells.len() {
            let c = cells.coords(i);
            let x = [(c[0] as f64 + 0.5) * h, (c[1] as f64 + 0.5) * h];
            if (dist(x, [0.8, 0.8]) - 0.4).abs() > 2.5 * h {
                continue;
            }
            let oracle = union_of_discs_oracle(&pts, 0.8 * h, x);
            if oracle.abs() > 3.0 * h {
                continue;
            }
            assert!((phi[i] - oracle).abs() < 0.1 * h, "{c:?}: {} vs {}", phi[i], oracle);
            if c.iter().all(|&v| v > 0 && v < 31) {
                // skip kinks of the exact field (medial ridges of the jagged block)
                let o = |dx: i64, dy: i64| {
                    let y = [x[0] + dx as f64 * h, x[1] + dy as f64 * h];
                    union_of_discs_oracle(&pts, 0.8 * h, y)
                };
                let ox = (o(1, 0) - o(-1, 0)) / (2.0 * h);
                let oy = (o(0, 1) - o(0, -1)) / (2.0 * h);
                if ((ox * ox + oy * oy).sqrt() - 1.0).abs() > 0.02 {
                    checked += 1;
                    continue;
                }
                let gx = (phi[cells.index([c[0] + 1, c[1]])] - phi[cells.index([c[0] - 1, c[1]])]) / (2.0 * h);
                let gy = (phi[cells.index([c[0], c[1] + 1])] - phi[cells.index([c[0], c[1] - 1])]) / (2.0 * h);
                let g = (gx * gx + gy * gy).sqrt();
                assert!((g - 1.0).abs() <= 0.1, "|grad phi| = {g} at {c:?}");
            }
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn particles_are_inside() {
        let h = 0.1;
        let res = [10, 10];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 2]> = (0..30).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let phi = build_level_set(pts.iter().copied(), res, h, 0.8 * h);
        let cells = Lattice::new(res);
        for p in pts {
            let c = [(p[0] / h) as usize, (p[1] / h) as usize];
            assert!(phi[cells.index(c)] < 0.0);
        }
    }
}

