//! Particle/grid velocity transfers and velocity extrapolation.

use crate::grid::{lattice_weights, MacGrid};
use crate::particles::Particle;

/// Scatter bulk particle velocities to the faces with the multilinear kernel
/// (`u = sum w v / sum w`). Returns the faces that received any weight.
pub fn particles_to_grid<const D: usize>(grid: &mut MacGrid<D>, particles: &[Particle<D>]) -> [Vec<bool>; D] {
    let h = grid.h;
    std::array::from_fn(|axis| {
        let faces = grid.faces(axis);
        let mut num = vec![0.0; faces.len()];
        let mut den = vec![0.0; faces.len()];
        let offset = MacGrid::<D>::face_offset(axis);
        for p in particles.iter().filter(|p| p.is_bulk()) {
            let v = p.vel[axis];
            lattice_weights(faces.dims, h, offset, p.pos, |i, w| {
                num[i] += w * v;
                den[i] += w;
            });
        }
        let mut valid = vec![false; faces.len()];
        for i in 0..faces.len() {
            if den[i] > 1e-12 {
                grid.u[axis][i] = num[i] / den[i];
                valid[i] = true;
            } else {
                grid.u[axis][i] = 0.0;
            }
        }
        valid
    })
}

/// Fill invalid faces layer by layer with the mean of valid face-neighbors
/// in the same component lattice. Faces still unreached after `layers`
/// layers are zeroed.
pub fn extrapolate_velocity<const D: usize>(grid: &mut MacGrid<D>, valid: &mut [Vec<bool>; D], layers: usize) {
    for axis in 0..D {
        let faces = grid.faces(axis);
        let u = &mut grid.u[axis];
        let ok = &mut valid[axis];
        for _ in 0..layers {
            let mut updates = Vec::new();
            for i in 0..faces.len() {
                if ok[i] {
                    continue;
                }
                let mut sum = 0.0;
                let mut cnt = 0usize;
                faces.for_each_neighbor(i, |j| {
                    if ok[j] {
                        sum += u[j];
                        cnt += 1;
                    }
                });
                if cnt > 0 {
                    updates.push((i, sum / cnt as f64));
                }
            }
            if updates.is_empty() {
                break;
            }
            for (i, v) in updates {
                u[i] = v;
                ok[i] = true;
            }
        }
        for i in 0..faces.len() {
            if !ok[i] {
                u[i] = 0.0;
            }
        }
    }
}

/// PIC/FLIP blended grid-to-particle update for bulk particles:
/// `v <- blend (v + u_new - u_old) + (1 - blend) u_new`.
pub fn grid_to_particles<const D: usize>(
    grid: &MacGrid<D>,
    u_old: &[Vec<f64>; D],
    particles: &mut [Particle<D>],
    flip_blend: f64,
) {
    for p in particles.iter_mut().filter(|p| p.is_bulk()) {
        let new = grid.velocity_at(p.pos);
        let old = grid.velocity_from(u_old, p.pos);
        for a in 0..D {
            let flip = p.vel[a] + new[a] - old[a];
            p.vel[a] = flip_blend * flip + (1.0 - flip_blend) * new[a];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particles::Role;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pic_round_trip_preserves_constant_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut grid = MacGrid::<2>::new([10, 10], 0.1);
        let v0 = [0.37, -1.25];
        let mut ps: Vec<Particle<2>> = (0..60)
            .map(|k| {
                let p = [rng.random_range(0.3..0.7), rng.random_range(0.2..0.6)];
                Particle::new(k, p, v0, Role::Bulk)
            })
            .collect();
        let mut valid = particles_to_grid(&mut grid, &ps);
        extrapolate_velocity(&mut grid, &mut valid, 20);
        let u_old = grid.u.clone();
        grid_to_particles(&grid, &u_old, &mut ps, 0.0);
        for p in &ps {
            assert!((p.vel[0] - v0[0]).abs() < 1e-14 && (p.vel[1] - v0[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn flip_adds_grid_delta() {
        let mut grid = MacGrid::<2>::new([4, 4], 0.1);
        let u_old = grid.u.clone();
        grid.u[1].iter_mut().for_each(|v| *v = -0.5);
        let mut ps = vec![Particle::new(0, [0.2, 0.2], [1.0, 2.0], Role::Bulk)];
        grid_to_particles(&grid, &u_old, &mut ps, 1.0);
        assert!((ps[0].vel[0] - 1.0).abs() < 1e-15);
        assert!((ps[0].vel[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn ballistic_particles_do_not_scatter() {
        let mut grid = MacGrid::<2>::new([4, 4], 0.1);
        let ps = vec![Particle::new(0, [0.2, 0.2], [1.0, 2.0], Role::Splash)];
        let valid = particles_to_grid(&mut grid, &ps);
        assert!(valid.iter().all(|v| v.iter().all(|&b| !b)));
    }
}
