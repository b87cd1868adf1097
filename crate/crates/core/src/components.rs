//! Connected liquid regions and surface-particle detection.

use crate::grid::{CellFlag, Lattice, MacGrid};
use crate::particles::Particle;

/// Result of labeling face-connected regions of a cell mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labeling {
    /// Component id per cell, `None` outside the mask.
    pub ids: Vec<Option<u32>>,
    /// Cell count per component; ids are dense from 0.
    pub sizes: Vec<usize>,
}

impl Labeling {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Flood fill over face-adjacent cells (4-neighborhood in 2D, 6 in 3D).
/// Components are numbered in order of their lowest cell index.
pub fn label_components<const D: usize>(mask: &[bool], res: [usize; D]) -> Labeling {
    let cells = Lattice::new(res);
    let mut ids = vec![None; cells.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..cells.len() {
        if !mask[start] || ids[start].is_some() {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        ids[start] = Some(id);
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            cells.for_each_neighbor(i, |j| {
                if mask[j] && ids[j].is_none() {
                    ids[j] = Some(id);
                    stack.push(j);
                }
            });
        }
        sizes.push(size);
    }
    Labeling { ids, sizes }
}

/// Fluid-cell mask from flags.
pub fn fluid_mask(flags: &[CellFlag]) -> Vec<bool> {
    flags.iter().map(|&f| f == CellFlag::Fluid).collect()
}

/// Cells that are Empty or share a face with an Empty cell.
pub fn near_air<const D: usize>(flags: &[CellFlag], res: [usize; D]) -> Vec<bool> {
    let cells = Lattice::new(res);
    let mut out: Vec<bool> = flags.iter().map(|&f| f == CellFlag::Empty).collect();
    for i in 0..cells.len() {
        if flags[i] == CellFlag::Empty {
            cells.for_each_neighbor(i, |j| out[j] = true);
        }
    }
    out
}

/// Flags from particle occupancy: Solid cells stay Solid, cells holding a
/// bulk particle are Fluid, all others Empty.
pub fn occupancy_flags<const D: usize>(particles: &[Particle<D>], grid: &MacGrid<D>) -> Vec<CellFlag> {
    let mut flags: Vec<CellFlag> = grid
        .solid
        .iter()
        .map(|&s| if s { CellFlag::Solid } else { CellFlag::Empty })
        .collect();
    for p in particles.iter().filter(|p| p.is_bulk()) {
        let i = grid.cell_index_of(p.pos);
        if flags[i] == CellFlag::Empty {
            flags[i] = CellFlag::Fluid;
        }
    }
    flags
}

/// Indices of bulk particles in the surface band: their cell is free of
/// bulk particles' neighbors on at least one face, i.e. it is Empty or
/// face-adjacent to an Empty cell of the occupancy flags.
///
/// Occupancy is used instead of the sign of `phi` because the particle level
/// set reaches past the outermost particles, which would push the band one
/// cell outside the liquid.
pub fn surface_particle_indices<const D: usize>(particles: &[Particle<D>], grid: &MacGrid<D>) -> Vec<usize> {
    let band = near_air(&occupancy_flags(particles, grid), grid.res);
    particles
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_bulk() && band[grid.cell_index_of(p.pos)])
        .map(|(i, _)| i)
        .collect()
}

/// Ids of surface particles (see [`surface_particle_indices`]).
pub fn detect_surface_particles<const D: usize>(particles: &[Particle<D>], grid: &MacGrid<D>) -> Vec<u64> {
    surface_particle_indices(particles, grid)
        .into_iter()
        .map(|i| particles[i].id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particles::Role;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct UnionFind(Vec<usize>);

    impl UnionFind {
        fn find(&mut self, mut x: usize) -> usize {
            while self.0[x] != x {
                self.0[x] = self.0[self.0[x]];
                x = self.0[x];
            }
            x
        }
        fn union(&mut self, a: usize, b: usize) {
            let (ra, rb) = (self.find(a), self.find(b));
            if ra != rb {
                self.0[ra] = rb;
            }
        }
    }

    fn union_find_count(mask: &[bool], w: usize, h: usize) -> usize {
        let mut uf = UnionFind((0..w * h).collect());
        for y in 0..h {
            for x in 0..w {
                let i = x + w * y;
                if !mask[i] {
                    continue;
                }
                if x + 1 < w && mask[i + 1] {
                    uf.union(i, i + 1);
                }
                if y + 1 < h && mask[i + w] {
                    uf.union(i, i + w);
                }
            }
        }
        let mut roots: Vec<usize> = (0..w * h).filter(|&i| mask[i]).map(|i| uf.find(i)).collect();
        roots.sort();
        roots.dedup();
        roots.len()
    }

    #[test]
    fn single_blob_is_one_component() {
        let mut mask = vec![false; 36];
        for i in [7, 8, 9, 13, 14, 15, 20] {
            mask[i] = true;
        }
        let lab = label_components(&mask, [6, 6]);
        assert_eq!(lab.sizes, vec![7]);
    }

    #[test]
    fn diagonal_contact_is_not_connected() {
        let mut mask = vec![false; 9];
        mask[0] = true;
        mask[4] = true;
        let lab = label_components(&mask, [3, 3]);
        assert_eq!(lab.count(), 2);
        assert_eq!(lab.ids[0], Some(0));
        assert_eq!(lab.ids[4], Some(1));
    }

    #[test]
    fn no_fluid_gives_empty_labeling() {
        let lab = label_components(&[false; 8], [2, 2, 2]);
        assert_eq!(lab.count(), 0);
        assert!(lab.ids.iter().all(|i| i.is_none()));
    }

    #[test]
    fn random_fields_match_union_find() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = rng.random_range(0.2..0.7);
            let mask: Vec<bool> = (0..256).map(|_| rng.random::<f64>() < p).collect();
            let lab = label_components(&mask, [16, 16]);
            assert_eq!(lab.count(), union_find_count(&mask, 16, 16));
            assert_eq!(lab.sizes.iter().sum::<usize>(), mask.iter().filter(|&&m| m).count());
        }
    }

    proptest::proptest! {
        #[test]
        fn labeling_is_independent_of_visit_order(bits in proptest::collection::vec(proptest::bool::ANY, 64)) {
            // Relabel the transposed field and compare the induced partitions.
            let lab = label_components(&bits, [8, 8]);
            let t: Vec<bool> = (0..64).map(|i| bits[(i % 8) * 8 + i / 8]).collect();
            let lab_t = label_components(&t, [8, 8]);
            proptest::prop_assert_eq!(lab.count(), lab_t.count());
            for i in 0..64 {
                for j in 0..64 {
                    let same = lab.ids[i].is_some() && lab.ids[i] == lab.ids[j];
                    let ti = (i % 8) * 8 + i / 8;
                    let tj = (j % 8) * 8 + j / 8;
                    let same_t = lab_t.ids[ti].is_some() && lab_t.ids[ti] == lab_t.ids[tj];
                    proptest::prop_assert_eq!(same, same_t);
                }
            }
        }
    }

    fn pool(h: f64, depth_cells: usize) -> Vec<Particle<2>> {
        let mut out = Vec::new();
        for y in 0..depth_cells {
            for x in 0..12 {
                let id = out.len() as u64;
                out.push(Particle::new(id, [(x as f64 + 0.5) * h, (y as f64 + 0.5) * h], [0.0; 2], Role::Bulk));
            }
        }
        out
    }

    #[test]
    fn deep_particle_excluded_surface_particle_included() {
        let h = 0.1;
        let g = MacGrid::<2>::new([12, 12], h);
        let ps = pool(h, 8);
        let ids = detect_surface_particles(&ps, &g);
        assert_eq!(ids, (84..96).collect::<Vec<u64>>());
        let flags = occupancy_flags(&ps, &g);
        assert_eq!(flags.iter().filter(|&&f| f == CellFlag::Fluid).count(), 96);
    }

    #[test]
    fn random_blob_matches_distance_to_air_oracle() {
        let h = 0.1;
        let g = MacGrid::<2>::new([12, 12], h);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let particles: Vec<Particle<2>> = (0..400)
            .map(|k| {
                let p = [rng.random_range(0.0..1.2), rng.random_range(0.0..0.7)];
                Particle::new(k, p, [0.0; 2], Role::Bulk)
            })
            .collect();
        let got = detect_surface_particles(&particles, &g);
        // brute force: the particle's cell center lies within h of the center
        // of a cell holding no particle
        let occupied: Vec<[usize; 2]> = particles.iter().map(|p| g.cell_of(p.pos)).collect();
        let air: Vec<[f64; 2]> = (0..g.num_cells())
            .map(|i| g.cells().coords(i))
            .filter(|c| !occupied.contains(c))
            .map(|c| g.cell_center(c))
            .collect();
        let expect: Vec<u64> = particles
            .iter()
            .filter(|p| {
                let c = g.cell_center(g.cell_of(p.pos));
                air.iter().any(|a| crate::vecmath::dist(*a, c) <= h * (1.0 + 1e-9))
            })
            .map(|p| p.id)
            .collect();
        assert_eq!(got, expect);
        assert!(!got.is_empty());
        for id in &got {
            assert!(particles[*id as usize].pos[1] >= 0.6);
        }
    }
}
