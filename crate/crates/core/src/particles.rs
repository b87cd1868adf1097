//! Simulation particles and seeding helpers.

use rand::Rng;

use crate::grid::Lattice;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Role {
    /// Part of the liquid volume; participates in grid transfers.
    Bulk = 0,
    /// Ballistic droplet detached from the bulk.
    Splash = 1,
    /// Visual-only particle, never coupled back to the simulation.
    Secondary = 2,
}

impl Role {
    pub fn from_u8(v: u8) -> Option<Role> {
        match v {
            0 => Some(Role::Bulk),
            1 => Some(Role::Splash),
            2 => Some(Role::Secondary),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle<const D: usize> {
    pub pos: [f64; D],
    pub vel: [f64; D],
    pub id: u64,
    pub role: Role,
    /// Random-walk expectation accumulated over the current window.
    pub expectation: f64,
    /// Time accumulated toward the current window.
    pub window_elapsed: f64,
    /// Time since the particle became ballistic.
    pub airtime: f64,
    /// Set once a ballistic particle has been observed outside the liquid.
    pub departed: bool,
}

impl<const D: usize> Particle<D> {
    pub fn new(id: u64, pos: [f64; D], vel: [f64; D], role: Role) -> Self {
        Self {
            pos,
            vel,
            id,
            role,
            expectation: 0.0,
            window_elapsed: 0.0,
            airtime: 0.0,
            departed: false,
        }
    }

    pub fn is_bulk(&self) -> bool {
        self.role == Role::Bulk
    }

    /// Switch to ballistic flight.
    pub fn launch(&mut self, role: Role) {
        self.role = role;
        self.airtime = 0.0;
        self.departed = false;
        self.expectation = 0.0;
    }
}

/// Particle container. Ids are handed out monotonically and never reused.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParticleSet<const D: usize> {
    pub particles: Vec<Particle<D>>,
    next_id: u64,
}

impl<const D: usize> ParticleSet<D> {
    pub fn new() -> Self {
        Self {
            particles: Vec::new(),
            next_id: 0,
        }
    }

    /// Rebuild a set from stored particles, e.g. after reading a frame dump.
    pub fn from_particles(particles: Vec<Particle<D>>) -> Self {
        let next_id = particles.iter().map(|p| p.id + 1).max().unwrap_or(0);
        Self { particles, next_id }
    }

    pub fn push(&mut self, pos: [f64; D], vel: [f64; D], role: Role) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.particles.push(Particle::new(id, pos, vel, role));
        id
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Particle<D>> {
        self.particles.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Particle<D>> {
        self.particles.iter_mut()
    }

    pub fn bulk(&self) -> impl Iterator<Item = &Particle<D>> {
        self.particles.iter().filter(|p| p.role == Role::Bulk)
    }

    pub fn count(&self, role: Role) -> usize {
        self.particles.iter().filter(|p| p.role == role).count()
    }

    pub fn retain(&mut self, f: impl FnMut(&Particle<D>) -> bool) {
        self.particles.retain(f);
    }

    pub fn by_id(&self, id: u64) -> Option<&Particle<D>> {
        // particles stay sorted by id unless the caller reorders them
        match self.particles.binary_search_by_key(&id, |p| p.id) {
            Ok(i) => Some(&self.particles[i]),
            Err(_) => self.particles.iter().find(|p| p.id == id),
        }
    }
}

/// Positions of `ppc` particles per cell for every cell whose sub-samples fall
/// inside `inside`. When `ppc` is a perfect `D`-th power the cell is split into
/// a regular sub-lattice and each sample is jittered within its sub-cell by
/// `jitter` (0 = regular, 1 = anywhere in the sub-cell); otherwise positions
/// are uniform random in the cell.
pub fn seed_particles<const D: usize, R: Rng>(
    res: [usize; D],
    h: f64,
    ppc: usize,
    jitter: f64,
    rng: &mut R,
    inside: impl Fn([f64; D]) -> bool,
) -> Vec<[f64; D]> {
    let cells = Lattice::new(res);
    let k = (ppc as f64).powf(1.0 / D as f64).round() as usize;
    let stratified = k.pow(D as u32) == ppc;
    let mut out = Vec::new();
    for ci in 0..cells.len() {
        let c = cells.coords(ci);
        for s in 0..ppc {
            let p: [f64; D] = if stratified {
                let mut rem = s;
                let sub = h / k as f64;
                std::array::from_fn(|a| {
                    let j = rem % k;
                    rem /= k;
                    let centre = c[a] as f64 * h + (j as f64 + 0.5) * sub;
                    let jit = if jitter > 0.0 {
                        rng.random_range(-0.5..0.5) * jitter * sub
                    } else {
                        0.0
                    };
                    centre + jit
                })
            } else {
                std::array::from_fn(|a| (c[a] as f64 + rng.random::<f64>()) * h)
            };
            if inside(p) {
                out.push(p);
            }
        }
    }
    out
}
