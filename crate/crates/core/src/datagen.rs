//! Training data from randomized fine-scale simulations.
//!
//! A fine simulation is advanced frame by frame. At every frame boundary the
//! fields are box-filtered to the coarse grid, surface particles are selected
//! and described by a coarse stencil feature, and after one more frame each of
//! them is labeled as splashing or not from the coarse connected components.

use std::collections::{HashMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{label_components, surface_particle_indices};
use crate::error::{Error, Result};
use crate::grid::{Lattice, MacGrid};
use crate::particles::{seed_particles, Particle, ParticleSet, Role};
use crate::solver::{NoHook, SimParams, SolverState};
use crate::vecmath;

/// Attempts at placing one droplet before the scene is rejected.
pub const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    DropletRain,
    BreakingDam,
    LiquidString,
    Pool,
}

/// Axis-aligned solid box, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle<const D: usize> {
    #[serde(with = "crate::io::array")]
    pub min: [f64; D],
    #[serde(with = "crate::io::array")]
    pub max: [f64; D],
}

impl<const D: usize> Obstacle<D> {
    pub fn contains(&self, p: [f64; D]) -> bool {
        (0..D).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn distance(&self, p: [f64; D]) -> f64 {
        let mut s = 0.0;
        for a in 0..D {
            let d = (self.min[a] - p[a]).max(p[a] - self.max[a]).max(0.0);
            s += d * d;
        }
        s.sqrt()
    }
}

/// Template for randomized scenes. Position ranges are fractions of the
/// domain extent; velocities are m/s; lengths are meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig<const D: usize> {
    pub kind: SceneKind,
    #[serde(with = "crate::io::array")]
    pub res: [usize; D],
    pub h: f64,
    pub params: SimParams<D>,
    /// Inclusive range for the number of droplets.
    pub droplet_count: (usize, usize),
    pub droplet_radius: (f64, f64),
    #[serde(with = "crate::io::array")]
    pub droplet_position: [(f64, f64); D],
    #[serde(with = "crate::io::array")]
    pub droplet_velocity: [(f64, f64); D],
    /// Pool depth as a fraction of the domain height (last axis).
    pub pool_depth: f64,
    /// Dam column width (axis 0) and height (last axis) as domain fractions.
    pub dam_width: (f64, f64),
    pub dam_height: (f64, f64),
    pub string_length: (f64, f64),
    pub string_thickness: f64,
    /// Initial axial strain rate of the string, 1/s (`v_0 = rate (x - x_mid)`).
    pub string_stretch: f64,
    /// Axial velocity wave on the string, `a sin(2 pi x / wavelength + phase)`
    /// with a random phase: (amplitude m/s, wavelength m).
    pub string_wave: (f64, f64),
    pub obstacles: Vec<Obstacle<D>>,
    /// Seeding jitter within each particle sub-cell, 0..=1.
    pub jitter: f64,
    pub seed: u64,
    /// Simulated time per scene, s.
    pub duration: f64,
    pub coarse_factor: usize,
    pub droplet_max_cells: usize,
    pub scale_feature: bool,
}

/// Splash size threshold in coarse cells: 8 in 3D, 4 in 2D.
pub fn default_droplet_max_cells(dim: usize) -> usize {
    1 << dim
}

impl<const D: usize> SceneConfig<D> {
    pub fn new(kind: SceneKind, res: [usize; D], h: f64) -> Self {
        let mut droplet_position = [(0.2, 0.8); D];
        droplet_position[D - 1] = (0.5, 0.8);
        let mut droplet_velocity = [(-1.0, 1.0); D];
        droplet_velocity[D - 1] = (-3.0, 0.0);
        Self {
            kind,
            res,
            h,
            params: SimParams::default(),
            droplet_count: (1, 4),
            droplet_radius: (2.0 * h, 4.0 * h),
            droplet_position,
            droplet_velocity,
            pool_depth: 0.3,
            dam_width: (0.2, 0.4),
            dam_height: (0.4, 0.7),
            string_length: (0.1, 0.5),
            string_thickness: 4.0 * h,
            string_stretch: 0.0,
            string_wave: (0.0, 1.0),
            obstacles: Vec::new(),
            jitter: 1.0,
            seed: 0,
            duration: 1.0,
            coarse_factor: 2,
            droplet_max_cells: default_droplet_max_cells(D),
            scale_feature: false,
        }
    }

    pub fn extent(&self) -> [f64; D] {
        std::array::from_fn(|a| self.res[a] as f64 * self.h)
    }

    pub fn coarse_h(&self) -> f64 {
        self.h * self.coarse_factor as f64
    }

    pub fn frames(&self) -> usize {
        (self.duration / self.params.frame_dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.h > 0.0) || self.res.contains(&0) {
            return Err(Error::Config("resolution and h must be positive".into()));
        }
        if self.coarse_factor == 0 || self.res.iter().any(|&r| r % self.coarse_factor != 0) {
            return Err(Error::NotDivisible {
                res: self.res.to_vec(),
                factor: self.coarse_factor,
            });
        }
        let ordered = |name: &str, r: (f64, f64)| {
            if r.0 <= r.1 && r.0.is_finite() && r.1.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("range {name} is empty: [{}, {}]", r.0, r.1)))
            }
        };
        if self.droplet_count.0 > self.droplet_count.1 {
            return Err(Error::Config("droplet_count range is empty".into()));
        }
        ordered("droplet_radius", self.droplet_radius)?;
        ordered("dam_width", self.dam_width)?;
        ordered("dam_height", self.dam_height)?;
        ordered("string_length", self.string_length)?;
        for a in 0..D {
            ordered("droplet_position", self.droplet_position[a])?;
            ordered("droplet_velocity", self.droplet_velocity[a])?;
        }
        if self.droplet_radius.0 <= 0.0 {
            return Err(Error::Config("droplet radius must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter must lie in [0, 1], got {}", self.jitter)));
        }
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.droplet_max_cells == 0 {
            return Err(Error::Config("droplet_max_cells must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Droplet<const D: usize> {
    pub center: [f64; D],
    pub radius: f64,
    pub velocity: [f64; D],
}

/// A concrete initial condition drawn from a [`SceneConfig`].
#[derive(Clone, Debug)]
pub struct Scene<const D: usize> {
    pub state: SolverState<D>,
    pub droplets: Vec<Droplet<D>>,
    /// Liquid string length, LiquidString scenes only.
    pub string_length: Option<f64>,
}

fn uniform<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

fn place_droplet<const D: usize, R: Rng>(cfg: &SceneConfig<D>, rng: &mut R) -> Result<Droplet<D>> {
    let ext = cfg.extent();
    for _ in 0..MAX_PLACEMENT_TRIES {
        let radius = uniform(rng, cfg.droplet_radius);
        let center: [f64; D] = std::array::from_fn(|a| uniform(rng, cfg.droplet_position[a]) * ext[a]);
        let velocity: [f64; D] = std::array::from_fn(|a| uniform(rng, cfg.droplet_velocity[a]));
        let in_domain = (0..D).all(|a| center[a] - radius >= 0.0 && center[a] + radius <= ext[a]);
        let clear = cfg.obstacles.iter().all(|o| o.distance(center) > radius);
        if in_domain && clear {
            return Ok(Droplet { center, radius, velocity });
        }
    }
    Err(Error::Scene(format!(
        "could not place a droplet clear of obstacles in {MAX_PLACEMENT_TRIES} tries"
    )))
}

/// Capsule along axis 0 centered in the domain.
fn in_string<const D: usize>(p: [f64; D], ext: [f64; D], length: f64, thickness: f64) -> bool {
    let r = 0.5 * thickness;
    let half = (0.5 * length - r).max(0.0);
    let cx = 0.5 * ext[0];
    let x = (p[0] - cx).clamp(-half, half) + cx;
    let mut s = (p[0] - x) * (p[0] - x);
    for a in 1..D {
        let d = p[a] - 0.5 * ext[a];
        s += d * d;
    }
    s <= r * r
}

/// Deterministic initial condition for `(cfg, seed)`.
pub fn randomize_scene<const D: usize>(cfg: &SceneConfig<D>, seed: u64) -> Result<Scene<D>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = cfg.extent();
    let top = ext[D - 1];

    let mut droplets = Vec::new();
    let mut string_length = None;
    let mut dam = None;
    if matches!(cfg.kind, SceneKind::DropletRain | SceneKind::BreakingDam) {
        let n = rng.random_range(cfg.droplet_count.0..=cfg.droplet_count.1);
        for _ in 0..n {
            droplets.push(place_droplet(cfg, &mut rng)?);
        }
    }
    if cfg.kind == SceneKind::BreakingDam {
        dam = Some((uniform(&mut rng, cfg.dam_width) * ext[0], uniform(&mut rng, cfg.dam_height) * top));
    }
    let mut phase = 0.0;
    if cfg.kind == SceneKind::LiquidString {
        string_length = Some(uniform(&mut rng, cfg.string_length));
        phase = rng.random_range(0.0..std::f64::consts::TAU);
    }
    let pool = if cfg.kind == SceneKind::LiquidString {
        0.0
    } else {
        cfg.pool_depth * top
    };

    let mut grid = MacGrid::new(cfg.res, cfg.h);
    for i in 0..grid.num_cells() {
        let c = grid.cell_center(grid.cells().coords(i));
        grid.solid[i] = cfg.obstacles.iter().any(|o| o.contains(c));
    }

    let inside = |p: [f64; D]| -> bool {
        if cfg.obstacles.iter().any(|o| o.contains(p)) {
            return false;
        }
        if p[D - 1] < pool {
            return true;
        }
        if let Some((w, hgt)) = dam {
            if p[0] < w && p[D - 1] < hgt {
                return true;
            }
        }
        if let Some(len) = string_length {
            if in_string(p, ext, len, cfg.string_thickness) {
                return true;
            }
        }
        droplets.iter().any(|d| vecmath::dist(p, d.center) <= d.radius)
    };
    let positions = seed_particles(cfg.res, cfg.h, cfg.params.particles_per_cell, cfg.jitter, &mut rng, inside);

    let mut particles = ParticleSet::new();
    for p in positions {
        let mut vel = droplets
            .iter()
            .find(|d| p[D - 1] >= pool && vecmath::dist(p, d.center) <= d.radius)
            .map_or([0.0; D], |d| d.velocity);
        if string_length.is_some() {
            let (amp, wavelength) = cfg.string_wave;
            let x = p[0] - 0.5 * ext[0];
            vel[0] = cfg.string_stretch * x + amp * (std::f64::consts::TAU * x / wavelength + phase).sin();
        }
        particles.push(p, vel, Role::Bulk);
    }
    let mut params = cfg.params.clone();
    if cfg.kind == SceneKind::LiquidString {
        params.gravity = [0.0; D];
    }
    let state = SolverState::new(grid, particles, params)?;
    Ok(Scene {
        state,
        droplets,
        string_length,
    })
}

/// Length of a feature vector: `3^D` velocity samples, `3^D` level-set
/// samples and optionally the grid spacing.
pub fn feature_len(dim: usize, scale_feature: bool) -> usize {
    3usize.pow(dim as u32) * (dim + 1) + usize::from(scale_feature)
}

/// Stencil offsets in `{-1, 0, 1}^D`, axis 0 varying fastest.
fn stencil<const D: usize>() -> impl Iterator<Item = [f64; D]> {
    (0..3usize.pow(D as u32)).map(|mut k| {
        std::array::from_fn(|_| {
            let o = (k % 3) as f64 - 1.0;
            k /= 3;
            o
        })
    })
}

/// Append the feature of `pos` to `out`: velocities of the `3^D` stencil
/// points (D components each), then their level-set values, then the
/// spacing when `scale_feature` is set. Stencil spacing is `coarse.h`.
pub fn extract_feature_into<const D: usize>(coarse: &MacGrid<D>, pos: [f64; D], scale_feature: bool, out: &mut Vec<f64>) {
    let h = coarse.h;
    let start = out.len();
    let n = 3usize.pow(D as u32);
    out.resize(start + n * (D + 1), 0.0);
    for (k, o) in stencil::<D>().enumerate() {
        let q: [f64; D] = std::array::from_fn(|a| pos[a] + o[a] * h);
        let v = coarse.velocity_from(&coarse.u, q);
        out[start + k * D..start + (k + 1) * D].copy_from_slice(&v);
        out[start + n * D + k] = coarse.sample_cells(&coarse.phi, q);
    }
    if scale_feature {
        out.push(h);
    }
}

pub fn extract_feature<const D: usize>(coarse: &MacGrid<D>, pos: [f64; D], scale_feature: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(feature_len(D, scale_feature));
    extract_feature_into(coarse, pos, scale_feature, &mut out);
    out
}

/// Velocity modification target `(p1 - p0)/dt - v`.
pub fn compute_dv<const D: usize>(p0: [f64; D], p1: [f64; D], v_coarse: [f64; D], dt: f64) -> [f64; D] {
    std::array::from_fn(|a| (p1[a] - p0[a]) / dt - v_coarse[a])
}

/// Connected components of the cells occupied by liquid particles on the
/// coarse grid. Returns the labeling and the component of every particle.
pub fn occupancy_components<const D: usize>(
    particles: &[Particle<D>],
    coarse_res: [usize; D],
    coarse_h: f64,
) -> (crate::components::Labeling, Vec<u32>) {
    let cells = Lattice::new(coarse_res);
    let cell_of = |p: [f64; D]| {
        let c: [usize; D] =
            std::array::from_fn(|a| ((p[a] / coarse_h).floor().max(0.0) as usize).min(coarse_res[a] - 1));
        cells.index(c)
    };
    let mut mask = vec![false; cells.len()];
    let idx: Vec<usize> = particles.iter().map(|p| cell_of(p.pos)).collect();
    for (p, &i) in particles.iter().zip(&idx) {
        if p.role != Role::Secondary {
            mask[i] = true;
        }
    }
    let lab = label_components(&mask, coarse_res);
    let comp = particles
        .iter()
        .zip(&idx)
        .map(|(p, &i)| if p.role == Role::Secondary { u32::MAX } else { lab.ids[i].unwrap_or(u32::MAX) })
        .collect();
    (lab, comp)
}

/// Splash labels for the particles of `before` (time t) given their states in
/// `after` (time t + dt), both on the fine grid `res`/`h`.
///
/// Components are built from coarse-cell occupancy. A particle is labeled 1
/// when at t + dt it sits in a component smaller than `droplet_max_cells` none
/// of whose particles belonged to such a small component at t.
pub fn label_frame_pair<const D: usize>(
    before: &[Particle<D>],
    after: &[Particle<D>],
    res: [usize; D],
    h: f64,
    coarse_factor: usize,
    droplet_max_cells: usize,
) -> Result<Vec<(u64, u8)>> {
    if coarse_factor == 0 || res.iter().any(|&r| r % coarse_factor != 0) {
        return Err(Error::NotDivisible {
            res: res.to_vec(),
            factor: coarse_factor,
        });
    }
    if before.len() != after.len() {
        let ids0: HashSet<u64> = before.iter().map(|p| p.id).collect();
        let ids1: HashSet<u64> = after.iter().map(|p| p.id).collect();
        let odd = ids1.difference(&ids0).chain(ids0.difference(&ids1)).min().copied();
        return Err(Error::IdMismatch(odd.unwrap_or(0)));
    }
    let cres: [usize; D] = std::array::from_fn(|a| res[a] / coarse_factor);
    let ch = h * coarse_factor as f64;
    let (lab0, comp0) = occupancy_components(before, cres, ch);
    let (lab1, comp1) = occupancy_components(after, cres, ch);
    let small0 = |c: u32| c != u32::MAX && lab0.sizes[c as usize] < droplet_max_cells;
    let small1 = |c: u32| c != u32::MAX && lab1.sizes[c as usize] < droplet_max_cells;

    let slot: HashMap<u64, usize> = before.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
    // components at t + dt that contain a particle already in a small component at t
    let mut preexisting = vec![false; lab1.count()];
    let mut seen = vec![false; before.len()];
    for (j, q) in after.iter().enumerate() {
        let &i = slot.get(&q.id).ok_or(Error::IdMismatch(q.id))?;
        if seen[i] {
            return Err(Error::IdMismatch(q.id));
        }
        seen[i] = true;
        if small0(comp0[i]) && comp1[j] != u32::MAX {
            preexisting[comp1[j] as usize] = true;
        }
    }
    let mut labels: Vec<(u64, u8)> = before.iter().map(|p| (p.id, 0)).collect();
    for (j, q) in after.iter().enumerate() {
        let c = comp1[j];
        if small1(c) && !preexisting[c as usize] {
            labels[slot[&q.id]].1 = 1;
        }
    }
    Ok(labels)
}

/// Flat sample storage. Sample `i` owns `features[i*feature_len..]`,
/// `labels[i]`, `dv[i*dim..]` and `h_meta[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub feature_len: usize,
    pub scale_feature: bool,
    pub provenance: Vec<String>,
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
    pub dv: Vec<f32>,
    pub h_meta: Vec<f32>,
}

/// Borrowed view of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRef<'a> {
    pub x: &'a [f32],
    pub label: u8,
    pub dv: &'a [f32],
    pub h_meta: f32,
}

impl Dataset {
    pub fn new(dim: usize, scale_feature: bool) -> Self {
        Self {
            dim,
            feature_len: feature_len(dim, scale_feature),
            scale_feature,
            provenance: Vec::new(),
            features: Vec::new(),
            labels: Vec::new(),
            dv: Vec::new(),
            h_meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn n_negative(&self) -> usize {
        self.len() - self.n_positive()
    }

    pub fn sample(&self, i: usize) -> SampleRef<'_> {
        SampleRef {
            x: &self.features[i * self.feature_len..(i + 1) * self.feature_len],
            label: self.labels[i],
            dv: &self.dv[i * self.dim..(i + 1) * self.dim],
            h_meta: self.h_meta[i],
        }
    }

    /// Append a sample, checking its shape. Negative samples store `dv = 0`.
    pub fn push(&mut self, x: &[f32], label: u8, dv: &[f32], h_meta: f32) -> Result<()> {
        if x.len() != self.feature_len {
            return Err(Error::FeatureLength {
                expected: self.feature_len,
                found: x.len(),
            });
        }
        if dv.len() != self.dim || label > 1 {
            return Err(Error::Malformed(format!("sample with label {label} and {} dv components", dv.len())));
        }
        if dv.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("non-finite sample value".into()));
        }
        self.features.extend_from_slice(x);
        self.labels.push(label);
        if label == 1 {
            self.dv.extend_from_slice(dv);
        } else {
            self.dv.extend(std::iter::repeat_n(0.0, self.dim));
        }
        self.h_meta.push(h_meta);
        Ok(())
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset {
            provenance: self.provenance.clone(),
            ..Dataset::new(self.dim, self.scale_feature)
        };
        out.feature_len = self.feature_len;
        for &i in indices {
            let s = self.sample(i);
            out.features.extend_from_slice(s.x);
            out.labels.push(s.label);
            out.dv.extend_from_slice(s.dv);
            out.h_meta.push(s.h_meta);
        }
        out
    }

    /// Undersample the majority class uniformly at random so that both
    /// classes have the size of the minority. Sample order is preserved.
    pub fn balance(&self, seed: u64) -> Dataset {
        let pos: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == 1).collect();
        let neg: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == 0).collect();
        let n = pos.len().min(neg.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |v: &[usize]| -> Vec<usize> {
            if v.len() == n {
                v.to_vec()
            } else {
                sample(&mut rng, v.len(), n).into_iter().map(|k| v[k]).collect()
            }
        };
        let mut keep = pick(&pos);
        keep.extend(pick(&neg));
        keep.sort_unstable();
        self.subset(&keep)
    }

    /// Distinct `h_meta` values in first-seen order.
    pub fn scales(&self) -> Vec<f32> {
        let mut out: Vec<f32> = Vec::new();
        for &h in &self.h_meta {
            if !out.contains(&h) {
                out.push(h);
            }
        }
        out
    }
}

/// Concatenate datasets in order, union their provenance and re-balance.
pub fn merge_datasets(sets: &[Dataset], seed: u64) -> Result<Dataset> {
    let first = sets.first().ok_or_else(|| Error::Incompatible("nothing to merge".into()))?;
    let mut out = Dataset::new(first.dim, first.scale_feature);
    out.feature_len = first.feature_len;
    for s in sets {
        if s.dim != first.dim || s.scale_feature != first.scale_feature || s.feature_len != first.feature_len {
            return Err(Error::Incompatible(format!(
                "D={} scale={} len={} vs D={} scale={} len={}",
                s.dim, s.scale_feature, s.feature_len, first.dim, first.scale_feature, first.feature_len
            )));
        }
        for p in &s.provenance {
            if !out.provenance.contains(p) {
                out.provenance.push(p.clone());
            }
        }
        out.features.extend_from_slice(&s.features);
        out.labels.extend_from_slice(&s.labels);
        out.dv.extend_from_slice(&s.dv);
        out.h_meta.extend_from_slice(&s.h_meta);
    }
    if !out.scale_feature && out.scales().len() > 1 {
        return Err(Error::Incompatible(
            "samples from several grid spacings require the scale feature".into(),
        ));
    }
    Ok(out.balance(seed))
}

/// Outcome of [`generate_dataset`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationReport {
    pub scenes_ok: usize,
    pub failures: Vec<(u64, String)>,
    pub raw_positive: usize,
    pub raw_negative: usize,
}

/// Raw (unbalanced) samples of one fine simulation run.
pub fn scene_samples<const D: usize>(cfg: &SceneConfig<D>, seed: u64) -> Result<Dataset> {
    let scene = randomize_scene(cfg, seed)?;
    let mut state = scene.state;
    let mut data = Dataset::new(D, cfg.scale_feature);
    data.provenance.push(format!("{:?} seed {seed} h {}", cfg.kind, cfg.coarse_h()));
    let frames = cfg.frames();
    let dt = cfg.params.frame_dt;
    let ch = cfg.coarse_h();
    let mut x = Vec::new();
    let mut xf = Vec::new();
    // frame 0 has no transferred velocity yet, so it only warms up
    state.advance_frame(&mut NoHook)?;
    for _ in 1..frames {
        let coarse = state.grid.downsample(cfg.coarse_factor)?;
        let before = state.particles.particles.clone();
        let surface = surface_particle_indices(&before, &coarse);
        state.advance_frame(&mut NoHook)?;
        let after = &state.particles.particles;
        let labels = label_frame_pair(&before, after, cfg.res, cfg.h, cfg.coarse_factor, cfg.droplet_max_cells)?;
        for &i in &surface {
            let p0 = before[i].pos;
            x.clear();
            extract_feature_into(&coarse, p0, cfg.scale_feature, &mut x);
            xf.clear();
            xf.extend(x.iter().map(|&v| v as f32));
            let label = labels[i].1;
            let dv: [f32; D] = if label == 1 {
                let v = coarse.velocity_from(&coarse.u, p0);
                compute_dv(p0, after[i].pos, v, dt).map(|c| c as f32)
            } else {
                [0.0; D]
            };
            data.push(&xf, label, &dv, ch as f32)?;
        }
    }
    Ok(data)
}

/// Run one fine simulation per seed (in parallel), collect the samples in
/// seed order and balance them. Failed scenes are skipped and reported.
pub fn generate_dataset<const D: usize>(cfg: &SceneConfig<D>, seeds: &[u64]) -> Result<(Dataset, GenerationReport)> {
    cfg.validate()?;
    let runs: Vec<Result<Dataset>> = seeds.par_iter().map(|&s| scene_samples(cfg, s)).collect();
    let mut report = GenerationReport::default();
    let mut raw = Dataset::new(D, cfg.scale_feature);
    for (seed, run) in seeds.iter().zip(runs) {
        match run {
            Ok(d) => {
                report.scenes_ok += 1;
                raw.provenance.extend(d.provenance);
                raw.features.extend_from_slice(&d.features);
                raw.labels.extend_from_slice(&d.labels);
                raw.dv.extend_from_slice(&d.dv);
                raw.h_meta.extend_from_slice(&d.h_meta);
            }
            Err(e) => {
                log::warn!("scene {seed} failed: {e}");
                report.failures.push((*seed, e.to_string()));
            }
        }
    }
    report.raw_positive = raw.n_positive();
    report.raw_negative = raw.n_negative();
    if report.raw_positive == 0 {
        return Err(Error::NoPositives);
    }
    Ok((raw.balance(cfg.seed), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rain() -> SceneConfig<2> {
        let mut c = SceneConfig::new(SceneKind::DropletRain, [32, 32], 0.01);
        c.droplet_count = (2, 5);
        c.droplet_radius = (0.02, 0.03);
        c
    }

    #[test]
    fn same_seed_gives_identical_particles() {
        let c = rain();
        let a = randomize_scene(&c, 7).unwrap();
        let b = randomize_scene(&c, 7).unwrap();
        assert_eq!(a.state.particles.particles, b.state.particles.particles);
        let d = randomize_scene(&c, 8).unwrap();
        assert_ne!(a.state.particles.particles, d.state.particles.particles);
    }

    #[test]
    fn degenerate_count_range() {
        let mut c = rain();
        c.droplet_count = (3, 3);
        for s in 0..5 {
            assert_eq!(randomize_scene(&c, s).unwrap().droplets.len(), 3);
        }
    }

    #[test]
    fn droplet_count_histogram_is_uniform() {
        let mut c = SceneConfig::<2>::new(SceneKind::DropletRain, [16, 16], 0.02);
        c.droplet_count = (2, 5);
        c.droplet_radius = (0.02, 0.03);
        c.params.particles_per_cell = 1;
        let k = c.droplet_count.1 - c.droplet_count.0 + 1;
        let mut hist = vec![0usize; k];
        for s in 0..1000u64 {
            let n = randomize_scene(&c, s).unwrap().droplets.len();
            hist[n - c.droplet_count.0] += 1;
        }
        let e = 1000.0 / k as f64;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 99th percentile of chi-square with 3 degrees of freedom
        assert!(chi2 < 11.345, "chi2 {chi2} hist {hist:?}");
    }

    #[test]
    fn unplaceable_droplet_is_an_error() {
        let mut c = rain();
        c.obstacles.push(Obstacle {
            min: [0.0, 0.0],
            max: [0.32, 0.32],
        });
        assert!(matches!(randomize_scene(&c, 1), Err(Error::Scene(_))));
    }

    #[test]
    fn feature_lengths() {
        assert_eq!(feature_len(3, false), 108);
        assert_eq!(feature_len(2, false), 27);
        assert_eq!(feature_len(2, true), 28);
        let g = MacGrid::<3>::new([4, 4, 4], 0.1);
        assert_eq!(extract_feature(&g, [0.2; 3], false).len(), 108);
    }

    #[test]
    fn constant_fields_feature() {
        let mut g = MacGrid::<2>::new([6, 6], 0.1);
        g.phi.iter_mut().for_each(|p| *p = 1.0);
        let x = extract_feature(&g, [0.3, 0.3], false);
        assert_eq!(&x[..18], &[0.0; 18]);
        assert_eq!(&x[18..], &[1.0; 9]);
        let x = extract_feature(&g, [0.0, 0.6], true);
        assert_eq!(x[27], 0.1);
    }

    #[test]
    fn feature_orders_offsets_axis_zero_fastest() {
        let mut g = MacGrid::<2>::new([8, 8], 1.0);
        // phi = x + 10 y is reproduced exactly by multilinear sampling
        for i in 0..g.num_cells() {
            let c = g.cell_center(g.cells().coords(i));
            g.phi[i] = c[0] + 10.0 * c[1];
        }
        let x = extract_feature(&g, [4.0, 4.0], false);
        let expect: Vec<f64> = (0..9).map(|k| (4 + k % 3 - 1) as f64 + 10.0 * (4 + k / 3 - 1) as f64).collect();
        for k in 0..9 {
            assert!((x[18 + k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn dv_formula() {
        assert_eq!(compute_dv([0.0, 0.0], [1.0, 0.0], [1.0, 0.0], 1.0), [0.0, 0.0]);
        assert_eq!(compute_dv([0.0, 0.0], [2.0, 0.0], [1.0, 0.0], 1.0), [1.0, 0.0]);
    }

    fn bulk(id: u64, pos: [f64; 2]) -> Particle<2> {
        Particle::new(id, pos, [0.0; 2], Role::Bulk)
    }

    fn pool(n: u64) -> Vec<Particle<2>> {
        (0..n).map(|k| bulk(k, [0.05 + 0.1 * (k % 16) as f64, 0.05 + 0.1 * (k / 16) as f64])).collect()
    }

    #[test]
    fn pool_particle_is_negative_ejected_is_positive() {
        let mut before = pool(64);
        before.push(bulk(64, [0.55, 0.35]));
        let mut after = before.clone();
        after[64].pos = [0.85, 1.25];
        let l = label_frame_pair(&before, &after, [16, 16], 0.1, 1, 4).unwrap();
        assert!(l[..64].iter().all(|&(_, v)| v == 0));
        assert_eq!(l[64], (64, 1));
    }

    #[test]
    fn preexisting_droplet_is_negative() {
        let mut before = pool(64);
        before.push(bulk(64, [0.55, 1.05]));
        before.push(bulk(65, [0.65, 1.05]));
        let mut after = before.clone();
        after[64].pos[1] += 0.1;
        after[65].pos[1] += 0.1;
        let l = label_frame_pair(&before, &after, [16, 16], 0.1, 1, 4).unwrap();
        assert!(l.iter().all(|&(_, v)| v == 0));
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let before = pool(10);
        let mut after = before.clone();
        after[3].id = 99;
        assert!(matches!(
            label_frame_pair(&before, &after, [16, 16], 0.1, 1, 4),
            Err(Error::IdMismatch(99))
        ));
        after.pop();
        assert!(label_frame_pair(&before, &after, [16, 16], 0.1, 1, 4).is_err());
    }

    #[test]
    fn balancing_equalizes_classes() {
        let mut d = Dataset::new(2, false);
        let x = vec![0.5f32; 27];
        for i in 0..50 {
            let l = u8::from(i % 7 == 0);
            d.push(&x, l, &[l as f32, 0.0], 0.01).unwrap();
        }
        let b = d.balance(3);
        assert_eq!(b.n_positive(), d.n_positive());
        assert_eq!(b.n_negative(), b.n_positive());
        assert_eq!(b, d.balance(3));
    }

    #[test]
    fn merge_rules() {
        let mut a = Dataset::new(2, false);
        let x = vec![0.0f32; 27];
        a.push(&x, 1, &[1.0, 2.0], 0.01).unwrap();
        a.push(&x, 0, &[0.0, 0.0], 0.01).unwrap();
        let empty = Dataset::new(2, false);
        assert_eq!(merge_datasets(&[a.clone(), empty], 0).unwrap(), a);
        assert!(merge_datasets(&[a.clone(), Dataset::new(3, false)], 0).is_err());
        let mut b = Dataset::new(2, false);
        b.push(&x, 1, &[0.0, 0.0], 0.02).unwrap();
        assert!(merge_datasets(&[a, b], 0).is_err());
    }

    #[test]
    fn merged_scales_are_kept() {
        let x = vec![0.0f32; 28];
        let sets: Vec<Dataset> = [0.0025f32, 0.005, 0.01]
            .iter()
            .map(|&h| {
                let mut d = Dataset::new(2, true);
                d.provenance.push(format!("h {h}"));
                d.push(&x, 1, &[0.0, 0.0], h).unwrap();
                d.push(&x, 0, &[0.0, 0.0], h).unwrap();
                d
            })
            .collect();
        let m = merge_datasets(&sets, 0).unwrap();
        assert_eq!(m.scales().len(), 3);
        assert_eq!(m.provenance.len(), 3);
    }

    #[test]
    fn still_pool_has_no_positives() {
        let mut c = SceneConfig::<2>::new(SceneKind::Pool, [16, 16], 0.01);
        c.duration = 0.1;
        c.jitter = 0.0;
        assert!(matches!(generate_dataset(&c, &[1]), Err(Error::NoPositives)));
    }
}
