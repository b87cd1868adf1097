//! Learned splash generation coupled to a coarse FLIP simulation.
//!
//! Each substep, bulk particles in the one-cell band around the surface are
//! classified and their signed splash probability is accumulated into a
//! random-walk expectation. At the end of every frame the particles with a
//! positive expectation become candidates: at most one per cell survives,
//! their velocities are perturbed by a sampled modification, and a look-ahead
//! over one frame reverts candidates that would not leave the liquid. The
//! survivors become ballistic splash particles.
//!
//! In secondary mode the simulation is left untouched; per-frame threshold
//! decisions instead spawn visual-only secondary particles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::surface_particle_indices;
use crate::datagen::{extract_feature_into, feature_len};
use crate::error::{Error, Result};
use crate::grid::MacGrid;
use crate::levelset::build_level_set;
use crate::neural::ModelBundle;
use crate::particles::{Particle, Role};
use crate::solver::{advance_ballistic, HookContext, StepHook};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Coupled,
    Secondary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    /// Splash probability threshold of secondary mode.
    pub threshold: f64,
    /// Use the predicted mean instead of sampling the velocity change.
    pub deterministic_variance: bool,
    pub per_cell_cap: bool,
    pub lookahead: bool,
    pub secondary_samples: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Coupled,
            threshold: 0.5,
            deterministic_variance: false,
            per_cell_cap: true,
            lookahead: true,
            secondary_samples: 1,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if self.secondary_samples == 0 {
            return Err(Error::Config("secondary_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything that maps features to splash probabilities and velocity changes.
pub trait SplashModel: Sync {
    fn dim(&self) -> usize;
    fn scale_feature(&self) -> bool;
    /// `(p_splash, p_nonsplash)` per row of `x`.
    fn classify(&self, x: &[f64]) -> Result<Vec<[f64; 2]>>;
    /// Row-major `(mu, sigma^2)`, `dim` values per row of `x`.
    fn modify(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl SplashModel for ModelBundle {
    fn dim(&self) -> usize {
        self.dim
    }
    fn scale_feature(&self) -> bool {
        self.scale_feature
    }
    fn classify(&self, x: &[f64]) -> Result<Vec<[f64; 2]>> {
        ModelBundle::classify(self, x)
    }
    fn modify(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        ModelBundle::modify(self, x)
    }
}

/// Model with fixed outputs, independent of the features.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantModel {
    pub dim: usize,
    pub y_s: [f64; 2],
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl SplashModel for ConstantModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn scale_feature(&self) -> bool {
        false
    }
    fn classify(&self, x: &[f64]) -> Result<Vec<[f64; 2]>> {
        Ok(vec![self.y_s; x.len() / feature_len(self.dim, false)])
    }
    fn modify(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = x.len() / feature_len(self.dim, false);
        Ok((self.mu.repeat(n), self.var.repeat(n)))
    }
}

/// Add one substep's signed splash probability to the particle's window:
/// `E += sqrt(dt_k / dt) (p_s - p_n)`. Returns the expectation when the window
/// is complete (and resets it), `None` otherwise.
pub fn accumulate_expectation<const D: usize>(p: &mut Particle<D>, y_s: [f64; 2], dt_k: f64, dt: f64) -> Option<f64> {
    p.expectation += (dt_k / dt).sqrt() * (y_s[0] - y_s[1]);
    p.window_elapsed += dt_k;
    if p.window_elapsed >= dt * (1.0 - 1e-9) {
        Some(close_window(p))
    } else {
        None
    }
}

fn close_window<const D: usize>(p: &mut Particle<D>) -> f64 {
    let e = p.expectation;
    p.expectation = 0.0;
    p.window_elapsed = 0.0;
    e
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    /// Index into the particle array.
    pub index: usize,
    pub id: u64,
    pub cell: usize,
    pub expectation: f64,
}

/// Keep one candidate per cell: the largest expectation, ties to the lower
/// id. The result is ordered by particle index.
pub fn apply_per_cell_cap(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut best: std::collections::BTreeMap<usize, Candidate> = std::collections::BTreeMap::new();
    for c in candidates {
        match best.get(&c.cell) {
            Some(b) if b.expectation > c.expectation || (b.expectation == c.expectation && b.id < c.id) => {}
            _ => {
                best.insert(c.cell, *c);
            }
        }
    }
    let mut out: Vec<Candidate> = best.into_values().collect();
    out.sort_by_key(|c| c.index);
    out
}

/// Add a velocity change drawn from `N(mu, var)` per component, or exactly
/// `mu` when `deterministic`.
pub fn modify_velocity<const D: usize, R: Rng>(
    v: [f64; D],
    mu: &[f64],
    var: &[f64],
    deterministic: bool,
    rng: &mut R,
) -> [f64; D] {
    std::array::from_fn(|a| {
        let dv = if deterministic || var[a] <= 0.0 {
            mu[a]
        } else {
            Normal::new(mu[a], var[a].sqrt()).map_or(mu[a], |n| n.sample(rng))
        };
        v[a] + dv
    })
}

/// Decide which candidates would form a droplet within `dt`.
///
/// The bulk (all bulk particles except the candidates) is advanced with the
/// grid velocity and turned into a predicted level set; each candidate moves
/// linearly with its modified velocity. Candidates ending inside the
/// predicted liquid, inside a solid or outside the domain are rejected.
pub fn lookahead_filter<const D: usize>(
    candidates: &[(usize, [f64; D])],
    particles: &[Particle<D>],
    grid: &MacGrid<D>,
    dt: f64,
    radius: f64,
) -> Vec<bool> {
    let skip: std::collections::HashSet<usize> = candidates.iter().map(|c| c.0).collect();
    let predicted = particles.iter().enumerate().filter(|(i, p)| p.is_bulk() && !skip.contains(i)).map(|(_, p)| {
        let v = grid.velocity_at(p.pos);
        std::array::from_fn(|a| p.pos[a] + dt * v[a])
    });
    let phi = build_level_set(predicted, grid.res, grid.h, radius);
    candidates
        .iter()
        .map(|&(i, v)| {
            let end: [f64; D] = std::array::from_fn(|a| particles[i].pos[a] + dt * v[a]);
            grid.contains(end) && !grid.is_solid_at(end) && grid.sample_cells(&phi, end) >= 0.0
        })
        .collect()
}

/// Per-frame bookkeeping of the coupling hook.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FrameStats {
    pub frame: u64,
    /// Particle evaluations summed over the substeps of the frame.
    pub evaluations: usize,
    /// Positive decisions before the cap and the look-ahead.
    pub decisions: usize,
    pub after_cap: usize,
    pub confirmed: usize,
    pub reverted: usize,
    pub spawned: usize,
}

/// Step hook running the learned splash model on a coarse simulation.
pub struct MlFlipHook<'m, const D: usize> {
    model: &'m dyn SplashModel,
    pub config: InferenceConfig,
    rng: ChaCha8Rng,
    pub stats: Vec<FrameStats>,
    current: FrameStats,
}

impl<'m, const D: usize> MlFlipHook<'m, D> {
    pub fn new(model: &'m dyn SplashModel, config: InferenceConfig) -> Result<Self> {
        config.validate()?;
        if model.dim() != D {
            return Err(Error::Incompatible(format!("model is {}D, simulation is {D}D", model.dim())));
        }
        Ok(Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            stats: Vec::new(),
            current: FrameStats::default(),
        })
    }

    fn features(&self, grid: &MacGrid<D>, particles: &[Particle<D>], idx: &[usize]) -> Vec<f64> {
        let scale = self.model.scale_feature();
        let rows: Vec<Vec<f64>> = idx
            .par_iter()
            .map(|&i| {
                let mut x = Vec::with_capacity(feature_len(D, scale));
                extract_feature_into(grid, particles[i].pos, scale, &mut x);
                x
            })
            .collect();
        rows.concat()
    }

    fn coupled(&mut self, ctx: &mut HookContext<'_, D>) -> Result<()> {
        let grid = ctx.grid;
        let frame_dt = ctx.params.frame_dt;
        let band = surface_particle_indices(&ctx.particles.particles, grid);
        if !band.is_empty() {
            let x = self.features(grid, &ctx.particles.particles, &band);
            let y = self.model.classify(&x)?;
            for (&i, y) in band.iter().zip(&y) {
                let p = &mut ctx.particles.particles[i];
                p.expectation += (ctx.dt / frame_dt).sqrt() * (y[0] - y[1]);
                p.window_elapsed += ctx.dt;
            }
            self.current.evaluations += band.len();
        }
        if !ctx.closes_frame {
            return Ok(());
        }
        let mut candidates = Vec::new();
        for (i, p) in ctx.particles.particles.iter_mut().enumerate() {
            if p.window_elapsed > 0.0 {
                let e = close_window(p);
                if p.is_bulk() && e > 0.0 {
                    candidates.push(Candidate {
                        index: i,
                        id: p.id,
                        cell: grid.cell_index_of(p.pos),
                        expectation: e,
                    });
                }
            }
        }
        self.current.decisions = candidates.len();
        if self.config.per_cell_cap {
            candidates = apply_per_cell_cap(&candidates);
        }
        self.current.after_cap = candidates.len();
        if candidates.is_empty() {
            return Ok(());
        }
        let idx: Vec<usize> = candidates.iter().map(|c| c.index).collect();
        let x = self.features(grid, &ctx.particles.particles, &idx);
        let (mu, var) = self.model.modify(&x)?;
        let moved: Vec<(usize, [f64; D])> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let v = modify_velocity(
                    ctx.particles.particles[i].vel,
                    &mu[k * D..(k + 1) * D],
                    &var[k * D..(k + 1) * D],
                    self.config.deterministic_variance,
                    &mut self.rng,
                );
                (i, v)
            })
            .collect();
        let keep = if self.config.lookahead {
            let radius = ctx.params.particle_radius * grid.h;
            lookahead_filter(&moved, &ctx.particles.particles, grid, frame_dt, radius)
        } else {
            vec![true; moved.len()]
        };
        for (&(i, v), ok) in moved.iter().zip(keep) {
            if ok {
                let p = &mut ctx.particles.particles[i];
                p.vel = v;
                p.launch(Role::Splash);
                self.current.confirmed += 1;
            } else {
                self.current.reverted += 1;
            }
        }
        Ok(())
    }

    fn secondary(&mut self, ctx: &mut HookContext<'_, D>) -> Result<()> {
        let grid = ctx.grid;
        let frame_dt = ctx.params.frame_dt;
        advance_ballistic(&mut ctx.particles.particles, grid, ctx.params.gravity, ctx.dt, frame_dt, Role::Secondary);
        ctx.particles.retain(|p| {
            if p.role != Role::Secondary {
                return true;
            }
            if grid.is_solid_at(p.pos) {
                return false;
            }
            let inside = grid.phi_at(p.pos) < 0.0;
            !(inside && (p.departed || p.airtime >= frame_dt))
        });
        for p in ctx.particles.iter_mut().filter(|p| p.role == Role::Secondary) {
            if grid.phi_at(p.pos) >= 0.0 {
                p.departed = true;
            }
        }
        if !ctx.closes_frame {
            return Ok(());
        }
        let band = surface_particle_indices(&ctx.particles.particles, grid);
        if band.is_empty() {
            return Ok(());
        }
        let x = self.features(grid, &ctx.particles.particles, &band);
        let y = self.model.classify(&x)?;
        self.current.evaluations += band.len();
        let mut candidates: Vec<Candidate> = Vec::new();
        for (k, &i) in band.iter().enumerate() {
            if y[k][0] > self.config.threshold {
                let p = &ctx.particles.particles[i];
                candidates.push(Candidate {
                    index: i,
                    id: p.id,
                    cell: grid.cell_index_of(p.pos),
                    expectation: y[k][0],
                });
            }
        }
        self.current.decisions = candidates.len();
        if self.config.per_cell_cap {
            candidates = apply_per_cell_cap(&candidates);
        }
        self.current.after_cap = candidates.len();
        if candidates.is_empty() {
            return Ok(());
        }
        let idx: Vec<usize> = candidates.iter().map(|c| c.index).collect();
        let x = self.features(grid, &ctx.particles.particles, &idx);
        let n = self.config.secondary_samples;
        let mut spawn = Vec::with_capacity(idx.len() * n);
        for (k, &i) in idx.iter().enumerate() {
            let xk = x[k * x.len() / idx.len()..(k + 1) * x.len() / idx.len()].repeat(n);
            let (mu, var) = self.model.modify(&xk)?;
            let p = &ctx.particles.particles[i];
            for s in 0..n {
                let v = modify_velocity(
                    p.vel,
                    &mu[s * D..(s + 1) * D],
                    &var[s * D..(s + 1) * D],
                    self.config.deterministic_variance,
                    &mut self.rng,
                );
                spawn.push((p.pos, v));
            }
        }
        for (pos, vel) in spawn {
            ctx.particles.push(pos, vel, Role::Secondary);
            self.current.spawned += 1;
        }
        Ok(())
    }
}

impl<const D: usize> StepHook<D> for MlFlipHook<'_, D> {
    fn after_transfer(&mut self, mut ctx: HookContext<'_, D>) -> Result<()> {
        match self.config.mode {
            InferenceMode::Coupled => self.coupled(&mut ctx)?,
            InferenceMode::Secondary => self.secondary(&mut ctx)?,
        }
        if ctx.closes_frame {
            self.current.frame = ctx.frame;
            self.stats.push(self.current);
            self.current = FrameStats::default();
        }
        Ok(())
    }
}

/// Secondary-mode decision counts (`p_splash > tau`, before cap and
/// look-ahead) summed over fixed frames, one count per threshold.
pub fn splash_decision_count<const D: usize>(
    frames: &[(MacGrid<D>, Vec<Particle<D>>)],
    model: &dyn SplashModel,
    thresholds: &[f64],
) -> Result<Vec<usize>> {
    let mut probs = Vec::new();
    for (grid, particles) in frames {
        let band = surface_particle_indices(particles, grid);
        if band.is_empty() {
            continue;
        }
        let scale = model.scale_feature();
        let mut x = Vec::new();
        for &i in &band {
            extract_feature_into(grid, particles[i].pos, scale, &mut x);
        }
        probs.extend(model.classify(&x)?.into_iter().map(|y| y[0]));
    }
    Ok(thresholds
        .iter()
        .map(|&t| probs.iter().filter(|&&p| p > t).count())
        .collect())
}
