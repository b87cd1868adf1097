//! FLIP time integration with free-surface pressure projection.

pub mod curvature;
pub mod pressure;
pub mod transfer;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellFlag, MacGrid};
use crate::levelset::{build_level_set, solid_distance};
use crate::particles::{Particle, ParticleSet, Role};

pub use curvature::compute_curvature;
pub use pressure::{project_pressure, ProjectionSettings, ProjectionStats};

/// Lower bound on the speed used by the CFL restriction, m/s.
pub const CFL_SPEED_FLOOR: f64 = 1e-6;

/// Face layers filled by velocity extrapolation after each transfer/projection.
const EXTRAPOLATION_LAYERS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams<const D: usize> {
    /// kg/m^3
    pub density: f64,
    /// m/s^2
    #[serde(with = "crate::io::array")]
    pub gravity: [f64; D],
    /// N/m
    pub surface_tension: f64,
    /// Stored for bookkeeping only; the solver is inviscid.
    pub viscosity: f64,
    pub cfl_number: f64,
    /// Frame (decision window) length, s.
    pub frame_dt: f64,
    pub particles_per_cell: usize,
    /// Particle radius for the liquid level set, in cells.
    pub particle_radius: f64,
    pub pcg_tolerance: f64,
    pub pcg_max_iterations: usize,
    /// Optional hard cap on the substep length, s.
    pub max_dt: Option<f64>,
    pub steps: StepPolicy,
}

/// How a frame is split into substeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    /// CFL-limited substeps, clamped to land on frame boundaries.
    Cfl,
    /// Exactly `n` equal substeps per frame.
    Fixed(usize),
}

impl<const D: usize> Default for SimParams<D> {
    fn default() -> Self {
        let mut gravity = [0.0; D];
        gravity[D - 1] = -9.81;
        Self {
            density: 1000.0,
            gravity,
            surface_tension: 0.0,
            viscosity: 0.0,
            cfl_number: 1.0,
            frame_dt: 1.0 / 30.0,
            particles_per_cell: 1 << D,
            particle_radius: crate::levelset::DEFAULT_RADIUS_CELLS,
            pcg_tolerance: 1e-5,
            pcg_max_iterations: 2000,
            max_dt: None,
            steps: StepPolicy::Cfl,
        }
    }
}

impl<const D: usize> SimParams<D> {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0) {
            return Err(Error::Config(format!("density must be positive, got {}", self.density)));
        }
        if !(self.cfl_number > 0.0 && self.cfl_number <= 1.0) {
            return Err(Error::Config(format!("cfl_number must lie in (0, 1], got {}", self.cfl_number)));
        }
        if !(self.frame_dt > 0.0) {
            return Err(Error::Config(format!("frame_dt must be positive, got {}", self.frame_dt)));
        }
        if self.particles_per_cell == 0 {
            return Err(Error::Config("particles_per_cell must be at least 1".into()));
        }
        if let StepPolicy::Fixed(0) = self.steps {
            return Err(Error::Config("fixed substep count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn projection(&self) -> ProjectionSettings {
        ProjectionSettings {
            density: self.density,
            surface_tension: self.surface_tension,
            tolerance: self.pcg_tolerance,
            max_iterations: self.pcg_max_iterations,
        }
    }
}

/// CFL substep `cfl * h / max(speed, eps)`, clamped so that substeps land
/// exactly on the end of the current frame: a step that would overshoot
/// takes the remaining time, and one that would leave a sliver shorter than
/// itself splits the remainder in two.
pub fn cfl_dt(max_speed: f64, h: f64, cfl_number: f64, remaining: f64) -> f64 {
    let dt = cfl_number * h / max_speed.max(CFL_SPEED_FLOOR);
    if dt >= remaining {
        remaining
    } else if 2.0 * dt > remaining {
        0.5 * remaining
    } else {
        dt
    }
}

/// Everything a [`StepHook`] may look at or change. Called after the
/// grid-to-particle update, before advection.
pub struct HookContext<'a, const D: usize> {
    /// Post-projection (extrapolated) grid of the current substep.
    pub grid: &'a MacGrid<D>,
    pub particles: &'a mut ParticleSet<D>,
    pub params: &'a SimParams<D>,
    /// Length of this substep.
    pub dt: f64,
    /// True when this substep closes the current frame window.
    pub closes_frame: bool,
    pub frame: u64,
    pub time: f64,
}

pub trait StepHook<const D: usize> {
    fn after_transfer(&mut self, ctx: HookContext<'_, D>) -> Result<()>;
}

/// A hook that does nothing (plain FLIP).
pub struct NoHook;

impl<const D: usize> StepHook<D> for NoHook {
    fn after_transfer(&mut self, _ctx: HookContext<'_, D>) -> Result<()> {
        Ok(())
    }
}

/// Summary of one substep.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub dt: f64,
    pub closes_frame: bool,
    pub projection: ProjectionStats,
}

#[derive(Clone, Debug)]
pub struct SolverState<const D: usize> {
    pub grid: MacGrid<D>,
    pub particles: ParticleSet<D>,
    pub params: SimParams<D>,
    pub t: f64,
    pub flip_blend: f64,
    /// Completed frames.
    pub frame: u64,
    /// Time elapsed within the current frame.
    pub frame_elapsed: f64,
    /// Substeps taken within the current frame.
    pub substep: usize,
    solid_phi: Option<Vec<f64>>,
}

impl<const D: usize> SolverState<D> {
    pub fn new(grid: MacGrid<D>, particles: ParticleSet<D>, params: SimParams<D>) -> Result<Self> {
        params.validate()?;
        let solid_phi = if grid.solid.iter().any(|&s| s) {
            Some(solid_distance(&grid.solid, grid.res, grid.h))
        } else {
            None
        };
        let mut state = Self {
            grid,
            particles,
            params,
            t: 0.0,
            flip_blend: 0.97,
            frame: 0,
            frame_elapsed: 0.0,
            substep: 0,
            solid_phi,
        };
        state.update_level_set();
        Ok(state)
    }

    /// Rebuild `phi` and the Fluid/Empty flags from the bulk particles.
    pub fn update_level_set(&mut self) {
        let h = self.grid.h;
        self.grid.phi = build_level_set(
            self.particles.bulk().map(|p| p.pos),
            self.grid.res,
            h,
            self.params.particle_radius * h,
        );
        self.grid.flags_from_phi();
    }

    pub fn max_speed(&self) -> f64 {
        self.particles
            .iter()
            .filter(|p| p.role != Role::Secondary)
            .map(|p| crate::vecmath::norm(p.vel))
            .fold(0.0, f64::max)
    }

    /// Length of the next substep under the configured policy.
    pub fn next_dt(&self) -> f64 {
        let remaining = self.params.frame_dt - self.frame_elapsed;
        match self.params.steps {
            StepPolicy::Fixed(n) => {
                if self.substep + 1 >= n {
                    remaining
                } else {
                    self.params.frame_dt / n as f64
                }
            }
            StepPolicy::Cfl => {
                let mut limit = remaining;
                let p = &self.params;
                if p.surface_tension > 0.0 {
                    let h = self.grid.h;
                    let capillary = (p.density * h * h * h / (2.0 * std::f64::consts::PI * p.surface_tension)).sqrt();
                    limit = limit.min(capillary);
                }
                if let Some(m) = p.max_dt {
                    limit = limit.min(m);
                }
                let dt = cfl_dt(self.max_speed(), self.grid.h, p.cfl_number, remaining);
                if dt <= limit {
                    dt
                } else {
                    // the extra limit is shorter than the CFL step; apply the
                    // same frame-boundary clamp to it
                    cfl_dt(1.0, limit, 1.0, remaining)
                }
            }
        }
    }

    /// Advance by one substep.
    pub fn step(&mut self, hook: &mut dyn StepHook<D>) -> Result<StepReport> {
        let dt = self.next_dt();
        let closes_frame = match self.params.steps {
            StepPolicy::Fixed(n) => self.substep + 1 >= n,
            StepPolicy::Cfl => dt >= self.params.frame_dt - self.frame_elapsed,
        };

        self.update_level_set();

        let mut valid = transfer::particles_to_grid(&mut self.grid, &self.particles.particles);
        transfer::extrapolate_velocity(&mut self.grid, &mut valid, EXTRAPOLATION_LAYERS);
        let u_old = self.grid.u.clone();

        for axis in 0..D {
            let g = self.params.gravity[axis] * dt;
            if g != 0.0 {
                self.grid.u[axis].iter_mut().for_each(|v| *v += g);
            }
        }

        let (stats, mut valid) = project_pressure(&mut self.grid, &self.params.projection(), dt)?;
        transfer::extrapolate_velocity(&mut self.grid, &mut valid, EXTRAPOLATION_LAYERS);

        transfer::grid_to_particles(&self.grid, &u_old, &mut self.particles.particles, self.flip_blend);

        hook.after_transfer(HookContext {
            grid: &self.grid,
            particles: &mut self.particles,
            params: &self.params,
            dt,
            closes_frame,
            frame: self.frame,
            time: self.t,
        })?;

        self.advect_bulk(dt);
        advance_ballistic(&mut self.particles.particles, &self.grid, self.params.gravity, dt, self.params.frame_dt, Role::Splash);
        if let Some(sphi) = &self.solid_phi {
            for p in self.particles.iter_mut().filter(|p| p.role == Role::Splash) {
                push_out_of_solid(p, &self.grid, sphi, true);
            }
        }

        self.substep += 1;
        if closes_frame {
            self.frame += 1;
            self.frame_elapsed = 0.0;
            self.substep = 0;
            self.t = self.frame as f64 * self.params.frame_dt;
        } else {
            self.frame_elapsed += dt;
            self.t += dt;
        }
        Ok(StepReport {
            dt,
            closes_frame,
            projection: stats,
        })
    }

    /// Step until the current frame is complete; returns the substep reports.
    pub fn advance_frame(&mut self, hook: &mut dyn StepHook<D>) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        loop {
            let r = self.step(hook)?;
            let done = r.closes_frame;
            reports.push(r);
            if done {
                return Ok(reports);
            }
        }
    }

    fn advect_bulk(&mut self, dt: f64) {
        let grid = &self.grid;
        let sphi = self.solid_phi.as_deref();
        self.particles.particles.par_iter_mut().filter(|p| p.is_bulk()).for_each(|p| {
            let v0 = grid.velocity_at(p.pos);
            let mid: [f64; D] = std::array::from_fn(|a| p.pos[a] + 0.5 * dt * v0[a]);
            let v1 = grid.velocity_at(mid);
            for a in 0..D {
                p.pos[a] += dt * v1[a];
            }
            if let Some(sphi) = sphi {
                push_out_of_solid(p, grid, sphi, false);
            }
            clamp_to_domain(p, grid, false);
        });
    }
}

/// Keep `p` strictly inside the domain; with `stop` the velocity component
/// into the violated wall is zeroed.
fn clamp_to_domain<const D: usize>(p: &mut Particle<D>, grid: &MacGrid<D>, stop: bool) {
    let ext = grid.extent();
    let margin = 1e-3 * grid.h;
    for a in 0..D {
        if p.pos[a] < margin {
            p.pos[a] = margin;
            if stop && p.vel[a] < 0.0 {
                p.vel[a] = 0.0;
            }
        } else if p.pos[a] > ext[a] - margin {
            p.pos[a] = ext[a] - margin;
            if stop && p.vel[a] > 0.0 {
                p.vel[a] = 0.0;
            }
        }
    }
}

/// Move a particle that ended inside an obstacle back to its surface along
/// the obstacle distance gradient. With `stop`, the velocity component along
/// the surface normal is removed.
fn push_out_of_solid<const D: usize>(p: &mut Particle<D>, grid: &MacGrid<D>, sphi: &[f64], stop: bool) {
    let d = grid.sample_cells(sphi, p.pos);
    if d >= 0.0 {
        return;
    }
    let e = 0.5 * grid.h;
    let mut n = [0.0; D];
    for a in 0..D {
        let mut hi = p.pos;
        let mut lo = p.pos;
        hi[a] += e;
        lo[a] -= e;
        n[a] = (grid.sample_cells(sphi, hi) - grid.sample_cells(sphi, lo)) / (2.0 * e);
    }
    let len = crate::vecmath::norm(n);
    if len < 1e-12 {
        return;
    }
    let n = crate::vecmath::scale(n, 1.0 / len);
    p.pos = crate::vecmath::axpy(p.pos, -d + 1e-3 * grid.h, n);
    if stop {
        let vn = crate::vecmath::dot(p.vel, n);
        if vn < 0.0 {
            p.vel = crate::vecmath::axpy(p.vel, -vn, n);
        }
    }
}

/// Advance ballistic particles of `role` under gravity alone:
/// `v' = v + g dt`, `p' = p + (v + v') dt / 2` (exact for constant
/// acceleration). Splash particles rejoin the bulk once they are inside the
/// liquid (`phi < 0`) after having left it or after a full frame of flight.
pub fn advance_ballistic<const D: usize>(
    particles: &mut [Particle<D>],
    grid: &MacGrid<D>,
    gravity: [f64; D],
    dt: f64,
    frame_dt: f64,
    role: Role,
) {
    for p in particles.iter_mut().filter(|p| p.role == role) {
        let v0 = p.vel;
        for a in 0..D {
            p.vel[a] += gravity[a] * dt;
            p.pos[a] += 0.5 * (v0[a] + p.vel[a]) * dt;
        }
        p.airtime += dt;
        clamp_to_domain(p, grid, true);
        if role == Role::Splash {
            let inside = grid.contains(p.pos) && grid.phi_at(p.pos) < 0.0;
            if !inside {
                p.departed = true;
            } else if p.departed || p.airtime >= frame_dt {
                p.role = Role::Bulk;
                p.airtime = 0.0;
                p.departed = false;
            }
        }
    }
}

/// Fraction of cells flagged Fluid.
pub fn fluid_fraction<const D: usize>(grid: &MacGrid<D>) -> f64 {
    let n = grid.flags.iter().filter(|&&f| f == CellFlag::Fluid).count();
    n as f64 / grid.num_cells() as f64
}
