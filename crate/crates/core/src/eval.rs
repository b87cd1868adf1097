//! Experiments: droplet counts of liquid strings, decision consistency under
//! time-step and seeding changes, threshold sweeps and training-set size
//! convergence.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::components::{label_components, surface_particle_indices};
use crate::datagen::{extract_feature_into, randomize_scene, Dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::grid::MacGrid;
use crate::levelset::build_level_set;
use crate::mlflip::{splash_decision_count, InferenceConfig, MlFlipHook, SplashModel};
use crate::neural::{train, ModelBundle, TrainConfig};
use crate::particles::{Particle, Role};
use crate::solver::{NoHook, SolverState, StepPolicy};

/// Number of droplets: connected regions of the level set built from bulk
/// and splash particles (radius `radius_cells * h`) that are not the largest
/// region and are either smaller than `droplet_max_cells` cells or made of
/// splash particles only.
pub fn count_droplets<const D: usize>(
    particles: &[Particle<D>],
    res: [usize; D],
    h: f64,
    radius_cells: f64,
    droplet_max_cells: usize,
) -> usize {
    let liquid: Vec<&Particle<D>> = particles.iter().filter(|p| p.role != Role::Secondary).collect();
    if liquid.is_empty() {
        return 0;
    }
    let phi = build_level_set(liquid.iter().map(|p| p.pos), res, h, radius_cells * h);
    let mask: Vec<bool> = phi.iter().map(|&v| v < 0.0).collect();
    let lab = label_components(&mask, res);
    let grid = MacGrid::<D>::new(res, h);
    let mut only_splash = vec![true; lab.count()];
    for p in &liquid {
        if let Some(c) = lab.ids[grid.cell_index_of(p.pos)] {
            if p.role != Role::Splash {
                only_splash[c as usize] = false;
            }
        }
    }
    let largest = (0..lab.count()).max_by_key(|&c| (lab.sizes[c], std::cmp::Reverse(c)));
    (0..lab.count())
        .filter(|&c| Some(c) != largest)
        .filter(|&c| lab.sizes[c] < droplet_max_cells || only_splash[c])
        .count()
}

/// Coarse counterpart of a fine scene: the grid is coarsened by
/// `coarse_factor` and surface tension is switched off.
pub fn coarse_scene<const D: usize>(fine: &SceneConfig<D>) -> SceneConfig<D> {
    let f = fine.coarse_factor;
    let mut c = fine.clone();
    c.res = std::array::from_fn(|a| fine.res[a] / f);
    c.h = fine.h * f as f64;
    c.coarse_factor = 1;
    c.params.surface_tension = 0.0;
    c
}

/// Liquid-string droplet-count study.
#[derive(Clone, Debug)]
pub struct StringExperiment {
    /// Fine reference template (LiquidString); its length range is ignored.
    pub fine: SceneConfig<2>,
    pub lengths: Vec<f64>,
    pub seed: u64,
    pub inference: InferenceConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StringRow {
    pub length: f64,
    pub reference: usize,
    pub model: usize,
}

fn with_length(t: &SceneConfig<2>, length: f64) -> SceneConfig<2> {
    let mut c = t.clone();
    c.string_length = (length, length);
    c
}

impl StringExperiment {
    fn measure(&self, particles: &[Particle<2>]) -> usize {
        let c = coarse_scene(&self.fine);
        count_droplets(particles, c.res, c.h, c.params.particle_radius, self.fine.droplet_max_cells)
    }

    /// Droplets formed by the fine simulation with surface tension.
    pub fn reference(&self, length: f64) -> Result<usize> {
        let cfg = with_length(&self.fine, length);
        let mut s = randomize_scene(&cfg, self.seed)?.state;
        for _ in 0..cfg.frames() {
            s.advance_frame(&mut NoHook)?;
        }
        Ok(self.measure(&s.particles.particles))
    }

    /// Droplets of the coarse simulation driven by `model`.
    pub fn model_run(&self, model: &dyn SplashModel, length: f64) -> Result<usize> {
        let cfg = coarse_scene(&with_length(&self.fine, length));
        let mut s = randomize_scene(&cfg, self.seed)?.state;
        let mut hook = MlFlipHook::<2>::new(model, self.inference.clone())?;
        for _ in 0..cfg.frames() {
            s.advance_frame(&mut hook)?;
        }
        Ok(self.measure(&s.particles.particles))
    }

    /// Droplets of the coarse simulation without any splash model.
    pub fn plain_coarse(&self, length: f64) -> Result<usize> {
        let cfg = coarse_scene(&with_length(&self.fine, length));
        let mut s = randomize_scene(&cfg, self.seed)?.state;
        for _ in 0..cfg.frames() {
            s.advance_frame(&mut NoHook)?;
        }
        Ok(self.measure(&s.particles.particles))
    }

    pub fn references(&self) -> Result<Vec<usize>> {
        self.lengths.par_iter().map(|&l| self.reference(l)).collect()
    }

    pub fn run(&self, model: &dyn SplashModel, references: &[usize]) -> Result<Vec<StringRow>> {
        if self.lengths.is_empty() {
            return Err(Error::Config("string experiment needs at least one length".into()));
        }
        let counts: Vec<usize> = self
            .lengths
            .par_iter()
            .map(|&l| self.model_run(model, l))
            .collect::<Result<_>>()?;
        Ok(self
            .lengths
            .iter()
            .zip(references)
            .zip(counts)
            .map(|((&length, &reference), model)| StringRow {
                length,
                reference,
                model,
            })
            .collect())
    }
}

/// Mean absolute count difference between model and reference.
pub fn mean_absolute_error(rows: &[StringRow]) -> f64 {
    rows.iter()
        .map(|r| (r.model as f64 - r.reference as f64).abs())
        .sum::<f64>()
        / rows.len() as f64
}

/// True when no later value falls more than `slack` below an earlier one.
pub fn non_decreasing_within(values: &[usize], slack: usize) -> bool {
    (0..values.len()).all(|i| (i + 1..values.len()).all(|j| values[j] + slack >= values[i]))
}

pub fn string_csv(rows: &[StringRow]) -> String {
    let mut s = String::from("# droplet counts after the simulated time; reference = fine run with surface tension, model = coarse run with the splash model\n");
    s.push_str("length_m,reference,model\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.length, r.reference, r.model);
    }
    s
}

/// Per-frame confirmed splash counts of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRun {
    pub label: String,
    pub per_frame: Vec<usize>,
}

impl ConsistencyRun {
    pub fn mean(&self) -> f64 {
        self.per_frame.iter().sum::<usize>() as f64 / self.per_frame.len().max(1) as f64
    }
}

/// `(max - min) / mean` of the per-run mean counts.
pub fn relative_spread(runs: &[ConsistencyRun]) -> f64 {
    let means: Vec<f64> = runs.iter().map(|r| r.mean()).collect();
    let max = means.iter().copied().fold(f64::MIN, f64::max);
    let min = means.iter().copied().fold(f64::MAX, f64::min);
    let avg = means.iter().sum::<f64>() / means.len() as f64;
    if avg == 0.0 {
        0.0
    } else {
        (max - min) / avg
    }
}

/// Coupled runs of `scene` for every seed; the per-frame counts of all
/// seeds are concatenated.
fn coupled_run<const D: usize>(
    scene: &SceneConfig<D>,
    seeds: &[u64],
    model: &dyn SplashModel,
    inference: &InferenceConfig,
    label: String,
) -> Result<ConsistencyRun> {
    let mut per_frame = Vec::new();
    for &seed in seeds {
        let mut s = randomize_scene(scene, seed)?.state;
        let mut hook = MlFlipHook::<D>::new(model, inference.clone())?;
        for _ in 0..scene.frames() {
            s.advance_frame(&mut hook)?;
        }
        per_frame.extend(hook.stats.iter().map(|f| f.confirmed));
    }
    Ok(ConsistencyRun { label, per_frame })
}

/// The same scenes advanced with `n` equal substeps per frame for every `n`.
pub fn run_dt_consistency<const D: usize>(
    scene: &SceneConfig<D>,
    seeds: &[u64],
    model: &dyn SplashModel,
    inference: &InferenceConfig,
    substeps: &[usize],
) -> Result<Vec<ConsistencyRun>> {
    substeps
        .par_iter()
        .map(|&n| {
            let mut cfg = scene.clone();
            cfg.params.steps = StepPolicy::Fixed(n);
            coupled_run(&cfg, seeds, model, inference, format!("substeps={n}"))
        })
        .collect()
}

/// The same scenes seeded with each particle count per cell.
pub fn run_seeding_consistency<const D: usize>(
    scene: &SceneConfig<D>,
    seeds: &[u64],
    model: &dyn SplashModel,
    inference: &InferenceConfig,
    particles_per_cell: &[usize],
) -> Result<Vec<ConsistencyRun>> {
    particles_per_cell
        .par_iter()
        .map(|&n| {
            let mut cfg = scene.clone();
            cfg.params.particles_per_cell = n;
            coupled_run(&cfg, seeds, model, inference, format!("ppc={n}"))
        })
        .collect()
}

/// Splash decisions of the random walk on frozen frames: for every frame the
/// model is evaluated `n` times with substep `frame_dt / n` on the same
/// state. Returns the ids decided per frame.
pub fn frozen_frame_decisions<const D: usize>(
    frames: &[(MacGrid<D>, Vec<Particle<D>>)],
    model: &dyn SplashModel,
    substeps: usize,
    frame_dt: f64,
) -> Result<Vec<Vec<u64>>> {
    let dt = frame_dt / substeps as f64;
    let mut out = Vec::new();
    for (grid, particles) in frames {
        let mut ps = particles.clone();
        let band = surface_particle_indices(&ps, grid);
        let mut x = Vec::new();
        for &i in &band {
            extract_feature_into(grid, ps[i].pos, model.scale_feature(), &mut x);
        }
        let y = if band.is_empty() { Vec::new() } else { model.classify(&x)? };
        let mut decided = Vec::new();
        for _ in 0..substeps {
            for (k, &i) in band.iter().enumerate() {
                if let Some(e) = crate::mlflip::accumulate_expectation(&mut ps[i], y[k], dt, frame_dt) {
                    if e > 0.0 {
                        decided.push(ps[i].id);
                    }
                }
            }
        }
        out.push(decided);
    }
    Ok(out)
}

/// Snapshots `(grid, particles)` at the end of each of the first `frames`
/// frames of a plain simulation of `scene`, for every seed in turn.
pub fn record_frames<const D: usize>(
    scene: &SceneConfig<D>,
    seeds: &[u64],
    frames: usize,
) -> Result<Vec<(MacGrid<D>, Vec<Particle<D>>)>> {
    let mut out = Vec::with_capacity(frames * seeds.len());
    for &seed in seeds {
        let mut s: SolverState<D> = randomize_scene(scene, seed)?.state;
        for _ in 0..frames {
            s.advance_frame(&mut NoHook)?;
            out.push((s.grid.clone(), s.particles.particles.clone()));
        }
    }
    Ok(out)
}

/// Secondary-mode decision counts per threshold on fixed frames.
pub fn run_threshold_sweep<const D: usize>(
    frames: &[(MacGrid<D>, Vec<Particle<D>>)],
    model: &dyn SplashModel,
    thresholds: &[f64],
) -> Result<Vec<(f64, usize)>> {
    if thresholds.is_empty() {
        return Err(Error::Config("threshold sweep needs at least one value".into()));
    }
    let counts = splash_decision_count(frames, model, thresholds)?;
    Ok(thresholds.iter().copied().zip(counts).collect())
}

pub fn threshold_csv(rows: &[(f64, usize)]) -> String {
    let mut s = String::from("# splash decisions (p_splash > threshold) summed over fixed frames\n");
    s.push_str("threshold,decisions\n");
    for (t, c) in rows {
        let _ = writeln!(s, "{t},{c}");
    }
    s
}

/// Nested subsets of `data`: one seeded shuffle, then prefixes of each size.
pub fn nested_subsets(data: &Dataset, sizes: &[usize], seed: u64) -> Vec<Dataset> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    sizes
        .iter()
        .map(|&n| {
            let mut idx = order[..n.min(order.len())].to_vec();
            idx.sort_unstable();
            data.subset(&idx)
        })
        .collect()
}

/// Train one model per nested training-set size and count its splash
/// decisions (`p_splash > threshold`) on fixed frames.
pub fn run_convergence<const D: usize>(
    data: &Dataset,
    sizes: &[usize],
    config: &TrainConfig,
    frames: &[(MacGrid<D>, Vec<Particle<D>>)],
    threshold: f64,
) -> Result<Vec<(usize, usize)>> {
    if sizes.is_empty() {
        return Err(Error::Config("convergence study needs at least one size".into()));
    }
    let subsets = nested_subsets(data, sizes, config.seed);
    let mut out = Vec::new();
    for (n, sub) in sizes.iter().zip(subsets) {
        let (model, _) = train(&sub, config)?;
        let c = splash_decision_count(frames, &model as &ModelBundle, &[threshold])?[0];
        out.push((*n, c));
    }
    Ok(out)
}

pub fn convergence_csv(rows: &[(usize, usize)]) -> String {
    let mut s = String::from("# splash decisions on fixed frames per training-set size\n");
    s.push_str("samples,decisions\n");
    for (n, c) in rows {
        let _ = writeln!(s, "{n},{c}");
    }
    s
}

pub fn consistency_csv(runs: &[ConsistencyRun]) -> String {
    let mut s = String::from("# confirmed splashes per frame for each configuration\n");
    s.push_str("configuration,frame,splashes\n");
    for r in runs {
        for (f, c) in r.per_frame.iter().enumerate() {
            let _ = writeln!(s, "{},{f},{c}", r.label);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlflip::ConstantModel;
    use rand::Rng;

    fn bulk(id: u64, pos: [f64; 2]) -> Particle<2> {
        Particle::new(id, pos, [0.0; 2], Role::Bulk)
    }

    fn line(x0: f64, x1: f64, y: f64, h: f64, id0: u64) -> Vec<Particle<2>> {
        let n = ((x1 - x0) / (0.5 * h)).round() as u64;
        (0..=n).map(|k| bulk(id0 + k, [x0 + k as f64 * 0.5 * h, y])).collect()
    }

    #[test]
    fn unbroken_string_has_no_droplets() {
        let h = 0.01;
        let ps = line(0.05, 0.25, 0.05, h, 0);
        assert_eq!(count_droplets(&ps, [32, 12], h, 0.8, 4), 0);
    }

    #[test]
    fn separated_beads_are_counted() {
        let h = 0.01;
        let mut ps = line(0.02, 0.06, 0.05, h, 0);
        for (k, x) in [0.12, 0.17, 0.22].iter().enumerate() {
            ps.push(bulk(100 + k as u64, [*x, 0.055]));
        }
        assert_eq!(count_droplets(&ps, [32, 12], h, 0.8, 4), 3);
        // a permutation of the particles does not change the count
        ps.reverse();
        assert_eq!(count_droplets(&ps, [32, 12], h, 0.8, 4), 3);
    }

    #[test]
    fn splash_cluster_counts_once() {
        let h = 0.01;
        let mut ps = line(0.02, 0.1, 0.05, h, 0);
        for (k, dx) in [0.0, 0.004, 0.008, 0.012, 0.016].iter().enumerate() {
            let mut p = bulk(100 + k as u64, [0.2 + dx, 0.08]);
            p.role = Role::Splash;
            ps.push(p);
        }
        assert_eq!(count_droplets(&ps, [32, 12], h, 0.8, 4), 1);
    }

    struct Dsu(Vec<usize>);

    impl Dsu {
        fn find(&mut self, x: usize) -> usize {
            if self.0[x] != x {
                let r = self.find(self.0[x]);
                self.0[x] = r;
            }
            self.0[x]
        }
    }

    /// Union particles closer than 1.5 h and size each cluster by the cells
    /// whose centers lie within the particle radius of a member.
    fn clustering_oracle(ps: &[Particle<2>], res: [usize; 2], h: f64, max_cells: usize) -> usize {
        let mut dsu = Dsu((0..ps.len()).collect());
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                if crate::vecmath::dist(ps[i].pos, ps[j].pos) < 1.5 * h {
                    let (a, b) = (dsu.find(i), dsu.find(j));
                    dsu.0[a] = b;
                }
            }
        }
        let mut cells: std::collections::BTreeMap<usize, std::collections::BTreeSet<(usize, usize)>> = Default::default();
        for (i, p) in ps.iter().enumerate() {
            let r = dsu.find(i);
            for y in 0..res[1] {
                for x in 0..res[0] {
                    let c = [(x as f64 + 0.5) * h, (y as f64 + 0.5) * h];
                    if crate::vecmath::dist(c, p.pos) <= 0.8 * h {
                        cells.entry(r).or_default().insert((x, y));
                    }
                }
            }
            cells.entry(r).or_default().insert(((p.pos[0] / h) as usize, (p.pos[1] / h) as usize));
        }
        let sizes: Vec<usize> = cells.values().map(|s| s.len()).collect();
        let big = sizes.iter().enumerate().max_by_key(|(_, &s)| s).map(|(i, _)| i);
        sizes
            .iter()
            .enumerate()
            .filter(|(i, &s)| Some(*i) != big && s < max_cells)
            .count()
    }

    #[test]
    fn count_matches_clustering_oracle() {
        let h = 0.01;
        let res = [40, 20];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mut ps = line(0.02, 0.3, 0.03, h, 0);
            ps.extend(line(0.02, 0.3, 0.035, h, 1000));
            let drops = rng.random_range(0..8);
            let mut id = 2000;
            for _ in 0..drops {
                let c = [rng.random_range(0.02..0.38), rng.random_range(0.08..0.18)];
                for _ in 0..rng.random_range(1..4) {
                    let p = [c[0] + rng.random_range(-0.004..0.004), c[1] + rng.random_range(-0.004..0.004)];
                    ps.push(bulk(id, p));
                    id += 1;
                }
            }
            let got = count_droplets(&ps, res, h, 0.8, 4) as i64;
            let expect = clustering_oracle(&ps, res, h, 4) as i64;
            assert!((got - expect).abs() <= 1, "{got} vs {expect}");
        }
    }

    #[test]
    fn monotone_with_slack() {
        assert!(non_decreasing_within(&[0, 1, 1, 3, 2, 4], 1));
        assert!(!non_decreasing_within(&[0, 3, 1], 1));
    }

    #[test]
    fn stub_decisions_are_substep_invariant() {
        let mut scene = SceneConfig::<2>::new(crate::datagen::SceneKind::DropletRain, [16, 16], 0.01);
        scene.droplet_count = (2, 2);
        scene.droplet_radius = (0.015, 0.02);
        let frames = record_frames(&scene, &[3], 3).unwrap();
        for y_s in [[0.7, 0.3], [0.3, 0.7]] {
            let model = ConstantModel {
                dim: 2,
                y_s,
                mu: vec![0.0; 2],
                var: vec![1.0; 2],
            };
            let base = frozen_frame_decisions(&frames, &model, 1, 1.0 / 30.0).unwrap();
            for n in [2, 4] {
                assert_eq!(frozen_frame_decisions(&frames, &model, n, 1.0 / 30.0).unwrap(), base);
            }
            assert_eq!(base[0].is_empty(), y_s[0] < y_s[1]);
        }
    }

    #[test]
    fn spread_of_equal_runs_is_zero() {
        let r = ConsistencyRun {
            label: "a".into(),
            per_frame: vec![1, 2, 3],
        };
        assert_eq!(relative_spread(&[r.clone(), r]), 0.0);
    }
}
