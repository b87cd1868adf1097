//! `mlsplash` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mlsplash::datagen::{generate_dataset, randomize_scene, SceneConfig};
use mlsplash::eval::{
    coarse_scene, consistency_csv, convergence_csv, mean_absolute_error, non_decreasing_within, record_frames,
    relative_spread, run_convergence, run_dt_consistency, run_seeding_consistency, run_threshold_sweep, string_csv,
    threshold_csv, StringExperiment,
};
use mlsplash::io::{
    self, load_config, read_dataset, read_model, render_particles, scatter_plot, unix_now, write_dataset, write_frame,
    write_model, AnyConfig, FrameDump, RunConfig, RunManifest, SimMode, DATASET_MAGIC, FRAME_MAGIC, MODEL_MAGIC,
};
use mlsplash::mlflip::{InferenceMode, MlFlipHook};
use mlsplash::neural::{curves_csv, train};
use mlsplash::particles::Role;
use mlsplash::solver::{NoHook, StepHook};

#[derive(Parser, Debug)]
#[command(name = "mlsplash", version, about = "Learned splash model for FLIP liquid simulations")]
struct Cli {
    /// Worker threads (1 gives bit-reproducible output).
    #[arg(long, global = true, env = "MLSPLASH_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Experiment {
    String,
    Dt,
    Seeding,
    All,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SweepKind {
    Threshold,
    Size,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a balanced training dataset from randomized fine scenes.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the classifier and velocity modifier on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a simulation and dump every frame.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// flip, mlflip-coupled or mlflip-secondary.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Splash probability threshold for secondary mode.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run evaluation experiments and write their CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        experiment: Experiment,
    },
    /// Threshold or training-set size sweeps.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: SweepKind,
        /// Model for threshold sweeps.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset for size sweeps.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the header of a dataset, model or frame file.
    Inspect { file: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let name = command_name(&cli.command);
    match cli.command {
        Command::Inspect { file } => inspect(&file),
        Command::GenData { common } => dispatch(&common, name, GenData),
        Command::Train { common, data } => dispatch(&common, name, TrainCmd(data)),
        Command::Simulate {
            common,
            mode,
            model,
            threshold,
        } => {
            let mode = mode.map(|m| m.parse::<SimMode>()).transpose()?;
            dispatch(&common, name, Simulate { mode, model, threshold })
        }
        Command::Eval {
            common,
            model,
            experiment,
        } => dispatch(&common, name, EvalCmd { model, experiment }),
        Command::Sweep {
            common,
            kind,
            model,
            data,
        } => dispatch(&common, name, Sweep { kind, model, data }),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData { .. } => "gen-data",
        Command::Train { .. } => "train",
        Command::Simulate { .. } => "simulate",
        Command::Eval { .. } => "eval",
        Command::Sweep { .. } => "sweep",
        Command::Inspect { .. } => "inspect",
    }
}

/// Dimension-generic command body.
trait Body {
    fn call<const D: usize>(&self, cfg: &RunConfig<D>, out: &Path) -> Result<()>;
}

/// Loads the configuration, writes the manifest and runs `body` for the
/// configured dimension.
fn dispatch<B: Body>(common: &Common, name: &str, body: B) -> Result<()> {
    let mut any = load_config(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        match &mut any {
            AnyConfig::D2(c) => c.seed = seed,
            AnyConfig::D3(c) => c.seed = seed,
        }
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let (snapshot, seed) = match &any {
        AnyConfig::D2(c) => (serde_json::to_value(c)?, c.seed),
        AnyConfig::D3(c) => (serde_json::to_value(c)?, c.seed),
    };
    let mut manifest = RunManifest {
        command: name.to_string(),
        config_path: Some(common.config.display().to_string()),
        config: snapshot,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started: unix_now(),
        finished: None,
        out_dir: common.out.display().to_string(),
    };
    let manifest_path = common.out.join("manifest.json");
    manifest.write(&manifest_path)?;
    match &any {
        AnyConfig::D2(c) => body.call(c, &common.out)?,
        AnyConfig::D3(c) => body.call(c, &common.out)?,
    }
    manifest.finished = Some(unix_now());
    manifest.write(&manifest_path)?;
    Ok(())
}

struct GenData;

impl Body for GenData {
    fn call<const D: usize>(&self, cfg: &RunConfig<D>, out: &Path) -> Result<()> {
        let (data, report) = generate_dataset(&cfg.scene, &cfg.seeds())?;
        info!(
            "{} scenes, {} raw positives, {} raw negatives, {} balanced samples",
            report.scenes_ok,
            report.raw_positive,
            report.raw_negative,
            data.len()
        );
        for (seed, why) in &report.failures {
            log::warn!("scene seed {seed} skipped: {why}");
        }
        write_dataset(&out.join("dataset.bin"), &data)?;
        let log = serde_json::json!({
            "scenes_ok": report.scenes_ok,
            "failures": report.failures,
            "raw_positive": report.raw_positive,
            "raw_negative": report.raw_negative,
            "samples": data.len(),
            "positive": data.n_positive(),
            "provenance": data.provenance,
        });
        fs::write(out.join("generation.json"), serde_json::to_string_pretty(&log)?)?;
        Ok(())
    }
}

struct TrainCmd(PathBuf);

impl Body for TrainCmd {
    fn call<const D: usize>(&self, cfg: &RunConfig<D>, out: &Path) -> Result<()> {
        let data = read_dataset(&self.0).with_context(|| format!("reading {}", self.0.display()))?;
        if data.dim != D {
            bail!("dataset is {}D but the configuration is {D}D", data.dim);
        }
        let mut tc = cfg.train.clone();
        tc.seed = cfg.seed;
        let (model, curves) = train(&data, &tc)?;
        if let Some(last) = curves.last() {
            info!("test accuracy {:.4}, test likelihood loss {:.4}", last.test_acc, last.test_lm);
        }
        write_model(&out.join("model.bin"), &model)?;
        fs::write(out.join("curves.csv"), curves_csv(&curves))?;
        Ok(())
    }
}

struct Simulate {
    mode: Option<SimMode>,
    model: Option<PathBuf>,
    threshold: Option<f64>,
}

impl Body for Simulate {
    fn call<const D: usize>(&self, cfg: &RunConfig<D>, out: &Path) -> Result<()> {
        let mode = self.mode.unwrap_or(cfg.simulate.mode);
        let scene: SceneConfig<D> = if cfg.simulate.coarse {
            coarse_scene(&cfg.scene)
        } else {
            cfg.scene.clone()
        };
        let mut state = randomize_scene(&scene, cfg.seed)?.state;
        let bundle = match mode {
            SimMode::Flip => None,
            _ => {
                let p = self
                    .model
                    .as_ref()
                    .context("mlflip modes need --model")?;
                Some(read_model(p).with_context(|| format!("reading {}", p.display()))?)
            }
        };
        let mut inference = cfg.inference.clone();
        inference.seed = cfg.seed;
        if let Some(t) = self.threshold {
            inference.threshold = t;
        }
        inference.mode = match mode {
            SimMode::MlflipSecondary => InferenceMode::Secondary,
            _ => InferenceMode::Coupled,
        };
        let mut ml = match &bundle {
            Some(b) => Some(MlFlipHook::<D>::new(b, inference)?),
            None => None,
        };
        let frames_dir = out.join("frames");
        fs::create_dir_all(&frames_dir)?;
        let mut stats = String::from("# particle counts per frame\nframe,bulk,splash,secondary,confirmed,spawned\n");
        for f in 0..cfg.simulate.frames {
            let hook: &mut dyn StepHook<D> = match ml.as_mut() {
                Some(h) => h,
                None => &mut NoHook,
            };
            state.advance_frame(hook)?;
            let ps = &state.particles.particles;
            write_frame(&frames_dir.join(format!("frame_{f:05}.bin")), ps)?;
            if let Some((w, h)) = cfg.simulate.image {
                render_particles(ps, state.grid.extent(), w, h).write_ppm(&frames_dir.join(format!("frame_{f:05}.ppm")))?;
            }
            let (confirmed, spawned) = ml
                .as_ref()
                .and_then(|h| h.stats.last())
                .map(|s| (s.confirmed, s.spawned))
                .unwrap_or((0, 0));
            stats.push_str(&format!(
                "{f},{},{},{},{confirmed},{spawned}\n",
                state.particles.count(Role::Bulk),
                state.particles.count(Role::Splash),
                state.particles.count(Role::Secondary)
            ));
        }
        fs::write(out.join("stats.csv"), stats)?;
        info!(
            "{} frames, {} splash and {} secondary particles at the end",
            cfg.simulate.frames,
            state.particles.count(Role::Splash),
            state.particles.count(Role::Secondary)
        );
        Ok(())
    }
}

struct EvalCmd {
    model: PathBuf,
    experiment: Experiment,
}

impl Body for EvalCmd {
    fn call<const D: usize>(&self, cfg: &RunConfig<D>, out: &Path) -> Result<()> {
        let model = read_model(&self.model).with_context(|| format!("reading {}", self.model.display()))?;
        let mut inference = cfg.inference.clone();
        inference.seed = cfg.seed;
        let all = matches!(self.experiment, Experiment::All);
        if all || matches!(self.experiment, Experiment::String) {
            let Some(fine) = (&cfg.scene as &dyn std::any::Any).downcast_ref::<SceneConfig<2>>() else {
                bail!("the string experiment is two-dimensional");
            };
            inference.deterministic_variance = true;
            inference.mode = InferenceMode::Coupled;
            let exp = StringExperiment {
                fine: fine.clone(),
                lengths: cfg.experiment.lengths.clone(),
                seed: cfg.seed,
                inference: inference.clone(),
            };
            let refs = exp.references()?;
            let rows = exp.run(&model, &refs)?;
            fs::write(out.join("string_counts.csv"), string_csv(&rows))?;
            let r: Vec<(f64, f64)> = rows.iter().map(|r| (r.length, r.reference as f64)).collect();
            let m: Vec<(f64, f64)> = rows.iter().map(|r| (r.length, r.model as f64)).collect();
            scatter_plot(&[(&r, [40, 90, 220]), (&m, [220, 60, 40])], 320, 240)
                .write_ppm(&out.join("string_counts.ppm"))?;
            let refs: Vec<usize> = rows.iter().map(|r| r.reference).collect();
            let mods: Vec<usize> = rows.iter().map(|r| r.model).collect();
            info!(
                "string counts: mean absolute error {:.3}, reference monotone {}, model monotone {}",
                mean_absolute_error(&rows),
                non_decreasing_within(&refs, 1),
                non_decreasing_within(&mods, 1)
            );
        }
        let scene = coarse_scene(&cfg.scene);
        if all || matches!(self.experiment, Experiment::Dt) {
            let runs = run_dt_consistency(&scene, &cfg.trial_seeds(), &model, &inference, &cfg.experiment.substeps)?;
            fs::write(out.join("dt_consistency.csv"), consistency_csv(&runs))?;
            info!("substep consistency: relative spread {:.3}", relative_spread(&runs));
        }
        if all || matches!(self.experiment, Experiment::Seeding) {
            let mut rows = Vec::new();
            for cap in [true, false] {
                let mut inf = inference.clone();
                inf.per_cell_cap = cap;
                let mut runs = run_seeding_consistency(&scene, &cfg.trial_seeds(), &model, &inf, &cfg.experiment.particles_per_cell)?;
                info!("seeding consistency, cap {cap}: relative spread {:.3}", relative_spread(&runs));
                for r in &mut runs {
                    r.label = format!("{} cap={cap}", r.label);
                }
                rows.extend(runs);
            }
            fs::write(out.join("seeding_consistency.csv"), consistency_csv(&rows))?;
        }
        Ok(())
    }
}

struct Sweep {
    kind: SweepKind,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
}

impl Body for Sweep {
    fn call<const D: usize>(&self, cfg: &RunConfig<D>, out: &Path) -> Result<()> {
        let frames = record_frames(&coarse_scene(&cfg.scene), &cfg.trial_seeds(), cfg.experiment.frames)?;
        match self.kind {
            SweepKind::Threshold => {
                let p = self.model.as_ref().context("threshold sweeps need --model")?;
                let model = read_model(p).with_context(|| format!("reading {}", p.display()))?;
                let rows = run_threshold_sweep(&frames, &model, &cfg.experiment.thresholds)?;
                fs::write(out.join("threshold_sweep.csv"), threshold_csv(&rows))?;
            }
            SweepKind::Size => {
                let p = self.data.as_ref().context("size sweeps need --data")?;
                let data = read_dataset(p).with_context(|| format!("reading {}", p.display()))?;
                let mut tc = cfg.train.clone();
                tc.seed = cfg.seed;
                let rows = run_convergence(&data, &cfg.experiment.sizes, &tc, &frames, cfg.inference.threshold)?;
                fs::write(out.join("size_sweep.csv"), convergence_csv(&rows))?;
            }
        }
        Ok(())
    }
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let magic = bytes.get(..9).unwrap_or(&[]);
    if magic == DATASET_MAGIC {
        let d = io::dataset_from_bytes(&bytes)?;
        println!("kind: dataset");
        println!("version: {}", io::DATASET_VERSION);
        println!("dim: {}", d.dim);
        println!("feature_len: {}", d.feature_len);
        println!("scale_feature: {}", d.scale_feature);
        println!("samples: {}", d.len());
        println!("positive: {}", d.n_positive());
        println!("negative: {}", d.n_negative());
    } else if magic == MODEL_MAGIC {
        let m = io::model_from_bytes(&bytes)?;
        println!("kind: model");
        println!("version: {}", io::MODEL_VERSION);
        println!("dim: {}", m.dim);
        println!("feature_len: {}", m.feature_len);
        println!("scale_feature: {}", m.scale_feature);
        for (name, n) in [("classifier", &m.classifier), ("mean_net", &m.mean_net), ("var_net", &m.var_net)] {
            println!(
                "{name}: {}x{}x{} batch_norm={} parameters={}",
                n.n_in,
                n.n_hidden,
                n.n_out,
                n.batch_norm,
                n.params.len()
            );
        }
    } else if magic == FRAME_MAGIC {
        let f = FrameDump::from_bytes(&bytes)?;
        println!("kind: frame");
        println!("version: {}", io::FRAME_VERSION);
        println!("dim: {}", f.dim);
        println!("particles: {}", f.len());
        println!("bulk: {}", f.count(Role::Bulk));
        println!("splash: {}", f.count(Role::Splash));
        println!("secondary: {}", f.count(Role::Secondary));
    } else {
        bail!("{} is not a dataset, model or frame file", path.display());
    }
    Ok(())
}
