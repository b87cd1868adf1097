//! File formats: binary datasets, models and particle frames, PPM images,
//! JSON run configurations and run manifests. Multi-byte values are
//! little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::{feature_len, Dataset, SceneConfig, SceneKind};
use crate::error::{Error, Result};
use crate::mlflip::InferenceConfig;
use crate::neural::{Head, Mlp, ModelBundle, TrainConfig};
use crate::particles::{Particle, Role};

pub const DATASET_MAGIC: &[u8; 9] = b"MLSPLASH1";
pub const MODEL_MAGIC: &[u8; 9] = b"MLSPLMDL1";
pub const FRAME_MAGIC: &[u8; 9] = b"MLSPLFRM1";
pub const DATASET_VERSION: u32 = 1;
pub const MODEL_VERSION: u32 = 1;
pub const FRAME_VERSION: u32 = 1;

/// Serde adapter storing `[T; N]` as a JSON list of exactly `N` items.
pub mod array {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, T: Serialize, const N: usize>(a: &[T; N], s: S) -> Result<S::Ok, S::Error> {
        a.as_slice().serialize(s)
    }

    pub fn deserialize<'de, De, T, const N: usize>(d: De) -> Result<[T; N], De::Error>
    where
        De: Deserializer<'de>,
        T: Deserialize<'de>,
    {
        let v = Vec::<T>::deserialize(d)?;
        let n = v.len();
        v.try_into()
            .map_err(|_| De::Error::custom(format!("expected a list of {N} values, found {n}")))
    }
}

struct Out(Vec<u8>);

impl Out {
    fn new(magic: &[u8; 9], version: u32) -> Self {
        let mut o = Out(magic.to_vec());
        o.u32(version);
        o
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> In<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 9], version: u32, kind: &'static str) -> Result<Self> {
        if buf.len() < magic.len() || &buf[..magic.len()] != magic {
            return Err(Error::BadMagic { kind });
        }
        let mut r = In { buf, pos: magic.len(), kind };
        let found = r.u32()?;
        if found != version {
            return Err(Error::Version {
                kind,
                found,
                expected: version,
            });
        }
        Ok(r)
    }
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let b = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Malformed(format!("{} file truncated at byte {}", self.kind, self.pos)))?;
        self.pos = end;
        Ok(b.try_into().expect("slice length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    /// Length prefix checked against the bytes left, `item` bytes per element.
    fn count(&mut self, item: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(item) > self.buf.len() - self.pos {
            return Err(Error::Malformed(format!("{} file declares {n} items past its end", self.kind)));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!(
                "{} file has {} trailing bytes",
                self.kind,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn dim_u8(dim: usize) -> Result<u8> {
    match dim {
        2 | 3 => Ok(dim as u8),
        _ => Err(Error::Config(format!("dimension must be 2 or 3, got {dim}"))),
    }
}

pub fn dataset_to_bytes(d: &Dataset) -> Result<Vec<u8>> {
    let mut o = Out::new(DATASET_MAGIC, DATASET_VERSION);
    o.u8(dim_u8(d.dim)?);
    o.u8(d.scale_feature as u8);
    o.u32(d.feature_len as u32);
    o.u64(d.len() as u64);
    o.u64(d.n_positive() as u64);
    for i in 0..d.len() {
        let s = d.sample(i);
        s.x.iter().for_each(|&v| o.f32(v));
        o.u8(s.label);
        s.dv.iter().for_each(|&v| o.f32(v));
        o.f32(s.h_meta);
    }
    Ok(o.0)
}

/// Parses a dataset file. Provenance is not part of the format and comes
/// back empty.
pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = In::open(buf, DATASET_MAGIC, DATASET_VERSION, "dataset")?;
    let dim = r.u8()? as usize;
    dim_u8(dim).map_err(|_| Error::Malformed(format!("dataset dimension {dim}")))?;
    let scale = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Malformed(format!("dataset scale flag {v}"))),
    };
    let flen = r.u32()? as usize;
    let expected = feature_len(dim, scale);
    if flen != expected {
        return Err(Error::FeatureLength { expected, found: flen });
    }
    let n = r.count(4 * (flen + dim + 1) + 1)?;
    let n_pos = r.u64()? as usize;
    let mut d = Dataset::new(dim, scale);
    d.features.reserve(n * flen);
    for _ in 0..n {
        for _ in 0..flen {
            d.features.push(r.f32()?);
        }
        let label = r.u8()?;
        if label > 1 {
            return Err(Error::Malformed(format!("dataset label {label}")));
        }
        d.labels.push(label);
        for _ in 0..dim {
            d.dv.push(r.f32()?);
        }
        d.h_meta.push(r.f32()?);
    }
    r.finish()?;
    if d.n_positive() != n_pos {
        return Err(Error::Malformed(format!(
            "dataset header counts {n_pos} positives, samples hold {}",
            d.n_positive()
        )));
    }
    Ok(d)
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_bytes(d)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&fs::read(path)?)
}

fn put_mlp(o: &mut Out, m: &Mlp) {
    o.u32(m.n_in as u32);
    o.u32(m.n_hidden as u32);
    o.u32(m.n_out as u32);
    o.u8(match m.head {
        Head::Softmax2 => 0,
        Head::Linear => 1,
    });
    o.u8(m.batch_norm as u8);
    o.f64(m.momentum);
    o.f64s(&m.params);
}

fn get_mlp(r: &mut In) -> Result<Mlp> {
    let n_in = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let n_out = r.u32()? as usize;
    let head = match r.u8()? {
        0 => Head::Softmax2,
        1 => Head::Linear,
        v => return Err(Error::Malformed(format!("network head {v}"))),
    };
    let batch_norm = r.u8()? != 0;
    let momentum = r.f64()?;
    let params = r.f64s()?;
    let mut m = Mlp::zeros(n_in, n_out, head, batch_norm);
    if m.n_hidden != n_hidden || m.params.len() != params.len() {
        return Err(Error::Malformed(format!(
            "network {n_in}x{n_hidden}x{n_out} with {} parameters",
            params.len()
        )));
    }
    m.params = params;
    m.momentum = momentum;
    Ok(m)
}

pub fn model_to_bytes(m: &ModelBundle) -> Result<Vec<u8>> {
    let mut o = Out::new(MODEL_MAGIC, MODEL_VERSION);
    o.u8(dim_u8(m.dim)?);
    o.u32(m.feature_len as u32);
    o.u8(m.scale_feature as u8);
    let nets = [&m.classifier, &m.mean_net, &m.var_net];
    nets.iter().for_each(|n| put_mlp(&mut o, n));
    o.f64s(&m.feature_mean);
    o.f64s(&m.feature_std);
    for n in nets {
        o.f64s(&n.running_mean);
        o.f64s(&n.running_var);
    }
    Ok(o.0)
}

/// Parses a model file. Provenance is not part of the format and comes back
/// empty.
pub fn model_from_bytes(buf: &[u8]) -> Result<ModelBundle> {
    let mut r = In::open(buf, MODEL_MAGIC, MODEL_VERSION, "model")?;
    let dim = r.u8()? as usize;
    dim_u8(dim).map_err(|_| Error::Malformed(format!("model dimension {dim}")))?;
    let flen = r.u32()? as usize;
    let scale = r.u8()? != 0;
    let expected = feature_len(dim, scale);
    if flen != expected {
        return Err(Error::FeatureLength { expected, found: flen });
    }
    let mut m = ModelBundle::zeros(dim, scale);
    m.classifier = get_mlp(&mut r)?;
    m.mean_net = get_mlp(&mut r)?;
    m.var_net = get_mlp(&mut r)?;
    m.feature_mean = r.f64s()?;
    m.feature_std = r.f64s()?;
    for net in [&mut m.classifier, &mut m.mean_net, &mut m.var_net] {
        net.running_mean = r.f64s()?;
        net.running_var = r.f64s()?;
        if net.n_in != flen || net.running_mean.len() != net.n_hidden || net.running_var.len() != net.n_hidden {
            return Err(Error::Malformed("network shapes disagree with the model header".into()));
        }
    }
    if m.feature_mean.len() != flen || m.feature_std.len() != flen {
        return Err(Error::Malformed("normalization length disagrees with the feature length".into()));
    }
    if m.classifier.n_out != 2 || m.mean_net.n_out != dim || m.var_net.n_out != dim {
        return Err(Error::Malformed("network outputs disagree with the dimension".into()));
    }
    r.finish()?;
    Ok(m)
}

pub fn write_model(path: &Path, m: &ModelBundle) -> Result<()> {
    fs::write(path, model_to_bytes(m)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelBundle> {
    model_from_bytes(&fs::read(path)?)
}

/// Particle snapshot at file precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDump {
    pub dim: usize,
    /// `dim` values per particle.
    pub positions: Vec<f32>,
    pub velocities: Vec<f32>,
    pub roles: Vec<Role>,
    pub ids: Vec<u64>,
}

impl FrameDump {
    pub fn from_particles<const D: usize>(ps: &[Particle<D>]) -> Self {
        Self {
            dim: D,
            positions: ps.iter().flat_map(|p| p.pos.map(|v| v as f32)).collect(),
            velocities: ps.iter().flat_map(|p| p.vel.map(|v| v as f32)).collect(),
            roles: ps.iter().map(|p| p.role).collect(),
            ids: ps.iter().map(|p| p.id).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut o = Out::new(FRAME_MAGIC, FRAME_VERSION);
        o.u8(dim_u8(self.dim)?);
        o.u64(self.len() as u64);
        for i in 0..self.len() {
            let s = i * self.dim..(i + 1) * self.dim;
            self.positions[s.clone()].iter().for_each(|&v| o.f32(v));
            self.velocities[s].iter().for_each(|&v| o.f32(v));
            o.u8(self.roles[i] as u8);
            o.u64(self.ids[i]);
        }
        Ok(o.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = In::open(buf, FRAME_MAGIC, FRAME_VERSION, "frame")?;
        let dim = r.u8()? as usize;
        dim_u8(dim).map_err(|_| Error::Malformed(format!("frame dimension {dim}")))?;
        let n = r.count(8 * dim + 9)?;
        let mut f = FrameDump {
            dim,
            positions: Vec::with_capacity(n * dim),
            velocities: Vec::with_capacity(n * dim),
            roles: Vec::with_capacity(n),
            ids: Vec::with_capacity(n),
        };
        for _ in 0..n {
            for _ in 0..dim {
                f.positions.push(r.f32()?);
            }
            for _ in 0..dim {
                f.velocities.push(r.f32()?);
            }
            let role = r.u8()?;
            f.roles
                .push(Role::from_u8(role).ok_or_else(|| Error::Malformed(format!("particle role {role}")))?);
            f.ids.push(r.u64()?);
        }
        r.finish()?;
        Ok(f)
    }
}

pub fn write_frame<const D: usize>(path: &Path, ps: &[Particle<D>]) -> Result<()> {
    fs::write(path, FrameDump::from_particles(ps).to_bytes()?)?;
    Ok(())
}

pub fn read_frame(path: &Path) -> Result<FrameDump> {
    FrameDump::from_bytes(&fs::read(path)?)
}

pub const BACKGROUND: [u8; 3] = [16, 16, 24];
pub const BULK_COLOR: [u8; 3] = [40, 90, 220];
pub const SPLASH_COLOR: [u8; 3] = [255, 255, 255];
pub const SECONDARY_COLOR: [u8; 3] = [255, 0, 255];

pub fn role_color(r: Role) -> [u8; 3] {
    match r {
        Role::Bulk => BULK_COLOR,
        Role::Splash => SPLASH_COLOR,
        Role::Secondary => SECONDARY_COLOR,
    }
}

/// RGB raster, row 0 at the top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    /// Sets the pixel holding the point `(u, v)` of the unit square, with
    /// `v` pointing up. Points outside are ignored.
    pub fn plot(&mut self, u: f64, v: f64, color: [u8; 3]) {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return;
        }
        let x = ((u * self.width as f64) as usize).min(self.width - 1);
        let y = (((1.0 - v) * self.height as f64) as usize).min(self.height - 1);
        self.pixels[y * self.width + x] = color;
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        self.pixels.iter().for_each(|p| out.extend_from_slice(p));
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Orthographic view along the axes after the first two. Bulk particles
/// are drawn first so splash and secondary particles stay visible.
pub fn render_particles<const D: usize>(ps: &[Particle<D>], extent: [f64; D], width: usize, height: usize) -> Image {
    let mut img = Image::new(width, height, BACKGROUND);
    for role in [Role::Bulk, Role::Splash, Role::Secondary] {
        for p in ps.iter().filter(|p| p.role == role) {
            img.plot(p.pos[0] / extent[0], p.pos[1] / extent[1], role_color(role));
        }
    }
    img
}

/// Points of one plotted series and their color.
pub type Series<'a> = (&'a [(f64, f64)], [u8; 3]);

/// Scatter plot of point series over their joint bounding box, each point
/// drawn as a 3x3 marker.
pub fn scatter_plot(series: &[Series<'_>], width: usize, height: usize) -> Image {
    let mut img = Image::new(width, height, [255, 255, 255]);
    let pts = series.iter().flat_map(|(s, _)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return img;
    }
    let (wx, wy) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let (mx, my) = (3.0 / width as f64, 3.0 / height as f64);
    for (s, color) in series {
        for &(x, y) in s.iter() {
            let u = mx + (1.0 - 2.0 * mx) * (x - x0) / wx;
            let v = my + (1.0 - 2.0 * my) * (y - y0) / wy;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    img.plot(u + dx as f64 / width as f64, v + dy as f64 / height as f64, *color);
                }
            }
        }
    }
    img
}

/// Particle simulation flavor of the `simulate` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    Flip,
    MlflipCoupled,
    MlflipSecondary,
}

impl std::str::FromStr for SimMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip" => Ok(SimMode::Flip),
            "mlflip-coupled" => Ok(SimMode::MlflipCoupled),
            "mlflip-secondary" => Ok(SimMode::MlflipSecondary),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected flip, mlflip-coupled or mlflip-secondary)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub mode: SimMode,
    pub frames: usize,
    /// Run the coarse counterpart of the configured scene.
    pub coarse: bool,
    /// Raster size of per-frame PPM images; no images when absent.
    pub image: Option<(usize, usize)>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            mode: SimMode::Flip,
            frames: 30,
            coarse: false,
            image: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// String lengths, m.
    pub lengths: Vec<f64>,
    pub substeps: Vec<usize>,
    pub particles_per_cell: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// Nested training-set sizes.
    pub sizes: Vec<usize>,
    /// Frames recorded per trial for the threshold and size sweeps.
    pub frames: usize,
    /// Scene seeds per experiment point, starting at the run seed.
    pub trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            lengths: (0..8).map(|k| 0.1 + 0.05 * k as f64).collect(),
            substeps: vec![1, 2, 4],
            particles_per_cell: vec![4, 9],
            thresholds: (0..=10).map(|k| k as f64 / 10.0).collect(),
            sizes: vec![1000, 5000, 20000, 40000, 80000],
            frames: 10,
            trials: 4,
        }
    }
}

/// One JSON run configuration. `scene` is the fine (data generation)
/// template; simulation and experiments derive coarse scenes from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig<const D: usize> {
    pub dim: usize,
    pub seed: u64,
    /// Number of randomized scenes for data generation, seeds `seed..`.
    pub scenes: usize,
    pub scene: SceneConfig<D>,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub simulate: SimulateConfig,
    pub experiment: ExperimentConfig,
}

impl<const D: usize> RunConfig<D> {
    pub fn new(scene: SceneConfig<D>) -> Self {
        Self {
            dim: D,
            seed: 0,
            scenes: 10,
            scene,
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            simulate: SimulateConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.scenes as u64).map(|k| self.seed + k).collect()
    }

    /// Seeds of the experiment trials.
    pub fn trial_seeds(&self) -> Vec<u64> {
        (0..self.experiment.trials as u64).map(|k| self.seed + k).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        if self.scenes == 0 {
            return Err(Error::Config("scenes must be at least 1".into()));
        }
        if self.experiment.trials == 0 {
            return Err(Error::Config("experiment.trials must be at least 1".into()));
        }
        Ok(())
    }
}

/// A run configuration of either dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyConfig {
    D2(RunConfig<2>),
    D3(RunConfig<3>),
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn typed<const D: usize>(user: Value) -> Result<RunConfig<D>> {
    let scene = user
        .get("scene")
        .ok_or_else(|| Error::Config("missing field `scene`".into()))?;
    let field = |name: &str| {
        scene
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing field `scene.{name}`")))
    };
    let path_err = |e: serde_path_to_error::Error<serde_json::Error>| {
        Error::Config(format!("field `{}`: {}", e.path(), e.inner()))
    };
    let kind: SceneKind = serde_path_to_error::deserialize(field("kind")?).map_err(|e| {
        Error::Config(format!("field `scene.kind`: {}", e.inner()))
    })?;
    let res: Vec<usize> = serde_json::from_value(field("res")?)
        .map_err(|e| Error::Config(format!("field `scene.res`: {e}")))?;
    let res: [usize; D] = res
        .try_into()
        .map_err(|r: Vec<usize>| Error::Config(format!("field `scene.res`: expected {D} values, found {}", r.len())))?;
    let h: f64 = serde_json::from_value(field("h")?).map_err(|e| Error::Config(format!("field `scene.h`: {e}")))?;
    let mut base = serde_json::to_value(RunConfig::new(SceneConfig::<D>::new(kind, res, h)))?;
    merge(&mut base, user);
    let cfg: RunConfig<D> = serde_path_to_error::deserialize(base).map_err(path_err)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a JSON run configuration. Omitted fields take the defaults of a
/// scene with the given `scene.kind`, `scene.res` and `scene.h`. Syntax
/// errors report line and column, schema errors the field path.
pub fn parse_config(text: &str) -> Result<AnyConfig> {
    let user: Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let dim = user
        .get("dim")
        .ok_or_else(|| Error::Config("missing field `dim`".into()))?
        .as_u64();
    match dim {
        Some(2) => Ok(AnyConfig::D2(typed(user)?)),
        Some(3) => Ok(AnyConfig::D3(typed(user)?)),
        _ => Err(Error::Config("field `dim`: expected 2 or 3".into())),
    }
}

pub fn load_config(path: &Path) -> Result<AnyConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// Record written before a command produces any output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: Value,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: Option<u64>,
    pub out_dir: String,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Mlp;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_dataset() -> Dataset {
        let mut d = Dataset::new(2, false);
        let x: Vec<f32> = (0..d.feature_len).map(|k| k as f32 * 0.25 - 1.0).collect();
        d.push(&x, 1, &[0.5, -1.5], 0.01).unwrap();
        d.push(&x, 0, &[0.0, 0.0], 0.01).unwrap();
        d
    }

    #[test]
    fn dataset_round_trip_and_layout() {
        let d = sample_dataset();
        let b = dataset_to_bytes(&d).unwrap();
        let per = 4 * d.feature_len + 1 + 4 * 2 + 4;
        assert_eq!(b.len(), 9 + 4 + 1 + 1 + 4 + 8 + 8 + 2 * per);
        assert_eq!(&b[..9], b"MLSPLASH1");
        assert_eq!(u32::from_le_bytes(b[9..13].try_into().unwrap()), 1);
        assert_eq!(dataset_from_bytes(&b).unwrap(), d);
    }

    #[test]
    fn dataset_version_and_magic_errors() {
        let mut b = dataset_to_bytes(&sample_dataset()).unwrap();
        b[9] = 2;
        let e = dataset_from_bytes(&b).unwrap_err();
        assert!(matches!(e, Error::Version { found: 2, expected: 1, .. }), "{e}");
        assert!(e.to_string().contains("found 2, expected 1"));
        b[0] = b'X';
        assert!(matches!(dataset_from_bytes(&b), Err(Error::BadMagic { .. })));
        let ok = dataset_to_bytes(&sample_dataset()).unwrap();
        assert!(matches!(dataset_from_bytes(&ok[..ok.len() - 1]), Err(Error::Malformed(_))));
    }

    #[test]
    fn model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = ModelBundle::zeros(3, true);
        m.classifier = Mlp::new(m.feature_len, 2, Head::Softmax2, true, &mut rng);
        m.mean_net = Mlp::new(m.feature_len, 3, Head::Linear, true, &mut rng);
        m.var_net = Mlp::new(m.feature_len, 3, Head::Linear, false, &mut rng);
        m.classifier.running_mean[1] = 0.25;
        m.feature_std[0] = 2.0;
        let b = model_to_bytes(&m).unwrap();
        assert_eq!(&b[..9], b"MLSPLMDL1");
        assert_eq!(model_from_bytes(&b).unwrap(), m);
        let mut old = b.clone();
        old[9..13].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(model_from_bytes(&old), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn empty_frame_is_valid() {
        let f = FrameDump::from_particles::<2>(&[]);
        let b = f.to_bytes().unwrap();
        assert_eq!(b.len(), 9 + 4 + 1 + 8);
        assert_eq!(FrameDump::from_bytes(&b).unwrap(), f);
    }

    #[test]
    fn image_size_is_fixed() {
        let ps: Vec<Particle<2>> = (0..50)
            .map(|k| Particle::new(k, [k as f64 * 0.01, 0.5], [0.0; 2], Role::Bulk))
            .collect();
        for n in [0, 1, 50] {
            let img = render_particles(&ps[..n], [1.0, 1.0], 64, 48);
            let ppm = img.to_ppm();
            assert!(ppm.starts_with(b"P6\n64 48\n255\n"));
            assert_eq!(ppm.len(), "P6\n64 48\n255\n".len() + 64 * 48 * 3);
        }
    }

    #[test]
    fn role_colors_are_drawn() {
        let mut ps = vec![Particle::new(0, [0.25, 0.25], [0.0; 2], Role::Bulk)];
        ps.push(Particle::new(1, [0.75, 0.75], [0.0; 2], Role::Secondary));
        let img = render_particles(&ps, [1.0, 1.0], 4, 4);
        assert_eq!(img.pixels[3 * 4 + 1], BULK_COLOR);
        assert_eq!(img.pixels[4 + 3], SECONDARY_COLOR);
    }

    #[test]
    fn config_defaults_and_overrides() {
        let text = r#"{"dim": 2, "seed": 5, "scene": {"kind": "liquid_string", "res": [64, 16], "h": 0.005,
            "params": {"surface_tension": 0.073}}, "train": {"iterations": 10}}"#;
        let AnyConfig::D2(c) = parse_config(text).unwrap() else { panic!() };
        assert_eq!(c.seed, 5);
        assert_eq!(c.scene.params.surface_tension, 0.073);
        assert_eq!(c.scene.params.frame_dt, 1.0 / 30.0);
        assert_eq!(c.scene.droplet_radius, (0.01, 0.02));
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        let back = serde_json::to_string(&c).unwrap();
        assert_eq!(parse_config(&back).unwrap(), AnyConfig::D2(c));
    }

    #[test]
    fn config_errors_name_line_or_field() {
        let e = parse_config("{\n\"dim\": 2,\n\"scene\": }").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let e = parse_config(r#"{"dim": 2, "scene": {"kind": "pool", "res": [8, 8], "h": 0.1, "jiter": 1}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("jiter"), "{e}");
        let e = parse_config(r#"{"dim": 2, "scene": {"kind": "pool", "res": [8, 8], "h": 0.1, "params": {"gravity": [1, 2, 3]}}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("scene.params.gravity"), "{e}");
        let e = parse_config(r#"{"dim": 2, "scene": {"kind": "pool", "res": [8], "h": 0.1}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("scene.res"), "{e}");
    }

    #[test]
    fn sim_mode_names() {
        for (s, m) in [
            ("flip", SimMode::Flip),
            ("mlflip-coupled", SimMode::MlflipCoupled),
            ("mlflip-secondary", SimMode::MlflipSecondary),
        ] {
            assert_eq!(s.parse::<SimMode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), Value::String(s.into()));
        }
        assert!("fast".parse::<SimMode>().is_err());
    }

    proptest! {
        #[test]
        fn frame_round_trip_is_exact(
            raw in proptest::collection::vec((any::<f32>(), any::<f32>(), any::<f32>(), 0u8..3, any::<u64>()), 0..40)
        ) {
            let f = FrameDump {
                dim: 3,
                positions: raw.iter().flat_map(|r| [r.0, r.1, r.2]).collect(),
                velocities: raw.iter().flat_map(|r| [r.2, r.0, r.1]).collect(),
                roles: raw.iter().map(|r| Role::from_u8(r.3).unwrap()).collect(),
                ids: raw.iter().map(|r| r.4).collect(),
            };
            let g = FrameDump::from_bytes(&f.to_bytes().unwrap()).unwrap();
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&g.positions), bits(&f.positions));
            prop_assert_eq!(bits(&g.velocities), bits(&f.velocities));
            prop_assert_eq!(g.roles, f.roles);
            prop_assert_eq!(g.ids, f.ids);
        }

        #[test]
        fn dataset_round_trip_is_exact(rows in proptest::collection::vec((proptest::collection::vec(-1e3f32..1e3, 28), any::<bool>(), -10f32..10.0, -10f32..10.0), 0..20)) {
            let mut d = Dataset::new(2, true);
            for (x, pos, a, b) in &rows {
                let dv = if *pos { [*a, *b] } else { [0.0, 0.0] };
                d.push(x, *pos as u8, &dv, 0.02).unwrap();
            }
            prop_assert_eq!(dataset_from_bytes(&dataset_to_bytes(&d).unwrap()).unwrap(), d);
        }
    }
}
