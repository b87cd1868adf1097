//! Two-layer perceptrons for splash classification and velocity modification.
//!
//! Every network maps `x -> tanh(BN(W1 x + b1)) -> W2 h + b2`, with a hidden
//! layer twice as wide as the input. The classifier ends in a two-way softmax
//! (component 0 = splash); the modifier is a pair of networks predicting the
//! mean `mu` and `s = ln sigma^2` of a Gaussian velocity change.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Softmax2,
    Linear,
}

/// How batch norm and dropout behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Batch statistics (running statistics updated) and dropout with the given rate.
    Train { dropout: f64 },
    /// Running statistics, no dropout.
    Eval,
}

/// Parameters live in one flat vector: `W1 (H x I)`, `b1 (H)`, then
/// `gamma (H)`, `beta (H)` when batch norm is on, then `W2 (O x H)`, `b2 (O)`.
/// Matrices are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub head: Head,
    pub batch_norm: bool,
    pub params: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

/// Offsets of the parameter blocks inside [`Mlp::params`].
#[derive(Clone, Copy, Debug)]
struct Layout {
    w1: usize,
    b1: usize,
    gamma: usize,
    beta: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Cache {
    n: usize,
    x: Vec<f64>,
    zhat: Vec<f64>,
    inv_std: Vec<f64>,
    t: Vec<f64>,
    mask: Vec<f64>,
    hidden: Vec<f64>,
    train_bn: bool,
}

impl Mlp {
    /// Zero-initialized network with hidden width `2 * n_in`.
    pub fn zeros(n_in: usize, n_out: usize, head: Head, batch_norm: bool) -> Self {
        let n_hidden = 2 * n_in;
        let mut net = Self {
            n_in,
            n_hidden,
            n_out,
            head,
            batch_norm,
            params: Vec::new(),
            running_mean: vec![0.0; n_hidden],
            running_var: vec![1.0; n_hidden],
            momentum: BN_MOMENTUM,
        };
        let l = net.layout();
        net.params = vec![0.0; l.len];
        if batch_norm {
            net.params[l.gamma..l.gamma + n_hidden].iter_mut().for_each(|g| *g = 1.0);
        }
        net
    }

    /// Xavier-uniform weights, zero biases, unit batch-norm gain.
    pub fn new<R: Rng>(n_in: usize, n_out: usize, head: Head, batch_norm: bool, rng: &mut R) -> Self {
        let mut net = Self::zeros(n_in, n_out, head, batch_norm);
        let l = net.layout();
        let h = net.n_hidden;
        let a1 = (6.0 / (n_in + h) as f64).sqrt();
        for w in &mut net.params[l.w1..l.w1 + h * n_in] {
            *w = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (h + n_out) as f64).sqrt();
        for w in &mut net.params[l.w2..l.w2 + n_out * h] {
            *w = rng.random_range(-a2..a2);
        }
        net
    }

    fn layout(&self) -> Layout {
        let (i, h, o) = (self.n_in, self.n_hidden, self.n_out);
        let w1 = 0;
        let b1 = w1 + h * i;
        let gamma = b1 + h;
        let beta = gamma + if self.batch_norm { h } else { 0 };
        let w2 = beta + if self.batch_norm { h } else { 0 };
        let b2 = w2 + o * h;
        Layout {
            w1,
            b1,
            gamma,
            beta,
            w2,
            b2,
            len: b2 + o,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len
    }

    /// Mask of parameters subject to weight decay (the two weight matrices).
    pub fn decay_mask(&self) -> Vec<bool> {
        let l = self.layout();
        (0..l.len)
            .map(|k| (l.w1..l.b1).contains(&k) || (l.w2..l.b2).contains(&k))
            .collect()
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.params[l.w1..l.b1]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.params[l.b1..l.gamma]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.params[l.w2..l.b2]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.params[l.b2..l.len]
    }

    /// Raw outputs (logits or linear values) for `n` row-major inputs.
    pub fn forward<R: Rng>(&mut self, x: &[f64], mode: Mode, rng: &mut R, cache: &mut Cache) -> Vec<f64> {
        let (ni, nh, no) = (self.n_in, self.n_hidden, self.n_out);
        let n = x.len() / ni;
        let l = self.layout();
        let p = &self.params;
        let mut z = vec![0.0; n * nh];
        for i in 0..n {
            let xi = &x[i * ni..(i + 1) * ni];
            for j in 0..nh {
                let w = &p[l.w1 + j * ni..l.w1 + (j + 1) * ni];
                z[i * nh + j] = p[l.b1 + j] + dot(w, xi);
            }
        }
        let train_bn = self.batch_norm && matches!(mode, Mode::Train { .. });
        let mut inv_std = vec![1.0; nh];
        let mut a = z;
        if self.batch_norm {
            let (mean, var) = if train_bn {
                let mut mean = vec![0.0; nh];
                let mut var = vec![0.0; nh];
                for i in 0..n {
                    for j in 0..nh {
                        mean[j] += a[i * nh + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for i in 0..n {
                    for j in 0..nh {
                        let d = a[i * nh + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                for j in 0..nh {
                    self.running_mean[j] = self.momentum * self.running_mean[j] + (1.0 - self.momentum) * mean[j];
                    self.running_var[j] = self.momentum * self.running_var[j] + (1.0 - self.momentum) * var[j];
                }
                (mean, var)
            } else {
                (self.running_mean.clone(), self.running_var.clone())
            };
            for j in 0..nh {
                inv_std[j] = 1.0 / (var[j] + BN_EPS).sqrt();
            }
            for i in 0..n {
                for j in 0..nh {
                    a[i * nh + j] = (a[i * nh + j] - mean[j]) * inv_std[j];
                }
            }
        }
        let zhat = a.clone();
        if self.batch_norm {
            for i in 0..n {
                for j in 0..nh {
                    a[i * nh + j] = p[l.gamma + j] * a[i * nh + j] + p[l.beta + j];
                }
            }
        }
        let t: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
        let mut mask = Vec::new();
        let mut hidden = t.clone();
        if let Mode::Train { dropout } = mode {
            if dropout > 0.0 {
                let keep = 1.0 - dropout;
                mask = (0..n * nh)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                hidden.iter_mut().zip(&mask).for_each(|(h, m)| *h *= m);
            }
        }
        let mut y = vec![0.0; n * no];
        for i in 0..n {
            let hi = &hidden[i * nh..(i + 1) * nh];
            for o in 0..no {
                let w = &p[l.w2 + o * nh..l.w2 + (o + 1) * nh];
                y[i * no + o] = p[l.b2 + o] + dot(w, hi);
            }
        }
        *cache = Cache {
            n,
            x: x.to_vec(),
            zhat,
            inv_std,
            t,
            mask,
            hidden,
            train_bn,
        };
        y
    }

    /// Inference on one or more inputs (running statistics, no dropout).
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut net = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.forward(x, Mode::Eval, &mut rng, &mut Cache::default())
    }

    /// Gradient of the loss with respect to all parameters, given the loss
    /// gradient `dy` with respect to the raw outputs of the cached pass.
    pub fn backward(&self, cache: &Cache, dy: &[f64]) -> Vec<f64> {
        let (ni, nh, no) = (self.n_in, self.n_hidden, self.n_out);
        let n = cache.n;
        let l = self.layout();
        let p = &self.params;
        let mut g = vec![0.0; l.len];
        let mut dh = vec![0.0; n * nh];
        for i in 0..n {
            let hi = &cache.hidden[i * nh..(i + 1) * nh];
            for o in 0..no {
                let d = dy[i * no + o];
                if d == 0.0 {
                    continue;
                }
                g[l.b2 + o] += d;
                axpy(&mut g[l.w2 + o * nh..l.w2 + (o + 1) * nh], d, hi);
                axpy(&mut dh[i * nh..(i + 1) * nh], d, &p[l.w2 + o * nh..l.w2 + (o + 1) * nh]);
            }
        }
        // through dropout and tanh
        for k in 0..n * nh {
            if !cache.mask.is_empty() {
                dh[k] *= cache.mask[k];
            }
            dh[k] *= 1.0 - cache.t[k] * cache.t[k];
        }
        let mut dz = dh;
        if self.batch_norm {
            for i in 0..n {
                for j in 0..nh {
                    let da = dz[i * nh + j];
                    g[l.gamma + j] += da * cache.zhat[i * nh + j];
                    g[l.beta + j] += da;
                }
            }
            if cache.train_bn {
                let mut mean_d = vec![0.0; nh];
                let mut mean_dz = vec![0.0; nh];
                for i in 0..n {
                    for j in 0..nh {
                        let dzh = dz[i * nh + j] * p[l.gamma + j];
                        mean_d[j] += dzh;
                        mean_dz[j] += dzh * cache.zhat[i * nh + j];
                    }
                }
                for j in 0..nh {
                    mean_d[j] /= n as f64;
                    mean_dz[j] /= n as f64;
                }
                for i in 0..n {
                    for j in 0..nh {
                        let k = i * nh + j;
                        let dzh = dz[k] * p[l.gamma + j];
                        dz[k] = cache.inv_std[j] * (dzh - mean_d[j] - cache.zhat[k] * mean_dz[j]);
                    }
                }
            } else {
                for i in 0..n {
                    for j in 0..nh {
                        dz[i * nh + j] *= p[l.gamma + j] * cache.inv_std[j];
                    }
                }
            }
        }
        for i in 0..n {
            let xi = &cache.x[i * ni..(i + 1) * ni];
            for j in 0..nh {
                let d = dz[i * nh + j];
                g[l.b1 + j] += d;
                axpy(&mut g[l.w1 + j * ni..l.w1 + (j + 1) * ni], d, xi);
            }
        }
        g
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Two-way softmax of logits `(l0, l1)`.
pub fn softmax2(l0: f64, l1: f64) -> [f64; 2] {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Mean negative log-probability of the true class. `logits` holds pairs
/// (splash, non-splash); label 1 selects the splash component. Returns the
/// loss and its gradient with respect to the logits.
pub fn loss_classification(logits: &[f64], labels: &[u8]) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; 2 * n];
    for i in 0..n {
        let p = softmax2(logits[2 * i], logits[2 * i + 1]);
        let k = if labels[i] == 1 { 0 } else { 1 };
        // log-sum-exp form stays finite for confident predictions
        let m = logits[2 * i].max(logits[2 * i + 1]);
        let lse = m + ((logits[2 * i] - m).exp() + (logits[2 * i + 1] - m).exp()).ln();
        loss += lse - logits[2 * i + k];
        for c in 0..2 {
            grad[2 * i + c] = (p[c] - f64::from(u8::from(c == k))) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Classification loss from probabilities of the true class.
pub fn loss_from_probabilities(p_true: &[f64]) -> f64 {
    -p_true.iter().map(|p| p.ln()).sum::<f64>() / p_true.len() as f64
}

/// Gaussian negative log-likelihood `1/2 sum_j ((dv - mu)^2 / sigma^2 + ln sigma^2)`
/// averaged over the batch, with `s = ln sigma^2`. Returns the loss and the
/// gradients with respect to `mu` and `s`.
pub fn loss_mve(mu: &[f64], s: &[f64], dv: &[f64], n: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut loss = 0.0;
    let mut gmu = vec![0.0; mu.len()];
    let mut gs = vec![0.0; s.len()];
    for k in 0..mu.len() {
        let r = dv[k] - mu[k];
        let inv = (-s[k]).exp();
        loss += 0.5 * (r * r * inv + s[k]);
        gmu[k] = -r * inv / n as f64;
        gs[k] = 0.5 * (1.0 - r * r * inv) / n as f64;
    }
    (loss / n as f64, gmu, gs)
}

/// Trained networks plus the feature normalization they expect.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub dim: usize,
    pub feature_len: usize,
    pub scale_feature: bool,
    pub provenance: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub classifier: Mlp,
    pub mean_net: Mlp,
    pub var_net: Mlp,
}

impl ModelBundle {
    /// Networks with all-zero weights and identity normalization.
    pub fn zeros(dim: usize, scale_feature: bool) -> Self {
        let feature_len = crate::datagen::feature_len(dim, scale_feature);
        Self {
            dim,
            feature_len,
            scale_feature,
            provenance: Vec::new(),
            feature_mean: vec![0.0; feature_len],
            feature_std: vec![1.0; feature_len],
            classifier: Mlp::zeros(feature_len, 2, Head::Softmax2, true),
            mean_net: Mlp::zeros(feature_len, dim, Head::Linear, true),
            var_net: Mlp::zeros(feature_len, dim, Head::Linear, true),
        }
    }

    fn check(&self, x: &[f64]) -> Result<usize> {
        if x.is_empty() || !x.len().is_multiple_of(self.feature_len) {
            return Err(Error::FeatureLength {
                expected: self.feature_len,
                found: x.len(),
            });
        }
        Ok(x.len() / self.feature_len)
    }

    /// z-score normalized copy of row-major features.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let f = self.feature_len;
        x.iter()
            .enumerate()
            .map(|(k, v)| (v - self.feature_mean[k % f]) / self.feature_std[k % f])
            .collect()
    }

    /// `(p_splash, p_nonsplash)` for every input row.
    pub fn classify(&self, x: &[f64]) -> Result<Vec<[f64; 2]>> {
        let n = self.check(x)?;
        let y = self.classifier.predict(&self.normalize(x));
        Ok((0..n).map(|i| softmax2(y[2 * i], y[2 * i + 1])).collect())
    }

    /// `(mu, sigma^2)` rows of length `dim` for every input row.
    pub fn modify(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(x)?;
        let xn = self.normalize(x);
        let mu = self.mean_net.predict(&xn);
        let var = self.var_net.predict(&xn).into_iter().map(f64::exp).collect();
        Ok((mu, var))
    }
}

pub fn forward_classifier(bundle: &ModelBundle, x: &[f64]) -> Result<[f64; 2]> {
    if x.len() != bundle.feature_len {
        return Err(Error::FeatureLength {
            expected: bundle.feature_len,
            found: x.len(),
        });
    }
    Ok(bundle.classify(x)?[0])
}

pub fn forward_modifier(bundle: &ModelBundle, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != bundle.feature_len {
        return Err(Error::FeatureLength {
            expected: bundle.feature_len,
            found: x.len(),
        });
    }
    bundle.modify(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub phase1_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Iterations between learning-curve points.
    pub eval_every: usize,
    /// Cap on the samples used to evaluate one curve point.
    pub eval_samples: usize,
    pub batch_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 60_000,
            batch_size: 5000,
            learning_rate: 1e-4,
            weight_decay: 1e-1,
            dropout: 1e-1,
            phase1_fraction: 0.5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eval_every: 1000,
            eval_samples: 20_000,
            batch_norm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phase1_fraction > 0.0 && self.phase1_fraction < 1.0) {
            return Err(Error::Config(format!(
                "phase1_fraction must lie in (0, 1), got {}",
                self.phase1_fraction
            )));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.eval_every == 0 {
            return Err(Error::Config("iterations, batch_size and eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// ADAM with decoupled weight decay on the masked parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    decay: Vec<bool>,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Self {
            m: vec![0.0; net.num_params()],
            v: vec![0.0; net.num_params()],
            t: 0,
            decay: net.decay_mask(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * grad[k];
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let step = (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + cfg.epsilon);
            let decay = if self.decay[k] { cfg.weight_decay * params[k] } else { 0.0 };
            params[k] -= cfg.learning_rate * (step + decay);
        }
    }
}

/// One learning-curve point. Accuracy uses a 0.5 probability cut.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_lm: f64,
    pub test_lm: f64,
}

/// Cycles through a shuffled index list, reshuffling after every pass.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(mut order: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Dense normalized copy of a dataset.
struct Table {
    f: usize,
    dim: usize,
    x: Vec<f64>,
    labels: Vec<u8>,
    dv: Vec<f64>,
}

impl Table {
    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<u8>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * self.f);
        let mut l = Vec::with_capacity(idx.len());
        let mut dv = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.f..(i + 1) * self.f]);
            l.push(self.labels[i]);
            dv.extend_from_slice(&self.dv[i * self.dim..(i + 1) * self.dim]);
        }
        (x, l, dv)
    }
}

fn evaluate(bundle: &ModelBundle, table: &Table, idx: &[usize], positives: &[usize]) -> (f64, f64) {
    let acc = if idx.is_empty() {
        f64::NAN
    } else {
        let (x, l, _) = table.gather(idx);
        let y = bundle.classifier.predict(&x);
        let correct = (0..l.len())
            .filter(|&i| {
                let p = softmax2(y[2 * i], y[2 * i + 1]);
                (p[0] > 0.5) == (l[i] == 1)
            })
            .count();
        correct as f64 / l.len() as f64
    };
    let lm = if positives.is_empty() {
        f64::NAN
    } else {
        let (x, _, dv) = table.gather(positives);
        let mu = bundle.mean_net.predict(&x);
        let s = bundle.var_net.predict(&x);
        loss_mve(&mu, &s, &dv, positives.len()).0
    };
    (acc, lm)
}

/// Train classifier and modifier networks on a balanced dataset.
///
/// Samples are split 75/25 by a seeded shuffle. The classifier sees every
/// training sample and the modifier only the positives. During the first
/// `phase1_fraction` of the iterations the variance network is frozen and the
/// mean network is trained with `sigma^2 = 1`; afterwards all three networks
/// train on the full likelihood.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, Vec<CurvePoint>)> {
    cfg.validate()?;
    let n = data.len();
    if data.n_positive() < 2 || data.n_negative() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least two samples per class, got {} positive and {} negative",
            data.n_positive(),
            data.n_negative()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * 0.75).round() as usize;
    let (train_idx, test_idx) = order.split_at(n_train.clamp(1, n));
    let train_pos: Vec<usize> = train_idx.iter().copied().filter(|&i| data.labels[i] == 1).collect();
    let test_pos: Vec<usize> = test_idx.iter().copied().filter(|&i| data.labels[i] == 1).collect();
    if train_pos.is_empty() || train_pos.len() == train_idx.len() {
        return Err(Error::Degenerate("training split lacks one of the classes".into()));
    }

    let f = data.feature_len;
    let mut mean = vec![0.0; f];
    let mut sq = vec![0.0; f];
    for &i in train_idx {
        for (k, &v) in data.sample(i).x.iter().enumerate() {
            mean[k] += v as f64;
            sq[k] += (v as f64) * (v as f64);
        }
    }
    let m = train_idx.len() as f64;
    let std: Vec<f64> = (0..f)
        .map(|k| {
            mean[k] /= m;
            let var = (sq[k] / m - mean[k] * mean[k]).max(0.0);
            if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let table = Table {
        f,
        dim: data.dim,
        x: data
            .features
            .iter()
            .enumerate()
            .map(|(k, &v)| (v as f64 - mean[k % f]) / std[k % f])
            .collect(),
        labels: data.labels.clone(),
        dv: data.dv.iter().map(|&v| v as f64).collect(),
    };

    let mut var_net = Mlp::new(f, data.dim, Head::Linear, cfg.batch_norm, &mut rng);
    // start the variance at exactly 1
    var_net.w2_mut().iter_mut().for_each(|w| *w = 0.0);
    let mut bundle = ModelBundle {
        dim: data.dim,
        feature_len: f,
        scale_feature: data.scale_feature,
        provenance: data.provenance.clone(),
        feature_mean: mean,
        feature_std: std,
        classifier: Mlp::new(f, 2, Head::Softmax2, cfg.batch_norm, &mut rng),
        mean_net: Mlp::new(f, data.dim, Head::Linear, cfg.batch_norm, &mut rng),
        var_net,
    };
    let mut opt_c = Adam::new(&bundle.classifier);
    let mut opt_m = Adam::new(&bundle.mean_net);
    let mut opt_v = Adam::new(&bundle.var_net);
    let mut all = Batcher::new(train_idx.to_vec(), &mut rng);
    let mut pos = Batcher::new(train_pos.clone(), &mut rng);
    let phase1 = ((cfg.iterations as f64) * cfg.phase1_fraction).round() as usize;
    let mode = Mode::Train { dropout: cfg.dropout };
    let eval_train: Vec<usize> = train_idx.iter().copied().take(cfg.eval_samples).collect();
    let eval_train_pos: Vec<usize> = train_pos.iter().copied().take(cfg.eval_samples).collect();
    let eval_test: Vec<usize> = test_idx.iter().copied().take(cfg.eval_samples).collect();
    let eval_test_pos: Vec<usize> = test_pos.iter().copied().take(cfg.eval_samples).collect();
    let mut curves = Vec::new();
    let mut cache = Cache::default();
    let mut cache_v = Cache::default();

    for it in 0..cfg.iterations {
        let idx = all.next(cfg.batch_size, &mut rng);
        let (x, l, _) = table.gather(&idx);
        let y = bundle.classifier.forward(&x, mode, &mut rng, &mut cache);
        let (_, dy) = loss_classification(&y, &l);
        let g = bundle.classifier.backward(&cache, &dy);
        opt_c.step(&mut bundle.classifier.params, &g, cfg);

        let idx = pos.next(cfg.batch_size, &mut rng);
        let (x, _, dv) = table.gather(&idx);
        let mu = bundle.mean_net.forward(&x, mode, &mut rng, &mut cache);
        if it < phase1 {
            let s = vec![0.0; mu.len()];
            let (_, gmu, _) = loss_mve(&mu, &s, &dv, idx.len());
            let g = bundle.mean_net.backward(&cache, &gmu);
            opt_m.step(&mut bundle.mean_net.params, &g, cfg);
        } else {
            let s = bundle.var_net.forward(&x, mode, &mut rng, &mut cache_v);
            let (_, gmu, gs) = loss_mve(&mu, &s, &dv, idx.len());
            let g = bundle.mean_net.backward(&cache, &gmu);
            opt_m.step(&mut bundle.mean_net.params, &g, cfg);
            let g = bundle.var_net.backward(&cache_v, &gs);
            opt_v.step(&mut bundle.var_net.params, &g, cfg);
        }

        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations {
            let (train_acc, train_lm) = evaluate(&bundle, &table, &eval_train, &eval_train_pos);
            let (test_acc, test_lm) = evaluate(&bundle, &table, &eval_test, &eval_test_pos);
            log::debug!("iteration {} train acc {train_acc:.4} test acc {test_acc:.4} Lm {train_lm:.4}/{test_lm:.4}", it + 1);
            curves.push(CurvePoint {
                iteration: it + 1,
                train_acc,
                test_acc,
                train_lm,
                test_lm,
            });
        }
    }
    let finite = |net: &Mlp| net.params.iter().all(|p| p.is_finite());
    if !(finite(&bundle.classifier) && finite(&bundle.mean_net) && finite(&bundle.var_net)) {
        return Err(Error::Degenerate("training diverged to non-finite parameters".into()));
    }
    Ok((bundle, curves))
}

/// Learning curves as CSV.
pub fn curves_csv(curves: &[CurvePoint]) -> String {
    let mut s = String::from("iteration,train_acc,test_acc,train_Lm,test_Lm\n");
    for c in curves {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            c.iteration, c.train_acc, c.test_acc, c.train_lm, c.test_lm
        ));
    }
    s
}

/// Loss used by [`gradient_check`].
#[derive(Clone, Copy, Debug)]
pub enum CheckLoss<'a> {
    /// Softmax cross-entropy with the given labels.
    Softmax(&'a [u8]),
    /// Likelihood with respect to the mean network; `other` is the variance network.
    MveMean { other: &'a Mlp, dv: &'a [f64] },
    /// Likelihood with respect to the variance network; `other` is the mean network.
    MveVar { other: &'a Mlp, dv: &'a [f64] },
}

fn eval_loss(net: &Mlp, loss: CheckLoss, x: &[f64]) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut probe = net.clone();
    let mut cache = Cache::default();
    let y = probe.forward(x, Mode::Eval, &mut rng, &mut cache);
    let n = x.len() / net.n_in;
    let dy = match loss {
        CheckLoss::Softmax(labels) => {
            let (l, g) = loss_classification(&y, labels);
            return (l, net.backward(&cache, &g));
        }
        CheckLoss::MveMean { other, dv } => {
            let s = other.predict(x);
            let (l, gmu, _) = loss_mve(&y, &s, dv, n);
            (l, gmu)
        }
        CheckLoss::MveVar { other, dv } => {
            let mu = other.predict(x);
            let (l, _, gs) = loss_mve(&mu, &y, dv, n);
            (l, gs)
        }
    };
    (dy.0, net.backward(&cache, &dy.1))
}

/// Largest relative difference between the analytic gradient and central
/// finite differences over all parameters of `net`, evaluated with frozen
/// batch-norm statistics and no dropout. The step is `1e-5 * max(1, |p|)`.
pub fn gradient_check(net: &Mlp, loss: CheckLoss, x: &[f64]) -> f64 {
    let (_, analytic) = eval_loss(net, loss, x);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for k in 0..net.num_params() {
        let p0 = net.params[k];
        let step = 1e-5 * p0.abs().max(1.0);
        probe.params[k] = p0 + step;
        let (lp, _) = eval_loss(&probe, loss, x);
        probe.params[k] = p0 - step;
        let (lm, _) = eval_loss(&probe, loss, x);
        probe.params[k] = p0;
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, head: Head) -> Mlp {
        let mut net = Mlp::new(n_in, n_out, head, true, rng);
        for p in net.params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        for j in 0..net.n_hidden {
            net.running_mean[j] = rng.random_range(-0.5..0.5);
            net.running_var[j] = rng.random_range(0.5..2.0);
        }
        net
    }

    #[test]
    fn zero_network_outputs() {
        let b = ModelBundle::zeros(2, false);
        let x = vec![0.3; 27];
        assert_eq!(forward_classifier(&b, &x).unwrap(), [0.5, 0.5]);
        let (mu, var) = forward_modifier(&b, &x).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(var, vec![1.0, 1.0]);
        assert!(matches!(
            forward_classifier(&b, &[0.0; 5]),
            Err(Error::FeatureLength { expected: 27, found: 5 })
        ));
    }

    #[test]
    fn micro_network_matches_hand_computation() {
        // one input, two hidden units, no batch norm
        let mut net = Mlp::zeros(1, 2, Head::Softmax2, false);
        net.w1_mut().copy_from_slice(&[0.5, -1.5]);
        net.b1_mut().copy_from_slice(&[0.1, 0.2]);
        net.w2_mut().copy_from_slice(&[1.0, 2.0, -0.5, 0.25]);
        net.b2_mut().copy_from_slice(&[0.05, -0.05]);
        let x = 0.7f64;
        let h0 = (0.5 * x + 0.1).tanh();
        let h1 = (-1.5 * x + 0.2).tanh();
        let l0 = 1.0 * h0 + 2.0 * h1 + 0.05;
        let l1 = -0.5 * h0 + 0.25 * h1 - 0.05;
        let p0 = l0.exp() / (l0.exp() + l1.exp());
        let mut b = ModelBundle::zeros(1, false);
        b.feature_len = 1;
        b.feature_mean = vec![0.0];
        b.feature_std = vec![1.0];
        b.classifier = net.clone();
        let y = forward_classifier(&b, &[x]).unwrap();
        assert!((y[0] - p0).abs() < 1e-12 && (y[1] - (1.0 - p0)).abs() < 1e-12);

        let mut v = net.clone();
        v.head = Head::Linear;
        b.var_net = v;
        b.mean_net = net.clone();
        b.dim = 2;
        let (mu, var) = forward_modifier(&b, &[x]).unwrap();
        assert!((mu[0] - l0).abs() < 1e-12 && (mu[1] - l1).abs() < 1e-12);
        assert!((var[0] - l0.exp()).abs() < 1e-12 && (var[1] - l1.exp()).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_inference_uses_running_statistics() {
        let mut net = Mlp::zeros(1, 1, Head::Linear, true);
        net.w1_mut().copy_from_slice(&[1.0, 0.0]);
        net.w2_mut().copy_from_slice(&[1.0, 0.0]);
        net.running_mean = vec![0.2, 0.0];
        net.running_var = vec![4.0, 1.0];
        let y = net.predict(&[1.0]);
        let expect = ((1.0f64 - 0.2) / (4.0 + BN_EPS).sqrt()).tanh();
        assert!((y[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = rng.random_range(-50.0..50.0);
            let b = rng.random_range(-50.0..50.0);
            let p = softmax2(a, b);
            let q = softmax2(b, a);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert_eq!(p[0], q[1]);
        }
    }

    #[test]
    fn classification_loss_values() {
        assert!((loss_classification(&[0.0, 0.0], &[1]).0 - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss_classification(&[40.0, -40.0], &[1]).0 < 1e-30);
        let expect = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((loss_from_probabilities(&[0.5, 0.25]) - expect).abs() < 1e-15);
        // logits reproducing those probabilities
        let l = [0.0, 0.0, 0.0, 3f64.ln()];
        assert!((loss_classification(&l, &[1, 1]).0 - expect).abs() < 1e-15);
    }

    #[test]
    fn mve_loss_values() {
        assert_eq!(loss_mve(&[1.0], &[0.0], &[1.0], 1).0, 0.0);
        assert_eq!(loss_mve(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], 1).0, 0.5);
        assert!((loss_mve(&[2.0], &[1.0], &[2.0], 1).0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mve_gradients_match_closed_form() {
        let (mu, s, dv) = (0.3, -0.4, 1.1);
        let (_, gmu, gs) = loss_mve(&[mu], &[s], &[dv], 1);
        let var = f64::exp(s);
        assert!((gmu[0] - (mu - dv) / var).abs() < 1e-14);
        assert!((gs[0] - 0.5 * (1.0 - (dv - mu) * (dv - mu) / var)).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let n = 6;
            let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let net = random_net(&mut rng, 3, 2, Head::Softmax2);
            assert!(gradient_check(&net, CheckLoss::Softmax(&labels), &x) < 1e-4);
            let mean = random_net(&mut rng, 3, 2, Head::Linear);
            let var = random_net(&mut rng, 3, 2, Head::Linear);
            let dv: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(gradient_check(&mean, CheckLoss::MveMean { other: &var, dv: &dv }, &x) < 1e-4);
            assert!(gradient_check(&var, CheckLoss::MveVar { other: &mean, dv: &dv }, &x) < 1e-4);
        }
    }

    #[test]
    fn training_mode_batch_norm_gradient() {
        // batch statistics couple the samples; compare against differences
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_net(&mut rng, 2, 2, Head::Softmax2);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [1, 0, 1, 1, 0];
        let loss = |net: &Mlp| {
            let mut n = net.clone();
            let mut c = Cache::default();
            let y = n.forward(&x, Mode::Train { dropout: 0.0 }, &mut ChaCha8Rng::seed_from_u64(0), &mut c);
            let (l, g) = loss_classification(&y, &labels);
            (l, n.backward(&c, &g))
        };
        let (_, g) = loss(&net);
        let mut probe = net.clone();
        for k in 0..net.num_params() {
            let p0 = net.params[k];
            probe.params[k] = p0 + 1e-6;
            let lp = loss(&probe).0;
            probe.params[k] = p0 - 1e-6;
            let lm = loss(&probe).0;
            probe.params[k] = p0;
            let num = (lp - lm) / 2e-6;
            assert!((num - g[k]).abs() < 1e-6 * num.abs().max(1.0), "param {k}: {num} vs {}", g[k]);
        }
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        // a single bias feeding a linear output: L = 1/2 (b - 1)^2 at b = 1
        let mut net = Mlp::zeros(1, 1, Head::Linear, false);
        net.b2_mut()[0] = 1.0;
        let var = Mlp::zeros(1, 1, Head::Linear, false);
        let (_, g) = eval_loss(&net, CheckLoss::MveMean { other: &var, dv: &[1.0] }, &[0.5]);
        assert!(g.iter().all(|v| v.abs() < 1e-8));
    }

    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Dataset::new(1, false);
        d.feature_len = 2;
        for i in 0..n {
            let label = (i % 2) as u8;
            let c = if label == 1 { 1.0 } else { -1.0 };
            let x = [c + rng.random_range(-0.8..0.8), rng.random_range(-1.0..1.0)];
            d.push(&x.map(|v| v as f32), label, &[label as f32], 0.01).unwrap();
        }
        d
    }

    #[test]
    fn separable_data_is_learned() {
        let d = separable(2000, 3);
        let cfg = TrainConfig {
            iterations: 5000,
            batch_size: 64,
            learning_rate: 1e-3,
            eval_every: 1000,
            ..TrainConfig::default()
        };
        let (_, curves) = train(&d, &cfg).unwrap();
        assert!(curves.last().unwrap().test_acc >= 0.98, "{curves:?}");
    }

    #[test]
    fn training_is_reproducible() {
        let d = separable(200, 5);
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: 32,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let a = train(&d, &cfg).unwrap();
        let b = train(&d, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn degenerate_dataset_is_rejected() {
        let mut d = Dataset::new(1, false);
        d.feature_len = 2;
        d.push(&[0.0, 0.0], 1, &[0.0], 0.01).unwrap();
        d.push(&[1.0, 0.0], 0, &[0.0], 0.01).unwrap();
        assert!(matches!(train(&d, &TrainConfig::default()), Err(Error::Degenerate(_))));
    }
}
