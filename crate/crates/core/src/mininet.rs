//! A small dense ReLU classifier trained with minibatch SGD on softmax
//! cross-entropy, with capture of the per-layer dumps the diagnostics need.
//!
//! Layer `l` (1-based) maps the previous layer's outputs to `units_l` values:
//! `z = W h + b`, followed by ReLU on hidden layers. The last layer produces
//! logits and is never pruned. All math is f64; dumps are written as f32.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::LayerDumps;
use crate::dumpio::{ActivationDump, DumpError, GradientDump, ParamDump};
use crate::rng;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FPM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid layer sizes {0:?}: need at least 2 positive sizes")]
    InvalidSizes(Vec<usize>),
    #[error("input has {found} features, network expects {expected}")]
    InputShape { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: u32, classes: usize },
    #[error("empty dataset")]
    EmptyData,
    #[error("learning rate must be finite and non-negative, got {0}")]
    BadLearningRate(f64),
    #[error("batch size must be positive")]
    BadBatchSize,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("class {class} has {count} sample(s) in the pruning split; at least 2 required")]
    SparseClass { class: u32, count: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dump(#[from] DumpError),
}

/// One dense layer; `weights` is row-major `units × fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub units: usize,
    pub fan_in: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn row(&self, unit: usize) -> &[f64] {
        &self.weights[unit * self.fan_in..(unit + 1) * self.fan_in]
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.units).map(|u| {
            self.row(u)
                .iter()
                .zip(x)
                .fold(self.bias[u], |acc, (w, v)| acc + w * v)
        }));
    }

    pub fn param_count(&self) -> usize {
        self.units * self.fan_in + self.units
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniNet {
    pub layers: Vec<Dense>,
    pub seed: u64,
    pub meta: TrainMeta,
}

/// Output of a forward pass: post-ReLU hidden outputs and the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Parameter gradients, same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(net: &MiniNet) -> Self {
        Gradients {
            weights: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.units]).collect(),
        }
    }
}

/// `-log softmax(logits)[label]`, computed stably.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl MiniNet {
    /// He-style uniform init: `W ~ U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<MiniNet, NetError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NetError::InvalidSizes(sizes.to_vec()));
        }
        let mut r = rng::stream(seed, "init");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, units) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                Dense {
                    units,
                    fan_in,
                    weights: (0..units * fan_in)
                        .map(|_| r.random_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; units],
                }
            })
            .collect();
        Ok(MiniNet {
            layers,
            seed,
            meta: TrainMeta::default(),
        })
    }

    /// `[p, h₁, …, h_L, K]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].fan_in];
        s.extend(self.layers.iter().map(|l| l.units));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().units
    }

    /// Number of hidden (prunable) layers; their ids are `1..=L`.
    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Checkpoint(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.units == 0 || l.fan_in == 0 {
                return bad(format!("layer {} has an empty shape", i + 1));
            }
            if l.weights.len() != l.units * l.fan_in || l.bias.len() != l.units {
                return bad(format!("layer {} buffers do not match its shape", i + 1));
            }
            if i > 0 && l.fan_in != self.layers[i - 1].units {
                return bad(format!(
                    "layer {} fan-in {} does not match {} units below",
                    i + 1,
                    l.fan_in,
                    self.layers[i - 1].units
                ));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return bad(format!("layer {} has non-finite parameters", i + 1));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward, NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::InputShape {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let mut hidden = Vec::with_capacity(self.hidden_layers());
        let mut z = Vec::new();
        let mut input: &[f64] = x;
        for layer in &self.layers[..self.hidden_layers()] {
            layer.affine(input, &mut z);
            hidden.push(z.iter().map(|&v| v.max(0.0)).collect::<Vec<f64>>());
            input = hidden.last().unwrap();
        }
        let mut logits = Vec::new();
        self.layers.last().unwrap().affine(input, &mut logits);
        Ok(Forward { hidden, logits })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, NetError> {
        Ok(argmax(&self.forward(x)?.logits))
    }

    /// Loss of one sample; adds its gradient into `grads` when given.
    fn backprop(
        &self,
        x: &[f64],
        label: usize,
        grads: Option<&mut Gradients>,
    ) -> Result<(f64, Forward), NetError> {
        if label >= self.classes() {
            return Err(NetError::BadLabel {
                label: label as u32,
                classes: self.classes(),
            });
        }
        let fwd = self.forward(x)?;
        let loss = cross_entropy(&fwd.logits, label);
        let Some(grads) = grads else {
            return Ok((loss, fwd));
        };
        let mut delta = softmax(&fwd.logits);
        delta[label] -= 1.0;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input: &[f64] = if l == 0 { x } else { &fwd.hidden[l - 1] };
            let gw = &mut grads.weights[l];
            for (u, &d) in delta.iter().enumerate() {
                grads.bias[l][u] += d;
                if d != 0.0 {
                    let row = &mut gw[u * layer.fan_in..(u + 1) * layer.fan_in];
                    for (g, &v) in row.iter_mut().zip(input) {
                        *g += d * v;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Back through W, then the ReLU of the layer below.
            let below = &fwd.hidden[l - 1];
            let mut next = vec![0.0; layer.fan_in];
            for (u, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (n, &w) in next.iter_mut().zip(layer.row(u)) {
                        *n += d * w;
                    }
                }
            }
            for (n, &h) in next.iter_mut().zip(below) {
                if h <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
        Ok((loss, fwd))
    }

    /// Loss and parameter gradient of a single sample.
    pub fn sample_gradient(&self, x: &[f64], label: usize) -> Result<(f64, Gradients), NetError> {
        let mut g = Gradients::zeros(self);
        let (loss, _) = self.backprop(x, label, Some(&mut g))?;
        Ok((loss, g))
    }

    /// Σᵢ L(f(xᵢ), yᵢ) over a split.
    pub fn total_loss(&self, data: &Split) -> Result<f64, NetError> {
        let mut total = 0.0;
        for i in 0..data.len() {
            total += self.backprop(data.row(i), data.labels[i] as usize, None)?.0;
        }
        Ok(total)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.epochs.to_le_bytes());
        out.extend_from_slice(&self.meta.steps.to_le_bytes());
        let sizes = self.sizes();
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for s in sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MiniNet, NetError> {
        let err = |m: &str| NetError::Checkpoint(m.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| err("truncated magic"))? != CHECKPOINT_MAGIC {
            return Err(err("bad magic, expected \"FPM1\""));
        }
        let version = cur.u32().ok_or_else(|| err("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let seed = cur.u64().ok_or_else(|| err("truncated header"))?;
        let epochs = cur.u64().ok_or_else(|| err("truncated header"))?;
        let steps = cur.u64().ok_or_else(|| err("truncated header"))?;
        let count = cur.u32().ok_or_else(|| err("truncated header"))? as usize;
        if !(2..=1024).contains(&count) {
            return Err(err("layer size count out of range"));
        }
        let sizes: Vec<usize> = (0..count)
            .map(|_| cur.u32().map(|v| v as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| err("truncated sizes"))?;
        if sizes.contains(&0) {
            return Err(err("zero layer size"));
        }
        let params: usize = sizes
            .windows(2)
            .try_fold(0usize, |acc, w| {
                w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc)
            })
            .ok_or_else(|| err("parameter count overflows"))?;
        if bytes.len() - cur.pos != params.saturating_mul(8) {
            return Err(NetError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                params.saturating_mul(8),
                bytes.len() - cur.pos
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, units) = (w[0], w[1]);
                let weights = (0..units * fan_in).map(|_| cur.f64().unwrap()).collect();
                let bias = (0..units).map(|_| cur.f64().unwrap()).collect();
                Dense {
                    units,
                    fan_in,
                    weights,
                    bias,
                }
            })
            .collect();
        let net = MiniNet {
            layers,
            seed,
            meta: TrainMeta { epochs, steps },
        };
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MiniNet, NetError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        MiniNet::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Labeled samples, features row-major `n × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
}

impl Split {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Split, NetError> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(NetError::Dataset(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(NetError::Dataset("non-finite feature value".into()));
        }
        Ok(Split {
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, rows: &[usize]) -> Split {
        Split {
            dim: self.dim,
            features: rows.iter().flat_map(|&r| self.row(r).to_vec()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let k = self.labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut c = vec![0; k];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Every class that appears has at least two samples.
    pub fn check_prune_minimums(&self) -> Result<(), NetError> {
        if self.is_empty() {
            return Err(NetError::EmptyData);
        }
        match self
            .class_counts()
            .iter()
            .enumerate()
            .find(|(_, &c)| c == 1)
        {
            Some((class, _)) => Err(NetError::SparseClass {
                class: class as u32,
                count: 1,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Split,
    pub prune: Split,
    pub test: Split,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.dim
    }
}

/// Gaussian blobs: class centers `~ N(0, separation²·I)`, unit-variance noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub train: usize,
    pub prune: usize,
    pub test: usize,
    pub seed: u64,
}

impl BlobSpec {
    pub fn generate(&self) -> Result<Dataset, NetError> {
        if self.classes < 2 || self.dim == 0 {
            return Err(NetError::Dataset(
                "blobs need at least 2 classes and 1 dimension".into(),
            ));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(NetError::Dataset("separation must be positive".into()));
        }
        let mut r = rng::stream(self.seed, "blobs/centers");
        let centers: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z * self.separation
                    })
                    .collect()
            })
            .collect();
        let make = |n: usize, name: &str| {
            let mut r = rng::stream(self.seed, name);
            let mut features = Vec::with_capacity(n * self.dim);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % self.classes;
                for c in &centers[class] {
                    let z: f64 = StandardNormal.sample(&mut r);
                    features.push(c + z);
                }
                labels.push(class as u32);
            }
            Split::new(self.dim, features, labels)
        };
        Ok(Dataset {
            classes: self.classes,
            train: make(self.train, "blobs/train")?,
            prune: make(self.prune, "blobs/prune")?,
            test: make(self.test, "blobs/test")?,
        })
    }
}

/// Reads a CSV with a header, a `label` column, numeric feature columns and an
/// optional `split` column (`train`/`prune`/`test`). Without a split column the
/// rows are shuffled with `seed` and cut 70/15/15.
pub fn load_csv(path: impl AsRef<Path>, seed: u64) -> Result<Dataset, NetError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| NetError::Dataset(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| NetError::Dataset(e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| NetError::Dataset("missing \"label\" column".into()))?;
    let split_col = headers.iter().position(|h| h.trim() == "split");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_col && Some(c) != split_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(NetError::Dataset("no feature columns".into()));
    }
    let dim = feature_cols.len();
    let mut rows: Vec<(Vec<f64>, u32, Option<String>)> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| NetError::Dataset(e.to_string()))?;
        let parse = |c: usize| -> Result<f64, NetError> {
            rec[c].trim().parse::<f64>().map_err(|_| {
                NetError::Dataset(format!("row {}: column {c} is not numeric", line + 2))
            })
        };
        let x = feature_cols
            .iter()
            .map(|&c| parse(c))
            .collect::<Result<_, _>>()?;
        let label = rec[label_col].trim().parse::<u32>().map_err(|_| {
            NetError::Dataset(format!("row {}: label is not a class index", line + 2))
        })?;
        rows.push((x, label, split_col.map(|c| rec[c].trim().to_lowercase())));
    }
    if rows.is_empty() {
        return Err(NetError::EmptyData);
    }
    let classes = rows.iter().map(|r| r.1).max().unwrap() as usize + 1;
    let mut tagged: [Vec<usize>; 3] = Default::default();
    if split_col.is_some() {
        for (i, r) in rows.iter().enumerate() {
            let slot = match r.2.as_deref() {
                Some("train") => 0,
                Some("prune") => 1,
                Some("test") => 2,
                other => {
                    return Err(NetError::Dataset(format!(
                        "row {}: unknown split {other:?}",
                        i + 2
                    )))
                }
            };
            tagged[slot].push(i);
        }
    } else {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng::stream(seed, "csv/split"));
        let n_train = rows.len() * 70 / 100;
        let n_prune = rows.len() * 15 / 100;
        tagged[0] = order[..n_train].to_vec();
        tagged[1] = order[n_train..n_train + n_prune].to_vec();
        tagged[2] = order[n_train + n_prune..].to_vec();
    }
    let build = |idx: &[usize]| {
        Split::new(
            dim,
            idx.iter().flat_map(|&i| rows[i].0.clone()).collect(),
            idx.iter().map(|&i| rows[i].1).collect(),
        )
    };
    Ok(Dataset {
        classes,
        train: build(&tagged[0])?,
        prune: build(&tagged[1])?,
        test: build(&tagged[2])?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

fn check_split(net: &MiniNet, data: &Split) -> Result<(), NetError> {
    if data.is_empty() {
        return Err(NetError::EmptyData);
    }
    if data.dim != net.input_dim() {
        return Err(NetError::InputShape {
            expected: net.input_dim(),
            found: data.dim,
        });
    }
    if let Some(&label) = data.labels.iter().find(|&&l| l as usize >= net.classes()) {
        return Err(NetError::BadLabel {
            label,
            classes: net.classes(),
        });
    }
    Ok(())
}

/// Minibatch SGD. Returns the trained network and the mean training loss of
/// every epoch. Batch order is drawn from the network seed and its epoch count,
/// so continuing training from a checkpoint stays reproducible.
pub fn train(
    net: &MiniNet,
    data: &Split,
    config: &TrainConfig,
) -> Result<(MiniNet, Vec<f64>), NetError> {
    check_split(net, data)?;
    if !(config.lr.is_finite() && config.lr >= 0.0) {
        return Err(NetError::BadLearningRate(config.lr));
    }
    if config.batch_size == 0 {
        return Err(NetError::BadBatchSize);
    }
    let mut net = net.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let stream = rng::substream_seed(rng::stream_seed(net.seed, "batching"), net.meta.epochs);
        order.sort_unstable();
        order.shuffle(&mut rng::rng_from(stream));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut g = Gradients::zeros(&net);
            for &i in batch {
                epoch_loss += net
                    .backprop(data.row(i), data.labels[i] as usize, Some(&mut g))?
                    .0;
            }
            let step = config.lr / batch.len() as f64;
            for (layer, (gw, gb)) in net.layers.iter_mut().zip(g.weights.iter().zip(&g.bias)) {
                for (w, d) in layer.weights.iter_mut().zip(gw) {
                    *w -= step * d;
                }
                for (b, d) in layer.bias.iter_mut().zip(gb) {
                    *b -= step * d;
                }
            }
            net.meta.steps += 1;
        }
        let mean = epoch_loss / data.len() as f64;
        let params_finite = net
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()));
        if !mean.is_finite() || !params_finite {
            return Err(NetError::Diverged { epoch, loss: mean });
        }
        trace.push(mean);
        net.meta.epochs += 1;
    }
    Ok((net, trace))
}

/// Continues training a (pruned) network for `epochs` epochs.
pub fn finetune(
    net: &MiniNet,
    data: &Split,
    epochs: usize,
    lr: f64,
    batch_size: usize,
) -> Result<MiniNet, NetError> {
    let config = TrainConfig {
        epochs,
        lr,
        batch_size,
    };
    Ok(train(net, data, &config)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_loss: f64,
}

pub fn evaluate(net: &MiniNet, data: &Split) -> Result<Metrics, NetError> {
    check_split(net, data)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..data.len() {
        let label = data.labels[i] as usize;
        let fwd = net.forward(data.row(i))?;
        loss += cross_entropy(&fwd.logits, label);
        if argmax(&fwd.logits) == label {
            correct += 1;
        }
    }
    Ok(Metrics {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss / data.len() as f64,
    })
}

/// Dumps for every hidden layer plus the summed loss over the split.
#[derive(Debug, Clone)]
pub struct Capture {
    pub layers: Vec<LayerDumps>,
    pub total_loss: f64,
}

/// Records post-ReLU outputs, summed gradients and current parameters of every
/// hidden layer over `split`. Gradients are summed sequentially in sample order.
pub fn capture(net: &MiniNet, split: &Split) -> Result<Capture, NetError> {
    check_split(net, split)?;
    split.check_prune_minimums()?;
    let n = split.len();
    let hidden = net.hidden_layers();
    let mut acts: Vec<Vec<f32>> = (0..hidden)
        .map(|l| Vec::with_capacity(n * net.layers[l].units))
        .collect();
    let mut grads = Gradients::zeros(net);
    let mut total_loss = 0.0;
    for i in 0..n {
        let (loss, fwd) = net.backprop(split.row(i), split.labels[i] as usize, Some(&mut grads))?;
        total_loss += loss;
        for (buf, h) in acts.iter_mut().zip(&fwd.hidden) {
            buf.extend(h.iter().map(|&v| v as f32));
        }
    }
    let n32 = u32::try_from(n).map_err(|_| NetError::Dataset("split too large".into()))?;
    let mut layers = Vec::with_capacity(hidden);
    for (l, data) in acts.into_iter().enumerate() {
        let id = l as u32 + 1;
        let layer = &net.layers[l];
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        layers.push(LayerDumps {
            acts: ActivationDump::new(id, layer.units, 1, data, split.labels.clone())?,
            wgrad: GradientDump::weight(
                id,
                layer.units,
                layer.fan_in,
                n32,
                to32(&grads.weights[l]),
            )?,
            bgrad: GradientDump::bias(id, n32, to32(&grads.bias[l]))?,
            weights: ParamDump::weights(id, layer.units, layer.fan_in, to32(&layer.weights))?,
            biases: ParamDump::biases(id, to32(&layer.bias))?,
        });
    }
    Ok(Capture { layers, total_loss })
}
