//! Source-supervised training regularised by feature-density matching on
//! unlabelled target images.
//!
//! Every random choice is drawn from a stream derived from
//! `(seed, split, epoch, purpose)`, so a run can be resumed at any epoch
//! boundary and paired runs (same seed, different method) see the same
//! splits, initialisations and batch orders.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datagen::{self, DataError, Dataset};
use crate::density::{bandwidth_floor, estimate_bandwidth, BandwidthMode, DensityError, KdeModel};
use crate::divergence::{
    combined_loss, dice_loss, jsd_var, kde_log_probs, mmd2_var, segmentation_loss, DivergenceConfig,
    DivergenceError, DivergenceKind,
};
use crate::seed::{derive_seed, rng_for};
use crate::segnet::{flatten_tap, FeatureTap, SegNetError, UNetConfig, UNetModel};
use crate::stats;
use crate::tensor::{Checkpoint, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("non-finite {term} (split {split}, epoch {epoch}, step {step})")]
    NonFinite {
        term: &'static str,
        split: usize,
        epoch: usize,
        step: usize,
    },
    #[error("target pool is empty")]
    EmptyTargetPool,
    #[error("bad training state: {0}")]
    State(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    SegNet(#[from] SegNetError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Divergence(DivergenceError::NonFinite(_))
                | TrainError::Density(DensityError::NonFinite)
        )
    }

    pub fn is_io(&self) -> bool {
        match self {
            TrainError::Io(_) => true,
            TrainError::Data(e) => e.is_io(),
            TrainError::SegNet(e) => e.is_io(),
            TrainError::Tensor(e) => e.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Gradient descent with optional heavy-ball momentum.
    #[default]
    Sgd,
    Adamw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegLossKind {
    #[default]
    Ce,
    Dice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub unet: UNetConfig,
    pub divergence: DivergenceConfig,
    pub tap: FeatureTap,
    /// Images per KDE bank.
    pub kde_samples: usize,
    /// Banks and bandwidths are rebuilt every this many epochs.
    pub bw_refresh_epochs: usize,
    pub bw_mode: BandwidthMode,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub num_splits: usize,
    pub seed: u64,
    pub target_fraction: f64,
    pub val_fraction: f64,
    pub seg_loss: SegLossKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            divergence: DivergenceConfig::default(),
            tap: FeatureTap::Deepest,
            kde_samples: 20,
            bw_refresh_epochs: 5,
            bw_mode: BandwidthMode::default(),
            optimizer: OptimizerKind::Sgd,
            lr: 1e-4,
            weight_decay: 1e-4,
            momentum: 0.0,
            batch_size: 10,
            epochs: 200,
            num_splits: 5,
            seed: 0,
            target_fraction: 0.03,
            val_fraction: 0.2,
            seg_loss: SegLossKind::Ce,
        }
    }
}

/// On-disk form: one flat object, one key per field.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatConfig {
    depth: usize,
    base_channels: usize,
    in_channels: usize,
    num_classes: usize,
    input_size: usize,
    method: DivergenceKind,
    lambda: f64,
    mmd_sigma: f64,
    tap: FeatureTap,
    kde_samples: usize,
    bw_refresh_epochs: usize,
    bw_mode: BandwidthMode,
    optimizer: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    batch_size: usize,
    epochs: usize,
    num_splits: usize,
    seed: u64,
    target_fraction: f64,
    val_fraction: f64,
    seg_loss: SegLossKind,
}

/// Every key accepted in config files and written to the JSON sidecar.
pub const CONFIG_KEYS: [&str; 23] = [
    "depth",
    "base_channels",
    "in_channels",
    "num_classes",
    "input_size",
    "method",
    "lambda",
    "mmd_sigma",
    "tap",
    "kde_samples",
    "bw_refresh_epochs",
    "bw_mode",
    "optimizer",
    "lr",
    "weight_decay",
    "momentum",
    "batch_size",
    "epochs",
    "num_splits",
    "seed",
    "target_fraction",
    "val_fraction",
    "seg_loss",
];

impl From<&ExperimentConfig> for FlatConfig {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            depth: c.unet.depth,
            base_channels: c.unet.base_channels,
            in_channels: c.unet.in_channels,
            num_classes: c.unet.num_classes,
            input_size: c.unet.input_size,
            method: c.divergence.kind,
            lambda: c.divergence.lambda,
            mmd_sigma: c.divergence.mmd_constant_sigma,
            tap: c.tap,
            kde_samples: c.kde_samples,
            bw_refresh_epochs: c.bw_refresh_epochs,
            bw_mode: c.bw_mode,
            optimizer: c.optimizer,
            lr: c.lr,
            weight_decay: c.weight_decay,
            momentum: c.momentum,
            batch_size: c.batch_size,
            epochs: c.epochs,
            num_splits: c.num_splits,
            seed: c.seed,
            target_fraction: c.target_fraction,
            val_fraction: c.val_fraction,
            seg_loss: c.seg_loss,
        }
    }
}

impl From<FlatConfig> for ExperimentConfig {
    fn from(f: FlatConfig) -> Self {
        Self {
            unet: UNetConfig {
                depth: f.depth,
                base_channels: f.base_channels,
                in_channels: f.in_channels,
                num_classes: f.num_classes,
                input_size: f.input_size,
            },
            divergence: DivergenceConfig {
                kind: f.method,
                lambda: f.lambda,
                mmd_constant_sigma: f.mmd_sigma,
            },
            tap: f.tap,
            kde_samples: f.kde_samples,
            bw_refresh_epochs: f.bw_refresh_epochs,
            bw_mode: f.bw_mode,
            optimizer: f.optimizer,
            lr: f.lr,
            weight_decay: f.weight_decay,
            momentum: f.momentum,
            batch_size: f.batch_size,
            epochs: f.epochs,
            num_splits: f.num_splits,
            seed: f.seed,
            target_fraction: f.target_fraction,
            val_fraction: f.val_fraction,
            seg_loss: f.seg_loss,
        }
    }
}

fn kv_value(raw: &str) -> Value {
    if let Ok(u) = raw.parse::<u64>() {
        return Value::from(u);
    }
    if let Ok(f) = raw.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    Value::from(raw)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.divergence.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        if !self.unet.has_tap(self.tap) {
            return bad(format!("tap {} does not exist at depth {}", self.tap, self.unet.depth));
        }
        if self.kde_samples < 2 {
            return bad("kde_samples must be at least 2".into());
        }
        if self.bw_refresh_epochs == 0 || self.batch_size == 0 || self.epochs == 0 || self.num_splits == 0 {
            return bad("bw_refresh_epochs, batch_size, epochs and num_splits must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return bad(format!("target_fraction {} not in (0, 1]", self.target_fraction));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} not in (0, 1)", self.val_fraction));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&FlatConfig::from(self)).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let flat: FlatConfig = serde_json::from_str(text)?;
        let cfg = ExperimentConfig::from(flat);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn with_kv(&self, text: &str) -> Result<Self> {
        let mut obj = match serde_json::to_value(FlatConfig::from(self))? {
            Value::Object(m) => m,
            _ => unreachable!("flat config is an object"),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(TrainError::UnknownKey(k.to_string()));
            }
            obj.insert(k.to_string(), kv_value(v));
        }
        let flat: FlatConfig = serde_json::from_value(Value::Object(obj))
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let cfg = ExperimentConfig::from(flat);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the config as `key = value` lines that [`Self::with_kv`] accepts.
    pub fn to_kv(&self) -> String {
        let v = serde_json::to_value(FlatConfig::from(self)).expect("config serializes");
        CONFIG_KEYS
            .iter()
            .map(|k| match &v[*k] {
                Value::String(s) => format!("{k} = {s}\n"),
                other => format!("{k} = {other}\n"),
            })
            .collect()
    }

    pub fn split_seed(&self, split: usize) -> u64 {
        derive_seed(self.seed, &[stream::SPLIT, split as u64])
    }

    pub fn init_seed(&self, split: usize) -> u64 {
        derive_seed(self.seed, &[stream::INIT, split as u64])
    }
}

mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TARGET: u64 = 4;
    pub const KDE_SOURCE: u64 = 5;
    pub const KDE_TARGET: u64 = 6;
}

fn epoch_rng(cfg: &ExperimentConfig, split: usize, epoch: usize, purpose: u64) -> ChaCha8Rng {
    rng_for(cfg.seed, &[split as u64, epoch as u64, purpose])
}

/// First and second moment buffers plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with decoupled weight decay: `p -= lr * (direction + wd * p)`.
    pub fn apply(&mut self, cfg: &ExperimentConfig, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let (lr, wd) = (cfg.lr, cfg.weight_decay);
        let t = self.step as i32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = p.data_mut();
            let g = g.data();
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    for j in 0..p.len() {
                        let d = if cfg.momentum > 0.0 {
                            m[j] = cfg.momentum * m[j] + g[j];
                            m[j]
                        } else {
                            g[j]
                        };
                        p[j] -= lr * (d + wd * p[j]);
                    }
                }
                OptimizerKind::Adamw => {
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for j in 0..p.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let d = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                        p[j] -= lr * (d + wd * p[j]);
                    }
                }
            }
        }
    }
}

/// Everything needed to continue a split from an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub split: usize,
    /// Next epoch to run.
    pub epoch: usize,
    pub model: UNetModel,
    pub optimizer: OptimizerState,
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_model: UNetModel,
    pub kde_source: Option<KdeModel>,
    pub kde_target: Option<KdeModel>,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig, split: usize) -> Result<Self> {
        let model = UNetModel::init(cfg.unet, cfg.init_seed(split))?;
        Ok(Self {
            split,
            epoch: 0,
            optimizer: OptimizerState::new(model.params()),
            best_val_loss: f64::INFINITY,
            best_epoch: None,
            best_model: model.clone(),
            model,
            kde_source: None,
            kde_target: None,
        })
    }

    pub fn sigma_source(&self) -> f64 {
        self.kde_source.as_ref().map_or(f64::NAN, KdeModel::bandwidth)
    }

    pub fn sigma_target(&self) -> f64 {
        self.kde_target.as_ref().map_or(f64::NAN, KdeModel::bandwidth)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push(
            "state.meta",
            Tensor::from_vec(vec![
                self.split as f64,
                self.epoch as f64,
                self.best_val_loss,
                self.best_epoch.map_or(-1.0, |e| e as f64),
                self.optimizer.step as f64,
            ]),
        );
        for (prefix, model) in [("model/", &self.model), ("best/", &self.best_model)] {
            for (n, t) in model.to_checkpoint().entries {
                ck.push(format!("{prefix}{n}"), t);
            }
        }
        for (i, (m, v)) in self.optimizer.m.iter().zip(&self.optimizer.v).enumerate() {
            ck.push(format!("opt.m/{i}"), m.clone());
            ck.push(format!("opt.v/{i}"), v.clone());
        }
        for (name, kde) in [("kde.source", &self.kde_source), ("kde.target", &self.kde_target)] {
            if let Some(k) = kde {
                ck.push(format!("{name}.samples"), k.samples().clone());
                ck.push(format!("{name}.bandwidth"), Tensor::scalar(k.bandwidth()));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let missing = |n: &str| TrainError::State(format!("missing entry {n}"));
        let meta = ck.get("state.meta").ok_or_else(|| missing("state.meta"))?.data().to_vec();
        if meta.len() != 5 {
            return Err(TrainError::State("malformed state.meta".into()));
        }
        let sub = |prefix: &str| -> Result<UNetModel> {
            let mut inner = Checkpoint::new();
            for (n, t) in &ck.entries {
                if let Some(rest) = n.strip_prefix(prefix) {
                    inner.push(rest, t.clone());
                }
            }
            Ok(UNetModel::from_checkpoint(&inner)?)
        };
        let model = sub("model/")?;
        let best_model = sub("best/")?;
        let count = model.params().len();
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for i in 0..count {
            let (mn, vn) = (format!("opt.m/{i}"), format!("opt.v/{i}"));
            m.push(ck.get(&mn).ok_or_else(|| missing(&mn))?.clone());
            v.push(ck.get(&vn).ok_or_else(|| missing(&vn))?.clone());
        }
        let kde = |name: &str| -> Result<Option<KdeModel>> {
            match (ck.get(&format!("{name}.samples")), ck.get(&format!("{name}.bandwidth"))) {
                (Some(s), Some(b)) => Ok(Some(KdeModel::new(s.clone(), b.item())?)),
                _ => Ok(None),
            }
        };
        Ok(Self {
            split: meta[0] as usize,
            epoch: meta[1] as usize,
            best_val_loss: meta[2],
            best_epoch: (meta[3] >= 0.0).then_some(meta[3] as usize),
            optimizer: OptimizerState {
                step: meta[4] as u64,
                m,
                v,
            },
            model,
            best_model,
            kde_source: kde("kde.source")?,
            kde_target: kde("kde.target")?,
        })
    }
}

/// `k` indices out of `0..n`: without replacement when possible, otherwise
/// uniformly with replacement.
fn draw_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n >= k {
        index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Bandwidth of a bank that may repeat rows: estimated over its distinct rows.
pub fn bank_bandwidth(bank: &Tensor, mode: BandwidthMode) -> Result<f64> {
    let (n, d) = (bank.shape()[0], bank.shape()[1]);
    let mut rows: Vec<&[f64]> = Vec::with_capacity(n);
    for i in 0..n {
        let r = bank.row(i);
        if !rows.iter().any(|q| q.iter().zip(r).all(|(a, b)| a.to_bits() == b.to_bits())) {
            rows.push(r);
        }
    }
    if rows.len() < 2 {
        return Ok(bandwidth_floor(d));
    }
    let distinct = Tensor::new(vec![rows.len(), d], rows.concat())?;
    match estimate_bandwidth(&distinct, mode) {
        Ok(s) => Ok(s.max(bandwidth_floor(d))),
        Err(DensityError::DegenerateBandwidth) => Ok(bandwidth_floor(d)),
        Err(e) => Err(e.into()),
    }
}

fn tap_features(model: &UNetModel, images: &[&Tensor], tap: FeatureTap, chunk: usize) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut dim = 0;
    for part in images.chunks(chunk.max(1)) {
        let f = model.features(&Tensor::stack(part)?, tap)?;
        dim = f.shape()[1];
        rows.extend_from_slice(f.data());
    }
    Ok(Tensor::new(vec![images.len(), dim], rows)?)
}

/// Rebuilds both KDE banks from the current model (epoch-seeded draws).
pub fn refresh_kde(state: &mut TrainState, cfg: &ExperimentConfig, train: &Dataset, pool: &[Tensor]) -> Result<()> {
    if pool.is_empty() {
        return Err(TrainError::EmptyTargetPool);
    }
    if train.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    let n = cfg.kde_samples;
    let src_idx = draw_indices(train.len(), n, &mut epoch_rng(cfg, state.split, state.epoch, stream::KDE_SOURCE));
    let tgt_idx = draw_indices(pool.len(), n, &mut epoch_rng(cfg, state.split, state.epoch, stream::KDE_TARGET));
    let src: Vec<&Tensor> = src_idx.iter().map(|&i| &train.images[i]).collect();
    let tgt: Vec<&Tensor> = tgt_idx.iter().map(|&i| &pool[i]).collect();
    let fs = tap_features(&state.model, &src, cfg.tap, cfg.batch_size)?;
    let ft = tap_features(&state.model, &tgt, cfg.tap, cfg.batch_size)?;
    let (ss, st) = (bank_bandwidth(&fs, cfg.bw_mode)?, bank_bandwidth(&ft, cfg.bw_mode)?);
    state.kde_source = Some(KdeModel::new(fs, ss)?);
    state.kde_target = Some(KdeModel::new(ft, st)?);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub seg_loss: f64,
    pub div_loss: f64,
    pub grad_norm: f64,
}

fn seg_term(g: &mut Graph, cfg: &ExperimentConfig, logits: crate::tensor::Var, labels: &[usize]) -> Result<crate::tensor::Var> {
    Ok(match cfg.seg_loss {
        SegLossKind::Ce => segmentation_loss(g, logits, labels)?,
        SegLossKind::Dice => dice_loss(g, logits, labels)?,
    })
}

/// One optimiser step on a labelled source batch and an optional unlabelled
/// target batch. `step` only labels error messages.
pub fn train_step(
    state: &mut TrainState,
    cfg: &ExperimentConfig,
    source: &Tensor,
    labels: &[usize],
    target: Option<&Tensor>,
    step: usize,
) -> Result<StepMetrics> {
    let non_finite = |term| TrainError::NonFinite {
        term,
        split: state.split,
        epoch: state.epoch,
        step,
    };
    let mut g = Graph::new();
    let params = state.model.bind(&mut g);
    let x = g.constant(source.clone());
    let out = state.model.forward(&mut g, &params, x)?;
    let seg = seg_term(&mut g, cfg, out.logits, labels)?;
    if !g.value(seg).is_finite() {
        return Err(non_finite("segmentation loss"));
    }
    let kind = cfg.divergence.kind;
    let div = match (kind, target) {
        (DivergenceKind::None, _) | (_, None) => None,
        (_, Some(t)) => {
            let fs = flatten_tap(&mut g, &out.taps, cfg.tap)?;
            let xt = g.constant(t.clone());
            let ht = state.model.forward_to(&mut g, &params, xt, cfg.tap)?;
            let ft = g.flatten(ht)?;
            let banks = || -> Result<(&KdeModel, &KdeModel)> {
                match (&state.kde_source, &state.kde_target) {
                    (Some(s), Some(t)) => Ok((s, t)),
                    _ => Err(TrainError::State("KDE banks not built".into())),
                }
            };
            let d = match kind {
                DivergenceKind::Jsd => {
                    let (ks, kt) = banks()?;
                    let support = g.concat(&[fs, ft], 0)?;
                    let lp = kde_log_probs(&mut g, ks, support)?;
                    let lq = kde_log_probs(&mut g, kt, support)?;
                    jsd_var(&mut g, lp, lq)?
                }
                DivergenceKind::MmdConstant => mmd2_var(&mut g, fs, ft, cfg.divergence.mmd_constant_sigma)?,
                DivergenceKind::MmdBandwidth => {
                    let (ks, kt) = banks()?;
                    mmd2_var(&mut g, fs, ft, 0.5 * (ks.bandwidth() + kt.bandwidth()))?
                }
                DivergenceKind::None => unreachable!(),
            };
            if !g.value(d).is_finite() {
                return Err(non_finite("divergence"));
            }
            Some(d)
        }
    };
    let total = combined_loss(&mut g, seg, div, &cfg.divergence)?;
    g.backward(total)?;
    let grads: Vec<Tensor> = params
        .iter()
        .zip(state.model.params())
        .map(|(&p, t)| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let grad_norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(non_finite("gradient"));
    }
    let metrics = StepMetrics {
        seg_loss: g.value(seg).item(),
        div_loss: div.map_or(0.0, |d| g.value(d).item()),
        grad_norm,
    };
    let TrainState { model, optimizer, .. } = state;
    optimizer.apply(cfg, model.params_mut(), &grads);
    Ok(metrics)
}

/// Mean segmentation loss of `model` over a labelled set.
pub fn validation_loss(model: &UNetModel, cfg: &ExperimentConfig, val: &Dataset) -> Result<f64> {
    if val.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    let idx: Vec<usize> = (0..val.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let params = model.bind_frozen(&mut g);
        let x = g.constant(val.batch(chunk));
        let out = model.forward(&mut g, &params, x)?;
        let loss = seg_term(&mut g, cfg, out.logits, &val.batch_labels(chunk))?;
        total += g.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

/// One row of the per-epoch log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub split: usize,
    pub epoch: usize,
    pub seg_loss: f64,
    pub div_loss: f64,
    pub val_loss: f64,
    pub sigma_src: f64,
    pub sigma_tgt: f64,
}

pub const METRICS_HEADER: &str = "split,epoch,seg_loss,div_loss,val_loss,sigma_src,sigma_tgt";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.split, self.epoch, self.seg_loss, self.div_loss, self.val_loss, self.sigma_src, self.sigma_tgt
        )
    }

    pub fn parse_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            split: f[0].parse().ok()?,
            epoch: f[1].parse().ok()?,
            seg_loss: num(2)?,
            div_loss: num(3)?,
            val_loss: num(4)?,
            sigma_src: num(5)?,
            sigma_tgt: num(6)?,
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(TrainError::State("metrics header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| EpochMetrics::parse_row(l).ok_or_else(|| TrainError::State(format!("bad metrics row `{l}`"))))
        .collect()
}

/// Cycles through reshuffled permutations of the target pool.
struct TargetSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl TargetSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Runs epoch `state.epoch` and advances the state past it.
pub fn run_epoch(
    state: &mut TrainState,
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    pool: &[Tensor],
) -> Result<EpochMetrics> {
    let adapt = cfg.divergence.kind != DivergenceKind::None;
    let (split, epoch) = (state.split, state.epoch);
    if adapt && (epoch % cfg.bw_refresh_epochs == 0 || state.kde_source.is_none()) {
        refresh_kde(state, cfg, train, pool)?;
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut epoch_rng(cfg, split, epoch, stream::SHUFFLE));
    let mut sampler = TargetSampler::new(pool.len(), epoch_rng(cfg, split, epoch, stream::TARGET));
    let (mut seg_sum, mut div_sum, mut steps) = (0.0, 0.0, 0usize);
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let src = train.batch(chunk);
        let labels = train.batch_labels(chunk);
        let tgt = if adapt {
            let ids = sampler.take(chunk.len());
            let items: Vec<&Tensor> = ids.iter().map(|&i| &pool[i]).collect();
            Some(Tensor::stack(&items)?)
        } else {
            None
        };
        let m = train_step(state, cfg, &src, &labels, tgt.as_ref(), step)?;
        log::debug!(
            "split {split} epoch {epoch} step {step}: seg {:.5} div {:.5} |g| {:.4}",
            m.seg_loss,
            m.div_loss,
            m.grad_norm
        );
        seg_sum += m.seg_loss;
        div_sum += m.div_loss;
        steps += 1;
    }
    let val_loss = validation_loss(&state.model, cfg, val)?;
    if !val_loss.is_finite() {
        return Err(TrainError::NonFinite {
            term: "validation loss",
            split,
            epoch,
            step: steps,
        });
    }
    if val_loss < state.best_val_loss {
        state.best_val_loss = val_loss;
        state.best_epoch = Some(epoch);
        state.best_model = state.model.clone();
    }
    state.epoch += 1;
    let metrics = EpochMetrics {
        split,
        epoch,
        seg_loss: seg_sum / steps as f64,
        div_loss: div_sum / steps as f64,
        val_loss,
        sigma_src: state.sigma_source(),
        sigma_tgt: state.sigma_target(),
    };
    log::info!(
        "split {split} epoch {epoch}: seg {:.5} div {:.5} val {:.5}",
        metrics.seg_loss,
        metrics.div_loss,
        metrics.val_loss
    );
    Ok(metrics)
}

/// Data of one split: source train/val and the target image pool.
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub pool: Vec<Tensor>,
}

/// Target images enter as pixels only; labels never reach the trainer.
pub fn split_data(cfg: &ExperimentConfig, split: usize, source: &Dataset, target: &[Tensor]) -> Result<SplitData> {
    let seed = cfg.split_seed(split);
    let (train, val) = datagen::split_train_val(source, cfg.val_fraction, seed)?;
    let pool = if cfg.divergence.kind == DivergenceKind::None {
        Vec::new()
    } else {
        datagen::subsample_indices(target.len(), cfg.target_fraction, seed)?
            .into_iter()
            .map(|i| target[i].clone())
            .collect()
    };
    Ok(SplitData { train, val, pool })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub split: usize,
    pub best_model: UNetModel,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where to write checkpoints, logs and the config sidecar.
    pub out_dir: Option<PathBuf>,
    /// Continue each split from `split{k}/state.dmck` when present.
    pub resume: bool,
}

fn split_dir(out: &Path, split: usize) -> PathBuf {
    out.join(format!("split{split}"))
}

/// Trains one split to completion.
pub fn fit_split(
    cfg: &ExperimentConfig,
    split: usize,
    source: &Dataset,
    target: &[Tensor],
    opts: &FitOptions,
) -> Result<SplitResult> {
    let data = split_data(cfg, split, source, target)?;
    let dir = opts.out_dir.as_ref().map(|o| split_dir(o, split));
    if let Some(d) = &dir {
        fs::create_dir_all(d)?;
    }
    let mut state = None;
    let mut history = Vec::new();
    if let (true, Some(d)) = (opts.resume, &dir) {
        let path = d.join("state.dmck");
        if path.exists() {
            let s = TrainState::from_checkpoint(&Checkpoint::load(&path)?)?;
            if s.split != split {
                return Err(TrainError::State(format!("state file belongs to split {}", s.split)));
            }
            history = parse_metrics_csv(&fs::read_to_string(d.join("metrics.csv"))?)?;
            history.truncate(s.epoch);
            state = Some(s);
        }
    }
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg, split)?,
    };
    while state.epoch < cfg.epochs {
        let m = run_epoch(&mut state, cfg, &data.train, &data.val, &data.pool)?;
        let improved = state.best_epoch == Some(m.epoch);
        history.push(m);
        if let Some(d) = &dir {
            if improved {
                state.best_model.to_checkpoint().save(&d.join("best.dmck"))?;
            }
            state.to_checkpoint().save(&d.join("state.dmck"))?;
            fs::write(d.join("metrics.csv"), metrics_csv(&history))?;
        }
    }
    Ok(SplitResult {
        split,
        best_val_loss: state.best_val_loss,
        best_epoch: state.best_epoch.unwrap_or(0),
        best_model: state.best_model,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub splits: Vec<SplitResult>,
}

pub const SUMMARY_HEADER: &str = "split,best_epoch,best_val_loss,final_seg_loss,final_div_loss";

impl RunArtifacts {
    /// Per-split rows followed by `mean` and `std` rows.
    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 4];
        for r in &self.splits {
            let last = r.history.last();
            let vals = [
                r.best_epoch as f64,
                r.best_val_loss,
                last.map_or(f64::NAN, |m| m.seg_loss),
                last.map_or(f64::NAN, |m| m.div_loss),
            ];
            s.push_str(&format!("{},{},{},{},{}\n", r.split, r.best_epoch, vals[1], vals[2], vals[3]));
            for (c, v) in cols.iter_mut().zip(vals) {
                c.push(v);
            }
        }
        for (label, f) in [("mean", stats::mean as fn(&[f64]) -> f64), ("std", stats::std)] {
            let v: Vec<String> = cols.iter().map(|c| f(c).to_string()).collect();
            s.push_str(&format!("{label},{}\n", v.join(",")));
        }
        s
    }

    pub fn history(&self) -> Vec<EpochMetrics> {
        self.splits.iter().flat_map(|s| s.history.iter().copied()).collect()
    }

    /// Writes `config.json`, `metrics.csv` and `summary.csv` (checkpoints are
    /// written while training).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), self.config.to_json())?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&self.history()))?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        for r in &self.splits {
            let d = split_dir(dir, r.split);
            fs::create_dir_all(&d)?;
            r.best_model.to_checkpoint().save(&d.join("best.dmck"))?;
        }
        Ok(())
    }
}

/// Trains every split and, with an output directory, writes all artifacts.
pub fn fit(cfg: &ExperimentConfig, source: &Dataset, target: &[Tensor], opts: &FitOptions) -> Result<RunArtifacts> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("config.json"), cfg.to_json())?;
    }
    let splits = (0..cfg.num_splits)
        .map(|k| fit_split(cfg, k, source, target, opts))
        .collect::<Result<Vec<_>>>()?;
    let run = RunArtifacts {
        config: cfg.clone(),
        splits,
    };
    if let Some(d) = &opts.out_dir {
        run.write(d)?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DomainShiftSpec, DomainTag, SceneSpec};
    use crate::divergence::{jsd, kde_to_discrete};

    fn tiny_cfg(kind: DivergenceKind) -> ExperimentConfig {
        ExperimentConfig {
            unet: UNetConfig {
                depth: 2,
                base_channels: 2,
                in_channels: 1,
                num_classes: 2,
                input_size: 16,
            },
            divergence: DivergenceConfig::with_kind(kind),
            kde_samples: 4,
            bw_refresh_epochs: 2,
            optimizer: OptimizerKind::Adamw,
            lr: 1e-3,
            batch_size: 4,
            epochs: 3,
            num_splits: 2,
            target_fraction: 0.5,
            ..ExperimentConfig::default()
        }
    }

    fn tiny_data() -> (Dataset, Vec<Tensor>) {
        let scene = SceneSpec {
            image_size: 16,
            num_blobs: (1, 2),
            blob_radius: (2.0, 4.0),
            seed: 11,
            ..SceneSpec::default()
        };
        let src = generate(&scene, &DomainShiftSpec::identity(), 10, DomainTag::Source).unwrap();
        let shift = DomainShiftSpec {
            intensity_gain: 0.6,
            intensity_offset: 0.2,
            noise_std: 0.05,
            ..DomainShiftSpec::identity()
        };
        let tgt = generate(&SceneSpec { seed: 12, ..scene }, &shift, 6, DomainTag::Target).unwrap();
        (src, tgt.images)
    }

    #[test]
    fn config_kv_round_trip_and_unknown_key() {
        let cfg = tiny_cfg(DivergenceKind::MmdBandwidth);
        let back = ExperimentConfig::default().with_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        match ExperimentConfig::default().with_kv("lr = 0.1\nlearning_rate = 3\n") {
            Err(TrainError::UnknownKey(k)) => assert_eq!(k, "learning_rate"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::default().with_kv("tap = ENC9").is_err());
        assert!(ExperimentConfig::default().with_kv("epochs = 0").is_err());
        let json: Value = serde_json::from_str(&cfg.to_json()).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = CONFIG_KEYS.to_vec();
        keys.sort_unstable();
        expected.sort_unstable();
        assert_eq!(keys, expected);
    }

    #[test]
    fn defaults_follow_training_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size), (1e-4, 1e-4, 10));
        assert_eq!((c.kde_samples, c.bw_refresh_epochs, c.num_splits), (20, 5, 5));
        assert_eq!(c.tap, FeatureTap::Deepest);
        assert_eq!(c.divergence.lambda, 0.01);
        assert_eq!(c.val_fraction, 0.2);
    }

    #[test]
    fn plain_sgd_update() {
        let cfg = ExperimentConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..ExperimentConfig::default()
        };
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut opt = OptimizerState::new(&p);
        opt.apply(&cfg, &mut p, &[Tensor::from_vec(vec![0.5, 1.0])]);
        assert!((p[0].data()[0] - (1.0 - 0.1 * (0.5 + 0.5))).abs() < 1e-15);
        assert!((p[0].data()[1] - (-2.0 - 0.1 * (1.0 - 1.0))).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_sign_sized() {
        let cfg = ExperimentConfig {
            optimizer: OptimizerKind::Adamw,
            lr: 0.01,
            weight_decay: 0.0,
            ..ExperimentConfig::default()
        };
        let mut p = vec![Tensor::from_vec(vec![0.0, 0.0])];
        let mut opt = OptimizerState::new(&p);
        opt.apply(&cfg, &mut p, &[Tensor::from_vec(vec![3.0, -1e-3])]);
        assert!((p[0].data()[0] + 0.01).abs() < 1e-8);
        assert!((p[0].data()[1] - 0.01).abs() < 1e-4);
    }

    #[test]
    fn refresh_fills_bank_with_replacement() {
        let cfg = ExperimentConfig {
            kde_samples: 20,
            ..tiny_cfg(DivergenceKind::Jsd)
        };
        let (src, tgt) = tiny_data();
        let pool: Vec<Tensor> = tgt[..3].to_vec();
        let mut state = TrainState::new(&cfg, 0).unwrap();
        refresh_kde(&mut state, &cfg, &src, &pool).unwrap();
        let kt = state.kde_target.as_ref().unwrap();
        assert_eq!(kt.len(), 20);
        assert!(kt.bandwidth() > 0.0);
        let first = state.clone();
        refresh_kde(&mut state, &cfg, &src, &pool).unwrap();
        assert_eq!(first, state);
        let mut other = state.clone();
        let mut pool2 = pool.clone();
        pool2[0] = tgt[4].clone();
        pool2[1] = tgt[5].clone();
        refresh_kde(&mut other, &cfg, &src, &pool2).unwrap();
        assert_eq!(other.kde_source, state.kde_source);
        assert_ne!(other.sigma_target(), state.sigma_target());
        assert!(matches!(refresh_kde(&mut state, &cfg, &src, &[]), Err(TrainError::EmptyTargetPool)));
    }

    #[test]
    fn duplicate_rows_do_not_collapse_bandwidth() {
        let bank = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![1.0], vec![3.0], vec![3.0]]).unwrap();
        assert!((bank_bandwidth(&bank, BandwidthMode::MeanNnDistance).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        let same = Tensor::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(bank_bandwidth(&same, BandwidthMode::MeanNnDistance).unwrap(), bandwidth_floor(2));
    }

    #[test]
    fn zero_lambda_matches_supervised() {
        let (src, tgt) = tiny_data();
        let none = tiny_cfg(DivergenceKind::None);
        let mut jsd0 = tiny_cfg(DivergenceKind::Jsd);
        jsd0.divergence.lambda = 0.0;
        let a = fit_split(&none, 0, &src, &tgt, &FitOptions::default()).unwrap();
        let b = fit_split(&jsd0, 0, &src, &tgt, &FitOptions::default()).unwrap();
        assert_eq!(a.best_model.to_checkpoint().digest(), b.best_model.to_checkpoint().digest());
        let seg = |r: &SplitResult| r.history.iter().map(|m| m.seg_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(seg(&a), seg(&b));
        let jsd1 = tiny_cfg(DivergenceKind::Jsd);
        let c = fit_split(&jsd1, 0, &src, &tgt, &FitOptions::default()).unwrap();
        assert_ne!(a.best_model.to_checkpoint().digest(), c.best_model.to_checkpoint().digest());
    }

    #[test]
    fn banks_constant_between_refreshes() {
        let (src, tgt) = tiny_data();
        let cfg = ExperimentConfig {
            bw_refresh_epochs: 3,
            epochs: 4,
            ..tiny_cfg(DivergenceKind::Jsd)
        };
        let data = split_data(&cfg, 0, &src, &tgt).unwrap();
        let mut state = TrainState::new(&cfg, 0).unwrap();
        let mut hashes = Vec::new();
        for _ in 0..cfg.epochs {
            run_epoch(&mut state, &cfg, &data.train, &data.val, &data.pool).unwrap();
            let mut ck = Checkpoint::new();
            ck.push("s", state.kde_source.as_ref().unwrap().samples().clone());
            ck.push("t", state.kde_target.as_ref().unwrap().samples().clone());
            hashes.push(ck.digest());
        }
        assert_eq!(hashes[0], hashes[1]);
        assert_eq!(hashes[1], hashes[2]);
        assert_ne!(hashes[2], hashes[3]);
    }

    #[test]
    fn best_checkpoint_has_lowest_val_loss() {
        let (src, tgt) = tiny_data();
        let cfg = ExperimentConfig {
            epochs: 4,
            ..tiny_cfg(DivergenceKind::MmdBandwidth)
        };
        let r = fit_split(&cfg, 1, &src, &tgt, &FitOptions::default()).unwrap();
        assert!(r.history.iter().all(|m| r.best_val_loss <= m.val_loss));
        let data = split_data(&cfg, 1, &src, &tgt).unwrap();
        assert_eq!(validation_loss(&r.best_model, &cfg, &data.val).unwrap(), r.best_val_loss);
    }

    #[test]
    fn resume_reproduces_next_epoch() {
        let (src, tgt) = tiny_data();
        let cfg = tiny_cfg(DivergenceKind::Jsd);
        let full = fit_split(&cfg, 0, &src, &tgt, &FitOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: true,
        };
        let short = ExperimentConfig { epochs: 2, ..cfg.clone() };
        fit_split(&short, 0, &src, &tgt, &opts).unwrap();
        let resumed = fit_split(&cfg, 0, &src, &tgt, &opts).unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.best_model, full.best_model);
    }

    #[test]
    fn state_checkpoint_round_trip() {
        let (src, tgt) = tiny_data();
        let cfg = tiny_cfg(DivergenceKind::Jsd);
        let data = split_data(&cfg, 0, &src, &tgt).unwrap();
        let mut state = TrainState::new(&cfg, 0).unwrap();
        run_epoch(&mut state, &cfg, &data.train, &data.val, &data.pool).unwrap();
        let back = TrainState::from_checkpoint(&state.to_checkpoint()).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn fit_writes_artifacts() {
        let (src, tgt) = tiny_data();
        let cfg = ExperimentConfig {
            epochs: 1,
            num_splits: 3,
            ..tiny_cfg(DivergenceKind::Jsd)
        };
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: false,
        };
        let run = fit(&cfg, &src, &tgt, &opts).unwrap();
        for k in 0..3 {
            assert!(dir.path().join(format!("split{k}/best.dmck")).exists());
        }
        let metrics = parse_metrics_csv(&fs::read_to_string(dir.path().join("metrics.csv")).unwrap()).unwrap();
        assert_eq!(metrics, run.history());
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert_eq!(lines.len(), 1 + 3 + 2);
        let col = |i: usize| -> Vec<f64> { lines[1..4].iter().map(|l| l.split(',').nth(i).unwrap().parse().unwrap()).collect() };
        let mean_row: Vec<f64> = lines[4].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        let std_row: Vec<f64> = lines[5].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        for i in 1..=4 {
            assert!((stats::mean(&col(i)) - mean_row[i - 1]).abs() <= 1e-12);
            assert!((stats::std(&col(i)) - std_row[i - 1]).abs() <= 1e-12);
        }
        let sidecar = ExperimentConfig::from_json(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(sidecar, cfg);
    }

    #[test]
    fn non_finite_loss_names_term() {
        let (src, tgt) = tiny_data();
        let cfg = tiny_cfg(DivergenceKind::None);
        let mut state = TrainState::new(&cfg, 0).unwrap();
        state.model.params_mut()[0].data_mut()[0] = f64::NAN;
        let err = train_step(&mut state, &cfg, &src.batch(&[0, 1]), &src.batch_labels(&[0, 1]), None, 7).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("segmentation loss"), "{err}");
        let _ = tgt;
    }

    /// One-weight "encoder" `z = w * x` on 1-d inputs, frozen elsewhere.
    fn toy_jsd(w: f64, src: &[f64], tgt: &[f64], ks: &KdeModel, kt: &KdeModel) -> (f64, f64) {
        let mut g = Graph::new();
        let wv = g.param(Tensor::scalar(w));
        let xs = g.constant(Tensor::new(vec![src.len(), 1], src.to_vec()).unwrap());
        let xt = g.constant(Tensor::new(vec![tgt.len(), 1], tgt.to_vec()).unwrap());
        let fs = g.mul(xs, wv).unwrap();
        let ft = g.mul(xt, wv).unwrap();
        let support = g.concat(&[fs, ft], 0).unwrap();
        let lp = kde_log_probs(&mut g, ks, support).unwrap();
        let lq = kde_log_probs(&mut g, kt, support).unwrap();
        let j = jsd_var(&mut g, lp, lq).unwrap();
        g.backward(j).unwrap();
        (g.value(j).item(), g.grad(wv).unwrap().item())
    }

    #[test]
    fn toy_jsd_decreases() {
        let src = [0.9, 1.0, 1.1, 1.2];
        let tgt = [2.0, 2.2, 2.4];
        let column = |v: &[f64]| Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap();
        let ks = KdeModel::fit(column(&src), BandwidthMode::MeanNnDistance).unwrap();
        let kt = KdeModel::fit(column(&[0.9, 1.0, 1.2]), BandwidthMode::MeanNnDistance).unwrap();
        let mut w = 1.0;
        let mut values = Vec::new();
        for _ in 0..50 {
            let (j, dw) = toy_jsd(w, &src, &tgt, &ks, &kt);
            values.push(j);
            w -= 0.05 * dw;
        }
        let n = values.len() as f64;
        let xm = (n - 1.0) / 2.0;
        let ym = stats::mean(&values);
        let slope: f64 = values.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum::<f64>()
            / (0..values.len()).map(|i| (i as f64 - xm).powi(2)).sum::<f64>();
        assert!(slope < 0.0, "{slope} {values:?}");
        assert!(values[49] < values[0]);
    }

    #[test]
    fn pull_together_step_does_not_increase_jsd() {
        let column = |v: &[f64]| Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap();
        let src = column(&[0.0, 0.3, 0.5, 0.9]);
        let ks = KdeModel::fit(src.clone(), BandwidthMode::MeanNnDistance).unwrap();
        for shift in [0.5, 1.0, 2.0] {
            let t: Vec<f64> = [0.1, 0.4, 0.8].iter().map(|v| v + shift).collect();
            let kt = KdeModel::fit(column(&t), BandwidthMode::MeanNnDistance).unwrap();
            let value = |t: &[f64]| {
                let mut rows = src.data().to_vec();
                rows.extend_from_slice(t);
                let support = column(&rows);
                jsd(&kde_to_discrete(&ks, &support).unwrap(), &kde_to_discrete(&kt, &support).unwrap()).unwrap()
            };
            let mut g = Graph::new();
            let tv = g.param(column(&t));
            let sv = g.constant(src.clone());
            let support = g.concat(&[sv, tv], 0).unwrap();
            let lp = kde_log_probs(&mut g, &ks, support).unwrap();
            let lq = kde_log_probs(&mut g, &kt, support).unwrap();
            let j = jsd_var(&mut g, lp, lq).unwrap();
            g.backward(j).unwrap();
            let grad = g.grad(tv).unwrap().data().to_vec();
            let stepped: Vec<f64> = t.iter().zip(&grad).map(|(x, d)| x - 1e-3 * d).collect();
            assert!(value(&stepped) <= value(&t) + 1e-15);
        }
    }
}
