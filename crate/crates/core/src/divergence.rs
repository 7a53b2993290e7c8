//! Density-matching losses and the combined training objective.
//!
//! JSD is computed between two KDEs restricted to a shared finite support: both
//! models are evaluated at the same points and each set of log-densities is
//! softmax-normalised into a [`DiscreteDist`]. Graph variants keep everything
//! as log-probabilities so the mixture term never takes `ln 0`.

use std::f64::consts::LN_2;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{DensityError, KdeModel};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("support sizes differ: {0} vs {1}")]
    SupportMismatch(usize, usize),
    #[error("KL divergence is infinite (q_{0} = 0 where p_{0} > 0)")]
    Infinite(usize),
    #[error("invalid distribution: {0}")]
    InvalidDist(String),
    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("need at least {need} evaluation points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DivergenceError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivergenceKind {
    #[serde(rename = "jsd")]
    Jsd,
    /// MMD with a constant bandwidth.
    #[serde(rename = "mmd-c")]
    MmdConstant,
    /// MMD with the nearest-neighbour bandwidth.
    #[serde(rename = "mmd-b")]
    MmdBandwidth,
    #[default]
    #[serde(rename = "none")]
    None,
}

impl DivergenceKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Jsd => "jsd",
            Self::MmdConstant => "mmd-c",
            Self::MmdBandwidth => "mmd-b",
            Self::None => "none",
        }
    }

    /// Short display name used in result tables.
    pub fn table_name(&self) -> &'static str {
        match self {
            Self::Jsd => "JSD",
            Self::MmdConstant => "MMD-C",
            Self::MmdBandwidth => "MMD-B",
            Self::None => "No Adapt",
        }
    }
}

impl std::fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DivergenceKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jsd" => Ok(Self::Jsd),
            "mmd-c" => Ok(Self::MmdConstant),
            "mmd-b" => Ok(Self::MmdBandwidth),
            "none" | "no-adapt" => Ok(Self::None),
            other => Err(format!("unknown divergence kind `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    pub kind: DivergenceKind,
    pub lambda: f64,
    pub mmd_constant_sigma: f64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            kind: DivergenceKind::Jsd,
            lambda: 0.01,
            mmd_constant_sigma: 1.0,
        }
    }
}

impl DivergenceConfig {
    pub fn none() -> Self {
        Self {
            kind: DivergenceKind::None,
            ..Self::default()
        }
    }

    pub fn with_kind(kind: DivergenceKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(DivergenceError::InvalidDist(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(self.mmd_constant_sigma.is_finite() && self.mmd_constant_sigma > 0.0) {
            return Err(DivergenceError::InvalidBandwidth(self.mmd_constant_sigma));
        }
        Ok(())
    }
}

/// Probability vector over a finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    /// Probabilities must be non-negative and sum to 1 within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DivergenceError::InvalidDist("empty support".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(DivergenceError::InvalidDist("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DivergenceError::InvalidDist(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Softmax of unnormalised log-weights.
    pub fn from_log_weights(logw: &[f64]) -> Result<Self> {
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(DivergenceError::NonFinite("log-weights"));
        }
        let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        Self::new(w.into_iter().map(|v| v / z).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `sum p_i ln(p_i / q_i)` in nats, with `0 ln 0 = 0`.
pub fn kl(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DivergenceError::SupportMismatch(p.len(), q.len()));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(DivergenceError::Infinite(i));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn jsd(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DivergenceError::SupportMismatch(p.len(), q.len()));
    }
    let m = DiscreteDist {
        probs: p.probs.iter().zip(&q.probs).map(|(a, b)| 0.5 * (a + b)).collect(),
    };
    Ok(0.5 * (kl(p, &m)? + kl(q, &m)?))
}

/// Log-probabilities `[S]` of a KDE restricted to `eval_points` `[S, d]`.
pub fn kde_log_probs(g: &mut Graph, model: &KdeModel, eval_points: Var) -> Result<Var> {
    let s = g.shape(eval_points).first().copied().unwrap_or(0);
    if s < 2 {
        return Err(DivergenceError::TooFewPoints { need: 2, got: s });
    }
    let logd = model.log_density_on(g, eval_points)?;
    Ok(g.log_softmax(logd, 0)?)
}

/// Value-level [`kde_log_probs`].
pub fn kde_to_discrete(model: &KdeModel, eval_points: &Tensor) -> Result<DiscreteDist> {
    let mut g = Graph::new();
    let e = g.constant(eval_points.clone());
    let lp = kde_log_probs(&mut g, model, e)?;
    DiscreteDist::new(g.value(lp).data().iter().map(|l| l.exp()).collect())
}

/// Differentiable KL between two log-probability vectors.
pub fn kl_var(g: &mut Graph, logp: Var, logq: Var) -> Result<Var> {
    let p = g.exp(logp);
    let diff = g.sub(logp, logq)?;
    let terms = g.mul(p, diff)?;
    Ok(g.sum_all(terms))
}

/// Differentiable JSD between two log-probability vectors.
pub fn jsd_var(g: &mut Graph, logp: Var, logq: Var) -> Result<Var> {
    if g.shape(logp) != g.shape(logq) {
        return Err(DivergenceError::SupportMismatch(
            g.value(logp).numel(),
            g.value(logq).numel(),
        ));
    }
    let lse = g.log_add_exp(logp, logq)?;
    let logm = g.add_scalar(lse, -LN_2);
    let a = kl_var(g, logp, logm)?;
    let b = kl_var(g, logq, logm)?;
    let s = g.add(a, b)?;
    Ok(g.mul_scalar(s, 0.5))
}

/// Differentiable biased (V-statistic) squared MMD with a Gaussian kernel.
pub fn mmd2_var(g: &mut Graph, x: Var, y: Var, sigma: f64) -> Result<Var> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(DivergenceError::InvalidBandwidth(sigma));
    }
    let scale = -0.5 / (sigma * sigma);
    let kernel_mean = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
        let d = g.pairwise_sq_dist(a, b)?;
        let s = g.mul_scalar(d, scale);
        let k = g.exp(s);
        Ok(g.mean_all(k))
    };
    let kxx = kernel_mean(g, x, x)?;
    let kyy = kernel_mean(g, y, y)?;
    let kxy = kernel_mean(g, x, y)?;
    let same = g.add(kxx, kyy)?;
    let cross = g.mul_scalar(kxy, 2.0);
    Ok(g.sub(same, cross)?)
}

/// Squared MMD between the rows of `x` `[n, d]` and `y` `[m, d]`.
pub fn mmd2(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
    let v = mmd2_var(&mut g, a, b, sigma)?;
    Ok(g.value(v).item())
}

/// Mean per-pixel cross-entropy of `[B, C, H, W]` logits against class ids.
pub fn segmentation_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = g.shape(logits).get(1).copied().unwrap_or(0);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(DivergenceError::LabelOutOfRange { label, classes });
    }
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.pick(logp, labels)?;
    let mean = g.mean_all(picked);
    Ok(g.neg(mean))
}

/// `1 - soft Dice` over all classes, with one-hot targets.
pub fn dice_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let classes = shape.get(1).copied().unwrap_or(0);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(DivergenceError::LabelOutOfRange { label, classes });
    }
    let inner: usize = shape[2..].iter().product();
    if labels.len() != shape[0] * inner {
        return Err(DivergenceError::Tensor(TensorError::InvalidArgument {
            op: "dice_loss",
            detail: format!("{} labels for {} positions", labels.len(), shape[0] * inner),
        }));
    }
    let mut onehot = vec![0.0; shape.iter().product()];
    for (p, &l) in labels.iter().enumerate() {
        let (b, i) = (p / inner, p % inner);
        onehot[(b * classes + l) * inner + i] = 1.0;
    }
    let target = g.constant(Tensor::new(shape, onehot)?);
    let logp = g.log_softmax(logits, 1)?;
    let probs = g.exp(logp);
    let inter = g.mul(probs, target)?;
    let inter = g.sum_all(inter);
    let num = g.mul_scalar(inter, 2.0);
    let num = g.add_scalar(num, 1.0);
    let sp = g.sum_all(probs);
    let st = g.sum_all(target);
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, 1.0);
    let dice = g.div(num, den)?;
    let neg = g.neg(dice);
    Ok(g.add_scalar(neg, 1.0))
}

/// `seg + lambda * div`; just `seg` when the kind is `None`.
pub fn combined_loss(g: &mut Graph, seg: Var, div: Option<Var>, cfg: &DivergenceConfig) -> Result<Var> {
    if !g.value(seg).is_finite() {
        return Err(DivergenceError::NonFinite("segmentation loss"));
    }
    match (cfg.kind, div) {
        (DivergenceKind::None, _) | (_, None) => Ok(seg),
        (_, Some(d)) => {
            if !g.value(d).is_finite() {
                return Err(DivergenceError::NonFinite("divergence"));
            }
            let scaled = g.mul_scalar(d, cfg.lambda);
            Ok(g.add(seg, scaled)?)
        }
    }
}
