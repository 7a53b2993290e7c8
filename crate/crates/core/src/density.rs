//! Gaussian kernel density estimation over flattened feature vectors.
//!
//! The kernel is the fully normalised isotropic Gaussian in `d` dimensions and
//! everything is evaluated in log space:
//!
//! ```text
//! log p(q) = logsumexp_n( -|q - x_n|^2 / (2 s^2) ) - ln N - d ln s - (d/2) ln 2pi
//! ```
//!
//! The bandwidth `s` comes from nearest-neighbour distances within the sample
//! bank. It is a plain number, so no gradient flows through it.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate bandwidth: all samples coincide")]
    DegenerateBandwidth,
    #[error("bandwidth must be finite and positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("samples contain non-finite values")]
    NonFinite,
    #[error("dimension mismatch: model has d={model}, query has d={query}")]
    DimMismatch { model: usize, query: usize },
    #[error("samples must be a rank-2 [N, d] tensor, got {0:?}")]
    NotMatrix(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DensityError>;

/// How the nearest-neighbour distances are averaged into a bandwidth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    /// Mean Euclidean distance to the nearest other sample.
    #[default]
    MeanNnDistance,
    /// Mean squared Euclidean distance to the nearest other sample.
    MeanNnSquared,
}

impl FromStr for BandwidthMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "mean-nn-distance" => Ok(Self::MeanNnDistance),
            "mean-nn-squared" => Ok(Self::MeanNnSquared),
            other => Err(format!("unknown bandwidth mode `{other}`")),
        }
    }
}

impl std::fmt::Display for BandwidthMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MeanNnDistance => "mean-nn-distance",
            Self::MeanNnSquared => "mean-nn-squared",
        })
    }
}

fn check_matrix(samples: &Tensor) -> Result<(usize, usize)> {
    if samples.rank() != 2 {
        return Err(DensityError::NotMatrix(samples.shape().to_vec()));
    }
    Ok((samples.shape()[0], samples.shape()[1]))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For every row, the index of and squared distance to its nearest other row.
/// Ties go to the lowest index.
pub fn nearest_neighbors(samples: &Tensor) -> Result<Vec<(usize, f64)>> {
    let (n, _) = check_matrix(samples)?;
    if n < 2 {
        return Err(DensityError::TooFewSamples(n));
    }
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(samples.row(i), samples.row(j));
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut best = (usize::MAX, f64::INFINITY);
            for j in (0..n).filter(|&j| j != i) {
                if d2[i * n + j] < best.1 {
                    best = (j, d2[i * n + j]);
                }
            }
            best
        })
        .collect())
}

/// Bandwidth from the mean nearest-neighbour (squared) distance.
pub fn estimate_bandwidth(samples: &Tensor, mode: BandwidthMode) -> Result<f64> {
    if !samples.is_finite() {
        return Err(DensityError::NonFinite);
    }
    let nn = nearest_neighbors(samples)?;
    let total: f64 = nn
        .iter()
        .map(|&(_, d2)| match mode {
            BandwidthMode::MeanNnDistance => d2.sqrt(),
            BandwidthMode::MeanNnSquared => d2,
        })
        .sum();
    let sigma = total / nn.len() as f64;
    if sigma <= 0.0 {
        return Err(DensityError::DegenerateBandwidth);
    }
    Ok(sigma)
}

/// Smallest bandwidth ever used in `d` dimensions: `1e-6 * sqrt(d)`.
pub fn bandwidth_floor(dim: usize) -> f64 {
    1e-6 * (dim as f64).sqrt()
}

/// [`estimate_bandwidth`], clamped below at [`bandwidth_floor`]. A degenerate
/// bank falls back to the floor with a warning instead of failing.
pub fn estimate_bandwidth_or_floor(samples: &Tensor, mode: BandwidthMode) -> Result<f64> {
    let (_, d) = check_matrix(samples)?;
    let floor = bandwidth_floor(d);
    match estimate_bandwidth(samples, mode) {
        Ok(s) => Ok(s.max(floor)),
        Err(DensityError::DegenerateBandwidth) => {
            log::warn!("degenerate KDE sample bank; using bandwidth floor {floor:e}");
            Ok(floor)
        }
        Err(e) => Err(e),
    }
}

/// Normaliser of one isotropic Gaussian kernel: `-d ln s - (d/2) ln 2pi`.
pub fn log_normalizer(dim: usize, sigma: f64) -> f64 {
    let d = dim as f64;
    -d * sigma.ln() - 0.5 * d * (2.0 * PI).ln()
}

/// Differentiable KDE log-density of each query row under the sample rows.
///
/// Both `queries` `[M, d]` and `samples` `[N, d]` may be graph tensors with
/// gradients; `sigma` is a constant.
pub fn log_density_var(g: &mut Graph, queries: Var, samples: Var, sigma: f64) -> Result<Var> {
    let (qs, ss) = (g.shape(queries).to_vec(), g.shape(samples).to_vec());
    if qs.len() != 2 || ss.len() != 2 {
        return Err(DensityError::NotMatrix(if qs.len() != 2 { qs } else { ss }));
    }
    if qs[1] != ss[1] {
        return Err(DensityError::DimMismatch {
            model: ss[1],
            query: qs[1],
        });
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(DensityError::InvalidBandwidth(sigma));
    }
    let n = ss[0] as f64;
    let d2 = g.pairwise_sq_dist(queries, samples)?;
    let scaled = g.mul_scalar(d2, -0.5 / (sigma * sigma));
    let lse = g.logsumexp(scaled, &[1])?;
    Ok(g.add_scalar(lse, log_normalizer(ss[1], sigma) - n.ln()))
}

/// Immutable sample bank plus bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    samples: Tensor,
    bandwidth: f64,
}

impl KdeModel {
    /// Requires `N >= 2` finite rows and a finite positive bandwidth.
    pub fn new(samples: Tensor, bandwidth: f64) -> Result<Self> {
        let (n, _) = check_matrix(&samples)?;
        if n < 2 {
            return Err(DensityError::TooFewSamples(n));
        }
        if !samples.is_finite() {
            return Err(DensityError::NonFinite);
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(DensityError::InvalidBandwidth(bandwidth));
        }
        Ok(Self { samples, bandwidth })
    }

    /// Estimates the bandwidth from the samples themselves (floored).
    pub fn fit(samples: Tensor, mode: BandwidthMode) -> Result<Self> {
        let sigma = estimate_bandwidth_or_floor(&samples, mode)?;
        Self::new(samples, sigma)
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn log_norm(&self) -> f64 {
        log_normalizer(self.dim(), self.bandwidth)
    }

    /// Log-density at graph-tracked queries; the bank enters as a constant.
    pub fn log_density_on(&self, g: &mut Graph, queries: Var) -> Result<Var> {
        let bank = g.constant(self.samples.clone());
        log_density_var(g, queries, bank, self.bandwidth)
    }

    /// Log-density of each row of `queries` `[M, d]`.
    pub fn log_density(&self, queries: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let q = g.constant(queries.clone());
        let out = self.log_density_on(&mut g, q)?;
        Ok(g.value(out).data().to_vec())
    }
}
