//! U-Net encoder/decoder with named feature taps.
//!
//! Every level is two 3x3 conv + ReLU blocks. The encoder halves resolution
//! with 2x2 max pooling, the decoder doubles it with nearest-neighbour
//! upsampling and concatenates the matching encoder output (skip connection)
//! before its conv block. A final 1x1 conv produces per-class logits.
//!
//! With `D = depth`, `b = base_channels` and `c_l = b * 2^l`, the parameter
//! count is
//!
//! ```text
//!   sum_{l<D} [ 9 c_l in_l + 9 c_l^2 + 2 c_l ]          encoder, in_0 = in_channels, in_l = c_{l-1}
//! + 9 c_D c_{D-1} + 9 c_D^2 + 2 c_D                      bottleneck
//! + sum_{l<D} [ 9 c_l (c_{l+1} + c_l) + 9 c_l^2 + 2 c_l ] decoder
//! + K c_0 + K                                           1x1 head, K = num_classes
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Checkpoint, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum SegNetError {
    #[error("invalid U-Net config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match model (expected [B, {channels}, {size}, {size}])")]
    InputShape {
        got: Vec<usize>,
        channels: usize,
        size: usize,
    },
    #[error("unknown feature tap `{0}`")]
    UnknownTap(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl SegNetError {
    pub fn is_io(&self) -> bool {
        match self {
            SegNetError::Checkpoint(_) => true,
            SegNetError::Tensor(e) => e.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, SegNetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            in_channels: 1,
            num_classes: 2,
            input_size: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.depth) {
            return Err(SegNetError::Config(format!("depth {} not in 1..=5", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(SegNetError::Config("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(SegNetError::Config("need at least two classes".into()));
        }
        if !self.input_size.is_power_of_two() || self.input_size % (1 << self.depth) != 0 {
            return Err(SegNetError::Config(format!(
                "input size {} must be a power of two divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Channels at level `l` (level `depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `[C, h, w]` of a tap.
    pub fn tap_shape(&self, tap: FeatureTap) -> [usize; 3] {
        let level = match tap {
            FeatureTap::Enc(i) | FeatureTap::Dec(i) => i - 1,
            FeatureTap::Deepest => self.depth,
        };
        let s = self.input_size >> level;
        [self.channels(level), s, s]
    }

    pub fn tap_dim(&self, tap: FeatureTap) -> usize {
        self.tap_shape(tap).iter().product()
    }

    /// All taps in network order: ENC1..ENC{depth}, DEEPEST, DEC{depth}..DEC1.
    pub fn taps(&self) -> Vec<FeatureTap> {
        let mut v: Vec<_> = (1..=self.depth).map(FeatureTap::Enc).collect();
        v.push(FeatureTap::Deepest);
        v.extend((1..=self.depth).rev().map(FeatureTap::Dec));
        v
    }

    pub fn has_tap(&self, tap: FeatureTap) -> bool {
        match tap {
            FeatureTap::Enc(i) | FeatureTap::Dec(i) => (1..=self.depth).contains(&i),
            FeatureTap::Deepest => true,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Parameter names and shapes in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut block = |name: &str, cin: usize, cout: usize| {
            out.push((format!("{name}.conv1.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("{name}.conv1.bias"), vec![cout]));
            out.push((format!("{name}.conv2.weight"), vec![cout, cout, 3, 3]));
            out.push((format!("{name}.conv2.bias"), vec![cout]));
        };
        for l in 0..self.depth {
            let cin = if l == 0 { self.in_channels } else { self.channels(l - 1) };
            block(&format!("enc{}", l + 1), cin, self.channels(l));
        }
        block("mid", self.channels(self.depth - 1), self.channels(self.depth));
        for l in (0..self.depth).rev() {
            block(
                &format!("dec{}", l + 1),
                self.channels(l + 1) + self.channels(l),
                self.channels(l),
            );
        }
        out.push(("head.weight".into(), vec![self.num_classes, self.channels(0), 1, 1]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

/// Named extraction point in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureTap {
    /// Output of encoder level `i` (1-based), before pooling.
    Enc(usize),
    /// Bottleneck output.
    Deepest,
    /// Output of decoder level `i` (1-based).
    Dec(usize),
}

impl fmt::Display for FeatureTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureTap::Enc(i) => write!(f, "ENC{i}"),
            FeatureTap::Deepest => write!(f, "DEEPEST"),
            FeatureTap::Dec(i) => write!(f, "DEC{i}"),
        }
    }
}

impl FromStr for FeatureTap {
    type Err = SegNetError;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        let level = |rest: &str| {
            rest.parse::<usize>()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| SegNetError::UnknownTap(s.to_string()))
        };
        if up == "DEEPEST" {
            Ok(FeatureTap::Deepest)
        } else if let Some(rest) = up.strip_prefix("ENC") {
            Ok(FeatureTap::Enc(level(rest)?))
        } else if let Some(rest) = up.strip_prefix("DEC") {
            Ok(FeatureTap::Dec(level(rest)?))
        } else {
            Err(SegNetError::UnknownTap(s.to_string()))
        }
    }
}

impl Serialize for FeatureTap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureTap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Graph outputs of one forward pass.
#[derive(Debug)]
pub struct UNetOutput {
    pub logits: Var,
    pub taps: BTreeMap<FeatureTap, Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

const CONFIG_ENTRY: &str = "__unet_config__";

impl UNetModel {
    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let t = if shape.len() == 4 {
                let fan_in = shape[1] * shape[2] * shape[3];
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Registers every parameter as a constant (inference, frozen nets).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Forward pass on a `[B, C, H, W]` batch using bound parameters.
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<UNetOutput> {
        self.run(g, params, input, None)
    }

    /// Runs the network only as far as `tap` and returns that activation.
    pub fn forward_to(&self, g: &mut Graph, params: &[Var], input: Var, tap: FeatureTap) -> Result<Var> {
        if !self.config.has_tap(tap) {
            return Err(SegNetError::UnknownTap(tap.to_string()));
        }
        let out = self.run(g, params, input, Some(tap))?;
        Ok(out.taps[&tap])
    }

    fn run(&self, g: &mut Graph, params: &[Var], input: Var, stop: Option<FeatureTap>) -> Result<UNetOutput> {
        let c = &self.config;
        let s = g.shape(input);
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.input_size || s[3] != c.input_size {
            return Err(SegNetError::InputShape {
                got: s.to_vec(),
                channels: c.in_channels,
                size: c.input_size,
            });
        }
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches layout");
        let mut conv_block = |g: &mut Graph, x: Var| -> Result<Var> {
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let h = g.conv2d(x, w1, Some(b1), 1, 1)?;
            let h = g.relu(h);
            let h = g.conv2d(h, w2, Some(b2), 1, 1)?;
            Ok(g.relu(h))
        };
        let mut taps = BTreeMap::new();
        let mut skips = Vec::with_capacity(c.depth);
        let mut x = input;
        for l in 0..c.depth {
            let h = conv_block(g, x)?;
            taps.insert(FeatureTap::Enc(l + 1), h);
            if stop == Some(FeatureTap::Enc(l + 1)) {
                return Ok(UNetOutput { logits: h, taps });
            }
            skips.push(h);
            x = g.max_pool2(h)?;
        }
        x = conv_block(g, x)?;
        taps.insert(FeatureTap::Deepest, x);
        if stop == Some(FeatureTap::Deepest) {
            return Ok(UNetOutput { logits: x, taps });
        }
        for l in (0..c.depth).rev() {
            let up = g.upsample2(x)?;
            let cat = g.concat(&[up, skips[l]], 1)?;
            x = conv_block(g, cat)?;
            taps.insert(FeatureTap::Dec(l + 1), x);
            if stop == Some(FeatureTap::Dec(l + 1)) {
                return Ok(UNetOutput { logits: x, taps });
            }
        }
        let (hw, hb) = (next(), next());
        let logits = g.conv2d(x, hw, Some(hb), 1, 0)?;
        Ok(UNetOutput { logits, taps })
    }

    /// Logits for a batch without gradient tracking.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &params, x)?;
        Ok(g.value(out.logits).clone())
    }

    /// Flattened tap features `[B, C·h·w]` without gradient tracking.
    pub fn features(&self, batch: &Tensor, tap: FeatureTap) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let x = g.constant(batch.clone());
        let h = self.forward_to(&mut g, &params, x, tap)?;
        let f = g.flatten(h)?;
        Ok(g.value(f).clone())
    }

    /// Parameters plus a config record, ready for `write_checkpoint`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        ck.push(
            CONFIG_ENTRY,
            Tensor::from_vec(
                [c.depth, c.base_channels, c.in_channels, c.num_classes, c.input_size]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
            ),
        );
        for (n, t) in self.names.iter().zip(&self.params) {
            ck.push(n.clone(), t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header = ck
            .get(CONFIG_ENTRY)
            .ok_or_else(|| SegNetError::Checkpoint("missing config record".into()))?;
        let h = header.data();
        if h.len() != 5 {
            return Err(SegNetError::Checkpoint("malformed config record".into()));
        }
        let config = UNetConfig {
            depth: h[0] as usize,
            base_channels: h[1] as usize,
            in_channels: h[2] as usize,
            num_classes: h[3] as usize,
            input_size: h[4] as usize,
        };
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let t = ck
                .get(&name)
                .ok_or_else(|| SegNetError::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(SegNetError::Checkpoint(format!("shape mismatch for {name}")));
            }
            names.push(name);
            params.push(t.clone());
        }
        Ok(Self { config, names, params })
    }
}

/// Per-sample row-major flattening of a tap to `[B, C·h·w]`.
pub fn flatten_tap(g: &mut Graph, taps: &BTreeMap<FeatureTap, Var>, tap: FeatureTap) -> Result<Var> {
    let v = *taps
        .get(&tap)
        .ok_or_else(|| SegNetError::UnknownTap(tap.to_string()))?;
    Ok(g.flatten(v)?)
}
