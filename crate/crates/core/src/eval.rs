//! Dice evaluation, the method × target-fraction matrix and ablation sweeps.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{Dataset, DomainTag};
use crate::divergence::{DivergenceConfig, DivergenceKind};
use crate::segnet::{FeatureTap, SegNetError, UNetModel};
use crate::stats::{self, sign_test, SignTest};
use crate::tensor::Tensor;
use crate::trainer::{fit, ExperimentConfig, FitOptions, RunArtifacts, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    Empty,
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("model expects {expected}x{expected} images with {channels} channel(s), dataset has {got:?}")]
    Geometry {
        expected: usize,
        channels: usize,
        got: Vec<usize>,
    },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    SegNet(#[from] SegNetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EvalError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, EvalError::Train(e) if e.is_numerical())
    }

    pub fn is_io(&self) -> bool {
        match self {
            EvalError::Io(_) => true,
            EvalError::Train(e) => e.is_io(),
            EvalError::SegNet(e) => e.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `2|P ∩ T| / (|P| + |T|)` for one class; 1 when both are empty.
pub fn dice(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(EvalError::ShapeMismatch(pred.len(), truth.len()));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        t += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Argmax class map per image.
pub fn predict_masks(model: &UNetModel, images: &[Tensor], batch: usize) -> Result<Vec<Vec<u8>>> {
    let c = model.config();
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(batch.max(1)) {
        let x = Tensor::stack(&part.iter().collect::<Vec<_>>()).map_err(SegNetError::from)?;
        let logits = model.predict(&x)?;
        let s = logits.shape();
        let (k, hw) = (s[1], s[2] * s[3]);
        for b in 0..s[0] {
            let base = b * k * hw;
            let d = logits.data();
            out.push(
                (0..hw)
                    .map(|p| {
                        let mut best = 0;
                        for cls in 1..k {
                            if d[base + cls * hw + p] > d[base + best * hw + p] {
                                best = cls;
                            }
                        }
                        best as u8
                    })
                    .collect(),
            );
        }
        debug_assert_eq!(k, c.num_classes);
    }
    Ok(out)
}

fn check_geometry(model: &UNetModel, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(EvalError::Empty);
    }
    let c = model.config();
    for im in &ds.images {
        if im.shape() != [c.in_channels, c.input_size, c.input_size] {
            return Err(EvalError::Geometry {
                expected: c.input_size,
                channels: c.in_channels,
                got: im.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Per-image Dice, averaged over the foreground classes `1..C`.
pub fn image_dice(model: &UNetModel, ds: &Dataset) -> Result<Vec<f64>> {
    check_geometry(model, ds)?;
    let preds = predict_masks(model, &ds.images, 10)?;
    let classes = model.config().num_classes;
    preds
        .iter()
        .zip(&ds.masks)
        .map(|(p, m)| {
            let per: Result<Vec<f64>> = (1..classes).map(|c| dice(p, &m.data, c as u8)).collect();
            Ok(stats::mean(&per?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainReport {
    pub domain: DomainTag,
    /// Mean Dice of each split's model.
    pub per_split: Vec<f64>,
    /// Per-image Dice, one list per split.
    pub per_image: Vec<Vec<f64>>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fingerprint: String,
    pub domains: Vec<DomainReport>,
}

pub const REPORT_HEADER: &str = "domain,split,dice";

fn domain_name(d: DomainTag) -> &'static str {
    match d {
        DomainTag::Source => "source",
        DomainTag::Target => "target",
        DomainTag::Heldout => "heldout",
    }
}

impl EvalReport {
    pub fn domain(&self, d: DomainTag) -> Option<&DomainReport> {
        self.domains.iter().find(|r| r.domain == d)
    }

    /// `domain,split,dice` rows, then `mean` and `std` rows per domain.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.domains {
            let name = domain_name(r.domain);
            for (k, v) in r.per_split.iter().enumerate() {
                s.push_str(&format!("{name},{k},{v}\n"));
            }
            s.push_str(&format!("{name},mean,{}\n", r.mean));
            s.push_str(&format!("{name},std,{}\n", r.std));
        }
        s
    }

    /// `domain,split,image,dice` rows.
    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("domain,split,image,dice\n");
        for r in &self.domains {
            for (k, imgs) in r.per_image.iter().enumerate() {
                for (i, v) in imgs.iter().enumerate() {
                    s.push_str(&format!("{},{k},{i},{v}\n", domain_name(r.domain)));
                }
            }
        }
        s
    }
}

/// One model per split, every model scored on every dataset.
pub fn evaluate_splits(models: &[UNetModel], sets: &[&Dataset], fingerprint: &str) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(EvalError::Config("no models to evaluate".into()));
    }
    let mut domains = Vec::new();
    for ds in sets {
        let per_image = models.iter().map(|m| image_dice(m, ds)).collect::<Result<Vec<_>>>()?;
        let per_split: Vec<f64> = per_image.iter().map(|v| stats::mean(v)).collect();
        domains.push(DomainReport {
            domain: ds.domain,
            mean: stats::mean(&per_split),
            std: stats::std(&per_split),
            per_split,
            per_image,
        });
    }
    Ok(EvalReport {
        fingerprint: fingerprint.to_string(),
        domains,
    })
}

/// Single model on a single dataset; the fingerprint is the checkpoint digest.
pub fn evaluate(model: &UNetModel, ds: &Dataset) -> Result<EvalReport> {
    evaluate_splits(std::slice::from_ref(model), &[ds], &model.to_checkpoint().digest())
}

pub fn config_fingerprint(cfg: &ExperimentConfig) -> String {
    hex::encode(&Sha256::digest(cfg.to_json().as_bytes())[..8])
}

/// Training and test data shared by every matrix or ablation cell.
pub struct ExperimentData {
    /// Labelled source training set (split into train/val per seed).
    pub source: Dataset,
    /// Unlabelled target images the pool is drawn from.
    pub target_images: Vec<Tensor>,
    pub source_test: Dataset,
    pub target_test: Dataset,
    pub heldout_test: Option<Dataset>,
}

impl ExperimentData {
    fn test_sets(&self) -> Vec<&Dataset> {
        let mut v = vec![&self.source_test, &self.target_test];
        if let Some(h) = &self.heldout_test {
            v.push(h);
        }
        v
    }
}

/// Per-seed Dice of one trained configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CellScores {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub heldout: Vec<f64>,
}

fn score_run(run: &RunArtifacts, data: &ExperimentData) -> Result<(CellScores, EvalReport)> {
    let models: Vec<UNetModel> = run.splits.iter().map(|s| s.best_model.clone()).collect();
    let report = evaluate_splits(&models, &data.test_sets(), &config_fingerprint(&run.config))?;
    let get = |d| report.domain(d).map(|r| r.per_split.clone()).unwrap_or_default();
    Ok((
        CellScores {
            source: get(DomainTag::Source),
            target: get(DomainTag::Target),
            heldout: get(DomainTag::Heldout),
        },
        report,
    ))
}

fn train_and_score(cfg: &ExperimentConfig, data: &ExperimentData, out: Option<PathBuf>) -> Result<CellScores> {
    let opts = FitOptions {
        out_dir: out.clone(),
        resume: false,
    };
    let run = fit(cfg, &data.source, &data.target_images, &opts)?;
    let (scores, report) = score_run(&run, data)?;
    if let Some(d) = out {
        fs::write(d.join("eval.csv"), report.to_csv())?;
        fs::write(d.join("eval_images.csv"), report.per_image_csv())?;
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCell {
    pub method: DivergenceKind,
    pub fraction: f64,
    pub scores: CellScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedComparison {
    pub method: DivergenceKind,
    pub fraction: f64,
    /// Mean of `method − No Adapt` target Dice over seeds.
    pub mean_diff: f64,
    pub test: SignTest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixResult {
    pub methods: Vec<DivergenceKind>,
    pub fractions: Vec<f64>,
    pub cells: Vec<MatrixCell>,
}

pub fn fraction_label(f: f64) -> String {
    format!("{}%", (f * 1000.0).round() / 10.0)
}

fn pm(xs: &[f64]) -> String {
    format!("{:.4}±{:.4}", stats::mean(xs), stats::std(xs))
}

impl MatrixResult {
    pub fn cell(&self, method: DivergenceKind, fraction: f64) -> Option<&MatrixCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.fraction.to_bits() == fraction.to_bits())
    }

    /// Methods against No Adapt, paired by seed, on target Dice.
    pub fn paired(&self) -> Vec<PairedComparison> {
        let mut out = Vec::new();
        for c in &self.cells {
            if c.method == DivergenceKind::None {
                continue;
            }
            if let Some(base) = self.cell(DivergenceKind::None, c.fraction) {
                let diffs: Vec<f64> = c.scores.target.iter().zip(&base.scores.target).map(|(a, b)| a - b).collect();
                out.push(PairedComparison {
                    method: c.method,
                    fraction: c.fraction,
                    mean_diff: stats::mean(&diffs),
                    test: sign_test(&c.scores.target, &base.scores.target),
                });
            }
        }
        out
    }

    /// Rows are methods, columns are target fractions, cells are target
    /// `mean±std`.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("method");
        for f in &self.fractions {
            s.push_str(&format!(",{}", fraction_label(*f)));
        }
        s.push('\n');
        for m in &self.methods {
            s.push_str(m.table_name());
            for f in &self.fractions {
                let cell = self.cell(*m, *f).map_or(String::new(), |c| pm(&c.scores.target));
                s.push_str(&format!(",{cell}"));
            }
            s.push('\n');
        }
        s
    }

    pub const PER_SEED_HEADER: &'static str = "method,fraction,split,source_dice,target_dice,heldout_dice";

    pub fn per_seed_csv(&self) -> String {
        let mut s = format!("{}\n", Self::PER_SEED_HEADER);
        for c in &self.cells {
            for k in 0..c.scores.target.len() {
                let h = c.scores.heldout.get(k).map_or(String::new(), |v| v.to_string());
                s.push_str(&format!(
                    "{},{},{k},{},{},{h}\n",
                    c.method, c.fraction, c.scores.source[k], c.scores.target[k]
                ));
            }
        }
        s
    }

    pub const PLOT_HEADER: &'static str =
        "method,fraction,source_mean,source_std,target_mean,target_std,heldout_mean,heldout_std";

    /// One row per cell, ready for a grouped bar plot.
    pub fn plot_csv(&self) -> String {
        let mut s = format!("{}\n", Self::PLOT_HEADER);
        for c in &self.cells {
            let ms = |v: &[f64]| {
                if v.is_empty() {
                    ",".to_string()
                } else {
                    format!("{},{}", stats::mean(v), stats::std(v))
                }
            };
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.method,
                c.fraction,
                ms(&c.scores.source),
                ms(&c.scores.target),
                ms(&c.scores.heldout)
            ));
        }
        s
    }

    pub const PAIRED_HEADER: &'static str = "method,fraction,baseline,mean_diff,wins,losses,ties,p_value";

    pub fn paired_csv(&self) -> String {
        let mut s = format!("{}\n", Self::PAIRED_HEADER);
        for p in self.paired() {
            s.push_str(&format!(
                "{},{},none,{},{},{},{},{}\n",
                p.method, p.fraction, p.mean_diff, p.test.wins, p.test.losses, p.test.ties, p.test.p_value
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("matrix_table.csv"), self.table_csv())?;
        fs::write(dir.join("matrix_per_seed.csv"), self.per_seed_csv())?;
        fs::write(dir.join("matrix_plot.csv"), self.plot_csv())?;
        fs::write(dir.join("matrix_paired.csv"), self.paired_csv())?;
        Ok(())
    }
}

/// Trains every (method, fraction) cell with the base seeds. No Adapt never
/// sees target data, so it is trained once and shared by all fractions.
pub fn run_matrix(
    methods: &[DivergenceConfig],
    fractions: &[f64],
    base: &ExperimentConfig,
    data: &ExperimentData,
    out_dir: Option<&Path>,
) -> Result<MatrixResult> {
    if methods.is_empty() || fractions.is_empty() {
        return Err(EvalError::Config("matrix needs at least one method and one fraction".into()));
    }
    let mut cells = Vec::new();
    let mut none_scores: Option<CellScores> = None;
    for m in methods {
        for &f in fractions {
            let cfg = ExperimentConfig {
                divergence: *m,
                target_fraction: f,
                ..base.clone()
            };
            cfg.validate()?;
            let cell_dir = out_dir.map(|d| d.join(format!("{}_{}", m.kind, f)));
            let scores = if m.kind == DivergenceKind::None {
                match &none_scores {
                    Some(s) => s.clone(),
                    None => {
                        let s = train_and_score(&cfg, data, cell_dir)?;
                        none_scores = Some(s.clone());
                        s
                    }
                }
            } else {
                train_and_score(&cfg, data, cell_dir)?
            };
            log::info!("cell {} @ {f}: target {}", m.kind, pm(&scores.target));
            cells.push(MatrixCell {
                method: m.kind,
                fraction: f,
                scores,
            });
        }
    }
    let result = MatrixResult {
        methods: methods.iter().map(|m| m.kind).collect(),
        fractions: fractions.to_vec(),
        cells,
    };
    if let Some(d) = out_dir {
        result.write(d)?;
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    FeatureSpace,
    BwFrequency,
    KdeSamples,
    TargetFraction,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::FeatureSpace => "feature-space",
            AblationAxis::BwFrequency => "bw-frequency",
            AblationAxis::KdeSamples => "kde-samples",
            AblationAxis::TargetFraction => "target-fraction",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature-space" => Ok(AblationAxis::FeatureSpace),
            "bw-frequency" => Ok(AblationAxis::BwFrequency),
            "kde-samples" => Ok(AblationAxis::KdeSamples),
            "target-fraction" => Ok(AblationAxis::TargetFraction),
            other => Err(EvalError::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AblationValue {
    Tap(FeatureTap),
    Epochs(usize),
    Samples(usize),
    Fraction(f64),
}

impl fmt::Display for AblationValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationValue::Tap(t) => write!(f, "{t}"),
            AblationValue::Epochs(e) => write!(f, "{e}"),
            AblationValue::Samples(n) => write!(f, "{n}"),
            AblationValue::Fraction(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub values: Vec<AblationValue>,
    pub base: ExperimentConfig,
}

impl AblationGrid {
    /// The standard sweep for an axis: every tap (deepest first, then
    /// encoders, then decoders), refresh every 1/5/25/125 epochs, 10/20/80
    /// KDE samples, 3%/30%/100% of the target set.
    pub fn standard(axis: AblationAxis, base: ExperimentConfig) -> Self {
        let values = match axis {
            AblationAxis::FeatureSpace => {
                let d = base.unet.depth;
                std::iter::once(FeatureTap::Deepest)
                    .chain((1..=d).map(FeatureTap::Enc))
                    .chain((1..=d).rev().map(FeatureTap::Dec))
                    .map(AblationValue::Tap)
                    .collect()
            }
            AblationAxis::BwFrequency => [1, 5, 25, 125].into_iter().map(AblationValue::Epochs).collect(),
            AblationAxis::KdeSamples => [10, 20, 80].into_iter().map(AblationValue::Samples).collect(),
            AblationAxis::TargetFraction => [0.03, 0.3, 1.0].into_iter().map(AblationValue::Fraction).collect(),
        };
        Self { axis, values, base }
    }

    pub fn config_for(&self, v: AblationValue) -> Result<ExperimentConfig> {
        let mut c = self.base.clone();
        match (self.axis, v) {
            (AblationAxis::FeatureSpace, AblationValue::Tap(t)) => c.tap = t,
            (AblationAxis::BwFrequency, AblationValue::Epochs(e)) => c.bw_refresh_epochs = e,
            (AblationAxis::KdeSamples, AblationValue::Samples(n)) => c.kde_samples = n,
            (AblationAxis::TargetFraction, AblationValue::Fraction(f)) => c.target_fraction = f,
            (axis, v) => return Err(EvalError::Config(format!("value {v} does not belong to axis {axis}"))),
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(EvalError::Config("ablation grid has no values".into()));
        }
        for v in &self.values {
            self.config_for(*v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: AblationValue,
    pub feature_dim: usize,
    pub scores: CellScores,
}

pub const ABLATION_HEADER: &str = "axis,value,feature_dim,source_mean,source_std,target_mean,target_std";

pub fn ablation_csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{axis},{},{},{},{},{},{}\n",
            r.value,
            r.feature_dim,
            stats::mean(&r.scores.source),
            stats::std(&r.scores.source),
            stats::mean(&r.scores.target),
            stats::std(&r.scores.target)
        ));
    }
    s
}

/// One fit + evaluation per grid value, all with the base seeds.
pub fn run_ablation(grid: &AblationGrid, data: &ExperimentData, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let mut rows = Vec::new();
    for &v in &grid.values {
        let cfg = grid.config_for(v)?;
        let cell_dir = out_dir.map(|d| d.join(format!("{}_{v}", grid.axis)));
        let scores = train_and_score(&cfg, data, cell_dir)?;
        log::info!("ablation {} = {v}: target {}", grid.axis, pm(&scores.target));
        rows.push(AblationRow {
            value: v,
            feature_dim: cfg.unet.tap_dim(cfg.tap),
            scores,
        });
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
        fs::write(d.join(format!("ablation_{}.csv", grid.axis)), ablation_csv(grid.axis, &rows))?;
    }
    Ok(rows)
}
