//! Synthetic segmentation scenes with a seeded covariate shift, plus PGM
//! import/export.
//!
//! A scene is a set of soft-edged elliptical "glands" on a flat background.
//! Masks are rasterised from the ellipse geometry before any shift is applied,
//! so a shift only changes pixel statistics, never labels.
//!
//! The shift is applied in a fixed order: box blur, `gain * v + offset`,
//! sinusoidal texture overlay, Gaussian noise, clamp to `[0, 1]`.
//!
//! External datasets use a manifest with one `image_path<TAB>mask_path` line
//! per pair (paths relative to the manifest). Images are 8- or 16-bit binary
//! PGM (`P5`), masks are 8-bit PGM holding raw class ids.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible scene: {0}")]
    Infeasible(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("dataset is empty")]
    Empty,
    #[error("missing file {0}")]
    Missing(PathBuf),
    #[error("size mismatch in pair {line} ({image} vs {mask}): image {image_size:?}, mask {mask_size:?}")]
    SizeMismatch {
        line: usize,
        image: PathBuf,
        mask: PathBuf,
        image_size: (usize, usize),
        mask_size: (usize, usize),
    },
    #[error("label {label} in {path} out of range for {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        label: u8,
        classes: usize,
    },
    #[error("malformed manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("PGM {path}: {detail}")]
    Pgm { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DataError {
    /// Missing, unreadable or malformed files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            DataError::Missing(_) | DataError::Manifest { .. } | DataError::Pgm { .. } | DataError::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive range of blob counts.
    pub num_blobs: (usize, usize),
    /// Inclusive range of ellipse semi-axes, in pixels.
    pub blob_radius: (f64, f64),
    pub foreground: f64,
    pub background: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_blobs: (2, 5),
            blob_radius: (5.0, 11.0),
            foreground: 0.75,
            background: 0.25,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (nmin, nmax) = self.num_blobs;
        let (rmin, rmax) = self.blob_radius;
        if self.image_size < 4 {
            return Err(DataError::Infeasible("image size below 4".into()));
        }
        if nmin == 0 || nmin > nmax {
            return Err(DataError::Infeasible(format!("blob count range {nmin}..={nmax}")));
        }
        if !(rmin >= 1.0 && rmin <= rmax) {
            return Err(DataError::Infeasible(format!("radius range {rmin}..={rmax}")));
        }
        if 2.0 * rmax + 2.0 > self.image_size as f64 {
            return Err(DataError::Infeasible(format!(
                "radius {rmax} does not fit a {}px image",
                self.image_size
            )));
        }
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(self.foreground) || !ok(self.background) {
            return Err(DataError::Infeasible("base intensities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Bounds on the foreground fraction of one mask: a single smallest blob
    /// below, every blob at the largest radius above, each padded by one pixel
    /// of rasterisation slack.
    pub fn foreground_bounds(&self) -> (f64, f64) {
        let area = (self.image_size * self.image_size) as f64;
        let (rmin, rmax) = self.blob_radius;
        let lo = PI * (rmin - 1.0).max(0.0).powi(2) / area;
        let hi = self.num_blobs.1 as f64 * PI * (rmax + 1.0).powi(2) / area;
        (lo, hi.min(1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub intensity_gain: f64,
    pub intensity_offset: f64,
    pub noise_std: f64,
    /// Box-blur half-width in pixels.
    pub blur_radius: usize,
    /// Texture cycles across the image width.
    pub texture_freq: f64,
    pub texture_amp: f64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        Self {
            intensity_gain: 1.0,
            intensity_offset: 0.0,
            noise_std: 0.0,
            blur_radius: 0,
            texture_freq: 0.0,
            texture_amp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.intensity_gain,
            self.intensity_offset,
            self.noise_std,
            self.texture_freq,
            self.texture_amp,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.noise_std < 0.0 {
            return Err(DataError::Infeasible("shift parameters must be finite, noise >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
    Heldout,
}

/// Integer class map of a square image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn labels(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len() as f64
    }
}

/// Where an item came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub index: usize,
    pub origin: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[1, H, W]` maps in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub masks: Vec<Mask>,
    pub domain: DomainTag,
    pub num_classes: usize,
    pub manifest: Vec<Provenance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Sub-dataset of the given item indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
            domain: self.domain,
            num_classes: self.num_classes,
            manifest: idx.iter().map(|&i| self.manifest[i].clone()).collect(),
        }
    }

    /// `[B, 1, H, W]` batch of the given items.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let items: Vec<&Tensor> = idx.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&items).expect("dataset images share a shape")
    }

    /// Flattened labels of the given items.
    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().flat_map(|&i| self.masks[i].labels()).collect()
    }
}

/// Noise-free image and mask of scene item `index`.
pub fn render_clean(scene: &SceneSpec, index: usize) -> Result<(Vec<f64>, Mask)> {
    scene.validate()?;
    let n = scene.image_size;
    let mut rng = rng_for(scene.seed, &[index as u64, 0]);
    let count = rng.gen_range(scene.num_blobs.0..=scene.num_blobs.1);
    let mut img = vec![scene.background; n * n];
    let mut mask = vec![0u8; n * n];
    let (rmin, rmax) = scene.blob_radius;
    for _ in 0..count {
        let a = rng.gen_range(rmin..=rmax);
        let b = rng.gen_range(rmin..=rmax);
        let reach = a.max(b) + 1.0;
        let cx = rng.gen_range(reach..=(n as f64 - reach));
        let cy = rng.gen_range(reach..=(n as f64 - reach));
        let theta = rng.gen_range(0.0..PI);
        // brightness falls off towards the rim; the edge is soft on both sides
        let falloff = rng.gen_range(0.15..0.35);
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = dx * ct + dy * st;
                let v = -dx * st + dy * ct;
                let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                let p = y * n + x;
                if rho <= 1.0 {
                    mask[p] = 1;
                }
                let edge = 1.0 / (1.0 + (-(1.0 - rho) * 6.0).exp());
                let fg = scene.foreground * (1.0 - falloff * rho.min(1.0));
                let val = scene.background + (fg - scene.background) * edge;
                if (val - scene.background).abs() > (img[p] - scene.background).abs() {
                    img[p] = val;
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((
        img,
        Mask {
            height: n,
            width: n,
            data: mask,
        },
    ))
}

fn box_blur(img: &[f64], n: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            for j in 0..n {
                let lo = j.saturating_sub(r);
                let hi = (j + r).min(n - 1);
                let mut s = 0.0;
                for k in lo..=hi {
                    s += if horizontal { src[i * n + k] } else { src[k * n + i] };
                }
                let v = s / (hi - lo + 1) as f64;
                if horizontal {
                    out[i * n + j] = v;
                } else {
                    out[j * n + i] = v;
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Shift of a square image before clamping.
pub fn apply_shift_unclamped(clean: &[f64], size: usize, shift: &DomainShiftSpec, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[1]);
    let mut img = if shift.blur_radius > 0 {
        box_blur(clean, size, shift.blur_radius)
    } else {
        clean.to_vec()
    };
    for v in &mut img {
        *v = *v * shift.intensity_gain + shift.intensity_offset;
    }
    if shift.texture_amp != 0.0 {
        let theta: f64 = rng.gen_range(0.0..PI);
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let k = 2.0 * PI * shift.texture_freq / size as f64;
        for y in 0..size {
            for x in 0..size {
                let t = (k * (x as f64 * ct + y as f64 * st) + phase).sin();
                img[y * size + x] += shift.texture_amp * t;
            }
        }
    }
    if shift.noise_std > 0.0 {
        let normal = Normal::new(0.0, shift.noise_std).expect("validated std");
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }
    img
}

/// Full shift, including the final clamp to `[0, 1]`.
pub fn apply_shift(clean: &[f64], size: usize, shift: &DomainShiftSpec, seed: u64) -> Vec<f64> {
    let mut img = apply_shift_unclamped(clean, size, shift, seed);
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// `count` shifted scenes; item `i` is fully determined by `(scene.seed, i)`.
pub fn generate(scene: &SceneSpec, shift: &DomainShiftSpec, count: usize, domain: DomainTag) -> Result<Dataset> {
    scene.validate()?;
    shift.validate()?;
    if count == 0 {
        return Err(DataError::Empty);
    }
    let n = scene.image_size;
    let mut ds = Dataset {
        images: Vec::with_capacity(count),
        masks: Vec::with_capacity(count),
        domain,
        num_classes: 2,
        manifest: Vec::with_capacity(count),
    };
    for i in 0..count {
        let (clean, mask) = render_clean(scene, i)?;
        let img = apply_shift(&clean, n, shift, crate::seed::derive_seed(scene.seed, &[i as u64, 1]));
        ds.images.push(Tensor::new(vec![1, n, n], img).expect("size matches"));
        ds.masks.push(mask);
        ds.manifest.push(Provenance {
            index: i,
            origin: format!("synthetic seed={} item={i}", scene.seed),
        });
    }
    Ok(ds)
}

fn fraction_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

/// Disjoint train/validation split of a labelled dataset.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Split(format!("validation fraction {val_fraction} not in (0, 1)")));
    }
    let n_val = fraction_count(ds.len(), val_fraction);
    if n_val == 0 || n_val >= ds.len() {
        return Err(DataError::Split(format!(
            "validation fraction {val_fraction} of {} items leaves an empty split",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng_for(seed, &[0x5EED]));
    let (val, train) = idx.split_at(n_val);
    Ok((ds.select(train), ds.select(val)))
}

/// `round(fraction * n)` indices out of `0..n`, drawn without replacement.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Split(format!("target fraction {fraction} not in (0, 1]")));
    }
    let k = fraction_count(n, fraction);
    if k == 0 {
        return Err(DataError::Split(format!("target fraction {fraction} of {n} items is empty")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[0x7A56]));
    idx.truncate(k);
    Ok(idx)
}

/// Target pool: `round(fraction * len)` items drawn without replacement.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    Ok(ds.select(&subsample_indices(ds.len(), fraction, seed)?))
}

/// `(train, val, target_pool)` for one split seed.
pub fn split(
    source: &Dataset,
    target: &Dataset,
    val_fraction: f64,
    target_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (train, val) = split_train_val(source, val_fraction, seed)?;
    let pool = subsample(target, target_fraction, seed)?;
    Ok((train, val, pool))
}

// ---- PGM ------------------------------------------------------------------

/// Decoded PGM raster: samples plus the declared maxval.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DataError::Missing(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    let bad = |detail: &str| DataError::Pgm {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut num = || token().and_then(|t| t.parse::<usize>().ok());
    let (width, height, maxval) = match (num(), num(), num()) {
        (Some(w), Some(h), Some(m)) if w > 0 && h > 0 && (1..=65535).contains(&m) => (w, h, m as u16),
        _ => return Err(bad("malformed header")),
    };
    pos += 1; // single whitespace after maxval
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let raster = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated raster"))?;
    let samples = if wide {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval,
        samples,
    })
}

pub fn write_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    let mut out = Vec::with_capacity(pgm.samples.len() * 2 + 32);
    write!(out, "P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval)?;
    if pgm.maxval > 255 {
        for s in &pgm.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(pgm.samples.iter().map(|&s| s as u8));
    }
    fs::write(path, out)?;
    Ok(())
}

fn image_from_pgm(p: &Pgm) -> Tensor {
    let scale = p.maxval as f64;
    Tensor::new(
        vec![1, p.height, p.width],
        p.samples.iter().map(|&s| s as f64 / scale).collect(),
    )
    .expect("raster size checked on read")
}

struct ManifestLine {
    line: usize,
    image: PathBuf,
    mask: Option<PathBuf>,
}

fn read_manifest(manifest: &Path) -> Result<Vec<ManifestLine>> {
    let text = fs::read_to_string(manifest).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DataError::Missing(manifest.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let image = cols.next().filter(|s| !s.is_empty()).ok_or(DataError::Manifest {
            line: i + 1,
            detail: "missing image path".into(),
        })?;
        let mask = cols.next().filter(|s| !s.is_empty());
        if cols.next().is_some() {
            return Err(DataError::Manifest {
                line: i + 1,
                detail: "expected two tab-separated columns".into(),
            });
        }
        out.push(ManifestLine {
            line: i + 1,
            image: base.join(image),
            mask: mask.map(|m| base.join(m)),
        });
    }
    if out.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(out)
}

/// Loads labelled image/mask pairs listed in a manifest.
pub fn load_external(manifest: &Path, num_classes: usize, domain: DomainTag) -> Result<Dataset> {
    let lines = read_manifest(manifest)?;
    let mut ds = Dataset {
        images: Vec::new(),
        masks: Vec::new(),
        domain,
        num_classes,
        manifest: Vec::new(),
    };
    for (index, l) in lines.into_iter().enumerate() {
        let mask_path = l.mask.ok_or(DataError::Manifest {
            line: l.line,
            detail: "missing mask path".into(),
        })?;
        let img = read_pgm(&l.image)?;
        let mask = read_pgm(&mask_path)?;
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(DataError::SizeMismatch {
                line: l.line,
                image: l.image,
                mask: mask_path,
                image_size: (img.width, img.height),
                mask_size: (mask.width, mask.height),
            });
        }
        if mask.maxval > 255 {
            return Err(DataError::Pgm {
                path: mask_path,
                detail: "masks must be 8-bit".into(),
            });
        }
        if let Some(&bad) = mask.samples.iter().find(|&&v| v as usize >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                path: mask_path,
                label: bad as u8,
                classes: num_classes,
            });
        }
        ds.images.push(image_from_pgm(&img));
        ds.masks.push(Mask {
            height: mask.height,
            width: mask.width,
            data: mask.samples.iter().map(|&v| v as u8).collect(),
        });
        ds.manifest.push(Provenance {
            index,
            origin: l.image.display().to_string(),
        });
    }
    Ok(ds)
}

/// Loads only the image column of a manifest; mask files are never opened.
pub fn load_external_images(manifest: &Path) -> Result<Vec<Tensor>> {
    read_manifest(manifest)?
        .iter()
        .map(|l| read_pgm(&l.image).map(|p| image_from_pgm(&p)))
        .collect()
}

/// Writes 16-bit images, 8-bit masks and a `manifest.tsv` into `dir`.
pub fn export(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, (img, mask)) in ds.images.iter().zip(&ds.masks).enumerate() {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let img_name = format!("img_{i:04}.pgm");
        let mask_name = format!("mask_{i:04}.pgm");
        write_pgm(
            &dir.join(&img_name),
            &Pgm {
                width: w,
                height: h,
                maxval: 65535,
                samples: img
                    .data()
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                    .collect(),
            },
        )?;
        write_pgm(
            &dir.join(&mask_name),
            &Pgm {
                width: mask.width,
                height: mask.height,
                maxval: 255,
                samples: mask.data.iter().map(|&v| v as u16).collect(),
            },
        )?;
        manifest.push_str(&format!("{img_name}\t{mask_name}\n"));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest)?;
    Ok(path)
}
