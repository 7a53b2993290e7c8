//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use featmatch::datagen::{self, DomainShiftSpec, DomainTag, SceneSpec};
use featmatch::density::{estimate_bandwidth, BandwidthMode, KdeModel};
use featmatch::divergence::{jsd, kl, mmd2, segmentation_loss, DiscreteDist, DivergenceConfig, DivergenceKind};
use featmatch::seed::rng_for;
use featmatch::segnet::{UNetConfig, UNetModel};
use featmatch::stats;
use featmatch::tensor::{Checkpoint, Graph, Tensor};
use featmatch::trainer::{
    fit_split, parse_metrics_csv, split_data, validation_loss, ExperimentConfig, FitOptions, OptimizerKind,
    OptimizerState,
};
use rand::seq::SliceRandom;
use rand::Rng;

type Check = Result<String, String>;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_featmatch"))
}

fn run(cmd: &mut Command) -> Result<(i32, String), String> {
    let out = cmd.output().map_err(|e| format!("spawn: {e}"))?;
    Ok((out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned()))
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            ensure(cells.len() == header.len(), format!("ragged row `{l}` in {}", path.display()))?;
            Ok(header.iter().zip(cells).map(|(h, c)| (h.to_string(), c.to_string())).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    row.get(key)
        .ok_or(format!("missing column {key}"))?
        .parse()
        .map_err(|e| format!("{key}: {e}"))
}

const GRAD_OPS: [&str; 7] = [
    "log_density",
    "kde_to_discrete",
    "kl",
    "jsd",
    "mmd2",
    "segmentation_loss",
    "jsd_kde_pipeline",
];

fn gradient_suite() -> Check {
    let t = Instant::now();
    let (code, out) = run(bin().args(["gradcheck", "--cases", "20"]))?;
    let elapsed = t.elapsed();
    ensure(code == 0, format!("gradcheck exited {code}"))?;
    ensure(elapsed < Duration::from_secs(120), format!("gradcheck took {elapsed:?}"))?;
    let rows: Vec<&str> = out.lines().filter(|l| l.contains("max_rel_err=")).collect();
    for op in GRAD_OPS {
        ensure(rows.iter().any(|r| r.split_whitespace().next() == Some(op)), format!("{op} not checked"))?;
    }
    let mut worst = 0.0f64;
    for r in &rows {
        let f: Vec<&str> = r.split_whitespace().collect();
        let cases: usize = f[1].trim_start_matches("cases=").parse().map_err(|_| r.to_string())?;
        let err: f64 = f[2].trim_start_matches("max_rel_err=").parse().map_err(|_| r.to_string())?;
        let tol = if f[0] == "jsd_kde_pipeline" { 1e-3 } else { 1e-4 };
        ensure(cases >= 20, format!("{} ran {cases} cases", f[0]))?;
        ensure(err < tol, format!("{} error {err:e}", f[0]))?;
        worst = worst.max(err);
    }
    Ok(format!("{} ops, worst rel err {worst:.2e}, {:.1}s", rows.len(), elapsed.as_secs_f64()))
}

fn density_correctness() -> Check {
    // 1-d: trapezoid rule over a wide interval.
    let kde1 = KdeModel::new(Tensor::new(vec![3, 1], vec![-0.4, 0.1, 0.9]).unwrap(), 0.3).unwrap();
    let n = 4001;
    let (lo, hi) = (-4.0, 5.0);
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
    let d1 = kde1.log_density(&Tensor::new(vec![n, 1], xs).unwrap()).map_err(|e| e.to_string())?;
    let mass1: f64 = d1.iter().enumerate().map(|(i, l)| l.exp() * if i == 0 || i == n - 1 { 0.5 } else { 1.0 }).sum::<f64>() * h;
    ensure((mass1 - 1.0).abs() < 1e-3, format!("1-d mass {mass1}"))?;

    // 2-d: midpoint rule on a grid.
    let kde2 = KdeModel::new(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.5, -0.3]).unwrap(), 0.4).unwrap();
    let m = 301;
    let (lo, hi) = (-3.5, 4.0);
    let h = (hi - lo) / m as f64;
    let mut pts = Vec::with_capacity(2 * m * m);
    for i in 0..m {
        for j in 0..m {
            pts.push(lo + h * (i as f64 + 0.5));
            pts.push(lo + h * (j as f64 + 0.5));
        }
    }
    let d2 = kde2.log_density(&Tensor::new(vec![m * m, 2], pts).unwrap()).map_err(|e| e.to_string())?;
    let mass2: f64 = d2.iter().map(|l| l.exp()).sum::<f64>() * h * h;
    ensure((mass2 - 1.0).abs() < 1e-3, format!("2-d mass {mass2}"))?;

    let bank = Tensor::new(vec![3, 1], vec![0.0, 1.0, 3.0]).unwrap();
    let bw = estimate_bandwidth(&bank, BandwidthMode::MeanNnDistance).map_err(|e| e.to_string())?;
    let bw2 = estimate_bandwidth(&bank, BandwidthMode::MeanNnSquared).map_err(|e| e.to_string())?;
    ensure(bw == 4.0 / 3.0, format!("bandwidth {bw}"))?;
    ensure(bw2 == 2.0, format!("squared bandwidth {bw2}"))?;

    let mut rng = rng_for(11, &[2]);
    let samples: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let queries: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let shift = [0.7, -1.3];
    let moved = |v: &[f64]| v.iter().enumerate().map(|(i, x)| x + shift[i % 2]).collect::<Vec<_>>();
    let a = KdeModel::new(Tensor::new(vec![10, 2], samples.clone()).unwrap(), 0.5).unwrap();
    let b = KdeModel::new(Tensor::new(vec![10, 2], moved(&samples)).unwrap(), 0.5).unwrap();
    let la = a.log_density(&Tensor::new(vec![6, 2], queries.clone()).unwrap()).map_err(|e| e.to_string())?;
    let lb = b.log_density(&Tensor::new(vec![6, 2], moved(&queries)).unwrap()).map_err(|e| e.to_string())?;
    let drift = la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(drift < 1e-10, format!("translation drift {drift:e}"))?;
    Ok(format!("mass 1-d {mass1:.6}, 2-d {mass2:.6}, drift {drift:.1e}"))
}

fn divergence_properties() -> Check {
    let dist = |v: Vec<f64>| DiscreteDist::new(v).map_err(|e| e.to_string());
    let mut rng = rng_for(12, &[3]);
    for _ in 0..200 {
        let n = rng.gen_range(1..10);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let w: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() }).collect();
            let s: f64 = w.iter().sum();
            if s == 0.0 {
                vec![1.0 / n as f64; n]
            } else {
                w.iter().map(|x| x / s).collect()
            }
        };
        let p = dist(draw(&mut rng))?;
        let q = dist(draw(&mut rng))?;
        let pq = jsd(&p, &q).map_err(|e| e.to_string())?;
        let qp = jsd(&q, &p).map_err(|e| e.to_string())?;
        ensure((pq - qp).abs() < 1e-12, format!("asymmetric jsd {pq} vs {qp}"))?;
        ensure((0.0..=LN_2 + 1e-12).contains(&pq), format!("jsd {pq} out of bounds"))?;
        ensure(jsd(&p, &p).map_err(|e| e.to_string())?.abs() < 1e-12, "jsd(p, p) != 0")?;
    }
    let k = kl(&dist(vec![1.0, 0.0])?, &dist(vec![0.5, 0.5])?).map_err(|e| e.to_string())?;
    ensure((k - LN_2).abs() < 1e-12, format!("kl {k}"))?;
    let x = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let self_mmd = mmd2(&x, &x, 0.8).map_err(|e| e.to_string())?;
    ensure(self_mmd.abs() <= 1e-12, format!("mmd2(X, X) = {self_mmd:e}"))?;
    let m = mmd2(&Tensor::new(vec![1, 1], vec![0.0]).unwrap(), &Tensor::new(vec![1, 1], vec![1.0]).unwrap(), 1.0)
        .map_err(|e| e.to_string())?;
    let want = 2.0 - 2.0 * (-0.5f64).exp();
    ensure((m - want).abs() < 1e-9, format!("mmd2 pair {m} vs {want}"))?;
    Ok(format!("kl {k:.12}, mmd2 pair {m:.10}"))
}

fn tiny_scene(seed: u64) -> SceneSpec {
    SceneSpec {
        image_size: 16,
        num_blobs: (1, 2),
        blob_radius: (2.0, 4.0),
        seed,
        ..SceneSpec::default()
    }
}

fn tiny_shift() -> DomainShiftSpec {
    DomainShiftSpec {
        intensity_gain: 0.6,
        intensity_offset: 0.25,
        noise_std: 0.05,
        blur_radius: 0,
        texture_freq: 4.0,
        texture_amp: 0.2,
    }
}

fn tiny_config(kind: DivergenceKind) -> ExperimentConfig {
    ExperimentConfig {
        unet: UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 1,
            num_classes: 2,
            input_size: 16,
        },
        divergence: DivergenceConfig {
            lambda: 0.5,
            ..DivergenceConfig::with_kind(kind)
        },
        optimizer: OptimizerKind::Adamw,
        lr: 1e-3,
        epochs: 3,
        num_splits: 2,
        batch_size: 4,
        kde_samples: 5,
        bw_refresh_epochs: 2,
        target_fraction: 0.5,
        ..ExperimentConfig::default()
    }
}

/// Plain supervised training written against the public building blocks,
/// returning the best-validation model digest.
fn reference_supervised(cfg: &ExperimentConfig, source: &datagen::Dataset, split: usize) -> Result<String, String> {
    let e = |e: &dyn std::fmt::Display| e.to_string();
    let data = split_data(cfg, split, source, &[]).map_err(|x| e(&x))?;
    let mut model = UNetModel::init(cfg.unet, cfg.init_seed(split)).map_err(|x| e(&x))?;
    let mut opt = OptimizerState::new(model.params());
    let mut best = (f64::INFINITY, model.clone());
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[split as u64, epoch as u64, 3]));
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let params = model.bind(&mut g);
            let x = g.constant(data.train.batch(chunk));
            let out = model.forward(&mut g, &params, x).map_err(|x| e(&x))?;
            let loss = segmentation_loss(&mut g, out.logits, &data.train.batch_labels(chunk)).map_err(|x| e(&x))?;
            g.backward(loss).map_err(|x| e(&x))?;
            let grads: Vec<Tensor> = params
                .iter()
                .zip(model.params())
                .map(|(&p, t)| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            opt.apply(cfg, model.params_mut(), &grads);
        }
        let v = validation_loss(&model, cfg, &data.val).map_err(|x| e(&x))?;
        if v < best.0 {
            best = (v, model.clone());
        }
    }
    Ok(best.1.to_checkpoint().digest())
}

fn digests(dir: &Path, splits: usize) -> Result<Vec<String>, String> {
    (0..splits)
        .map(|k| {
            let p = dir.join(format!("split{k}/best.dmck"));
            Checkpoint::load(&p).map(|c| c.digest()).map_err(|e| format!("{}: {e}", p.display()))
        })
        .collect()
}

fn trainer_purity(work: &Path) -> Check {
    let source = datagen::generate(&tiny_scene(1), &DomainShiftSpec::identity(), 16, DomainTag::Source)
        .map_err(|e| e.to_string())?;
    let none = tiny_config(DivergenceKind::None);
    for split in 0..none.num_splits {
        let r = fit_split(&none, split, &source, &[], &FitOptions::default()).map_err(|e| e.to_string())?;
        let reference = reference_supervised(&none, &source, split)?;
        ensure(r.best_model.to_checkpoint().digest() == reference, format!("split {split} differs from reference"))?;
    }

    let target = datagen::generate(&tiny_scene(2), &tiny_shift(), 10, DomainTag::Target).map_err(|e| e.to_string())?;
    let src_manifest = datagen::export(&source, &work.join("src")).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for kind in [DivergenceKind::Jsd, DivergenceKind::MmdConstant, DivergenceKind::MmdBandwidth] {
        let tgt_dir = work.join(format!("tgt_{kind}"));
        let tgt_manifest = datagen::export(&target, &tgt_dir).map_err(|e| e.to_string())?;
        let cfg_path = work.join(format!("{kind}.cfg"));
        fs::write(&cfg_path, tiny_config(kind).to_kv()).map_err(|e| e.to_string())?;
        let train = |out: &Path| -> Result<Vec<String>, String> {
            let (code, _) = run(bin()
                .arg("train")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--source")
                .arg(&src_manifest)
                .arg("--target")
                .arg(&tgt_manifest)
                .arg("--out")
                .arg(out))?;
            ensure(code == 0, format!("train exited {code}"))?;
            digests(out, 2)
        };
        let with_masks = train(&work.join(format!("{kind}_masks")))?;
        let mut removed = 0;
        for entry in fs::read_dir(&tgt_dir).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("mask_")) {
                fs::remove_file(&p).map_err(|e| e.to_string())?;
                removed += 1;
            }
        }
        ensure(removed == 10, format!("removed {removed} masks"))?;
        let without = train(&work.join(format!("{kind}_nomasks")))?;
        ensure(with_masks == without, format!("{kind}: checkpoints changed without target masks"))?;
        checked += with_masks.len();
    }
    Ok(format!("none == reference on 2 splits, {checked} adapted checkpoints unchanged without masks"))
}

struct DeskRun {
    per_seed: Vec<BTreeMap<String, String>>,
    dir: PathBuf,
}

impl DeskRun {
    fn column(&self, method: &str, key: &str) -> Result<Vec<f64>, String> {
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for r in self.per_seed.iter().filter(|r| r["method"] == method) {
            rows.push((num(r, "split")? as usize, num(r, key)?));
        }
        rows.sort_by_key(|r| r.0);
        ensure(!rows.is_empty(), format!("no rows for {method}"))?;
        Ok(rows.into_iter().map(|r| r.1).collect())
    }
}

fn desk_matrix(work: &Path) -> Result<DeskRun, String> {
    let dir = work.join("desk");
    let t = Instant::now();
    let (code, out) = run(bin().args(["matrix", "--preset", "desk", "--fractions", "0.03", "--out"]).arg(&dir))?;
    ensure(code == 0, format!("matrix exited {code}"))?;
    eprintln!("desk matrix: {:.0}s\n{out}", t.elapsed().as_secs_f64());
    Ok(DeskRun {
        per_seed: read_csv(&dir.join("matrix_per_seed.csv"))?,
        dir,
    })
}

fn fmt(v: &[f64]) -> String {
    let s: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", s.join(" "))
}

fn directional(desk: &Result<DeskRun, String>) -> Check {
    let d = desk.as_ref().map_err(|e| e.clone())?;
    let none = d.column("none", "target_dice")?;
    let jsd = d.column("jsd", "target_dice")?;
    let mmd_c = d.column("mmd-c", "target_dice")?;
    let mmd_b = d.column("mmd-b", "target_dice")?;
    let gain = stats::mean(&jsd) - stats::mean(&none);
    let test = stats::sign_test(&jsd, &none);
    let detail = format!(
        "target none {} jsd {} gain {gain:+.4} wins {}/{}; mmd-b {:.4} mmd-c {:.4}",
        fmt(&none),
        fmt(&jsd),
        test.wins,
        jsd.len(),
        stats::mean(&mmd_b),
        stats::mean(&mmd_c)
    );
    ensure(jsd.len() == 5 && none.len() == 5, format!("expected 5 seeds; {detail}"))?;
    ensure(gain >= 0.03, detail.clone())?;
    ensure(test.wins >= 4, detail.clone())?;
    ensure(stats::mean(&mmd_b) >= stats::mean(&mmd_c) - 0.01, detail.clone())?;
    Ok(detail)
}

fn source_non_degradation(desk: &Result<DeskRun, String>) -> Check {
    let d = desk.as_ref().map_err(|e| e.clone())?;
    let none = d.column("none", "source_dice")?;
    let jsd = d.column("jsd", "source_dice")?;
    let detail = format!("source none {} jsd {}", fmt(&none), fmt(&jsd));
    ensure(none.len() == jsd.len(), detail.clone())?;
    ensure(jsd.iter().zip(&none).all(|(j, n)| *j >= n - 0.02), detail.clone())?;
    Ok(detail)
}

fn ablation_fidelity(work: &Path) -> Check {
    let expected: [(&str, Vec<&str>); 4] = [
        ("feature-space", vec!["deepest", "enc1", "enc2", "enc3", "dec3", "dec2", "dec1"]),
        ("bw-frequency", vec!["1", "5", "25", "125"]),
        ("kde-samples", vec!["10", "20", "80"]),
        ("target-fraction", vec!["0.03", "0.3", "1"]),
    ];
    let mut summary = Vec::new();
    for (axis, values) in expected {
        let dir = work.join(format!("ablate_{axis}"));
        let (code, _) = run(bin().args(["ablate", "--axis", axis, "--preset", "smoke", "--epochs", "5", "--out"]).arg(&dir))?;
        ensure(code == 0, format!("ablate {axis} exited {code}"))?;
        let rows = read_csv(&dir.join(format!("ablation_{axis}.csv")))?;
        let got: Vec<String> = rows.iter().map(|r| r["value"].to_lowercase()).collect();
        ensure(got == values, format!("{axis} grid {got:?}"))?;
        for r in &rows {
            ensure(r["axis"] == axis, format!("axis column {}", r["axis"]))?;
            ensure(num(r, "feature_dim")? >= 1.0, "feature_dim")?;
            for k in ["source_mean", "target_mean"] {
                let v = num(r, k)?;
                ensure((0.0..=1.0).contains(&v), format!("{axis} {k} = {v}"))?;
            }
            for k in ["source_std", "target_std"] {
                ensure(num(r, k)?.is_finite(), format!("{axis} {k}"))?;
            }
        }
        let metrics = dir.join(format!("{axis}_{}/metrics.csv", rows[0]["value"]));
        let history = parse_metrics_csv(&fs::read_to_string(&metrics).map_err(|e| format!("{}: {e}", metrics.display()))?)
            .map_err(|e| e.to_string())?;
        ensure(history.iter().map(|m| m.epoch).max() == Some(4), format!("{axis}: smoke run is not 5 epochs"))?;
        summary.push(format!("{axis} {}", rows.len()));
    }
    Ok(summary.join(", "))
}

fn check_summary(path: &Path) -> Result<f64, String> {
    let rows = read_csv(path)?;
    let per: Vec<_> = rows.iter().filter(|r| r["split"].parse::<usize>().is_ok()).collect();
    let mut worst = 0.0f64;
    for key in ["best_val_loss", "final_seg_loss", "final_div_loss"] {
        let col: Vec<f64> = per.iter().map(|r| num(r, key)).collect::<Result<_, _>>()?;
        for (label, f) in [("mean", stats::mean as fn(&[f64]) -> f64), ("std", stats::std)] {
            let row = rows.iter().find(|r| r["split"] == label).ok_or(format!("no {label} row"))?;
            let err = (num(row, key)? - f(&col)).abs();
            ensure(err <= 1e-12, format!("{} {label} {key} off by {err:e}", path.display()))?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn artifact_integrity(work: &Path, desk: &Result<DeskRun, String>) -> Check {
    let cfg = tiny_config(DivergenceKind::Jsd);
    let model = UNetModel::init(cfg.unet, 99).map_err(|e| e.to_string())?;
    let ck = model.to_checkpoint();
    let path = work.join("roundtrip.dmck");
    ck.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(back.to_bytes() == ck.to_bytes(), "checkpoint bytes differ")?;
    let restored = UNetModel::from_checkpoint(&back).map_err(|e| e.to_string())?;
    let bits = |m: &UNetModel| m.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    ensure(bits(&restored) == bits(&model), "parameters differ after reload")?;

    let mut worst = 0.0f64;
    let mut files = 0;
    for kind in ["jsd_masks", "mmd-c_masks", "mmd-b_masks"] {
        let dir = work.join(kind);
        worst = worst.max(check_summary(&dir.join("summary.csv"))?);
        let m = parse_metrics_csv(&fs::read_to_string(dir.join("metrics.csv")).map_err(|e| format!("{}: {e}", dir.display()))?)
            .map_err(|e| e.to_string())?;
        ensure(m.len() == cfg.epochs * cfg.num_splits, format!("{kind}: {} metric rows", m.len()))?;
        files += 2;
    }

    if let Ok(d) = desk {
        let plot = read_csv(&d.dir.join("matrix_plot.csv"))?;
        for r in &plot {
            let col = d.column(&r["method"], "target_dice")?;
            let err = (num(r, "target_mean")? - stats::mean(&col)).abs().max((num(r, "target_std")? - stats::std(&col)).abs());
            ensure(err <= 1e-12, format!("plot row {} off by {err:e}", r["method"]))?;
            worst = worst.max(err);
        }
        files += 1;
    }

    let dir = work.join("smoke_matrix");
    let (code, _) = run(bin()
        .args(["matrix", "--preset", "smoke", "--methods", "none,jsd", "--fractions", "0.3,0.6,1.0", "--out"])
        .arg(&dir))?;
    ensure(code == 0, format!("smoke matrix exited {code}"))?;
    let rows = read_csv(&dir.join("matrix_per_seed.csv"))?;
    let none_at = |f: &str| -> Vec<String> {
        rows.iter()
            .filter(|r| r["method"] == "none" && r["fraction"] == f)
            .map(|r| format!("{},{},{}", r["source_dice"], r["target_dice"], r["heldout_dice"]))
            .collect()
    };
    let base = none_at("0.3");
    ensure(!base.is_empty(), "no none rows")?;
    ensure(none_at("0.6") == base && none_at("1") == base, "no-adapt cells differ across fractions")?;
    let source = datagen::generate(&tiny_scene(5), &DomainShiftSpec::identity(), 12, DomainTag::Source)
        .map_err(|e| e.to_string())?;
    let target = datagen::generate(&tiny_scene(6), &tiny_shift(), 10, DomainTag::Target).map_err(|e| e.to_string())?;
    let none_digest = |f: f64| -> Result<String, String> {
        let c = ExperimentConfig {
            target_fraction: f,
            ..tiny_config(DivergenceKind::None)
        };
        fit_split(&c, 0, &source, &target.images, &FitOptions::default())
            .map(|r| r.best_model.to_checkpoint().digest())
            .map_err(|e| e.to_string())
    };
    let d0 = none_digest(0.3)?;
    ensure(none_digest(0.6)? == d0 && none_digest(1.0)? == d0, "no-adapt checkpoints differ across fractions")?;
    Ok(format!("round trip exact, {files} aggregate files within {worst:.1e}, no-adapt invariant over 3 fractions"))
}

fn main() {
    let work = tempfile::tempdir().expect("tempdir");
    let w = work.path();
    let t = Instant::now();
    let desk = desk_matrix(w);
    let results: Vec<(&str, Check)> = vec![
        ("1 gradient suite", gradient_suite()),
        ("2 density correctness", density_correctness()),
        ("3 divergence properties", divergence_properties()),
        ("4 trainer purity", trainer_purity(w)),
        ("5 directional adaptation", directional(&desk)),
        ("6 source non-degradation", source_non_degradation(&desk)),
        ("7 ablation harness", ablation_fidelity(w)),
        ("8 artifact integrity", artifact_integrity(w, &desk)),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {name}: {e}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed, {:.0}s", results.len() - failed, t.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
