use featmatch::datagen::{export, generate, load_external, load_external_images, DomainShiftSpec, DomainTag, SceneSpec};
use featmatch::divergence::{DivergenceConfig, DivergenceKind};
use featmatch::eval::{evaluate, run_matrix, ExperimentData};
use featmatch::segnet::{UNetConfig, UNetModel};
use featmatch::tensor::Checkpoint;
use featmatch::trainer::{fit, parse_metrics_csv, ExperimentConfig, FitOptions, OptimizerKind};

fn scene(seed: u64) -> SceneSpec {
    SceneSpec {
        image_size: 16,
        num_blobs: (1, 2),
        blob_radius: (2.0, 4.0),
        seed,
        ..SceneSpec::default()
    }
}

fn shift() -> DomainShiftSpec {
    DomainShiftSpec {
        intensity_gain: 0.7,
        intensity_offset: 0.2,
        noise_std: 0.03,
        blur_radius: 0,
        texture_freq: 4.0,
        texture_amp: 0.1,
    }
}

fn cfg(kind: DivergenceKind) -> ExperimentConfig {
    ExperimentConfig {
        unet: UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 1,
            num_classes: 2,
            input_size: 16,
        },
        divergence: DivergenceConfig {
            lambda: 0.1,
            ..DivergenceConfig::with_kind(kind)
        },
        optimizer: OptimizerKind::Adamw,
        lr: 1e-3,
        epochs: 2,
        num_splits: 2,
        batch_size: 4,
        kde_samples: 4,
        target_fraction: 0.5,
        ..ExperimentConfig::default()
    }
}

#[test]
fn exported_data_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let src = generate(&scene(1), &DomainShiftSpec::identity(), 12, DomainTag::Source).unwrap();
    let tgt = generate(&scene(2), &shift(), 8, DomainTag::Target).unwrap();
    let src_manifest = export(&src, &dir.path().join("src")).unwrap();
    let tgt_manifest = export(&tgt, &dir.path().join("tgt")).unwrap();

    let source = load_external(&src_manifest, 2, DomainTag::Source).unwrap();
    assert_eq!(source.masks, src.masks);
    let target = load_external_images(&tgt_manifest).unwrap();
    assert_eq!(target.len(), 8);

    let out = dir.path().join("run");
    let c = cfg(DivergenceKind::Jsd);
    let run = fit(&c, &source, &target, &FitOptions { out_dir: Some(out.clone()), resume: false }).unwrap();
    assert_eq!(run.splits.len(), 2);

    let ck = Checkpoint::load(&out.join("split0/best.dmck")).unwrap();
    let model = UNetModel::from_checkpoint(&ck).unwrap();
    assert_eq!(model.params(), run.splits[0].best_model.params());

    let history = parse_metrics_csv(&std::fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(history.len(), 4);
    assert!(history.iter().all(|m| m.seg_loss.is_finite() && m.div_loss.is_finite()));

    let test = load_external(&tgt_manifest, 2, DomainTag::Target).unwrap();
    let a = evaluate(&model, &test).unwrap();
    let b = evaluate(&model, &test).unwrap();
    assert_eq!(a, b);
    let d = a.domain(DomainTag::Target).unwrap();
    assert!(d.per_image.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn matrix_is_deterministic() {
    let data = ExperimentData {
        source: generate(&scene(1), &DomainShiftSpec::identity(), 10, DomainTag::Source).unwrap(),
        target_images: generate(&scene(2), &shift(), 6, DomainTag::Target).unwrap().images,
        source_test: generate(&scene(3), &DomainShiftSpec::identity(), 4, DomainTag::Source).unwrap(),
        target_test: generate(&scene(4), &shift(), 4, DomainTag::Target).unwrap(),
        heldout_test: None,
    };
    let base = ExperimentConfig { epochs: 1, ..cfg(DivergenceKind::None) };
    let methods = [DivergenceKind::None, DivergenceKind::MmdBandwidth]
        .map(|k| DivergenceConfig { lambda: 0.1, ..DivergenceConfig::with_kind(k) });
    let a = run_matrix(&methods, &[0.5, 1.0], &base, &data, None).unwrap();
    let b = run_matrix(&methods, &[0.5, 1.0], &base, &data, None).unwrap();
    assert_eq!(a.table_csv(), b.table_csv());
    assert_eq!(a.per_seed_csv(), b.per_seed_csv());
    let n = |f| a.cell(DivergenceKind::None, f).unwrap().scores.clone();
    assert_eq!(n(0.5), n(1.0));
}
