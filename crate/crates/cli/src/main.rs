use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use featmatch::datagen::{self, DataError, DomainShiftSpec, DomainTag, SceneSpec};
use featmatch::divergence::DivergenceKind;
use featmatch::eval::{self, AblationAxis, AblationGrid, EvalError};
use featmatch::gradsuite;
use featmatch::preset::Preset;
use featmatch::segnet::UNetModel;
use featmatch::tensor::Checkpoint;
use featmatch::trainer::{self, ExperimentConfig, FitOptions, TrainError};

/// Feature-space density matching for segmentation domain adaptation.
#[derive(Parser)]
#[command(name = "featmatch", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset as PGM files plus a manifest.
    GenData(GenData),
    /// Train every split of a config on a source (and optional target) manifest.
    Train(Train),
    /// Score a checkpoint on a labelled manifest.
    Eval(Eval),
    /// Run the method x target-fraction comparison.
    Matrix(Matrix),
    /// Sweep one hyperparameter axis.
    Ablate(Ablate),
    /// Check every differentiable op against central finite differences.
    Gradcheck(Gradcheck),
    /// Print the default config in key=value form.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Source,
    Target,
    Heldout,
}

impl From<Domain> for DomainTag {
    fn from(d: Domain) -> Self {
        match d {
            Domain::Source => DomainTag::Source,
            Domain::Target => DomainTag::Target,
            Domain::Heldout => DomainTag::Heldout,
        }
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, value_enum, default_value = "source")]
    domain: Domain,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 2)]
    min_blobs: usize,
    #[arg(long, default_value_t = 5)]
    max_blobs: usize,
    #[arg(long, default_value_t = 5.0)]
    min_radius: f64,
    #[arg(long, default_value_t = 11.0)]
    max_radius: f64,
    #[arg(long, default_value_t = 0.75)]
    foreground: f64,
    #[arg(long, default_value_t = 0.25)]
    background: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    gain: f64,
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    blur: usize,
    #[arg(long, default_value_t = 0.0)]
    texture_freq: f64,
    #[arg(long, default_value_t = 0.0)]
    texture_amp: f64,
}

#[derive(Args)]
struct Train {
    /// key=value config file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labelled source manifest.
    #[arg(long)]
    source: PathBuf,
    /// Target manifest; only its image column is read.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue interrupted splits from their saved state.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "target")]
    domain: Domain,
    /// Write the report CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_image: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    Desk,
    Smoke,
}

impl PresetName {
    fn build(self) -> Preset {
        match self {
            PresetName::Desk => Preset::desk(),
            PresetName::Smoke => Preset::smoke(),
        }
    }
}

#[derive(Args)]
struct Matrix {
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetName,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated methods (none, mmd-c, mmd-b, jsd).
    #[arg(long, value_delimiter = ',', default_value = "none,mmd-c,mmd-b,jsd")]
    methods: Vec<DivergenceKind>,
    #[arg(long, value_delimiter = ',', default_value = "0.03,0.3,1.0")]
    fractions: Vec<f64>,
    /// key=value overrides applied to the preset's base config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    /// feature-space, bw-frequency, kde-samples or target-fraction.
    #[arg(long)]
    axis: String,
    #[arg(long, value_enum, default_value = "smoke")]
    preset: PresetName,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Io(m) => m,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn apply_config(base: &ExperimentConfig, path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => Ok(base.with_kv(&read_text(p)?)?),
        None => Ok(base.clone()),
    }
}

fn gen_data(a: GenData) -> Outcome {
    let scene = SceneSpec {
        image_size: a.image_size,
        num_blobs: (a.min_blobs, a.max_blobs),
        blob_radius: (a.min_radius, a.max_radius),
        foreground: a.foreground,
        background: a.background,
        seed: a.seed,
    };
    let shift = DomainShiftSpec {
        intensity_gain: a.gain,
        intensity_offset: a.offset,
        noise_std: a.noise,
        blur_radius: a.blur,
        texture_freq: a.texture_freq,
        texture_amp: a.texture_amp,
    };
    let ds = datagen::generate(&scene, &shift, a.count, a.domain.into())?;
    let manifest = datagen::export(&ds, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(a: Train) -> Outcome {
    let cfg = apply_config(&ExperimentConfig::default(), a.config.as_deref())?;
    let source = datagen::load_external(&a.source, cfg.unet.num_classes, DomainTag::Source)?;
    let target = match &a.target {
        Some(m) => datagen::load_external_images(m)?,
        None => Vec::new(),
    };
    let opts = FitOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume,
    };
    let run = trainer::fit(&cfg, &source, &target, &opts)?;
    print!("{}", run.summary_csv());
    Ok(())
}

fn evaluate(a: Eval) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| Failure::Io(format!("{}: {e}", a.checkpoint.display())))?;
    let model = UNetModel::from_checkpoint(&ck).map_err(|e| {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    })?;
    let ds = datagen::load_external(&a.data, model.config().num_classes, a.domain.into())?;
    let report = eval::evaluate(&model, &ds)?;
    match &a.out {
        Some(p) => fs::write(p, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    if let Some(p) = &a.per_image {
        fs::write(p, report.per_image_csv())?;
    }
    Ok(())
}

fn matrix(a: Matrix) -> Outcome {
    let preset = a.preset.build();
    let base = apply_config(&preset.base, a.config.as_deref())?;
    let methods: Vec<_> = a.methods.iter().map(|&k| preset.method(k)).collect();
    let data = preset.data()?;
    let t = Instant::now();
    let result = eval::run_matrix(&methods, &a.fractions, &base, &data, Some(&a.out))?;
    print!("{}", result.table_csv());
    print!("{}", result.paired_csv());
    eprintln!("matrix finished in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

fn ablate(a: Ablate) -> Outcome {
    let axis: AblationAxis = a.axis.parse()?;
    let preset = a.preset.build();
    let mut base = apply_config(&preset.base, a.config.as_deref())?;
    if a.config.is_none() {
        base.divergence = preset.method(DivergenceKind::Jsd);
    }
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    let grid = AblationGrid::standard(axis, base);
    let data = preset.data()?;
    let rows = eval::run_ablation(&grid, &data, Some(&a.out))?;
    print!("{}", eval::ablation_csv(axis, &rows));
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Outcome {
    let t = Instant::now();
    let reports = gradsuite::run(a.seed, a.cases).map_err(|e| Failure::Numerical(e.to_string()))?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<20} cases={:<3} max_rel_err={:.3e} tol={:.0e} {status}",
            r.op, r.cases, r.max_rel_err, r.tolerance
        );
        failed += usize::from(!r.passed());
    }
    println!(
        "{} ops, {failed} failed, {:.2}s",
        reports.len(),
        t.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} op(s) failed the gradient check")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => evaluate(a),
        Cmd::Matrix(a) => matrix(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Config => {
            print!("{}", ExperimentConfig::default().to_kv());
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
