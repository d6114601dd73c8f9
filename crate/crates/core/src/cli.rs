//! The `sparsebody` binary: synthetic data generation, training, evaluation,
//! throughput benchmarking, and FoV simulation behind one subcommand CLI.
//!
//! Every artifact-producing run writes a JSON manifest next to its outputs
//! with the fully resolved configuration, so a run can be replayed from the
//! manifest alone. Exit codes: 0 success, 1 usage, 2 data error, 3 config
//! mismatch.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::evaluation::{
    fov_strategy_compare, fov_table_csv, offset_sweep, offset_table_csv, report_csv, report_json,
    EvalError, EvalOptions, ShapeStrategy, StrategyWeights,
};
use crate::features::{build_window_features_in_mode, FeatureMode};
use crate::fov::{visibility_mask, FovConfig};
use crate::ingest::{
    extract_three_point, load_sequence, save_sequence, synthesize_sequence, IngestError,
    MotionProfile, MotionSequence, ThreePointTrack,
};
use crate::network::{
    count_flops, count_params, init_params, Fusion, ModelConfig, Network, NetworkError, Params,
    WeightSet,
};
use crate::skeleton::{t_pose_measurements, ShapeParams, SkeletonModel};
use crate::training::{
    train, Checkpoint, LossWeights, MaskStrategy, TrainConfig, TrainError, TrainSetup,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub code: i32,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError { message: message.into(), code: EXIT_USAGE }
    }
    fn data(message: impl Into<String>) -> CliError {
        CliError { message: message.into(), code: EXIT_DATA }
    }
    fn config(message: impl Into<String>) -> CliError {
        CliError { message: message.into(), code: EXIT_CONFIG }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::data(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> CliError {
        CliError::data(e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> CliError {
        match e {
            NetworkError::ConfigMismatch(_) => CliError::config(e.to_string()),
            NetworkError::InvalidConfig(_) => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::ConfigMismatch(_) => CliError::config(e.to_string()),
            TrainError::Network(n) => n.into(),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        match e {
            EvalError::MissingWeights(_) => CliError::usage(e.to_string()),
            EvalError::Network(n) => n.into(),
            EvalError::Train(t) => t.into(),
            _ => CliError::data(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "sparsebody",
    version,
    about = "Full-body pose estimation from sparse head-and-hand tracking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic motion sequences (.epsq files).
    Synth(SynthArgs),
    /// Train a model on a directory of .epsq sequences.
    Train(TrainArgs),
    /// Evaluate weights: metrics, offset sweep, optional FoV comparison.
    Eval(EvalArgs),
    /// Measure end-to-end inference throughput (feature build + forward).
    Bench(BenchArgs),
    /// Report hand-visibility fractions under a simulated headset FoV.
    FovSim(FovSimArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for the generated files.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Base seed; sequence i uses seed + i.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of sequences to generate.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Motion profile: walk | reach | idle | mixed.
    #[arg(long, default_value = "mixed")]
    pub profile: String,
    /// Clip duration in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub seconds: f64,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = 60.0)]
    pub fps: f64,
    /// Fixed first shape coefficient for every sequence.
    #[arg(long, conflicts_with = "random_shape")]
    pub beta: Option<f64>,
    /// Draw per-sequence shapes spanning subject heights 1.45 to 2.07 m.
    #[arg(long)]
    pub random_shape: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of .epsq training sequences.
    #[arg(long)]
    pub data: PathBuf,
    /// Run-setup JSON file; explicit flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Window start stride within each sequence.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Hand-visibility corruption: none | random | fov.
    #[arg(long)]
    pub mask: Option<String>,
    /// Per-frame hide probability for --mask random.
    #[arg(long)]
    pub mask_p: Option<f64>,
    /// Headset preset for --mask fov: fisheye180 | quest2 | hololens2.
    #[arg(long)]
    pub fov_preset: Option<String>,
    /// Custom horizontal FoV in degrees (with --fov-v, beats --fov-preset).
    #[arg(long)]
    pub fov_h: Option<f64>,
    /// Custom vertical FoV in degrees.
    #[arg(long)]
    pub fov_v: Option<f64>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp: Option<usize>,
    /// Token fusion: slowfast | dense | strided.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Input features: decomposed | global.
    #[arg(long)]
    pub feature_mode: Option<String>,
    /// Output weight file.
    #[arg(long, default_value = "weights.epwt")]
    pub out: PathBuf,
    /// JSONL training log (default: next to --out).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Checkpoint cadence in iterations (0 disables periodic checkpoints).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Directory for checkpoints (default: <out dir>/checkpoints).
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Resume from a checkpoint file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Directory of .epsq test sequences.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "eval_out")]
    pub out_dir: PathBuf,
    /// Shape reconstruction: mean | calib | estimate.
    #[arg(long, default_value = "mean")]
    pub shape_strategy: String,
    /// Comma-separated world offsets in meters, applied along +x.
    #[arg(long, default_value = "0,2,5,10,50")]
    pub offsets: String,
    /// Mask hands outside this preset's frustum at evaluation time.
    #[arg(long)]
    pub fov_eval: Option<String>,
    /// Weights of the full-visibility-trained model (FoV comparison grid).
    #[arg(long)]
    pub compare_full: Option<PathBuf>,
    /// Weights of the random-masking-trained model.
    #[arg(long)]
    pub compare_random: Option<PathBuf>,
    /// Weights of the FoV-masking-trained model.
    #[arg(long)]
    pub compare_fov: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Weight file; defaults to a freshly initialized default config.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Measured duration of the warm run.
    #[arg(long, default_value_t = 10.0)]
    pub seconds: f64,
    /// Independent single-stream inference loops run in parallel.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// JSON report path.
    #[arg(long, default_value = "bench.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FovSimArgs {
    /// Directory of .epsq sequences.
    #[arg(long)]
    pub data: PathBuf,
    /// Headset preset: fisheye180 | quest2 | hololens2.
    #[arg(long)]
    pub preset: Option<String>,
    /// Custom horizontal FoV in degrees (requires --fov-v).
    #[arg(long)]
    pub fov_h: Option<f64>,
    /// Custom vertical FoV in degrees.
    #[arg(long)]
    pub fov_v: Option<f64>,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Replay record written at the end of every artifact-producing run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub code_version: String,
    pub seeds: Vec<u64>,
    /// Fully resolved configuration after file + flag merging.
    pub config: serde_json::Value,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::data(format!("serialize {}: {e}", path.display())))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command, argv: Vec<String>) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(&a, argv),
        Command::Train(a) => cmd_train(&a, argv),
        Command::Eval(a) => cmd_eval(&a, argv),
        Command::Bench(a) => cmd_bench(&a, argv),
        Command::FovSim(a) => cmd_fov_sim(&a, argv),
    }
}

fn load_model() -> Result<SkeletonModel, CliError> {
    SkeletonModel::load_default().map_err(|e| CliError::data(e.to_string()))
}

/// Loads every .epsq in the directory, sorted by file name.
fn load_dataset(dir: &Path) -> Result<(Vec<MotionSequence>, Vec<String>), CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "epsq"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::data(format!(
            "no .epsq sequences in {}",
            dir.display()
        )));
    }
    let mut seqs = Vec::with_capacity(paths.len());
    for p in &paths {
        seqs.push(load_sequence(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?);
    }
    Ok((seqs, paths.iter().map(|p| path_str(p)).collect()))
}

fn resolve_fov(
    preset: Option<&str>,
    h: Option<f64>,
    v: Option<f64>,
) -> Result<FovConfig, CliError> {
    match (h, v) {
        (Some(h), Some(v)) => {
            FovConfig::new(h, v).map_err(|e| CliError::usage(e.to_string()))
        }
        (None, None) => {
            let name = preset.unwrap_or("quest2");
            FovConfig::preset(name).ok_or_else(|| {
                CliError::usage(format!(
                    "unknown FoV preset {name:?} (expected fisheye180, quest2 or hololens2)"
                ))
            })
        }
        _ => Err(CliError::usage("--fov-h and --fov-v must be given together")),
    }
}

/// Maps a subject height in meters onto the first shape coefficient, using
/// the skeleton's own mean T-pose height.
fn beta0_for_height(model: &SkeletonModel, height_m: f64) -> f64 {
    let (mean_height, _) = t_pose_measurements(model, &ShapeParams::zero());
    (height_m / mean_height - 1.0) / 0.1
}

fn cmd_synth(args: &SynthArgs, argv: Vec<String>) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = unix_now();
    let profile = MotionProfile::from_str(&args.profile)
        .map_err(|e| CliError::usage(e.to_string()))?;
    if args.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let model = load_model()?;
    std::fs::create_dir_all(&args.out)?;

    let mut outputs = Vec::new();
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i as u64);
        let shape = if args.random_shape {
            // Height drawn uniformly on [1.45, 2.07] m, deterministic per seed.
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xBE7A_0000);
            let height = rng.gen_range(1.45..=2.07);
            let mut beta = [0.0; crate::SHAPE_DIM];
            beta[0] = beta0_for_height(&model, height);
            ShapeParams::new(beta)
        } else if let Some(b0) = args.beta {
            let mut beta = [0.0; crate::SHAPE_DIM];
            beta[0] = b0;
            ShapeParams::new(beta)
        } else {
            ShapeParams::zero()
        };
        let mut seq = synthesize_sequence(seed, profile, args.seconds, args.fps, shape, &model)?;
        seq.subject_id = i as u32;
        seq.sequence_id = i as u32;
        let name = format!("subj{:03}_{}_{:04}.epsq", i, profile, seed);
        let path = args.out.join(name);
        save_sequence(&seq, &path)?;
        let (height, _) = t_pose_measurements(&model, &seq.shape);
        println!(
            "{}  frames={} fps={} profile={} height={:.2}m",
            path.display(),
            seq.len(),
            seq.fps,
            profile,
            height
        );
        outputs.push(path_str(&path));
    }

    let manifest = RunManifest {
        command: "synth".into(),
        argv,
        code_version: env!("CARGO_PKG_VERSION").into(),
        seeds: vec![args.seed],
        config: serde_json::json!({
            "profile": args.profile,
            "seconds": args.seconds,
            "fps": args.fps,
            "count": args.count,
            "beta": args.beta,
            "random_shape": args.random_shape,
        }),
        started_unix_s: started_unix,
        wall_clock_s: started.elapsed().as_secs_f64(),
        inputs: Vec::new(),
        outputs,
    };
    write_json_atomic(&args.out.join("synth_manifest.json"), &manifest)
}

fn resolve_train_setup(args: &TrainArgs) -> Result<TrainSetup, CliError> {
    let mut setup: TrainSetup = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        }
        None => TrainSetup {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            strategy: MaskStrategy::None,
        },
    };

    if let Some(v) = args.iters {
        setup.train.max_iters = v;
    }
    if let Some(v) = args.batch {
        setup.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        setup.train.lr0 = v;
    }
    if let Some(v) = args.seed {
        setup.train.seed = v;
        setup.model.seed = v;
    }
    if let Some(v) = args.stride {
        setup.train.stride = v;
    }
    if let Some(v) = args.checkpoint_every {
        setup.train.checkpoint_every = v;
    }
    if let Some(v) = args.tau {
        setup.model.tau = v;
    }
    if let Some(v) = args.embed {
        setup.model.embed_dim = v;
    }
    if let Some(v) = args.layers {
        setup.model.num_layers = v;
    }
    if let Some(v) = args.heads {
        setup.model.num_heads = v;
    }
    if let Some(v) = args.mlp {
        setup.model.mlp_hidden = v;
    }
    if let Some(v) = &args.fusion {
        setup.model.fusion = Fusion::from_str(v).map_err(|e| CliError::usage(e.to_string()))?;
    }
    if let Some(v) = &args.feature_mode {
        setup.model.feature_mode = match v.as_str() {
            "decomposed" => FeatureMode::Decomposed,
            "global" => FeatureMode::Global,
            other => {
                return Err(CliError::usage(format!(
                    "unknown feature mode {other:?} (expected decomposed or global)"
                )))
            }
        };
    }
    if let Some(mask) = &args.mask {
        setup.strategy = match mask.as_str() {
            "none" => MaskStrategy::None,
            "random" => MaskStrategy::Random { p: args.mask_p.unwrap_or(0.3) },
            "fov" => MaskStrategy::Fov {
                config: resolve_fov(args.fov_preset.as_deref(), args.fov_h, args.fov_v)?,
            },
            other => {
                return Err(CliError::usage(format!(
                    "unknown mask strategy {other:?} (expected none, random or fov)"
                )))
            }
        };
    }
    Ok(setup)
}

fn cmd_train(args: &TrainArgs, argv: Vec<String>) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = unix_now();
    let model = load_model()?;
    let (dataset, inputs) = load_dataset(&args.data)?;
    let setup = resolve_train_setup(args)?;

    let resume = match &args.resume {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };

    let ckpt_dir = args
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| args.out.parent().unwrap_or(Path::new(".")).join("checkpoints"));
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut ckpt_paths: Vec<String> = Vec::new();
    let mut on_ckpt = |ckpt: &Checkpoint| -> Result<(), TrainError> {
        let path = ckpt_dir.join(format!("ckpt_{:08}.epck", ckpt.iter));
        ckpt.save(&path)?;
        ckpt_paths.push(path_str(&path));
        Ok(())
    };

    let outcome = train(&setup, &model, &dataset, resume, Some(&mut on_ckpt))?;

    outcome.weights.save(&args.out)?;
    let final_ckpt = ckpt_dir.join("final.epck");
    outcome.final_state.save(&final_ckpt)?;
    ckpt_paths.push(path_str(&final_ckpt));

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    let mut log_text = String::new();
    for entry in &outcome.log {
        log_text.push_str(
            &serde_json::to_string(entry).map_err(|e| CliError::data(e.to_string()))?,
        );
        log_text.push('\n');
    }
    std::fs::write(&log_path, log_text)?;

    let mut outputs = vec![path_str(&args.out), path_str(&log_path)];
    outputs.extend(ckpt_paths);

    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} iterations on {} sequences; final loss {:.6}",
            last.iteration,
            dataset.len(),
            last.loss
        );
    }
    println!("weights -> {}", args.out.display());

    let manifest = RunManifest {
        command: "train".into(),
        argv,
        code_version: env!("CARGO_PKG_VERSION").into(),
        seeds: vec![setup.train.seed, setup.model.seed],
        config: serde_json::to_value(&setup).map_err(|e| CliError::data(e.to_string()))?,
        started_unix_s: started_unix,
        wall_clock_s: started.elapsed().as_secs_f64(),
        inputs,
        outputs,
    };
    let manifest_path = args.out.with_extension("manifest.json");
    write_json_atomic(&manifest_path, &manifest)
}

fn parse_offsets(text: &str) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse::<f64>().map_err(|_| {
            CliError::usage(format!("bad offset {part:?} in --offsets (expected meters)"))
        })?);
    }
    if out.is_empty() {
        return Err(CliError::usage("--offsets needs at least one value"));
    }
    Ok(out)
}

fn cmd_eval(args: &EvalArgs, argv: Vec<String>) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = unix_now();
    let model = load_model()?;
    let weights = WeightSet::load(&args.weights)?;
    let (dataset, mut inputs) = load_dataset(&args.data)?;
    inputs.insert(0, path_str(&args.weights));

    let shape_strategy = ShapeStrategy::from_str(&args.shape_strategy)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let offsets = parse_offsets(&args.offsets)?;
    let eval_fov = match &args.fov_eval {
        Some(name) => Some(resolve_fov(Some(name), None, None)?),
        None => None,
    };
    let opts = EvalOptions { shape_strategy, eval_fov };

    std::fs::create_dir_all(&args.out_dir)?;
    let report = offset_sweep(&model, &weights, &dataset, &offsets, &opts)?;

    let csv_path = args.out_dir.join("report.csv");
    let offsets_path = args.out_dir.join("offsets.csv");
    let json_path = args.out_dir.join("report.json");
    std::fs::write(&csv_path, report_csv(&report))?;
    std::fs::write(&offsets_path, offset_table_csv(&report))?;
    std::fs::write(&json_path, report_json(&report))?;
    let mut outputs = vec![path_str(&csv_path), path_str(&offsets_path), path_str(&json_path)];

    let agg = &report.aggregate;
    println!(
        "{} sequences, {} frames (strategy {})",
        report.per_sequence.len(),
        report.aggregate_frames,
        shape_strategy
    );
    println!(
        "MPJPE {:.3} cm  MPJVE {:.3} cm/s  MVE {:.3} cm",
        agg.mpjpe_cm, agg.mpjve_cm_s, agg.mve_cm
    );
    println!(
        "height err {:.3} cm  arm err {:.3} cm  GP {:.3} cm  FF {:.3} cm",
        agg.height_err_cm, agg.arm_err_cm, agg.gp_cm, agg.ff_cm
    );
    for row in &report.offset_table {
        println!(
            "offset {:>6.1} m  MPJPE {:.6} cm  MVE {:.6} cm",
            row.offset_m[0], row.metrics.mpjpe_cm, row.metrics.mve_cm
        );
    }

    let compare_requested = args.compare_full.is_some()
        || args.compare_random.is_some()
        || args.compare_fov.is_some();
    if compare_requested {
        let load_opt = |p: &Option<PathBuf>| -> Result<Option<WeightSet>, CliError> {
            match p {
                Some(p) => Ok(Some(WeightSet::load(p)?)),
                None => Ok(None),
            }
        };
        let strategy_weights = StrategyWeights {
            full: load_opt(&args.compare_full)?,
            random: load_opt(&args.compare_random)?,
            fov: load_opt(&args.compare_fov)?,
        };
        let fovs = [
            FovConfig::preset("fisheye180").expect("builtin preset"),
            FovConfig::preset("quest2").expect("builtin preset"),
            FovConfig::preset("hololens2").expect("builtin preset"),
        ];
        let table =
            fov_strategy_compare(&model, &strategy_weights, &dataset, &fovs, shape_strategy)?;
        let grid_csv = args.out_dir.join("fov_compare.csv");
        let grid_json = args.out_dir.join("fov_compare.json");
        std::fs::write(&grid_csv, fov_table_csv(&table))?;
        write_json_atomic(&grid_json, &table)?;
        outputs.push(path_str(&grid_csv));
        outputs.push(path_str(&grid_json));
        for cell in &table.cells {
            println!(
                "compare {:>6} @ {:>5.1}°  MPJPE {:.3} cm  MPJVE {:.3} cm/s",
                cell.strategy, cell.fov_h_deg, cell.mpjpe_cm, cell.mpjve_cm_s
            );
        }
    }

    let manifest = RunManifest {
        command: "eval".into(),
        argv,
        code_version: env!("CARGO_PKG_VERSION").into(),
        seeds: vec![weights.config.seed],
        config: serde_json::json!({
            "model": weights.config,
            "shape_strategy": shape_strategy,
            "offsets_m": offsets,
            "eval_fov": eval_fov,
        }),
        started_unix_s: started_unix,
        wall_clock_s: started.elapsed().as_secs_f64(),
        inputs,
        outputs,
    };
    write_json_atomic(&args.out_dir.join("eval_manifest.json"), &manifest)
}

/// One stream's worth of timing results.
#[derive(Debug, Clone, Serialize)]
pub struct StreamStats {
    pub frames: u64,
    pub elapsed_s: f64,
    pub fps: f64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub max_latency_ms: f64,
}

/// Runs the real-time path (window build + forward) on one thread until
/// `seconds` of measured time elapse, after `warmup_s` of unmeasured frames.
pub fn bench_stream(
    net: &Network<f32>,
    track: &ThreePointTrack,
    seconds: f64,
    warmup_s: f64,
) -> Result<StreamStats, CliError> {
    let tau = net.cfg.tau;
    if track.len() < tau {
        return Err(CliError::data(format!(
            "bench track has {} frames, window needs {tau}",
            track.len()
        )));
    }
    let n_starts = track.len() - tau + 1;
    let mode = net.cfg.feature_mode;
    let mut cursor = 0usize;
    let mut step = |sink: &mut f32| -> Result<std::time::Duration, CliError> {
        let start = cursor % n_starts;
        cursor += 1;
        let t0 = Instant::now();
        let window = build_window_features_in_mode(track, start, tau, None, mode)
            .map_err(|e| CliError::data(e.to_string()))?;
        let out = net.forward(&window.frames)?;
        let dt = t0.elapsed();
        *sink += out[0];
        Ok(dt)
    };

    let mut sink = 0.0f32;
    let warm_t0 = Instant::now();
    while warm_t0.elapsed().as_secs_f64() < warmup_s {
        step(&mut sink)?;
    }

    let mut latencies_ns: Vec<u64> = Vec::new();
    let measure_t0 = Instant::now();
    while measure_t0.elapsed().as_secs_f64() < seconds {
        let dt = step(&mut sink)?;
        latencies_ns.push(dt.as_nanos() as u64);
    }
    let elapsed = measure_t0.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    if latencies_ns.is_empty() {
        return Err(CliError::usage("bench needs a positive --seconds"));
    }

    let frames = latencies_ns.len() as u64;
    latencies_ns.sort_unstable();
    let ms = |ns: u64| ns as f64 / 1e6;
    let mean_ns = latencies_ns.iter().sum::<u64>() as f64 / frames.max(1) as f64;
    let pick = |q: f64| latencies_ns[(((frames - 1) as f64 * q) as usize).min(latencies_ns.len() - 1)];
    Ok(StreamStats {
        frames,
        elapsed_s: elapsed,
        fps: frames as f64 / elapsed,
        mean_latency_ms: mean_ns / 1e6,
        p50_latency_ms: ms(pick(0.5)),
        p99_latency_ms: ms(pick(0.99)),
        max_latency_ms: ms(*latencies_ns.last().unwrap_or(&0)),
    })
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub config: ModelConfig,
    pub threads: usize,
    pub streams: Vec<StreamStats>,
    pub total_fps: f64,
    pub analytic_flops_per_frame: u64,
    pub analytic_gflops_per_frame: f64,
    pub params: usize,
}

fn cmd_bench(args: &BenchArgs, argv: Vec<String>) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = unix_now();
    if args.seconds <= 0.0 {
        return Err(CliError::usage("--seconds must be positive"));
    }
    if args.threads == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    let model = load_model()?;
    let (weights, inputs) = match &args.weights {
        Some(path) => (WeightSet::load(path)?, vec![path_str(path)]),
        None => {
            let cfg = ModelConfig::default();
            let params: Params<f64> = init_params(&cfg)?;
            (WeightSet::from_params(&cfg, &params), Vec::new())
        }
    };

    // 60 s of walking gives the stream plenty of distinct windows to cycle.
    let seq = synthesize_sequence(
        0xBEAC4,
        MotionProfile::Walk,
        60.0,
        60.0,
        ShapeParams::zero(),
        &model,
    )?;
    let track = extract_three_point(&seq, &model);

    let streams: Vec<StreamStats> = if args.threads == 1 {
        let net: Network<f32> = Network::from_weights(&weights)?;
        vec![bench_stream(&net, &track, args.seconds, 1.0)?]
    } else {
        let mut slots: Vec<Option<Result<StreamStats, CliError>>> =
            (0..args.threads).map(|_| None).collect();
        std::thread::scope(|scope| {
            for slot in slots.iter_mut() {
                let weights = &weights;
                let track = &track;
                scope.spawn(move || {
                    *slot = Some(
                        Network::from_weights(weights)
                            .map_err(CliError::from)
                            .and_then(|net| bench_stream(&net, track, args.seconds, 1.0)),
                    );
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("stream finished"))
            .collect::<Result<Vec<_>, _>>()?
    };

    let flops = count_flops(&weights.config);
    let report = BenchReport {
        config: weights.config.clone(),
        threads: args.threads,
        total_fps: streams.iter().map(|s| s.fps).sum(),
        streams,
        analytic_flops_per_frame: flops.total(),
        analytic_gflops_per_frame: flops.total() as f64 / 1e9,
        params: count_params(&weights.config),
    };
    println!(
        "{} thread(s): {:.1} fps total, mean latency {:.3} ms, p99 {:.3} ms",
        report.threads,
        report.total_fps,
        report.streams[0].mean_latency_ms,
        report.streams[0].p99_latency_ms
    );
    println!(
        "analytic {:.3} GFLOPs/frame, {} params",
        report.analytic_gflops_per_frame, report.params
    );
    write_json_atomic(&args.out, &report)?;

    let manifest = RunManifest {
        command: "bench".into(),
        argv,
        code_version: env!("CARGO_PKG_VERSION").into(),
        seeds: vec![weights.config.seed],
        config: serde_json::json!({
            "model": weights.config,
            "seconds": args.seconds,
            "threads": args.threads,
        }),
        started_unix_s: started_unix,
        wall_clock_s: started.elapsed().as_secs_f64(),
        inputs,
        outputs: vec![path_str(&args.out)],
    };
    write_json_atomic(&args.out.with_extension("manifest.json"), &manifest)
}

#[derive(Debug, Serialize)]
struct FovSimRow {
    subject_id: u32,
    sequence_id: u32,
    frames: usize,
    left_visible: f64,
    right_visible: f64,
}

fn cmd_fov_sim(args: &FovSimArgs, argv: Vec<String>) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = unix_now();
    let fov = resolve_fov(args.preset.as_deref(), args.fov_h, args.fov_v)?;
    let model = load_model()?;
    let (dataset, inputs) = load_dataset(&args.data)?;

    let frac = |bits: &[bool]| {
        if bits.is_empty() {
            0.0
        } else {
            bits.iter().filter(|b| **b).count() as f64 / bits.len() as f64
        }
    };
    let mut rows = Vec::new();
    println!(
        "FoV {}°x{}°  (subject, sequence, frames, left visible, right visible)",
        fov.alpha_h_deg, fov.alpha_v_deg
    );
    for seq in &dataset {
        let track = extract_three_point(seq, &model);
        let mask = visibility_mask(&fov, &track);
        let row = FovSimRow {
            subject_id: seq.subject_id,
            sequence_id: seq.sequence_id,
            frames: seq.len(),
            left_visible: frac(&mask.left),
            right_visible: frac(&mask.right),
        };
        println!(
            "subj{:03} seq{:03}  {:6} frames  left {:.1}%  right {:.1}%",
            row.subject_id,
            row.sequence_id,
            row.frames,
            row.left_visible * 100.0,
            row.right_visible * 100.0
        );
        rows.push(row);
    }
    let total_frames: usize = rows.iter().map(|r| r.frames).sum();
    let weighted = |f: &dyn Fn(&FovSimRow) -> f64| {
        rows.iter().map(|r| f(r) * r.frames as f64).sum::<f64>() / total_frames.max(1) as f64
    };
    println!(
        "overall  left {:.1}%  right {:.1}%",
        weighted(&|r| r.left_visible) * 100.0,
        weighted(&|r| r.right_visible) * 100.0
    );

    if let Some(out) = &args.out {
        write_json_atomic(out, &serde_json::json!({ "fov": fov, "sequences": rows }))?;
        let manifest = RunManifest {
            command: "fov-sim".into(),
            argv,
            code_version: env!("CARGO_PKG_VERSION").into(),
            seeds: Vec::new(),
            config: serde_json::json!({ "fov": fov }),
            started_unix_s: started_unix,
            wall_clock_s: started.elapsed().as_secs_f64(),
            inputs,
            outputs: vec![path_str(out)],
        };
        write_json_atomic(&out.with_extension("manifest.json"), &manifest)?;
    }
    Ok(())
}
