//! `landmap`: synthesize scenes, build landmark maps, train the centroid
//! recognizer, localize queries and score the results.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use landmap::builder::{assign_training_labels, build_map_with_report};
use landmap::geometry::{CameraIntrinsics, Pose, RansacParams};
use landmap::localizer::{localize_batch, LocalizationResult, LocalizerParams};
use landmap::map::{deserialize_map, load_reconstruction, serialize_map, BuilderConfig, Keypoint2D, SceneMap, UpAxis};
use landmap::recognition::{calibrate_null_bias, load_weights, save_weights, train_centroid_recognizer, CentroidParams, ModelKind};
use landmap::synth::{evaluate, generate_scene, map_stats, sample_queries, QuerySpec, SceneSpec, Threshold, DEFAULT_THRESHOLDS};

#[derive(Parser)]
#[command(name = "landmap", version, about = "Landmark map building and landmark-wise visual localization")]
struct Cli {
    /// Print progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic reconstruction (and optionally queries).
    Synth(SynthArgs),
    /// Build a landmark map from a reconstruction JSON file.
    BuildMap(BuildArgs),
    /// Fit the centroid recognizer to a map.
    TrainRecognizer(TrainArgs),
    /// Localize query keypoint sets; writes one JSON result per line.
    Localize(LocalizeArgs),
    /// Score localization results against ground-truth poses.
    Eval(EvalArgs),
    /// Report map statistics as JSON.
    Stats(StatsArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is not in [0, 1)"))
    }
}

fn probability(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x > 0.0 && x <= 1.0 {
        Ok(x)
    } else {
        Err(format!("{x} is not in (0, 1]"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be a finite value >= 0"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be a finite value > 0"))
    }
}

fn up_axis(s: &str) -> Result<UpAxis, String> {
    match s {
        "x" | "X" => Ok(UpAxis::X),
        "y" | "Y" => Ok(UpAxis::Y),
        "z" | "Z" => Ok(UpAxis::Z),
        _ => Err(format!("unknown axis {s:?}, expected x, y or z")),
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    clusters: u64,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    points_per_cluster: u64,
    /// Horizontal standard deviation of each blob (m).
    #[arg(long, default_value_t = 0.08, value_parser = non_negative)]
    spread: f64,
    /// Side of the square holding the blobs (m).
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    extent: f64,
    #[arg(long, default_value_t = 24, value_parser = clap::value_parser!(u64).range(1..))]
    frames: u64,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    /// Descriptor noise of reference observations.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    sigma: f64,
    #[arg(long, default_value_t = 0.2, value_parser = unit_interval)]
    outlier_fraction: f64,
    /// Reconstruction JSON output.
    #[arg(short, long)]
    output: PathBuf,
    /// Number of query views to render.
    #[arg(long, default_value_t = 0)]
    queries: usize,
    /// Query keypoints output.
    #[arg(long)]
    queries_out: Option<PathBuf>,
    /// Ground-truth query poses output.
    #[arg(long)]
    gt_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05, value_parser = non_negative)]
    query_sigma: f64,
    #[arg(long, default_value_t = 0.2, value_parser = unit_interval)]
    query_outlier_fraction: f64,
    #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
    pixel_noise: f64,
}

#[derive(Args)]
struct BuildArgs {
    /// Reconstruction JSON.
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Number of landmarks (λ_l).
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    lambda_l: u64,
    /// Neighbors for spatial-consistency filtering (λ_n).
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    lambda_n: u64,
    /// Covariance-trace threshold for filtering, m² (λ_v).
    #[arg(long, default_value_t = 0.2, value_parser = positive)]
    lambda_v: f64,
    /// Pruning radius in pixels (λ_o).
    #[arg(long, default_value_t = 25.0, value_parser = non_negative)]
    lambda_o: f64,
    #[arg(long)]
    no_pruning: bool,
    /// Vertical world axis: x, y or z.
    #[arg(long, default_value = "z", value_parser = up_axis)]
    up_axis: UpAxis,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Map container.
    map: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.07, value_parser = positive)]
    temperature: f64,
    /// Outlier-class score b0.
    #[arg(long, default_value_t = 0.5)]
    null_bias: f64,
    /// Calibrate b0 on the frames of this reconstruction instead.
    #[arg(long)]
    calibrate_with: Option<PathBuf>,
}

#[derive(Args)]
struct LocalizeArgs {
    map: PathBuf,
    weights: PathBuf,
    /// JSON array of {"intrinsics", "keypoints"} objects.
    queries: PathBuf,
    /// JSON-lines output (standard output when omitted).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Keypoints with outlier probability above this are dropped (λ_s).
    #[arg(long, default_value_t = 0.9, value_parser = probability)]
    lambda_s: f64,
    /// Inliers needed to accept a landmark (λ_i).
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(4..))]
    lambda_i: u64,
    /// Maximum candidate landmarks verified (λ_c).
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    lambda_c: u64,
    #[arg(long, default_value_t = 0.9, value_parser = probability)]
    ratio_test: f64,
    /// Skip covisibility refinement.
    #[arg(long)]
    no_refine: bool,
    #[arg(long, default_value_t = 24.0, value_parser = non_negative)]
    refine_window: f64,
    /// RANSAC inlier threshold in pixels.
    #[arg(long, default_value_t = 8.0, value_parser = positive)]
    ransac_threshold: f64,
    #[arg(long, default_value_t = 2048, value_parser = clap::value_parser!(u64).range(1..))]
    ransac_iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON-lines localization results.
    results: PathBuf,
    /// JSON array of ground-truth poses.
    ground_truth: PathBuf,
    /// Attach map statistics from this map ...
    #[arg(long, requires = "recon")]
    map: Option<PathBuf>,
    /// ... and the reconstruction it was built from.
    #[arg(long, requires = "map")]
    recon: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    map: PathBuf,
    /// Reconstruction the map was built from, for before/after counts.
    #[arg(long)]
    recon: Option<PathBuf>,
}

/// One query as stored in a queries file.
#[derive(Serialize, Deserialize)]
struct QueryInput {
    intrinsics: CameraIntrinsics,
    keypoints: Vec<Keypoint2D>,
}

#[derive(Serialize)]
struct MapSummary {
    num_landmarks: usize,
    num_points: usize,
    descriptor_dim: usize,
    points_per_landmark: Vec<usize>,
    covisibility_edges: usize,
    serialized_bytes: usize,
    build_config: BuilderConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    map_stats: Option<landmap::synth::MapStats>,
}

type CliResult<T> = Result<T, String>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn load_map(path: &Path) -> CliResult<SceneMap> {
    deserialize_map(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn synth(a: SynthArgs, verbose: bool) -> CliResult<()> {
    let spec = SceneSpec {
        num_clusters: a.clusters as usize,
        points_per_cluster: a.points_per_cluster as usize,
        cluster_spread_m: a.spread,
        scene_extent_m: a.extent,
        num_ref_frames: a.frames as usize,
        descriptor_dim: a.dim as usize,
        descriptor_noise_sigma: a.sigma,
        outlier_keypoint_fraction: a.outlier_fraction,
        seed: a.seed,
        ..Default::default()
    };
    let scene = generate_scene(&spec).map_err(|e| e.to_string())?;
    write(&a.output, scene.recon.to_json_string().as_bytes())?;
    if verbose {
        eprintln!("{} points, {} frames", scene.recon.points.len(), scene.recon.frames.len());
    }
    if a.queries > 0 {
        let q = QuerySpec {
            descriptor_sigma: a.query_sigma,
            outlier_fraction: a.query_outlier_fraction,
            pixel_noise_px: a.pixel_noise,
            ..Default::default()
        };
        let rendered = sample_queries(&scene, a.queries, &q, a.seed.wrapping_add(1));
        if rendered.len() < a.queries {
            return Err(format!("only {} of {} query views see enough of the scene", rendered.len(), a.queries));
        }
        let inputs: Vec<QueryInput> = rendered
            .iter()
            .map(|r| QueryInput {
                intrinsics: r.intrinsics,
                keypoints: r.keypoints.iter().map(|k| Keypoint2D { point3d_id: None, ..k.clone() }).collect(),
            })
            .collect();
        let poses: Vec<Pose> = rendered.iter().map(|r| r.pose).collect();
        if let Some(p) = &a.queries_out {
            write(p, serde_json::to_string(&inputs).expect("serializable").as_bytes())?;
        }
        if let Some(p) = &a.gt_out {
            write(p, to_json(&poses).as_bytes())?;
        }
    }
    Ok(())
}

fn build(a: BuildArgs, verbose: bool) -> CliResult<()> {
    let recon = load_reconstruction(&a.input).map_err(|e| format!("{}: {e}", a.input.display()))?;
    let cfg = BuilderConfig {
        lambda_l: a.lambda_l as usize,
        lambda_n: a.lambda_n as usize,
        lambda_v: a.lambda_v,
        lambda_o: a.lambda_o,
        up_axis: a.up_axis,
        enable_pruning: !a.no_pruning,
        seed: a.seed,
    };
    let (map, report) = build_map_with_report(&recon, &cfg).map_err(|e| e.to_string())?;
    write(&a.output, &serialize_map(&map))?;
    if verbose {
        eprintln!("{} witnesses recorded", report.witnesses.len());
    }
    stdout_line(&to_json(&map_stats(&recon, &map)))?;
    Ok(())
}

fn train(a: TrainArgs, verbose: bool) -> CliResult<()> {
    let map = load_map(&a.map)?;
    let params = CentroidParams {
        temperature: a.temperature,
        null_bias: a.null_bias,
    };
    let mut model = train_centroid_recognizer(&map, &params);
    if let Some(path) = &a.calibrate_with {
        let recon = load_reconstruction(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let samples = assign_training_labels(&recon, &map);
        let grid: Vec<f32> = (0..=20).map(|i| i as f32 * 0.05).collect();
        let b0 = calibrate_null_bias(&model, &samples, &grid).map_err(|e| e.to_string())?;
        if let ModelKind::Centroid(c) = &mut model.kind {
            c.null_bias = b0;
        }
        if verbose {
            eprintln!("calibrated null bias {b0}");
        }
    }
    save_weights(&model, &a.output).map_err(|e| format!("{}: {e}", a.output.display()))
}

fn localize(a: LocalizeArgs, verbose: bool) -> CliResult<()> {
    let map = load_map(&a.map)?;
    let model = load_weights(&a.weights).map_err(|e| format!("{}: {e}", a.weights.display()))?;
    let inputs: Vec<QueryInput> = read_json(&a.queries)?;
    let params = LocalizerParams {
        lambda_s: a.lambda_s,
        lambda_i: a.lambda_i as usize,
        lambda_c: a.lambda_c as usize,
        ratio_test: a.ratio_test,
        refine: !a.no_refine,
        refine_window_px: a.refine_window,
        ransac: RansacParams {
            inlier_px_threshold: a.ransac_threshold,
            max_iters: a.ransac_iters as usize,
            seed: a.seed,
            ..Default::default()
        },
    };
    let queries: Vec<_> = inputs.into_iter().map(|q| (q.keypoints, q.intrinsics)).collect();
    let results = localize_batch(&queries, &model, &map, &params);
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| format!("{}: {e}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut localized = 0;
    for (i, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| format!("query {i}: {e}"))?;
        localized += r.is_localized() as usize;
        let line = serde_json::to_string(&r).expect("serializable");
        closed_pipe_ok(writeln!(out, "{line}"))?;
    }
    closed_pipe_ok(out.flush())?;
    if verbose {
        eprintln!("{localized} of {} queries localized", queries.len());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let text = String::from_utf8(read(&a.results)?).map_err(|e| format!("{}: {e}", a.results.display()))?;
    let results = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str::<LocalizationResult>(l).map_err(|e| format!("{} line {}: {e}", a.results.display(), i + 1)))
        .collect::<CliResult<Vec<_>>>()?;
    let gts: Vec<Pose> = read_json(&a.ground_truth)?;
    let thresholds: Vec<Threshold> = DEFAULT_THRESHOLDS.to_vec();
    let mut report = evaluate(&results, &gts, &thresholds).map_err(|e| e.to_string())?;
    if let (Some(m), Some(r)) = (&a.map, &a.recon) {
        let recon = load_reconstruction(r).map_err(|e| format!("{}: {e}", r.display()))?;
        report.map_stats = Some(map_stats(&recon, &load_map(m)?));
    }
    let json = to_json(&report);
    match &a.output {
        Some(p) => write(p, json.as_bytes()),
        None => stdout_line(&json),
    }
}

fn stats(a: StatsArgs) -> CliResult<()> {
    let map = load_map(&a.map)?;
    let before = match &a.recon {
        Some(r) => Some(load_reconstruction(r).map_err(|e| format!("{}: {e}", r.display()))?),
        None => None,
    };
    let summary = MapSummary {
        num_landmarks: map.num_landmarks(),
        num_points: map.points.len(),
        descriptor_dim: map.descriptor_dim,
        points_per_landmark: map.landmarks.iter().map(|l| l.point_ids.len()).collect(),
        covisibility_edges: map.covisibility.edges().len(),
        serialized_bytes: serialize_map(&map).len(),
        build_config: map.build_config,
        map_stats: before.map(|r| map_stats(&r, &map)),
    };
    stdout_line(&to_json(&summary))
}

/// A reader that stops early (`| head`) is not an error.
fn closed_pipe_ok(r: io::Result<()>) -> CliResult<()> {
    match r {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.to_string()),
        _ => Ok(()),
    }
}

fn stdout_line(text: &str) -> CliResult<()> {
    closed_pipe_ok(writeln!(io::stdout().lock(), "{text}"))
}

/// Usage line of the subcommand named by `argv[1]`, or of the tool.
fn usage(sub: Option<String>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let sub_usage = sub.and_then(|s| cmd.find_subcommand_mut(&s).map(|c| c.render_usage().to_string()));
    sub_usage.unwrap_or_else(|| cmd.render_usage().to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", usage(std::env::args().nth(1)));
            }
            return ExitCode::from(2);
        }
    };
    let v = cli.verbose;
    let outcome = match cli.command {
        Command::Synth(a) => synth(a, v),
        Command::BuildMap(a) => build(a, v),
        Command::TrainRecognizer(a) => train(a, v),
        Command::Localize(a) => localize(a, v),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
