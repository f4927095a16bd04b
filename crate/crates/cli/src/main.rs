mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use stmha::training::Variant;

/// Monocular 3D box recovery and socio-temporal trajectory prediction.
///
/// Exit codes: 0 success, 1 computation failure, 2 usage or input error.
#[derive(Debug, Parser)]
#[command(name = "stmha", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Gen(GenArgs),
    SolvePose(SolvePoseArgs),
    TrainPose(TrainPoseArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    Predict(PredictArgs),
    Ablate(AblateArgs),
}

/// Generate a synthetic dataset.
///
/// Writes into OUT:
///   trajectories.csv   frame,track_id,x,y (ground truth, meters, x lateral, y forward)
///   detections.csv     frame,track_id,xmin,ymin,xmax,ymax,dx,dy,dz,theta_local
///                      (pixels; true width/height/length in meters and local yaw in radians)
///   patches.csv        frame,track_id,f0..f258 (16x16 shaded patch then box geometry)
///   ground_truth.json  per-frame 3D boxes
///   camera.json        {fx,fy,cx,cy,width,height}
#[derive(Debug, Args)]
#[command(verbatim_doc_comment)]
#[command(group(ArgGroup::new("source").required(true).args(["scenario", "preset", "random"])))]
pub struct GenArgs {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Built-in scenario: platoon-3, platoon-8, cut-in, lane-change, merge, sparse.
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of randomised platoon and lane-change scenarios to concatenate.
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian noise on rendered box sides, pixels.
    #[arg(long, default_value_t = 0.0)]
    pub pixel_sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoseSource {
    /// Ground-truth pose from --truth, optionally perturbed.
    Oracle,
    /// Attention regressor over --patches with --weights.
    Imha,
    /// The dx,dy,dz,theta_local columns of the detections file.
    File,
}

/// Recover the 3D position of every detection.
///
/// Output columns: frame,track_id,tx,ty,tz,config_index,residual,flag
///   tx,ty,tz      camera-frame box centre, meters (x right, y down, z forward)
///   config_index  chosen vertex-to-side configuration, 0..63
///   residual      L1 distance between the input box and the reprojected box, pixels
///   flag          reason when no position was recovered; the row is kept
#[derive(Debug, Args)]
#[command(verbatim_doc_comment)]
pub struct SolvePoseArgs {
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, value_enum)]
    pub pose_source: PoseSource,
    #[arg(long)]
    pub out: PathBuf,
    /// ground_truth.json, required by the oracle source and by --distance.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Oracle dimension noise, meters.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_dim: f64,
    /// Oracle orientation noise, radians.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_theta: f64,
    /// IMHA weights directory written by train-pose.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub patches: Option<PathBuf>,
    /// Also write recovered trajectories (frame,track_id,x,y).
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Also write distance_bin,mde,iou against --truth.
    #[arg(long)]
    pub distance: Option<PathBuf>,
    /// Frame interval for trajectory assembly, seconds.
    #[arg(long, default_value_t = 0.5)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Train the pose regressor on a generated dataset (detections.csv with pose
/// columns and patches.csv). Writes weights.json, imha_config.json, loss.csv.
#[derive(Debug, Args)]
pub struct TrainPoseArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON with learning_rate, batch_size, epochs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Train the trajectory model.
///
/// DATA is a directory holding trajectories.csv, or a trajectory CSV.
/// CONFIG is JSON with optional sections model, train, window and keys
/// stride, max_windows, dt, isotropic. Writes model.json, weights.json,
/// windows.json (the training windows), loss.csv (epoch,loss) and
/// checkpoints/epoch_NNNN.json into OUT.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Evaluate a model, or a predictions file, against ground-truth futures.
///
/// Writes eval_report.json, rmse.csv and cv_rmse.csv (horizon_s,rmse).
#[derive(Debug, Args)]
#[command(group(ArgGroup::new("forecaster").required(true).args(["model", "predictions"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// window_id,track_id,step,x,y scored in place of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Ground-truth trajectories (directory with trajectories.csv, or CSV).
    #[arg(long)]
    pub data: PathBuf,
    /// Observed trajectories fed to the model, e.g. recovered by solve-pose.
    /// Defaults to the ground truth.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    /// Run configuration for windowing when no model is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to MODEL/eval.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Forecast one or more windows (JSON as written by the library).
///
/// Output columns: window_id,track_id,step,x,y (meters, step 1-based).
#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub window: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Train and evaluate ablation variants at one seed.
///
/// DATA and TEST_DATA are directories from `gen` (ground_truth.json is read).
/// Control trains on trajectories recovered through noisy geometry; tp uses
/// ground-truth trajectories; est and dst remove the encoder or decoder
/// attention. Writes ablation.json and ablation.csv
/// (variant,horizon_s,rmse,change_pct) and prints the table.
#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_values_t = vec![VariantArg::Tp, VariantArg::Est, VariantArg::Dst, VariantArg::Control])]
    pub variant: Vec<VariantArg>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
    /// JSON run configuration plus a `noise` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Tp,
    Est,
    Dst,
    Control,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Tp => Variant::Tp,
            VariantArg::Est => Variant::Est,
            VariantArg::Dst => Variant::Dst,
            VariantArg::Control => Variant::Control,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::SolvePose(a) => commands::solve_pose(a),
        Command::TrainPose(a) => commands::train_pose(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
