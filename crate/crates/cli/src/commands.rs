use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use stmha::geometry3d::{ray_angle, CameraIntrinsics};
use stmha::io::{self, IoError, PredictionRow};
use stmha::pipeline::{observations, pair_with, paired_windows, solve_detection, Detection, GeometryNoise};
use stmha::pose_regressor::{
    oracle_estimate, train_regressor, ImhaConfig, ImhaRegressor, NoiseSpec, PoseEstimate, PoseSample,
    PoseTrainConfig,
};
use stmha::stmha_net::{Batch, ModelConfig, ModelError, StmhaNet};
use stmha::synth::{generate, mixed_dataset, preset, render, Dataset, RenderNoise, Scenario, ScenarioKind};
use stmha::tensor::ModelWeights;
use stmha::track_assembly::{assemble, extract_windows, ScaleSpec, TrajectoryWindow, WindowConfig};
use stmha::training::{
    evaluate, evaluate_forecasts, horizon_csv, mde_iou_vs_distance, relative_change, run_ablation, train as fit,
    AblationData, EvalReport, Forecasts, HorizonRmse, TrainConfig, TrainingError, Variant,
};

use crate::manifest::Recorder;
use crate::{AblateArgs, EvalArgs, GenArgs, PoseSource, PredictArgs, SolvePoseArgs, TrainArgs, TrainPoseArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unreadable inputs; exit code 2.
    Usage(String),
    /// A computation failed on valid inputs; exit code 1.
    Compute(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Compute(m) => f.write_str(m),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Weights(_) => CliError::Usage(e.to_string()),
            _ => CliError::Compute(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Model(m) => m.into(),
            TrainingError::Config(_) | TrainingError::NoData => CliError::Usage(e.to_string()),
            _ => CliError::Compute(e.to_string()),
        }
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn compute(e: impl fmt::Display) -> CliError {
    CliError::Compute(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

/// Windowing and training settings shared by `train`, `eval` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window: WindowConfig,
    /// Frames between consecutive window end frames of one track.
    pub stride: usize,
    pub max_windows: Option<usize>,
    /// Frame interval, seconds.
    pub dt: f64,
    /// One gain for both axes instead of a per-axis fit.
    pub isotropic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            window: WindowConfig::default(),
            stride: 1,
            max_windows: None,
            dt: 0.5,
            isotropic: true,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>, rec: &mut Recorder) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            Some(p) => {
                rec.config(p);
                io::read_json(p)?
            }
            None => RunConfig::default(),
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        if self.model.t_steps != self.window.t_steps || self.model.f_steps != self.window.f_steps {
            return Err(usage(format!(
                "model expects {}+{} steps but windows have {}+{}",
                self.model.t_steps, self.model.f_steps, self.window.t_steps, self.window.f_steps
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(usage("dt must be positive"));
        }
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        Ok(())
    }

    fn scale(&self, windows: &[TrajectoryWindow]) -> ScaleSpec {
        let s = ScaleSpec::fit_windows(windows);
        if self.isotropic {
            s.isotropic()
        } else {
            s
        }
    }
}

/// `model.json` in a trained model directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    run: RunConfig,
    scale: ScaleSpec,
}

fn load_model(dir: &Path, rec: &mut Recorder) -> Result<(StmhaNet, ModelFile), CliError> {
    let meta_path = dir.join("model.json");
    let weights_path = dir.join("weights.json");
    let meta: ModelFile = io::read_json(&meta_path)?;
    meta.run.check()?;
    let weights = ModelWeights::load(&weights_path).map_err(usage)?;
    let net = StmhaNet::from_weights(meta.run.model.clone(), weights)
        .map_err(|e| usage(format!("{}: {e}", weights_path.display())))?;
    rec.input(&meta_path);
    rec.input(&weights_path);
    Ok((net, meta))
}

/// A directory is read through its `name` file.
fn resolve(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn load_windows(data: &Path, cfg: &RunConfig, rec: &mut Recorder) -> Result<Vec<TrajectoryWindow>, CliError> {
    let path = resolve(data, "trajectories.csv");
    let obs = io::read_trajectories(&path)?;
    rec.input(&path);
    let tracks = assemble(&obs, cfg.dt).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut windows = extract_windows(&tracks, &cfg.window, cfg.stride);
    if let Some(m) = cfg.max_windows {
        windows.truncate(m);
    }
    if windows.is_empty() {
        return Err(usage(format!("{}: no complete windows", path.display())));
    }
    Ok(windows)
}

fn horizon_label(h: f64) -> String {
    format!("{h}s")
}

fn fmt_rmse(r: &HorizonRmse) -> String {
    r.rmse.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn print_report(report: &EvalReport) {
    let header: Vec<String> = report.rmse.iter().map(|r| horizon_label(r.horizon_s)).collect();
    println!("{:<8} {}", "", header.iter().map(|h| format!("{h:>8}")).collect::<String>());
    for (name, rows) in [("model", &report.rmse), ("cv", &report.baseline_cv)] {
        println!("{name:<8} {}", rows.iter().map(|r| format!("{:>8}", fmt_rmse(r))).collect::<String>());
    }
}

pub fn gen(a: &GenArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("gen", Some(a.seed));
    if !(a.pixel_sigma >= 0.0 && a.pixel_sigma.is_finite()) {
        return Err(usage("--pixel-sigma must be a non-negative number"));
    }
    let scenario: Option<Scenario> = if let Some(path) = &a.scenario {
        rec.config(path);
        Some(io::read_json(path)?)
    } else if let Some(name) = &a.preset {
        Some(preset(name).map_err(usage)?)
    } else {
        None
    };
    let data = match (&scenario, a.random) {
        (Some(s), _) => generate(s, a.seed).map_err(usage)?,
        (None, Some(0)) => return Err(usage("--random needs at least one scenario")),
        (None, Some(n)) => mixed_dataset(&[ScenarioKind::Platoon, ScenarioKind::LaneChange], n, a.seed),
        (None, None) => unreachable!("clap requires a source"),
    };
    create_dir(&a.out)?;
    let rendered = render(
        &data,
        RenderNoise {
            pixel_sigma: a.pixel_sigma,
        },
        a.seed,
    );
    let detections: Vec<Detection> = rendered.iter().map(|r| Detection::from_rendered(r, true)).collect();

    let out = |name: &str| a.out.join(name);
    io::write_trajectories(&out("trajectories.csv"), &data.observations())?;
    io::write_detections(&out("detections.csv"), &detections)?;
    io::write_patches(&out("patches.csv"), rendered.iter().map(|r| (r.frame, r.track_id, &r.patch)))?;
    io::write_json(&out("ground_truth.json"), &data)?;
    io::write_json(&out("camera.json"), &data.camera)?;
    if let Some(s) = &scenario {
        io::write_json(&out("scenario.json"), s)?;
        rec.output(&out("scenario.json"));
    }
    for name in ["trajectories.csv", "detections.csv", "patches.csv", "ground_truth.json", "camera.json"] {
        rec.output(&out(name));
    }
    println!(
        "{} frames, {} tracks, {} detections -> {}",
        data.frames.len(),
        data.track_set().map_err(compute)?.tracks().len(),
        detections.len(),
        a.out.display()
    );
    rec.finish(&out("manifest.json"))
}

fn imha_poses(
    a: &SolvePoseArgs,
    detections: &[Detection],
    rec: &mut Recorder,
) -> Result<Vec<Option<PoseEstimate>>, CliError> {
    let (Some(dir), Some(patches_path)) = (&a.weights, &a.patches) else {
        return Err(usage("--pose-source imha needs --weights and --patches"));
    };
    let model = load_regressor(dir, rec)?;
    let patches = io::read_patches(patches_path)?;
    rec.input(patches_path);
    let keyed: Vec<(usize, &stmha::synth::PatchFeatures)> = detections
        .iter()
        .enumerate()
        .filter_map(|(i, d)| patches.get(&(d.frame, d.track_id)).map(|p| (i, p)))
        .collect();
    let mut out = vec![None; detections.len()];
    for chunk in keyed.chunks(256) {
        let batch: Vec<_> = chunk.iter().map(|(_, p)| *p).collect();
        let est = model.regress_batch(&batch).map_err(usage)?;
        for ((i, _), e) in chunk.iter().zip(est) {
            out[*i] = Some(e);
        }
    }
    Ok(out)
}

fn load_regressor(dir: &Path, rec: &mut Recorder) -> Result<ImhaRegressor, CliError> {
    let cfg_path = dir.join("imha_config.json");
    let weights_path = dir.join("weights.json");
    let config: ImhaConfig = io::read_json(&cfg_path)?;
    let weights = ModelWeights::load(&weights_path).map_err(usage)?;
    rec.input(&cfg_path);
    rec.input(&weights_path);
    ImhaRegressor::from_weights(config, weights).map_err(|e| usage(format!("{}: {e}", weights_path.display())))
}

pub fn solve_pose(a: &SolvePoseArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("solve-pose", Some(a.seed));
    let k: CameraIntrinsics = io::read_camera(&a.camera)?;
    rec.input(&a.camera);
    let detections = io::read_detections(&a.detections)?;
    rec.input(&a.detections);
    let truth: Option<Dataset> = match &a.truth {
        Some(p) => {
            rec.input(p);
            Some(io::read_json(p)?)
        }
        None => None,
    };
    let truth_boxes = truth.as_ref().map(|d| d.truth_by_key());

    let poses: Vec<Option<PoseEstimate>> = match a.pose_source {
        PoseSource::File => detections.iter().map(|d| d.pose).collect(),
        PoseSource::Oracle => {
            let Some(boxes) = &truth_boxes else {
                return Err(usage("--pose-source oracle needs --truth"));
            };
            let noise = NoiseSpec {
                sigma_dim: a.sigma_dim,
                sigma_theta: a.sigma_theta,
            };
            if !(noise.sigma_dim >= 0.0 && noise.sigma_theta >= 0.0) {
                return Err(usage("noise sigmas must be non-negative"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            detections
                .iter()
                .map(|d| {
                    let b = boxes.get(&(d.frame, d.track_id))?;
                    Some(oracle_estimate(b, ray_angle(&k, d.box2d.center().0), noise, &mut rng))
                })
                .collect()
        }
        PoseSource::Imha => imha_poses(a, &detections, &mut rec)?,
    };

    let solved: Vec<_> = detections
        .iter()
        .zip(&poses)
        .map(|(d, p)| {
            let bare = Detection { pose: None, ..d.clone() };
            solve_detection(&k, &bare, p.as_ref())
        })
        .collect();
    io::write_solved(&a.out, &solved)?;
    rec.output(&a.out);

    if let Some(path) = &a.trajectories {
        io::write_trajectories(path, &observations(&solved))?;
        rec.output(path);
    }
    if let Some(path) = &a.distance {
        let Some(boxes) = &truth_boxes else {
            return Err(usage("--distance needs --truth"));
        };
        let pairs: Vec<_> = solved
            .iter()
            .zip(&detections)
            .zip(&poses)
            .filter_map(|((s, d), p)| {
                let est = s.recovered_box(p.as_ref()?, &k, &d.box2d)?;
                Some((est, *boxes.get(&(d.frame, d.track_id))?))
            })
            .collect();
        let report = EvalReport {
            distance_bins: mde_iou_vs_distance(&pairs),
            ..EvalReport::default()
        };
        std::fs::write(path, report.distance_csv()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        rec.output(path);
    }
    let flagged = solved.iter().filter(|s| s.flag.is_some()).count();
    println!("{} detections, {} flagged -> {}", solved.len(), flagged, a.out.display());
    let manifest = a.out.with_extension("manifest.json");
    rec.finish(&manifest)
}

pub fn train_pose(a: &TrainPoseArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("train-pose", Some(a.seed));
    let mut cfg: PoseTrainConfig = match &a.config {
        Some(p) => {
            rec.config(p);
            io::read_json(p)?
        }
        None => PoseTrainConfig::default(),
    };
    cfg.seed = a.seed;
    let det_path = a.data.join("detections.csv");
    let patch_path = a.data.join("patches.csv");
    let detections = io::read_detections(&det_path)?;
    let patches = io::read_patches(&patch_path)?;
    rec.input(&det_path);
    rec.input(&patch_path);
    let samples: Vec<PoseSample> = detections
        .iter()
        .filter_map(|d| {
            let pose = d.pose?;
            Some(PoseSample {
                patch: patches.get(&(d.frame, d.track_id))?.clone(),
                dims: pose.d,
                theta_local: pose.theta_local,
            })
        })
        .collect();
    if samples.is_empty() {
        return Err(usage(format!(
            "{}: no detections with pose columns and a matching patch",
            det_path.display()
        )));
    }
    let config = ImhaConfig::default();
    let mut model = ImhaRegressor::new(config.clone(), a.seed);
    let curve = train_regressor(&mut model, &samples, &cfg).map_err(compute)?;
    create_dir(&a.out)?;
    let out = |name: &str| a.out.join(name);
    model.weights.save(&out("weights.json")).map_err(compute)?;
    io::write_json(&out("imha_config.json"), &config)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", e + 1));
    }
    std::fs::write(out("loss.csv"), csv).map_err(compute)?;
    for name in ["weights.json", "imha_config.json", "loss.csv"] {
        rec.output(&out(name));
    }
    println!("{} samples, final loss {:.5}", samples.len(), curve.last().copied().unwrap_or(f64::NAN));
    rec.finish(&out("manifest.json"))
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("train", Some(a.seed));
    let mut cfg = RunConfig::load(a.config.as_deref(), &mut rec)?;
    cfg.train.seed = a.seed;
    let windows = load_windows(&a.data, &cfg, &mut rec)?;
    let scale = cfg.scale(&windows);
    let mut net = StmhaNet::new(cfg.model.clone(), a.seed)?;
    let checkpoints = a.out.join("checkpoints");
    create_dir(&checkpoints)?;
    let report = fit(&mut net, &windows, scale, &cfg.train, Some(&checkpoints))?;
    let out = |name: &str| a.out.join(name);
    net.weights.save(&out("weights.json")).map_err(compute)?;
    io::write_json(&out("model.json"), &ModelFile { run: cfg, scale })?;
    io::write_json(&out("windows.json"), &windows)?;
    std::fs::write(out("loss.csv"), report.loss_csv()).map_err(compute)?;
    for name in ["model.json", "weights.json", "windows.json", "loss.csv"] {
        rec.output(&out(name));
    }
    println!(
        "{} windows, {} epochs, final loss {:.6}",
        windows.len(),
        report.loss_curve.len(),
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    rec.finish(&out("manifest.json"))
}

/// Forecasts read from a predictions file, laid out like the windows.
fn forecasts_from_rows(
    rows: &[PredictionRow],
    inputs: &[TrajectoryWindow],
    truths: &[TrajectoryWindow],
    path: &Path,
) -> Result<Forecasts, CliError> {
    let keyed: BTreeMap<(usize, u64, usize), [f64; 2]> =
        rows.iter().map(|r| ((r.window_id, r.track_id, r.step), [r.x, r.y])).collect();
    let f = truths[0].f_steps;
    let n = truths.iter().map(|w| w.n_vehicles()).max().unwrap_or(0);
    let mut out = Forecasts::empty(f, n);
    for (l, (w, input)) in truths.iter().zip(inputs).enumerate() {
        let nw = w.n_vehicles();
        let mut points = Vec::with_capacity(f * nw);
        for s in 0..f {
            for (v, &id) in w.ids.iter().enumerate() {
                let p = keyed.get(&(l, id, s + 1)).copied();
                let scored = w.future(s, v).is_some() && input.is_present(input.t_steps - 1, v);
                match p {
                    Some(p) => points.push(p),
                    None if scored => {
                        return Err(usage(format!(
                            "{}: no prediction for window {l}, track {id}, step {}",
                            path.display(),
                            s + 1
                        )))
                    }
                    None => points.push([0.0, 0.0]),
                }
            }
        }
        out.push(&points, &vec![true; f * nw], nw);
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("eval", None);
    let model = match &a.model {
        Some(dir) => Some(load_model(dir, &mut rec)?),
        None => None,
    };
    let cfg = match &model {
        Some((_, meta)) => meta.run.clone(),
        None => RunConfig::load(a.config.as_deref(), &mut rec)?,
    };
    let truths = load_windows(&a.data, &cfg, &mut rec)?;
    let (truths, inputs) = match &a.inputs {
        Some(path) => {
            let path = resolve(path, "trajectories.csv");
            let obs = io::read_trajectories(&path)?;
            rec.input(&path);
            let tracks = assemble(&obs, cfg.dt).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            pair_with(truths, &tracks)
        }
        None => (truths.clone(), truths),
    };
    if inputs.is_empty() {
        return Err(usage("no window has its target present in the inputs"));
    }
    let report = match (&model, &a.predictions) {
        (Some((net, meta)), _) => evaluate(net, &inputs, &truths, meta.scale, cfg.dt)?,
        (None, Some(path)) => {
            let rows = io::read_predictions(path)?;
            rec.input(path);
            let pred = forecasts_from_rows(&rows, &inputs, &truths, path)?;
            evaluate_forecasts(&pred, &inputs, &truths, cfg.dt)?
        }
        (None, None) => unreachable!("clap requires a forecaster"),
    };
    let out_dir = match (&a.out, &a.model) {
        (Some(o), _) => o.clone(),
        (None, Some(m)) => m.join("eval"),
        (None, None) => return Err(usage("--out is required without --model")),
    };
    create_dir(&out_dir)?;
    let out = |name: &str| out_dir.join(name);
    std::fs::write(out("eval_report.json"), report.to_json() + "\n").map_err(compute)?;
    std::fs::write(out("rmse.csv"), report.rmse_csv()).map_err(compute)?;
    std::fs::write(out("cv_rmse.csv"), horizon_csv(&report.baseline_cv)).map_err(compute)?;
    for name in ["eval_report.json", "rmse.csv", "cv_rmse.csv"] {
        rec.output(&out(name));
    }
    println!("{} windows", report.windows);
    print_report(&report);
    rec.finish(&out("manifest.json"))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(Box<TrajectoryWindow>),
    Many(Vec<TrajectoryWindow>),
}

pub fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("predict", None);
    let (net, meta) = load_model(&a.model, &mut rec)?;
    let windows = match io::read_json::<OneOrMany>(&a.window)? {
        OneOrMany::One(w) => vec![*w],
        OneOrMany::Many(ws) => ws,
    };
    rec.input(&a.window);
    let cfg = &meta.run.model;
    for (i, w) in windows.iter().enumerate() {
        let n = w.n_vehicles();
        if w.t_steps != cfg.t_steps || w.f_steps != cfg.f_steps {
            return Err(usage(format!(
                "window {i} has {}+{} steps, model expects {}+{}",
                w.t_steps, w.f_steps, cfg.t_steps, cfg.f_steps
            )));
        }
        if n == 0 || w.positions.len() != w.steps() * n || w.present.len() != w.steps() * n {
            return Err(usage(format!("window {i}: positions do not match {} ids", n)));
        }
    }
    let mut rows = Vec::new();
    for (chunk_index, chunk) in windows.chunks(64).enumerate() {
        let members: Vec<&TrajectoryWindow> = chunk.iter().collect();
        let batch = Batch::from_windows(&members, meta.scale, cfg.d_near)?;
        let pred = net.predict(&batch)?;
        for (b, w) in chunk.iter().enumerate() {
            let window_id = chunk_index * 64 + b;
            for s in 0..cfg.f_steps {
                for (v, &track_id) in w.ids.iter().enumerate() {
                    if !w.is_present(w.t_steps - 1, v) {
                        continue;
                    }
                    let [x, y] = pred[(b * cfg.f_steps + s) * batch.n + v];
                    rows.push(PredictionRow {
                        window_id,
                        track_id,
                        step: s + 1,
                        x,
                        y,
                    });
                }
            }
        }
    }
    match &a.out {
        Some(path) => {
            io::write_predictions(path, &rows)?;
            rec.output(path);
            rec.finish(&path.with_extension("manifest.json"))
        }
        None => io::write_predictions_to(std::io::stdout().lock(), &rows).map_err(compute),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct AblateConfig {
    #[serde(flatten)]
    run: RunConfig,
    noise: GeometryNoise,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            noise: GeometryNoise {
                render: RenderNoise { pixel_sigma: 1.0 },
                pose: NoiseSpec {
                    sigma_dim: 0.05,
                    sigma_theta: 0.03,
                },
            },
        }
    }
}

fn ablation_windows(
    dir: &Path,
    cfg: &AblateConfig,
    seed: u64,
    rec: &mut Recorder,
) -> Result<(Vec<TrajectoryWindow>, Vec<TrajectoryWindow>), CliError> {
    let path = resolve(dir, "ground_truth.json");
    let data: Dataset = io::read_json(&path)?;
    rec.input(&path);
    let (mut truth, mut recovered) = paired_windows(&data, cfg.noise, &cfg.run.window, cfg.run.stride, seed)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(m) = cfg.run.max_windows {
        truth.truncate(m);
        recovered.truncate(m);
    }
    if truth.is_empty() {
        return Err(usage(format!("{}: no complete windows", path.display())));
    }
    Ok((truth, recovered))
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("ablate", Some(a.seed));
    let mut cfg: AblateConfig = match &a.config {
        Some(p) => {
            rec.config(p);
            io::read_json(p)?
        }
        None => AblateConfig::default(),
    };
    cfg.run.check()?;
    cfg.run.train.seed = a.seed;
    let (train_truth, train_recovered) = ablation_windows(&a.data, &cfg, a.seed, &mut rec)?;
    let (test_truth, test_recovered) = ablation_windows(&a.test_data, &cfg, a.seed.wrapping_add(1), &mut rec)?;
    let data = AblationData {
        train_truth,
        train_recovered,
        test_truth,
        test_recovered,
        dt: cfg.run.dt,
    };
    let variants: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| a.variant.iter().any(|&x| Variant::from(x) == *v))
        .collect();
    let mut reports: BTreeMap<&str, EvalReport> = BTreeMap::new();
    for &v in &variants {
        tracing::info!(variant = v.name(), "training");
        let report = run_ablation(v, &data, &cfg.run.model, &cfg.run.train)?;
        reports.insert(v.name(), report);
    }

    let control = reports.get("control").map(|r| r.rmse.clone());
    let mut csv = String::from("variant,horizon_s,rmse,change_pct\n");
    let horizons: Vec<f64> = reports
        .values()
        .next()
        .map(|r| r.rmse.iter().map(|h| h.horizon_s).collect())
        .unwrap_or_default();
    println!(
        "{:<8} {}",
        "RMSE (m)",
        horizons.iter().map(|&h| format!("{:>16}", horizon_label(h))).collect::<String>()
    );
    for &v in &variants {
        let r = &reports[v.name()];
        let change = control
            .as_ref()
            .map(|c| relative_change(&r.rmse, c))
            .unwrap_or_else(|| vec![None; r.rmse.len()]);
        let mut line = format!("{:<8} ", v.name());
        for (h, c) in r.rmse.iter().zip(&change) {
            let cell = match c {
                Some(pct) if v != Variant::Control => format!("{} ({pct:+.1}%)", fmt_rmse(h)),
                _ => fmt_rmse(h),
            };
            line.push_str(&format!("{cell:>16}"));
            let rmse = h.rmse.map(|x| x.to_string()).unwrap_or_default();
            let pct = c.map(|x| x.to_string()).unwrap_or_default();
            csv.push_str(&format!("{},{},{rmse},{pct}\n", v.name(), h.horizon_s));
        }
        println!("{line}");
    }
    create_dir(&a.out)?;
    let out = |name: &str| a.out.join(name);
    io::write_json(&out("ablation.json"), &reports)?;
    std::fs::write(out("ablation.csv"), csv).map_err(compute)?;
    rec.output(&out("ablation.json"));
    rec.output(&out("ablation.csv"));
    rec.finish(&out("manifest.json"))
}
