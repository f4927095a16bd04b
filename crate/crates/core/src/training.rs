//! Loss, optimiser, training loop and evaluation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::{iou3d, Box3D};
use crate::stmha_net::{Batch, ModelConfig, ModelError, StmhaNet, TeacherForcing};
use crate::tensor::{ModelWeights, Tape, TensorError, Var, WeightsError};
use crate::track_assembly::{ScaleSpec, TrajectoryWindow};

/// Width of the distance bins for MDE and IoU curves, meters.
pub const DISTANCE_BIN_M: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss mask selects no entries")]
    EmptyMask,
    #[error("non-finite gradient in weight {0}")]
    Divergence(String),
    #[error("non-finite loss at epoch {epoch} step {step}; last good weights in {checkpoint:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("no training windows")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tf_ratio: f64,
    pub seed: u64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            tf_ratio: 0.5,
            seed: 0,
            lr_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.tf_ratio) {
            return bad("tf_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Mean squared Euclidean error over the masked-in points.
///
/// `pred` ends in an axis of 2; `gt` matches it flat and `mask` has one
/// entry per point.
pub fn mse_loss<'t>(pred: Var<'t>, gt: &[f64], mask: &[bool]) -> Result<Var<'t>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TrainingError::EmptyMask);
    }
    let shape = pred.shape();
    let tape = pred.tape();
    let weights: Vec<f64> = mask
        .iter()
        .flat_map(|&m| {
            let w = if m { 1.0 } else { 0.0 };
            [w, w]
        })
        .collect();
    let target = tape.constant_from(shape.clone(), gt.to_vec())?;
    let weights = tape.constant_from(shape, weights)?;
    let diff = pred.sub(target)?.mul(weights)?;
    Ok(diff.mul(diff)?.sum().scale(1.0 / count as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update from the gradients stored on `weights`.
/// Weights without a gradient buffer are skipped.
pub fn adam_step(weights: &mut ModelWeights, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (name, t) in weights.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainingError::Divergence(name.clone()));
            }
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (name, t) in weights.iter_mut() {
        let Some(g) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch, scaled space.
    pub loss_curve: Vec<f64>,
    /// Decoding steps where the coin chose ground truth.
    pub tf_forced: usize,
    pub tf_decisions: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (e, l) in self.loss_curve.iter().enumerate() {
            let _ = writeln!(out, "{},{l}", e + 1);
        }
        out
    }
}

/// Shuffled-minibatch training with per-step teacher forcing.
///
/// With `checkpoint_dir`, weights are written after each epoch as
/// `epoch_NNNN.json`; a non-finite loss restores the last good weights,
/// writes them as `last_good.json` and aborts.
pub fn train(
    net: &mut StmhaNet,
    windows: &[TrajectoryWindow],
    scale: ScaleSpec,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(TrainingError::NoData);
    }
    let mut adam = AdamConfig::from(cfg);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut report = TrainReport::default();
    let d_near = net.config.d_near;

    for epoch in 0..cfg.epochs {
        adam.learning_rate = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let members: Vec<&TrajectoryWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = Batch::from_windows(&members, scale, d_near)?;
            let mask = batch.loss_mask();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let tape = Tape::new();
            let p = net.weights.bind(&tape);
            let tf = TeacherForcing {
                ratio: cfg.tf_ratio,
                rng: &mut rng,
            };
            let out = net.forward(&p, &tape, &batch, Some(tf))?;
            report.tf_decisions += out.teacher_forced.len();
            report.tf_forced += out.teacher_forced.iter().filter(|&&f| f).count();
            let loss = mse_loss(out.predictions, &batch.future, &mask)?;
            let value = loss.item();
            if !value.is_finite() {
                let checkpoint = match checkpoint_dir {
                    Some(dir) => {
                        let path = dir.join("last_good.json");
                        net.weights.save(&path)?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(TrainingError::NonFiniteLoss { epoch, step, checkpoint });
            }
            tape.backward(loss)?;
            net.weights.zero_grad();
            net.weights.accumulate_grads(&tape, &p);
            adam_step(&mut net.weights, &mut state, &adam)?;
            total += value;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        tracing::debug!(epoch, loss = mean, "epoch done");
        report.loss_curve.push(mean);
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch_{:04}.json", epoch + 1));
            net.weights.save(&path)?;
            report.checkpoints.push(path);
        }
    }
    net.weights.zero_grad();
    Ok(report)
}

/// Future positions in meters laid out `[L, F, N]`, with a presence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecasts {
    pub samples: usize,
    pub f_steps: usize,
    pub n: usize,
    pub points: Vec<[f64; 2]>,
    pub mask: Vec<bool>,
}

impl Forecasts {
    pub fn empty(f_steps: usize, n: usize) -> Self {
        Self {
            samples: 0,
            f_steps,
            n,
            points: Vec::new(),
            mask: Vec::new(),
        }
    }

    /// Appends one sample of `[F, n_w]` points with `n_w ≤ n`.
    pub fn push(&mut self, points: &[[f64; 2]], mask: &[bool], n_w: usize) {
        for s in 0..self.f_steps {
            for v in 0..self.n {
                if v < n_w {
                    self.points.push(points[s * n_w + v]);
                    self.mask.push(mask[s * n_w + v]);
                } else {
                    self.points.push([0.0; 2]);
                    self.mask.push(false);
                }
            }
        }
        self.samples += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonRmse {
    pub horizon_s: f64,
    /// Absent when no masked-in entry exists at this horizon.
    pub rmse: Option<f64>,
}

/// RMSE of Euclidean displacement at each whole second of the horizon.
/// Horizon `h` seconds reads step `round(h / dt) − 1`.
pub fn rmse_by_horizon(pred: &Forecasts, gt: &Forecasts, dt: f64) -> Vec<HorizonRmse> {
    let seconds = (pred.f_steps as f64 * dt + 1e-9).floor() as usize;
    let (f, n) = (pred.f_steps, pred.n);
    (1..=seconds)
        .map(|h| {
            let step = (h as f64 / dt).round() as usize - 1;
            let mut sum = 0.0;
            let mut count = 0usize;
            for l in 0..pred.samples {
                for v in 0..n {
                    let i = (l * f + step) * n + v;
                    if gt.mask[i] {
                        let (a, b) = (pred.points[i], gt.points[i]);
                        sum += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
                        count += 1;
                    }
                }
            }
            HorizonRmse {
                horizon_s: h as f64,
                rmse: (count > 0).then(|| (sum / count as f64).sqrt()),
            }
        })
        .collect()
}

/// Extrapolates each vehicle's last observed velocity, `[F, n]` in meters.
/// Without a present step before the last, velocity is zero.
pub fn constant_velocity_baseline(w: &TrajectoryWindow) -> Vec<[f64; 2]> {
    let n = w.n_vehicles();
    let last = w.t_steps - 1;
    let velocity: Vec<[f64; 2]> = (0..n)
        .map(|v| match (w.past(last, v), last.checked_sub(1).and_then(|t| w.past(t, v))) {
            (Some(a), Some(b)) => [a[0] - b[0], a[1] - b[1]],
            _ => [0.0, 0.0],
        })
        .collect();
    let mut out = Vec::with_capacity(w.f_steps * n);
    for s in 0..w.f_steps {
        for v in 0..n {
            let p = w.at(last, v);
            let k = (s + 1) as f64;
            out.push([p[0] + k * velocity[v][0], p[1] + k * velocity[v][1]]);
        }
    }
    out
}

/// Ground-truth futures of `windows`, in meters, padded to a common `n`.
pub fn ground_truth(windows: &[TrajectoryWindow]) -> Forecasts {
    let f = windows.first().map_or(0, |w| w.f_steps);
    let n = windows.iter().map(|w| w.n_vehicles()).max().unwrap_or(0);
    let mut out = Forecasts::empty(f, n);
    for w in windows {
        let nw = w.n_vehicles();
        let t = w.t_steps;
        let start = t * nw;
        let mask: Vec<bool> = (0..f * nw)
            .map(|i| w.present[start + i] && w.is_present(t - 1, i % nw))
            .collect();
        out.push(&w.positions[start..start + f * nw], &mask, nw);
    }
    out
}

pub fn baseline_forecasts(windows: &[TrajectoryWindow]) -> Forecasts {
    let f = windows.first().map_or(0, |w| w.f_steps);
    let n = windows.iter().map(|w| w.n_vehicles()).max().unwrap_or(0);
    let mut out = Forecasts::empty(f, n);
    for w in windows {
        let nw = w.n_vehicles();
        out.push(&constant_velocity_baseline(w), &vec![true; f * nw], nw);
    }
    out
}

/// Closed-loop model forecasts for `windows`, in meters.
pub fn model_forecasts(
    net: &StmhaNet,
    windows: &[TrajectoryWindow],
    scale: ScaleSpec,
    batch_size: usize,
) -> Result<Forecasts> {
    let f = net.config.f_steps;
    let n = windows.iter().map(|w| w.n_vehicles()).max().unwrap_or(0);
    let mut out = Forecasts::empty(f, n);
    for chunk in windows.chunks(batch_size.max(1)) {
        let members: Vec<&TrajectoryWindow> = chunk.iter().collect();
        let batch = Batch::from_windows(&members, scale, net.config.d_near)?;
        let pred = net.predict(&batch)?;
        let bn = batch.n;
        for (b, w) in chunk.iter().enumerate() {
            let nw = w.n_vehicles();
            let mut points = Vec::with_capacity(f * nw);
            for s in 0..f {
                for v in 0..nw {
                    points.push(pred[(b * f + s) * bn + v]);
                }
            }
            out.push(&points, &vec![true; f * nw], nw);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mde: f64,
    pub iou: f64,
}

/// Mean translation error and mean 3D IoU in 5 m bins of ground-plane
/// distance from the ego camera. Bins are half-open `[lo, hi)`; empty bins
/// are omitted.
pub fn mde_iou_vs_distance(pairs: &[(Box3D, Box3D)]) -> Vec<DistanceBin> {
    let mut bins: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for (est, truth) in pairs {
        let [x, _, z] = truth.translation;
        let bin = ((x.hypot(z) / DISTANCE_BIN_M) + 1e-12).floor() as usize;
        let e = &est.translation;
        let t = &truth.translation;
        let err = ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2) + (e[2] - t[2]).powi(2)).sqrt();
        let slot = bins.entry(bin).or_insert((0, 0.0, 0.0));
        slot.0 += 1;
        slot.1 += err;
        slot.2 += iou3d(est, truth);
    }
    bins.into_iter()
        .map(|(b, (count, err, iou))| DistanceBin {
            lo: b as f64 * DISTANCE_BIN_M,
            hi: (b + 1) as f64 * DISTANCE_BIN_M,
            count,
            mde: err / count as f64,
            iou: iou / count as f64,
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub windows: usize,
    pub rmse: Vec<HorizonRmse>,
    pub baseline_cv: Vec<HorizonRmse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distance_bins: Vec<DistanceBin>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn rmse_csv(&self) -> String {
        horizon_csv(&self.rmse)
    }

    pub fn distance_csv(&self) -> String {
        let mut out = String::from("distance_bin,mde,iou\n");
        for b in &self.distance_bins {
            let _ = writeln!(out, "{}-{},{},{}", b.lo, b.hi, b.mde, b.iou);
        }
        out
    }
}

pub fn horizon_csv(rows: &[HorizonRmse]) -> String {
    let mut out = String::from("horizon_s,rmse\n");
    for r in rows {
        match r.rmse {
            Some(v) => writeln!(out, "{},{v}", r.horizon_s),
            None => writeln!(out, "{},", r.horizon_s),
        }
        .expect("write to string");
    }
    out
}

/// Evaluates `net` on `inputs` (what the model observes) against the
/// futures of `truths` (same windows, ground-truth positions).
pub fn evaluate(
    net: &StmhaNet,
    inputs: &[TrajectoryWindow],
    truths: &[TrajectoryWindow],
    scale: ScaleSpec,
    dt: f64,
) -> Result<EvalReport> {
    if inputs.is_empty() || inputs.len() != truths.len() {
        return Err(TrainingError::NoData);
    }
    let pred = model_forecasts(net, inputs, scale, 64)?;
    evaluate_forecasts(&pred, inputs, truths, dt)
}

/// Scores precomputed forecasts of `inputs` against `truths`, alongside the
/// constant-velocity baseline on the same inputs.
pub fn evaluate_forecasts(
    pred: &Forecasts,
    inputs: &[TrajectoryWindow],
    truths: &[TrajectoryWindow],
    dt: f64,
) -> Result<EvalReport> {
    if inputs.is_empty() || inputs.len() != truths.len() || pred.samples != inputs.len() {
        return Err(TrainingError::NoData);
    }
    let gt = scored_truth(inputs, truths);
    let cv = repad(&baseline_forecasts(inputs), gt.n);
    let pred = repad(pred, gt.n);
    Ok(EvalReport {
        windows: inputs.len(),
        rmse: rmse_by_horizon(&pred, &gt, dt),
        baseline_cv: rmse_by_horizon(&cv, &gt, dt),
        distance_bins: Vec::new(),
    })
}

/// Ground-truth futures with vehicles the input never shows at the last
/// observed step masked out.
pub fn scored_truth(inputs: &[TrajectoryWindow], truths: &[TrajectoryWindow]) -> Forecasts {
    let mut gt = ground_truth(truths);
    for (l, w) in inputs.iter().enumerate() {
        for v in 0..gt.n {
            if v >= w.n_vehicles() || !w.is_present(w.t_steps - 1, v) {
                for s in 0..gt.f_steps {
                    gt.mask[(l * gt.f_steps + s) * gt.n + v] = false;
                }
            }
        }
    }
    gt
}

fn repad(f: &Forecasts, n: usize) -> Forecasts {
    if f.n == n {
        return f.clone();
    }
    let mut out = Forecasts::empty(f.f_steps, n);
    for l in 0..f.samples {
        let base = l * f.f_steps * f.n;
        let block = &f.points[base..base + f.f_steps * f.n];
        let mask = &f.mask[base..base + f.f_steps * f.n];
        out.push(block, mask, f.n);
    }
    out
}

/// Ablation arms. `Control` trains and predicts on trajectories recovered
/// through the geometry stage; the others differ from it in one respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Control,
    /// Ground-truth trajectories replace the geometry stage.
    Tp,
    /// No STMHA stack in the encoder.
    Est,
    /// No STMHA layer in the decoder.
    Dst,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tp, Variant::Est, Variant::Dst, Variant::Control];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Control => "control",
            Variant::Tp => "tp",
            Variant::Est => "est",
            Variant::Dst => "dst",
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Est => cfg.encoder_stmha = false,
            Variant::Dst => cfg.decoder_stmha = false,
            Variant::Control | Variant::Tp => {}
        }
        cfg
    }
}

/// Windows for an ablation: each recovered window is the same target and
/// frames as its truth counterpart, with positions from the geometry stage.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub train_truth: Vec<TrajectoryWindow>,
    pub train_recovered: Vec<TrajectoryWindow>,
    pub test_truth: Vec<TrajectoryWindow>,
    pub test_recovered: Vec<TrajectoryWindow>,
    pub dt: f64,
}

pub fn run_ablation(
    variant: Variant,
    data: &AblationData,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let (train_in, test_in) = match variant {
        Variant::Tp => (&data.train_truth, &data.test_truth),
        _ => (&data.train_recovered, &data.test_recovered),
    };
    let scale = ScaleSpec::fit_windows(train_in).isotropic();
    let mut net = StmhaNet::new(variant.model_config(model), cfg.seed)?;
    train(&mut net, train_in, scale, cfg, None)?;
    evaluate(&net, test_in, &data.test_truth, scale, data.dt)
}

/// Relative change of `variant` against `control` per horizon, percent.
/// Negative means the variant's RMSE is lower.
pub fn relative_change(variant: &[HorizonRmse], control: &[HorizonRmse]) -> Vec<Option<f64>> {
    variant
        .iter()
        .zip(control)
        .map(|(v, c)| match (v.rmse, c.rmse) {
            (Some(v), Some(c)) if c > 0.0 => Some(100.0 * (v - c) / c),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mse_of_three_four_offset_is_25() {
        let tape = Tape::new();
        let pred = tape.constant_from(vec![2, 2], vec![3.0, 4.0, 9.0, 9.0]).unwrap();
        let loss = mse_loss(pred, &[0.0, 0.0, 0.0, 0.0], &[true, false]).unwrap();
        assert_eq!(loss.item(), 25.0);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let tape = Tape::new();
        let pred = tape.constant_from(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(mse_loss(pred, &[0.0, 0.0], &[false]), Err(TrainingError::EmptyMask)));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut w = ModelWeights::new();
        w.insert("a", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        w.get_mut("a").unwrap().accumulate_grad(&[0.0, 0.0]);
        let mut state = AdamState::default();
        let cfg = AdamConfig::from(&TrainConfig::default());
        for _ in 0..10 {
            adam_step(&mut w, &mut state, &cfg).unwrap();
        }
        assert_eq!(w.get("a").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_names_the_diverging_weight() {
        let mut w = ModelWeights::new();
        w.insert("ok", Tensor::zeros(vec![1]));
        w.insert("bad", Tensor::zeros(vec![1]));
        w.get_mut("bad").unwrap().accumulate_grad(&[f64::NAN]);
        let err = adam_step(&mut w, &mut AdamState::default(), &AdamConfig::from(&TrainConfig::default()));
        assert!(matches!(err, Err(TrainingError::Divergence(name)) if name == "bad"));
    }

    #[test]
    fn thirty_meters_lands_in_the_thirty_bin() {
        let b = Box3D::new([0.0, 1.0, 30.0], [1.8, 1.6, 4.5], 0.0).unwrap();
        let bins = mde_iou_vs_distance(&[(b, b)]);
        assert_eq!(bins.len(), 1);
        assert_eq!((bins[0].lo, bins[0].hi), (30.0, 35.0));
        assert_eq!(bins[0].mde, 0.0);
        assert!((bins[0].iou - 1.0).abs() < 1e-12);
    }
}
