//! Dimension and local-orientation estimates for the geometry stage: a
//! perturbed ground-truth oracle and a small attention regressor over
//! rendered patches.
//!
//! The regressor splits a patch into 16 row tokens plus one geometry token,
//! adds a learned positional table, runs two multi-head attention layers and
//! mean-pools. Dimensions come out as softplus offsets from the car mean;
//! orientation as a `(sin, cos)` pair.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::{wrap_angle, Box3D};
use crate::nn::{self, AttentionScaling, Initializer};
use crate::synth::{PatchFeatures, CAR_DIMS, PATCH_FEATURES, PATCH_SIZE};
use crate::tensor::{concat, BoundWeights, ModelWeights, Result as R, Tape, TensorError, Var, WeightsError};
use crate::training::{adam_step, AdamConfig, AdamState, TrainingError};

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("corrupted weights: {0} is not finite")]
    CorruptedWeights(String),
    #[error("patch has {0} features, expected {PATCH_FEATURES}")]
    PatchLength(usize),
    #[error("no training samples")]
    NoData,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Training(#[from] TrainingError),
}

pub type Result<T, E = PoseError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    /// Width, height, length in meters.
    pub d: [f64; 3],
    pub theta_local: f64,
    pub confidence: f64,
}

/// Gaussian perturbation of the oracle, meters and radians.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma_dim: f64,
    pub sigma_theta: f64,
}

/// Smallest dimension the oracle will return, meters.
const MIN_DIM: f64 = 0.05;

/// Ground-truth dimensions and local angle (relative to `theta_ray`) plus
/// Gaussian noise.
pub fn oracle_estimate(truth: &Box3D, theta_ray: f64, noise: NoiseSpec, rng: &mut impl Rng) -> PoseEstimate {
    let dim = Normal::new(0.0, noise.sigma_dim.max(0.0)).expect("finite sigma");
    let ang = Normal::new(0.0, noise.sigma_theta.max(0.0)).expect("finite sigma");
    let d = truth.dims.map(|v| (v + dim.sample(rng)).max(MIN_DIM));
    PoseEstimate {
        d,
        theta_local: wrap_angle(truth.yaw - theta_ray + ang.sample(rng)),
        confidence: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImhaConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: usize,
}

impl Default for ImhaConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            layers: 2,
        }
    }
}

const TOKENS: usize = PATCH_SIZE + 1;

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone)]
pub struct ImhaRegressor {
    pub config: ImhaConfig,
    pub weights: ModelWeights,
}

impl ImhaRegressor {
    pub fn new(config: ImhaConfig, seed: u64) -> Self {
        let d = config.d_model;
        let mut weights = ModelWeights::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut weights, &mut rng);
        init.linear("row", PATCH_SIZE, d);
        init.linear("geom", 3, d);
        init.tensor("pos", vec![TOKENS, d], d);
        for l in 0..config.layers {
            let name = format!("att.{l}");
            init.attention(&name, d);
            init.linear(&format!("{name}.proj"), d, d);
            init.layer_norm(&format!("{name}.norm"), d);
        }
        init.linear("dims", d, 3);
        init.linear("angle", d, 2);
        Self { config, weights }
    }

    pub fn from_weights(config: ImhaConfig, weights: ModelWeights) -> Result<Self> {
        weights.check_shapes(&Self::new(config.clone(), 0).weights)?;
        if let Some(name) = weights.first_non_finite() {
            return Err(PoseError::CorruptedWeights(name.to_string()));
        }
        Ok(Self { config, weights })
    }

    /// Row and geometry tokens `[B, 17, D]` without positional encoding.
    pub fn tokens<'t>(&self, p: &BoundWeights<'t>, tape: &'t Tape, patches: &[&PatchFeatures]) -> R<Var<'t>> {
        let b = patches.len();
        let mut rows = Vec::with_capacity(b * PATCH_SIZE * PATCH_SIZE);
        let mut geom = Vec::with_capacity(b * 3);
        for patch in patches {
            rows.extend_from_slice(patch.pixels());
            geom.extend_from_slice(patch.geometry());
        }
        let rows = tape.constant_from(vec![b, PATCH_SIZE, PATCH_SIZE], rows)?;
        let geom = tape.constant_from(vec![b, 1, 3], geom)?;
        let row_tokens = nn::linear(p, "row", rows)?;
        let geom_token = nn::linear(p, "geom", geom)?;
        concat(&[row_tokens, geom_token], 1)
    }

    /// Attention stack and mean pool: `[B, L, D]` to `[B, D]`.
    pub fn pool_tokens<'t>(&self, p: &BoundWeights<'t>, tokens: Var<'t>) -> R<Var<'t>> {
        let shape = tokens.shape();
        let (b, l) = (shape[0], shape[1]);
        let keep = vec![true; b * l * l];
        let mut x = tokens;
        for layer in 0..self.config.layers {
            let name = format!("att.{layer}");
            let att = nn::multi_head_attention(
                p,
                &name,
                x,
                x,
                &keep,
                self.config.n_heads,
                AttentionScaling::Scores,
            )?;
            let projected = nn::linear(p, &format!("{name}.proj"), att.output)?;
            x = nn::layer_norm(p, &format!("{name}.norm"), projected.add(x)?)?;
        }
        let summed = x.permute(&[0, 2, 1])?.matmul(
            x.tape().constant_from(vec![l, 1], vec![1.0 / l as f64; l])?,
        )?;
        summed.reshape(vec![b, shape[2]])
    }

    /// Raw heads: dimensions `[B, 3]` (positive) and `(sin, cos)` `[B, 2]`.
    pub fn heads<'t>(&self, p: &BoundWeights<'t>, tape: &'t Tape, patches: &[&PatchFeatures]) -> R<(Var<'t>, Var<'t>)> {
        let tokens = self.tokens(p, tape, patches)?.add(p.var("pos"))?;
        let pooled = self.pool_tokens(p, tokens)?;
        let prior = tape.constant_from(vec![3], CAR_DIMS.map(inv_softplus).to_vec())?;
        let dims = nn::linear(p, "dims", pooled)?.add(prior)?.softplus();
        let angle = nn::linear(p, "angle", pooled)?;
        Ok((dims, angle))
    }

    pub fn regress(&self, patch: &PatchFeatures) -> Result<PoseEstimate> {
        Ok(self.regress_batch(&[patch])?[0])
    }

    pub fn regress_batch(&self, patches: &[&PatchFeatures]) -> Result<Vec<PoseEstimate>> {
        if let Some(name) = self.weights.first_non_finite() {
            return Err(PoseError::CorruptedWeights(name.to_string()));
        }
        if let Some(bad) = patches.iter().find(|p| p.0.len() != PATCH_FEATURES) {
            return Err(PoseError::PatchLength(bad.0.len()));
        }
        let tape = Tape::new();
        let p = self.weights.bind(&tape);
        let (dims, angle) = self.heads(&p, &tape, patches)?;
        let (dims, angle) = (dims.data(), angle.data());
        Ok((0..patches.len())
            .map(|i| {
                let (s, c) = (angle[2 * i], angle[2 * i + 1]);
                PoseEstimate {
                    d: [dims[3 * i], dims[3 * i + 1], dims[3 * i + 2]],
                    theta_local: wrap_angle(s.atan2(c)),
                    confidence: s.hypot(c).min(1.0),
                }
            })
            .collect())
    }

    /// Squared error on dimensions plus squared error of the unit
    /// `(sin, cos)` target, averaged over the batch.
    pub fn loss<'t>(&self, p: &BoundWeights<'t>, tape: &'t Tape, samples: &[&PoseSample]) -> R<Var<'t>> {
        let patches: Vec<&PatchFeatures> = samples.iter().map(|s| &s.patch).collect();
        let (dims, angle) = self.heads(p, tape, &patches)?;
        let b = samples.len();
        let dim_t = tape.constant_from(vec![b, 3], samples.iter().flat_map(|s| s.dims).collect())?;
        let ang_t = tape.constant_from(
            vec![b, 2],
            samples
                .iter()
                .flat_map(|s| [s.theta_local.sin(), s.theta_local.cos()])
                .collect(),
        )?;
        let dd = dims.sub(dim_t)?;
        let da = angle.sub(ang_t)?;
        Ok(dd.mul(dd)?.sum().add(da.mul(da)?.sum())?.scale(1.0 / b as f64))
    }
}

/// Supervised example: a rendered patch with its true pose.
#[derive(Debug, Clone)]
pub struct PoseSample {
    pub patch: PatchFeatures,
    pub dims: [f64; 3],
    pub theta_local: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PoseTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 32,
            epochs: 60,
            seed: 0,
        }
    }
}

/// Adam on shuffled minibatches; returns the mean loss per epoch.
pub fn train_regressor(model: &mut ImhaRegressor, samples: &[PoseSample], cfg: &PoseTrainConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(PoseError::NoData);
    }
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&PoseSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let tape = Tape::new();
            let p = model.weights.bind(&tape);
            let loss = model.loss(&p, &tape, &batch)?;
            total += loss.item();
            batches += 1;
            tape.backward(loss)?;
            model.weights.zero_grad();
            model.weights.accumulate_grads(&tape, &p);
            adam_step(&mut model.weights, &mut state, &adam)?;
        }
        curve.push(total / batches as f64);
    }
    model.weights.zero_grad();
    Ok(curve)
}

/// Mean absolute wrapped angle error, radians.
pub fn angle_mae(model: &ImhaRegressor, samples: &[PoseSample]) -> Result<f64> {
    let patches: Vec<&PatchFeatures> = samples.iter().map(|s| &s.patch).collect();
    let est = model.regress_batch(&patches)?;
    Ok(est
        .iter()
        .zip(samples)
        .map(|(e, s)| wrap_angle(e.theta_local - s.theta_local).abs())
        .sum::<f64>()
        / samples.len() as f64)
}
