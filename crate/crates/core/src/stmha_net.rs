//! Socio-temporal multi-head attention encoder-decoder.
//!
//! Tensors carry a leading batch axis. Encoder activations are laid out
//! `[B, T, N, D]` for social attention and `[B, N, T, D]` for temporal
//! attention; positions are in the scaled space of the batch's [`ScaleSpec`].

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, AttentionScaling, Initializer};
use crate::tensor::{concat, BoundWeights, ModelWeights, Result as R, Tape, Tensor, TensorError, Var, WeightsError};
use crate::track_assembly::{InteractionGraph, ScaleSpec, TrajectoryWindow};

/// Scaled inputs beyond this magnitude suggest the scaler was skipped.
pub const SCALED_INPUT_LIMIT: f64 = 1.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("teacher-forcing ratio {0} outside [0, 1]")]
    TeacherRatio(f64),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Depth of the encoder STMHA stack.
    pub layers: usize,
    pub d_ff: usize,
    pub lstm_hidden: usize,
    pub t_steps: usize,
    pub f_steps: usize,
    pub d_near: f64,
    /// Off for the encoder-side ablation: the LSTM reads raw embeddings.
    pub encoder_stmha: bool,
    /// Off for the decoder-side ablation: the LSTM reads the fused token.
    pub decoder_stmha: bool,
    pub attention_scaling: AttentionScaling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            layers: 2,
            d_ff: 64,
            lstm_hidden: 32,
            t_steps: 6,
            f_steps: 10,
            d_near: 15.0,
            encoder_stmha: true,
            decoder_stmha: true,
            attention_scaling: AttentionScaling::Scores,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.lstm_hidden == 0 {
            return fail("widths and head count must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.t_steps == 0 || self.f_steps == 0 {
            return fail("t_steps and f_steps must be positive".into());
        }
        if !(self.d_near.is_finite() && self.d_near >= 0.0) {
            return fail(format!("d_near {} must be finite and non-negative", self.d_near));
        }
        Ok(())
    }

    fn horizon(&self) -> f64 {
        (self.t_steps + self.f_steps) as f64
    }
}

/// Fresh weights for `config`, uniform in `±1/√fan_in` from `seed`.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let (d, h) = (config.d_model, config.lstm_hidden);
    let mut weights = ModelWeights::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(&mut weights, &mut rng);
    init.linear("embed.0", 2, d);
    init.linear("embed.1", d, d);
    init.linear("pos.0", 1, d);
    init.linear("pos.1", d, d);
    if config.encoder_stmha {
        for l in 0..config.layers {
            stmha_weights(&mut init, &format!("enc.{l}"), config);
        }
    }
    init.lstm("enc_lstm", d, h);
    init.linear("dec.embed.0", 2, d);
    init.linear("dec.embed.1", d, d);
    init.linear("dec.fuse", d + h, d);
    if config.decoder_stmha {
        stmha_weights(&mut init, "dec.stmha", config);
    }
    init.lstm("dec_lstm", d, h);
    init.linear("head", h, 2);
    Ok(weights)
}

fn stmha_weights<R: Rng>(init: &mut Initializer<'_, R>, name: &str, config: &ModelConfig) {
    let d = config.d_model;
    init.attention(&format!("{name}.smha"), d);
    init.linear(&format!("{name}.smha.proj"), d, d);
    init.layer_norm(&format!("{name}.smha.norm"), d);
    init.attention(&format!("{name}.tmha"), d);
    init.linear(&format!("{name}.tmha.proj"), d, d);
    init.layer_norm(&format!("{name}.tmha.norm"), d);
    init.linear(&format!("{name}.ffn.0"), d, config.d_ff);
    init.linear(&format!("{name}.ffn.1"), config.d_ff, d);
    init.layer_norm(&format!("{name}.ffn.norm"), d);
}

/// Padded, scaled minibatch of trajectory windows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    /// Vehicle slots per window after padding.
    pub n: usize,
    pub t_steps: usize,
    pub f_steps: usize,
    pub scale: ScaleSpec,
    pub d_near: f64,
    /// `[B, T, N, 2]`, zero where absent.
    pub past: Vec<f64>,
    /// `[B, T, N]`.
    pub past_present: Vec<bool>,
    /// `[B, F, N, 2]`, zero where absent.
    pub future: Vec<f64>,
    /// `[B, F, N]`.
    pub future_present: Vec<bool>,
    /// `[B, T, N, N]` social keep mask from the observed positions.
    pub social: Vec<bool>,
    /// `[B, N]`: real vehicles seen at the last observed step.
    pub active: Vec<bool>,
}

impl Batch {
    pub fn from_windows(windows: &[&TrajectoryWindow], scale: ScaleSpec, d_near: f64) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| ModelError::Batch("no windows".into()))?;
        let (t_steps, f_steps) = (first.t_steps, first.f_steps);
        if let Some(w) = windows
            .iter()
            .find(|w| w.t_steps != t_steps || w.f_steps != f_steps)
        {
            return Err(ModelError::Batch(format!(
                "mixed horizons: {}+{} vs {}+{}",
                w.t_steps, w.f_steps, t_steps, f_steps
            )));
        }
        let size = windows.len();
        let n = windows.iter().map(|w| w.n_vehicles()).max().unwrap_or(0);
        if n == 0 {
            return Err(ModelError::Batch("windows hold no vehicles".into()));
        }
        let mut batch = Self {
            size,
            n,
            t_steps,
            f_steps,
            scale,
            d_near,
            past: vec![0.0; size * t_steps * n * 2],
            past_present: vec![false; size * t_steps * n],
            future: vec![0.0; size * f_steps * n * 2],
            future_present: vec![false; size * f_steps * n],
            social: Vec::with_capacity(size * t_steps * n * n),
            active: vec![false; size * n],
        };
        for (b, w) in windows.iter().enumerate() {
            let wn = w.n_vehicles();
            for step in 0..t_steps + f_steps {
                for v in 0..wn {
                    if !w.is_present(step, v) {
                        continue;
                    }
                    let p = scale.scale(w.at(step, v));
                    let (pos, present) = if step < t_steps {
                        let cell = (b * t_steps + step) * n + v;
                        (&mut batch.past[cell * 2..cell * 2 + 2], &mut batch.past_present[cell])
                    } else {
                        let cell = (b * f_steps + step - t_steps) * n + v;
                        (&mut batch.future[cell * 2..cell * 2 + 2], &mut batch.future_present[cell])
                    };
                    pos.copy_from_slice(&p);
                    *present = true;
                }
            }
            for v in 0..wn {
                batch.active[b * n + v] = w.is_present(t_steps - 1, v);
            }
            for t in 0..t_steps {
                let mut positions = vec![[0.0; 2]; n];
                let mut present = vec![false; n];
                for v in 0..wn {
                    positions[v] = w.at(t, v);
                    present[v] = w.is_present(t, v);
                }
                let g = InteractionGraph::from_positions(&positions, &present, d_near);
                batch.social.extend_from_slice(&g.adjacency);
            }
        }
        Ok(batch)
    }

    /// `[B, F, N]`: future entries that count towards the loss.
    pub fn loss_mask(&self) -> Vec<bool> {
        let (n, f) = (self.n, self.f_steps);
        (0..self.size * f * n)
            .map(|i| self.future_present[i] && self.active[(i / (f * n)) * n + i % n])
            .collect()
    }

    /// `[B, N, T, T]` causal keep mask. Absent steps are hidden from later
    /// queries but always see themselves.
    pub fn temporal_keep(&self) -> Vec<bool> {
        let (n, t) = (self.n, self.t_steps);
        let mut keep = Vec::with_capacity(self.size * n * t * t);
        for b in 0..self.size {
            for v in 0..n {
                for q in 0..t {
                    for k in 0..t {
                        let present = self.past_present[(b * t + k) * n + v];
                        keep.push(k == q || (k < q && present));
                    }
                }
            }
        }
        keep
    }

    /// `[B, N, 2]` scaled positions at the last observed step.
    pub fn last_observed(&self) -> Vec<f64> {
        let (n, t) = (self.n, self.t_steps);
        let mut out = Vec::with_capacity(self.size * n * 2);
        for b in 0..self.size {
            let base = (b * t + t - 1) * n * 2;
            out.extend_from_slice(&self.past[base..base + n * 2]);
        }
        out
    }

    /// Social keep mask `[B, N, N]` rebuilt from scaled positions `[B, N, 2]`.
    pub fn social_from_scaled(&self, positions: &[f64]) -> Vec<bool> {
        let n = self.n;
        let mut keep = Vec::with_capacity(self.size * n * n);
        for b in 0..self.size {
            let meters: Vec<[f64; 2]> = (0..n)
                .map(|v| {
                    let i = (b * n + v) * 2;
                    self.scale.unscale([positions[i], positions[i + 1]])
                })
                .collect();
            let g = InteractionGraph::from_positions(&meters, &self.active[b * n..(b + 1) * n], self.d_near);
            keep.extend_from_slice(&g.adjacency);
        }
        keep
    }

    fn max_abs_input(&self) -> f64 {
        self.past.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Two-layer position embedding, shared over every `(t, i)`.
pub fn embed<'t>(p: &BoundWeights<'t>, name: &str, x: Var<'t>) -> R<Var<'t>> {
    let hidden = nn::linear(p, &format!("{name}.0"), x)?.tanh();
    nn::linear(p, &format!("{name}.1"), hidden)
}

/// Adds the learned encoding of timestep indices `start..start + L` to
/// `x: [.., L, D]`. Indices are fed as `index / horizon`.
pub fn positional_encoding<'t>(
    p: &BoundWeights<'t>,
    x: Var<'t>,
    start: usize,
    horizon: f64,
) -> R<Var<'t>> {
    let shape = x.shape();
    let len = shape[shape.len() - 2];
    let tape = x.tape();
    let index = tape.constant_from(
        vec![len, 1],
        (start..start + len).map(|i| i as f64 / horizon).collect(),
    )?;
    let hidden = nn::linear(p, "pos.0", index)?.tanh();
    let pe = nn::linear(p, "pos.1", hidden)?;
    x.add(pe)
}

/// Social attention over the vehicle axis of `x: [B, T, N, D]`, keep mask
/// `[B, T, N, N]`, then projection, residual and norm.
pub fn smha_layer<'t>(
    p: &BoundWeights<'t>,
    config: &ModelConfig,
    name: &str,
    x: Var<'t>,
    keep: &[bool],
) -> R<Var<'t>> {
    let shape = x.shape();
    let (b, t, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    if keep.len() != b * t * n * n {
        return Err(TensorError::Shape {
            op: "smha_layer",
            lhs: shape,
            rhs: vec![keep.len()],
        });
    }
    let flat = x.reshape(vec![b * t, n, d])?;
    let y = add_norm(p, config, &format!("{name}.smha"), flat, flat, keep)?;
    y.reshape(vec![b, t, n, d])
}

/// Attention from `query: [G, Lq, D]` into `memory: [G, Lk, D]`, then
/// projection, residual onto the query and norm.
fn add_norm<'t>(
    p: &BoundWeights<'t>,
    config: &ModelConfig,
    name: &str,
    query: Var<'t>,
    memory: Var<'t>,
    keep: &[bool],
) -> R<Var<'t>> {
    let att = nn::multi_head_attention(
        p,
        name,
        query,
        memory,
        keep,
        config.n_heads,
        config.attention_scaling,
    )?;
    let projected = nn::linear(p, &format!("{name}.proj"), att.output)?;
    nn::layer_norm(p, &format!("{name}.norm"), projected.add(query)?)
}

fn feed_forward<'t>(p: &BoundWeights<'t>, name: &str, x: Var<'t>) -> R<Var<'t>> {
    let inner = nn::linear(p, &format!("{name}.ffn.0"), x)?.relu();
    let out = nn::linear(p, &format!("{name}.ffn.1"), inner)?;
    nn::layer_norm(p, &format!("{name}.ffn.norm"), out.add(x)?)
}

/// Temporal attention over `x: [B, N, T, D]` with keep mask `[B, N, T, T]`,
/// followed by the feed-forward block. Positional encoding is the caller's.
pub fn tmha_layer<'t>(
    p: &BoundWeights<'t>,
    config: &ModelConfig,
    name: &str,
    x: Var<'t>,
    keep: &[bool],
) -> R<Var<'t>> {
    let shape = x.shape();
    let (b, n, t, d) = (shape[0], shape[1], shape[2], shape[3]);
    if keep.len() != b * n * t * t {
        return Err(TensorError::Shape {
            op: "tmha_layer",
            lhs: shape,
            rhs: vec![keep.len()],
        });
    }
    let flat = x.reshape(vec![b * n, t, d])?;
    let y = add_norm(p, config, &format!("{name}.tmha"), flat, flat, keep)?;
    feed_forward(p, name, y)?.reshape(vec![b, n, t, d])
}

/// One encoder block: `[B, T, N, D]` in and out.
pub fn stmha_layer<'t>(
    p: &BoundWeights<'t>,
    config: &ModelConfig,
    name: &str,
    x: Var<'t>,
    social: &[bool],
    temporal: &[bool],
) -> R<Var<'t>> {
    let s = smha_layer(p, config, name, x, social)?.permute(&[0, 2, 1, 3])?;
    let s = positional_encoding(p, s, 0, config.horizon())?;
    tmha_layer(p, config, name, s, temporal)?.permute(&[0, 2, 1, 3])
}

pub struct EncodedState<'t> {
    /// `[B, N, H]`.
    pub h: Var<'t>,
    pub c: Var<'t>,
    /// Encoder output sequence `[B, N, T, D]`.
    pub memory: Var<'t>,
    /// `[B, N, T]`: which memory steps decoding may attend to.
    pub memory_keep: Vec<bool>,
}

pub struct Decoded<'t> {
    /// `[B, F, N, 2]` scaled predictions.
    pub predictions: Var<'t>,
    /// Scaled input position fed at each decoding step, `[B, N, 2]` each.
    pub fed_inputs: Vec<Vec<f64>>,
    /// Per step: whether the teacher-forcing coin chose ground truth.
    pub teacher_forced: Vec<bool>,
}

/// Ground-truth feeding during decoding.
pub struct TeacherForcing<'a> {
    pub ratio: f64,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Debug, Clone)]
pub struct StmhaNet {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl StmhaNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = init_weights(&config, seed)?;
        Ok(Self { config, weights })
    }

    /// Wraps loaded weights after checking names, shapes and finiteness.
    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        let expected = init_weights(&config, 0)?;
        weights.check_shapes(&expected)?;
        if let Some(name) = weights.first_non_finite() {
            return Err(WeightsError::NonFinite(name.to_string()).into());
        }
        Ok(Self { config, weights })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.t_steps != self.config.t_steps || batch.f_steps != self.config.f_steps {
            return Err(ModelError::Batch(format!(
                "batch horizon {}+{} does not match model {}+{}",
                batch.t_steps, batch.f_steps, self.config.t_steps, self.config.f_steps
            )));
        }
        Ok(())
    }

    pub fn encode<'t>(&self, p: &BoundWeights<'t>, tape: &'t Tape, batch: &Batch) -> Result<EncodedState<'t>> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, t, n, d, hdim) = (batch.size, batch.t_steps, batch.n, cfg.d_model, cfg.lstm_hidden);
        let max_in = batch.max_abs_input();
        if max_in > SCALED_INPUT_LIMIT {
            tracing::warn!(max_in, "encoder input outside the scaled range; was the scaler applied?");
        }
        let x = tape.constant_from(vec![b, t, n, 2], batch.past.clone())?;
        let mut e = embed(p, "embed", x)?;
        if cfg.encoder_stmha {
            let temporal = batch.temporal_keep();
            for l in 0..cfg.layers {
                e = stmha_layer(p, cfg, &format!("enc.{l}"), e, &batch.social, &temporal)?;
            }
        }
        let memory = e.permute(&[0, 2, 1, 3])?;
        let mut h = tape.constant(&Tensor::zeros(vec![b, n, hdim]));
        let mut c = h;
        for step in 0..t {
            let xt = memory.slice(2, step, 1)?.reshape(vec![b, n, d])?;
            (h, c) = nn::lstm_cell(p, "enc_lstm", xt, h, c)?;
        }
        let mut memory_keep = Vec::with_capacity(b * n * t);
        for bi in 0..b {
            for v in 0..n {
                memory_keep.extend((0..t).map(|s| batch.past_present[(bi * t + s) * n + v]));
            }
        }
        Ok(EncodedState { h, c, memory, memory_keep })
    }

    pub fn decode<'t>(
        &self,
        p: &BoundWeights<'t>,
        tape: &'t Tape,
        batch: &Batch,
        state: EncodedState<'t>,
        mut teacher: Option<TeacherForcing<'_>>,
    ) -> Result<Decoded<'t>> {
        self.check_batch(batch)?;
        if let Some(tf) = &teacher {
            if !(0.0..=1.0).contains(&tf.ratio) {
                return Err(ModelError::TeacherRatio(tf.ratio));
            }
        }
        let cfg = &self.config;
        let (b, n, t, f, d) = (batch.size, batch.n, batch.t_steps, batch.f_steps, cfg.d_model);
        let EncodedState { mut h, mut c, memory, memory_keep } = state;
        let mut prev = tape.constant_from(vec![b, n, 2], batch.last_observed())?;
        let mut history: Vec<Var<'t>> = Vec::with_capacity(f);
        let mut outputs = Vec::with_capacity(f);
        let mut fed_inputs = Vec::with_capacity(f);
        let mut teacher_forced = Vec::with_capacity(f);

        for s in 0..f {
            if s > 0 {
                let forced = match teacher.as_mut() {
                    Some(tf) => tf.rng.gen::<f64>() < tf.ratio,
                    None => false,
                };
                teacher_forced.push(forced);
                if forced {
                    prev = self.ground_truth_input(tape, batch, s - 1, prev)?;
                }
            }
            let prev_data = prev.data();
            fed_inputs.push(prev_data.clone());

            let emb = embed(p, "dec.embed", prev)?;
            let token = nn::linear(p, "dec.fuse", concat(&[emb, h], 2)?)?;
            let z = if cfg.decoder_stmha {
                let social = batch.social_from_scaled(&prev_data);
                let y = add_norm(p, cfg, "dec.stmha.smha", token, token, &social)?;
                let query = positional_encoding(p, y.reshape(vec![b, n, 1, d])?, t + s, cfg.horizon())?;
                let mut parts = Vec::with_capacity(history.len() + 2);
                parts.push(memory);
                parts.extend(history.iter().copied());
                parts.push(query);
                let len = t + history.len() + 1;
                let all = concat(&parts, 2)?.reshape(vec![b * n, len, d])?;
                let mut keep = Vec::with_capacity(b * n * len);
                for cell in 0..b * n {
                    keep.extend_from_slice(&memory_keep[cell * t..(cell + 1) * t]);
                    keep.extend(std::iter::repeat_n(true, len - t));
                }
                let q = query.reshape(vec![b * n, 1, d])?;
                let y = add_norm(p, cfg, "dec.stmha.tmha", q, all, &keep)?;
                let z = feed_forward(p, "dec.stmha", y)?.reshape(vec![b, n, 1, d])?;
                history.push(z);
                z.reshape(vec![b, n, d])?
            } else {
                token
            };
            (h, c) = nn::lstm_cell(p, "dec_lstm", z, h, c)?;
            let delta = nn::linear(p, "head", h)?;
            let pred = prev.add(delta)?;
            outputs.push(pred.reshape(vec![b, 1, n, 2])?);
            prev = pred;
        }
        Ok(Decoded {
            predictions: concat(&outputs, 1)?,
            fed_inputs,
            teacher_forced,
        })
    }

    /// Ground truth at future step `s` where present, the model's own
    /// prediction elsewhere.
    fn ground_truth_input<'t>(&self, tape: &'t Tape, batch: &Batch, s: usize, pred: Var<'t>) -> R<Var<'t>> {
        let (b, n, f) = (batch.size, batch.n, batch.f_steps);
        let mut gt = Vec::with_capacity(b * n * 2);
        let mut use_gt = Vec::with_capacity(b * n * 2);
        for bi in 0..b {
            for v in 0..n {
                let cell = (bi * f + s) * n + v;
                let m = if batch.future_present[cell] { 1.0 } else { 0.0 };
                gt.extend_from_slice(&batch.future[cell * 2..cell * 2 + 2]);
                use_gt.extend([m, m]);
            }
        }
        let keep_pred: Vec<f64> = use_gt.iter().map(|m| 1.0 - m).collect();
        let gt = tape.constant_from(vec![b, n, 2], gt)?;
        let keep_pred = tape.constant_from(vec![b, n, 2], keep_pred)?;
        pred.mul(keep_pred)?.add(gt)
    }

    /// Encode then decode on one tape.
    pub fn forward<'t>(
        &self,
        p: &BoundWeights<'t>,
        tape: &'t Tape,
        batch: &Batch,
        teacher: Option<TeacherForcing<'_>>,
    ) -> Result<Decoded<'t>> {
        let state = self.encode(p, tape, batch)?;
        self.decode(p, tape, batch, state, teacher)
    }

    /// Closed-loop predictions in meters, `[B, F, N, 2]`.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<[f64; 2]>> {
        let tape = Tape::new();
        let p = self.weights.bind(&tape);
        let out = self.forward(&p, &tape, batch, None)?.predictions.data();
        Ok(out
            .chunks_exact(2)
            .map(|c| batch.scale.unscale([c[0], c[1]]))
            .collect())
    }
}
