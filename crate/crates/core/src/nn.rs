//! Layers shared by the trajectory network and the pose regressor.
//!
//! Weights live in a [`ModelWeights`] under dotted names; a layer called
//! `enc.0.smha` owns `enc.0.smha.q.w`, `enc.0.smha.q.b`, and so on.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{BoundWeights, ModelWeights, Result, Tensor, Var};

/// Where the `1/√d_k` factor of scaled dot-product attention is applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScaling {
    /// Scale the scores before the softmax; weights sum to one.
    #[default]
    Scores,
    /// Divide the softmax output, as in the literal printed formula.
    Weights,
}

/// Deterministic weight initialisation: uniform in `±1/√fan_in`.
pub struct Initializer<'a, R: Rng> {
    weights: &'a mut ModelWeights,
    rng: &'a mut R,
}

impl<'a, R: Rng> Initializer<'a, R> {
    pub fn new(weights: &'a mut ModelWeights, rng: &'a mut R) -> Self {
        Self { weights, rng }
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("initializer shape")
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(vec![fan_in, fan_out], bound);
        let b = self.uniform(vec![fan_out], bound);
        self.weights.insert(format!("{name}.w"), w);
        self.weights.insert(format!("{name}.b"), b);
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        self.weights.insert(format!("{name}.gamma"), Tensor::full(vec![d], 1.0));
        self.weights.insert(format!("{name}.beta"), Tensor::zeros(vec![d]));
    }

    /// Query/key/value projections for attention of width `d`.
    pub fn attention(&mut self, name: &str, d: usize) {
        for part in ["q", "k", "v"] {
            self.linear(&format!("{name}.{part}"), d, d);
        }
    }

    pub fn lstm(&mut self, name: &str, input: usize, hidden: usize) {
        let bound = 1.0 / (hidden as f64).sqrt();
        let wx = self.uniform(vec![input, 4 * hidden], bound);
        let wh = self.uniform(vec![hidden, 4 * hidden], bound);
        let b = self.uniform(vec![4 * hidden], bound);
        self.weights.insert(format!("{name}.wx"), wx);
        self.weights.insert(format!("{name}.wh"), wh);
        self.weights.insert(format!("{name}.b"), b);
    }

    /// Arbitrary tensor drawn with the given fan-in bound.
    pub fn tensor(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) {
        let t = self.uniform(shape, 1.0 / (fan_in as f64).sqrt());
        self.weights.insert(name, t);
    }
}

pub fn linear<'t>(p: &BoundWeights<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(p.var(&format!("{name}.w")))?
        .add(p.var(&format!("{name}.b")))
}

pub fn layer_norm<'t>(p: &BoundWeights<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.layer_norm(p.var(&format!("{name}.gamma")), p.var(&format!("{name}.beta")))
}

pub struct Attention<'t> {
    pub output: Var<'t>,
    pub weights: Var<'t>,
}

/// Single-head masked scaled dot-product attention.
///
/// `q: [.., Lq, dk]`, `k: [.., Lk, dk]`, `v: [.., Lk, dv]`; `keep` has the
/// scores' shape `[.., Lq, Lk]` and marks allowed pairs. Masked scores are
/// set to `-inf` before the softmax, so their weights are exactly zero.
pub fn masked_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    keep: Rc<[bool]>,
    scaling: AttentionScaling,
) -> Result<Attention<'t>> {
    let dk = *q.shape().last().expect("rank ≥ 1") as f64;
    let factor = 1.0 / dk.sqrt();
    let scores = q.batch_matmul_t(k)?;
    let rank = scores.shape().len();
    let weights = match scaling {
        AttentionScaling::Scores => scores.scale(factor).masked_fill(keep)?.softmax(rank - 1)?,
        AttentionScaling::Weights => scores.masked_fill(keep)?.softmax(rank - 1)?.scale(factor),
    };
    let output = weights.batch_matmul(v)?;
    Ok(Attention { output, weights })
}

/// Repeats a `[g, lq, lk]` mask across `heads`: result is `[g, heads, lq, lk]`.
pub fn expand_mask_over_heads(keep: &[bool], groups: usize, heads: usize) -> Rc<[bool]> {
    let per = keep.len() / groups;
    let mut out = Vec::with_capacity(keep.len() * heads);
    for g in 0..groups {
        for _ in 0..heads {
            out.extend_from_slice(&keep[g * per..(g + 1) * per]);
        }
    }
    out.into()
}

/// Multi-head attention over `query: [g, lq, d]` and `memory: [g, lk, d]`,
/// heads concatenated back to width `d`. `keep` is `[g, lq, lk]`.
pub fn multi_head_attention<'t>(
    p: &BoundWeights<'t>,
    name: &str,
    query: Var<'t>,
    memory: Var<'t>,
    keep: &[bool],
    n_heads: usize,
    scaling: AttentionScaling,
) -> Result<Attention<'t>> {
    let qs = query.shape();
    let ms = memory.shape();
    let (g, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ms[1];
    let dk = d / n_heads;
    let split = |x: Var<'t>, len: usize| -> Result<Var<'t>> {
        x.reshape(vec![g, len, n_heads, dk])?.permute(&[0, 2, 1, 3])
    };
    let q = split(linear(p, &format!("{name}.q"), query)?, lq)?;
    let k = split(linear(p, &format!("{name}.k"), memory)?, lk)?;
    let v = split(linear(p, &format!("{name}.v"), memory)?, lk)?;
    let att = masked_attention(q, k, v, expand_mask_over_heads(keep, g, n_heads), scaling)?;
    let output = att.output.permute(&[0, 2, 1, 3])?.reshape(vec![g, lq, d])?;
    Ok(Attention {
        output,
        weights: att.weights,
    })
}

/// One step of a standard four-gate LSTM. Gate order in the packed weights:
/// input, forget, cell candidate, output.
pub fn lstm_cell<'t>(
    p: &BoundWeights<'t>,
    name: &str,
    x: Var<'t>,
    h: Var<'t>,
    c: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let hidden = *h.shape().last().expect("rank ≥ 1");
    let gates = x
        .matmul(p.var(&format!("{name}.wx")))?
        .add(h.matmul(p.var(&format!("{name}.wh")))?)?
        .add(p.var(&format!("{name}.b")))?;
    let axis = gates.shape().len() - 1;
    let gate = |i: usize| gates.slice(axis, i * hidden, hidden);
    let input = gate(0)?.sigmoid();
    let forget = gate(1)?.sigmoid();
    let candidate = gate(2)?.tanh();
    let output = gate(3)?.sigmoid();
    let c_next = forget.mul(c)?.add(input.mul(candidate)?)?;
    let h_next = output.mul(c_next.tanh())?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_mask_returns_own_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let q = tape.constant(&random(&[1, 3, 4], &mut rng));
        let k = tape.constant(&random(&[1, 3, 4], &mut rng));
        let v = tape.constant(&random(&[1, 3, 2], &mut rng));
        let keep: Rc<[bool]> = (0..9).map(|i| i % 4 == 0).collect::<Vec<_>>().into();
        let att = masked_attention(q, k, v, keep, AttentionScaling::Scores).unwrap();
        assert_eq!(att.output.data(), v.data());
    }

    #[test]
    fn identical_keys_average_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let q = tape.constant(&random(&[1, 2, 4], &mut rng));
        let key_row = random(&[1, 1, 4], &mut rng).into_data();
        let k = tape.constant(&Tensor::new(vec![1, 3, 4], key_row.repeat(3)).unwrap());
        let v = tape.constant(&random(&[1, 3, 2], &mut rng));
        let keep: Rc<[bool]> = vec![true; 6].into();
        let out = masked_attention(q, k, v, keep, AttentionScaling::Scores).unwrap().output.data();
        let vd = v.data();
        for row in 0..2 {
            for c in 0..2 {
                let mean = (vd[c] + vd[2 + c] + vd[4 + c]) / 3.0;
                assert!((out[row * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn literal_scaling_shrinks_weight_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let q = tape.constant(&random(&[1, 2, 4], &mut rng));
        let v = tape.constant(&random(&[1, 2, 3], &mut rng));
        let keep: Rc<[bool]> = vec![true; 4].into();
        let w = masked_attention(q, q, v, keep, AttentionScaling::Weights).unwrap().weights.data();
        assert!((w[0] + w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lstm_zero_weights_keep_half_cell() {
        let tape = Tape::new();
        let mut w = ModelWeights::new();
        w.insert("l.wx", Tensor::zeros(vec![2, 8]));
        w.insert("l.wh", Tensor::zeros(vec![2, 8]));
        w.insert("l.b", Tensor::zeros(vec![8]));
        let p = w.bind(&tape);
        let x = tape.constant(&Tensor::full(vec![1, 2], 1.0));
        let h = tape.constant(&Tensor::zeros(vec![1, 2]));
        let c = tape.constant(&Tensor::full(vec![1, 2], 2.0));
        let (h2, c2) = lstm_cell(&p, "l", x, h, c).unwrap();
        // forget = 0.5, candidate = 0: c' = 1, h' = 0.5 tanh(1).
        assert_eq!(c2.data(), vec![1.0, 1.0]);
        assert!((h2.data()[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
    }
}
