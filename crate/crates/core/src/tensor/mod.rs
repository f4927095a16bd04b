//! Dense f64 arrays with a reverse-mode gradient tape.
//!
//! [`Tensor`] is the owned value type used for weights and I/O. Computation
//! happens on a [`Tape`]: values are registered as leaves, every primitive
//! records itself, and [`Tape::backward`] replays the record in reverse.

mod gradcheck;
mod kernels;
mod tape;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{central_difference, check_gradients, GradCheckReport};
pub use tape::{concat, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("slice [{start}, {end}) exceeds extent {extent} on axis {axis}")]
    SliceRange {
        axis: usize,
        start: usize,
        end: usize,
        extent: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Owned n-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n]).expect("zeros: shape must have positive extents")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("weight {name}: {source}")]
    Tensor {
        name: String,
        #[source]
        source: TensorError,
    },
    #[error("weight {0} is missing")]
    Missing(String),
    #[error("weight {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weight {0} contains non-finite values")]
    NonFinite(String),
    #[error("weights JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("weights file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Named collection of learnable tensors. Iteration order is the sorted name
/// order, which is also the serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// First weight holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    /// Registers every weight on `tape` as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundWeights<'t> {
        BoundWeights {
            vars: self
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    /// Adds the tape gradients of every bound weight into the weight buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundWeights<'_>) {
        for (name, var) in &bound.vars {
            if let (Some(t), Some(g)) = (self.tensors.get_mut(name), tape.grad(*var)) {
                t.accumulate_grad(&g);
            }
        }
    }

    /// Checks every expected name/shape pair, reporting the first difference.
    pub fn check_shapes(&self, expected: &ModelWeights) -> std::result::Result<(), WeightsError> {
        for (name, t) in &expected.tensors {
            let found = self
                .tensors
                .get(name)
                .ok_or_else(|| WeightsError::Missing(name.clone()))?;
            if found.shape() != t.shape() {
                return Err(WeightsError::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let stored: BTreeMap<&str, StoredTensor> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                (
                    n.as_str(),
                    StoredTensor {
                        shape: t.shape.clone(),
                        data: t.data.clone(),
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&stored).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, WeightsError> {
        let stored: BTreeMap<String, StoredTensor> = serde_json::from_str(text)?;
        let mut weights = Self::new();
        for (name, s) in stored {
            let t = Tensor::new(s.shape, s.data).map_err(|source| WeightsError::Tensor {
                name: name.clone(),
                source,
            })?;
            if !t.is_finite() {
                return Err(WeightsError::NonFinite(name));
            }
            weights.insert(name, t);
        }
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), WeightsError> {
        std::fs::write(path, self.to_json()).map_err(|source| WeightsError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> std::result::Result<Self, WeightsError> {
        let text = std::fs::read_to_string(path).map_err(|source| WeightsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Tape handles for a [`ModelWeights`] binding.
pub struct BoundWeights<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundWeights<'t> {
    /// Binds explicit handles, e.g. inputs supplied by a gradient check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    /// Handle for `name`. Panics when absent: weight names are fixed by the
    /// model constructor, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("weight {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                shape: vec![2, 3],
                expected: 6,
                got: 5
            }
        );
    }

    #[test]
    fn weights_json_is_sorted_and_round_trips() {
        let mut w = ModelWeights::new();
        w.insert("zeta", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        w.insert("alpha", Tensor::new(vec![1, 2], vec![0.25, 3.0]).unwrap());
        let text = w.to_json();
        assert!(text.find("alpha").unwrap() < text.find("zeta").unwrap());
        let back = ModelWeights::from_json(&text).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn nan_weights_rejected_on_load() {
        let text = r#"{"w": {"shape": [1], "data": [null]}}"#;
        assert!(ModelWeights::from_json(text).is_err());
    }

    #[test]
    fn check_shapes_reports_diff() {
        let mut a = ModelWeights::new();
        a.insert("w", Tensor::zeros(vec![2, 3]));
        let mut b = ModelWeights::new();
        b.insert("w", Tensor::zeros(vec![3, 2]));
        let msg = b.check_shapes(&a).unwrap_err().to_string();
        assert!(msg.contains("[3, 2]") && msg.contains("[2, 3]"), "{msg}");
    }
}
