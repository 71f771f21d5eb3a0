//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tape::{BatchNormConfig, Gradients, Mode, RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Weights are resampled until they fall within `±INIT_BOUND`.
pub const INIT_BOUND: f64 = 0.04;

/// Parameters of one network, keyed by slash-separated path
/// (`"enc2/conv/kernel"`), plus batch-norm running statistics keyed by layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkParams {
    pub tensors: BTreeMap<String, Tensor>,
    pub stats: BTreeMap<String, RunningStats>,
}

/// Draw from a zero-mean normal with std [`INIT_STD`], rejecting samples
/// outside `[-INIT_BOUND, INIT_BOUND]`.
pub fn truncated_normal(rng: &mut SeedStream) -> f32 {
    loop {
        let v = rng.normal() * INIT_STD;
        if v.abs() <= INIT_BOUND {
            return v as f32;
        }
    }
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.tensors.contains_key(&name), "duplicate parameter {name}");
        self.tensors.insert(name, t);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Conv kernel `[out, in, k, k]` (truncated normal) and zero bias.
    pub fn add_conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut SeedStream) {
        let n = out_c * in_c * k * k;
        let w = (0..n).map(|_| truncated_normal(rng)).collect();
        self.insert(format!("{name}/kernel"), Tensor::new(vec![out_c, in_c, k, k], w).unwrap());
        self.insert(format!("{name}/bias"), Tensor::zeros(&[out_c]));
    }

    /// Transposed-conv kernel `[in, out, k, k]` and zero bias.
    pub fn add_conv_transpose(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, rng: &mut SeedStream) {
        let n = out_c * in_c * k * k;
        let w = (0..n).map(|_| truncated_normal(rng)).collect();
        self.insert(format!("{name}/kernel"), Tensor::new(vec![in_c, out_c, k, k], w).unwrap());
        self.insert(format!("{name}/bias"), Tensor::zeros(&[out_c]));
    }

    pub fn add_affine(&mut self, name: &str, out_n: usize, in_n: usize, rng: &mut SeedStream) {
        let w = (0..out_n * in_n).map(|_| truncated_normal(rng)).collect();
        self.insert(format!("{name}/weight"), Tensor::new(vec![out_n, in_n], w).unwrap());
        self.insert(format!("{name}/bias"), Tensor::zeros(&[out_n]));
    }

    /// Batch-norm scale (ones), shift (zeros) and running statistics.
    pub fn add_batch_norm(&mut self, name: &str, channels: usize) {
        self.insert(format!("{name}/gamma"), Tensor::ones(&[channels]));
        self.insert(format!("{name}/beta"), Tensor::zeros(&[channels]));
        self.stats.insert(name.to_string(), RunningStats::new(channels));
    }

    /// Record every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable))).collect();
        Bound { vars }
    }

    /// Compare parameter names and shapes.
    pub fn same_layout(&self, other: &NetworkParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
            && self.stats.keys().eq(other.stats.keys())
    }
}

/// Tape handles for a bound [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::InvalidArgument(format!("parameter {name} not bound")))
    }

    /// Gradient per parameter name.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect()
    }
}

/// Forward-pass helper resolving layer names against bound parameters.
pub struct Layers<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    pub stats: &'a mut BTreeMap<String, RunningStats>,
    pub mode: Mode,
    pub bn: BatchNormConfig,
}

impl Layers<'_> {
    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let k = self.bound.var(&format!("{name}/kernel"))?;
        let b = self.bound.var(&format!("{name}/bias"))?;
        self.tape.conv2d(x, k, b, stride, pad)
    }

    pub fn conv_transpose(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let k = self.bound.var(&format!("{name}/kernel"))?;
        let b = self.bound.var(&format!("{name}/bias"))?;
        self.tape.conv_transpose2d(x, k, b, stride, pad)
    }

    pub fn affine(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.bound.var(&format!("{name}/weight"))?;
        let b = self.bound.var(&format!("{name}/bias"))?;
        self.tape.affine(x, w, b)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.bound.var(&format!("{name}/gamma"))?;
        let b = self.bound.var(&format!("{name}/beta"))?;
        let stats =
            self.stats.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("missing running stats {name}")))?;
        self.tape.batch_norm(x, g, b, stats, self.bn, self.mode)
    }
}
