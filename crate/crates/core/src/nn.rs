//! Neural-network primitives on top of the tensor tape: linear layers,
//! MLPs, layer normalization, cross-entropy, gradient clipping, and Adam.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Named parameter tensors in a deterministic (sorted) order.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Anything holding learnable tensors, visited in a fixed order by name.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn to_param_map(&self) -> ParamMap {
        let mut map = ParamMap::new();
        self.visit(&mut |name, t| {
            map.insert(name.to_string(), t.clone());
        });
        map
    }

    fn load_param_map(&mut self, map: &ParamMap) -> Result<()> {
        let mut missing = None;
        let mut seen = 0usize;
        self.visit_mut(&mut |name, t| {
            match map.get(name) {
                Some(src) if src.shape() == t.shape() => {
                    *t = src.clone();
                    seen += 1;
                }
                _ if missing.is_none() => missing = Some(name.to_string()),
                _ => {}
            }
        });
        if let Some(name) = missing {
            return Err(TensorError::Contract(format!(
                "parameter {name} missing or mis-shaped in map"
            )));
        }
        if seen != map.len() {
            return Err(TensorError::Contract(format!(
                "parameter map has {} entries, model uses {seen}",
                map.len()
            )));
        }
        Ok(())
    }

    /// Concatenation of all parameters in visit order, for the
    /// finite-difference oracle.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    fn load_flat(&mut self, theta: &[f64]) -> Result<()> {
        let mut at = 0;
        let mut overrun = false;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            if at + n > theta.len() {
                overrun = true;
                return;
            }
            t.data_mut().copy_from_slice(&theta[at..at + n]);
            at += n;
        });
        if overrun || at != theta.len() {
            return Err(TensorError::Contract(format!(
                "flat parameter vector has {} values, model needs {at}",
                theta.len()
            )));
        }
        Ok(())
    }
}

/// Fully-connected layer: x (R x in) -> x W + b with W in x out, b 1 x out.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Tensor> {
    pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: xavier_uniform(rng, fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Linear<Var> {
        Linear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

impl<T> Linear<T> {
    pub fn visit_at(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_at_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(fan_in, fan_out, data)
}

/// x W + b with the bias broadcast across rows.
pub fn linear_apply(tape: &mut Tape, layer: &Linear<Var>, x: Var) -> Result<Var> {
    let xw = tape.matmul(x, layer.weight)?;
    tape.add(xw, layer.bias)
}

/// Stack of linear layers with relu between them (and optionally after the
/// last), applied row-wise.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    pub relu_after_last: bool,
}

impl Mlp<Tensor> {
    /// `dims` chains layer sizes: [in, h1, ..., out]. At least one layer.
    pub fn xavier(rng: &mut impl Rng, dims: &[usize], relu_after_last: bool) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| Linear::xavier(rng, w[0], w[1]))
            .collect();
        Mlp {
            layers,
            relu_after_last,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Mlp<Var> {
        Mlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            relu_after_last: self.relu_after_last,
        }
    }
}

impl<T> Mlp<T> {
    pub fn visit_at(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_at(&format!("{prefix}.layers.{i}"), f);
        }
    }

    pub fn visit_at_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_at_mut(&format!("{prefix}.layers.{i}"), f);
        }
    }
}

impl ParamSet for Mlp<Tensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_at("mlp", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_at_mut("mlp", f);
    }
}

pub fn mlp_apply(tape: &mut Tape, mlp: &Mlp<Var>, x: Var) -> Result<Var> {
    let last = mlp.layers.len() - 1;
    let mut cur = x;
    for (i, layer) in mlp.layers.iter().enumerate() {
        cur = linear_apply(tape, layer, cur)?;
        if i < last || mlp.relu_after_last {
            cur = tape.relu(cur);
        }
    }
    Ok(cur)
}

/// Per-row normalization with learned gain and offset over the feature axis.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gain: T,
    pub offset: T,
    pub epsilon: f64,
}

pub const LAYER_NORM_EPSILON: f64 = 1e-5;

impl LayerNorm<Tensor> {
    pub fn identity(width: usize) -> Self {
        LayerNorm {
            gain: Tensor::filled(1, width, 1.0),
            offset: Tensor::zeros(1, width),
            epsilon: LAYER_NORM_EPSILON,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LayerNorm<Var> {
        LayerNorm {
            gain: tape.leaf(self.gain.clone()),
            offset: tape.leaf(self.offset.clone()),
            epsilon: self.epsilon,
        }
    }
}

impl<T> LayerNorm<T> {
    pub fn visit_at(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&format!("{prefix}.gain"), &self.gain);
        f(&format!("{prefix}.offset"), &self.offset);
    }

    pub fn visit_at_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.offset"), &mut self.offset);
    }
}

pub fn layer_norm_apply(tape: &mut Tape, ln: &LayerNorm<Var>, x: Var) -> Result<Var> {
    tape.layer_norm(x, ln.gain, ln.offset, ln.epsilon)
}

/// Mean over rows of -log softmax(logits)[target].
pub fn softmax_xent(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.softmax_xent(logits, targets)
}

/// Scales all gradients by max_norm / ||g|| when the global L2 norm
/// exceeds max_norm. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ParamMap, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(TensorError::Contract(format!(
            "clip_global_norm: max_norm must be positive, got {max_norm}"
        )));
    }
    let sq: f64 = grads.values().map(|t| t.sq_norm()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// Adam optimizer state: step count plus per-parameter moment estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: ParamMap,
    pub v: ParamMap,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: ParamMap::new(),
            v: ParamMap::new(),
        }
    }
}

/// One Adam update with bias correction. Parameters and gradients must be
/// keyed identically; moments are created lazily on the first step.
pub fn adam_step(
    params: &mut dyn ParamSet,
    grads: &ParamMap,
    state: &mut AdamState,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (lr, b1, b2, eps) = (state.lr, state.beta1, state.beta2, state.epsilon);

    let mut visited = 0usize;
    let mut problem: Option<String> = None;
    let m_map = &mut state.m;
    let v_map = &mut state.v;
    params.visit_mut(&mut |name, p| {
        let g = match grads.get(name) {
            Some(g) if g.shape() == p.shape() => g,
            _ => {
                if problem.is_none() {
                    problem = Some(name.to_string());
                }
                return;
            }
        };
        visited += 1;
        let m = m_map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
        let v = v_map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    if let Some(name) = problem {
        return Err(TensorError::Contract(format!(
            "adam_step: gradient for {name} missing or mis-shaped"
        )));
    }
    if visited != grads.len() {
        return Err(TensorError::Contract(format!(
            "adam_step: {} gradients for {visited} parameters",
            grads.len()
        )));
    }
    Ok(())
}
