//! Named parameter sets, binding into the tape, Adam with decoupled weight
//! decay, and finite-difference gradient checking.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::error::{Error, Result};
use crate::tape::{SoftmaxMask, Tape, Var};
use crate::tensor::Tensor;

/// One named parameter. Frozen parameters are bound as constants and never
/// receive gradients or optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Map from dot-separated parameter path to tensor. Iteration order is the
/// lexicographic order of the names (BTreeMap), so every walk over the set is
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                tensor,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.frozen)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(p) => {
                p.frozen = frozen;
                Ok(())
            }
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    /// Absorb another set under a name prefix; frozen flags carry over.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (name, p) in other.iter() {
            self.entries.insert(format!("{prefix}{name}"), p.clone());
        }
    }
}

/// Tape bindings for every parameter in a set. Frozen parameters become
/// constants, so gradients for them are never materialized.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut vars = BTreeMap::new();
        let mut trainable = Vec::new();
        for (name, p) in params.iter() {
            let var = if p.frozen {
                tape.constant(p.tensor.clone())
            } else {
                trainable.push(name.to_string());
                tape.leaf(p.tensor.clone())
            };
            vars.insert(name.to_string(), var);
        }
        BoundParams { vars, trainable }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unbound parameter {name}")))
    }

    /// Pull gradients for every non-frozen parameter out of a backward pass.
    pub fn collect_grads(&self, grads: &mut crate::tape::Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for name in &self.trainable {
            if let Some(g) = grads.take(self.vars[name]) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Gradient map keyed by parameter path.
pub type GradMap = BTreeMap<String, Tensor>;

/// Evaluate an expression over a parameter set, returning the scalar output
/// value and gradients for every reachable non-frozen parameter.
pub fn evaluate_with_gradients<F>(params: &ParamSet, build: F) -> Result<(Tensor, GradMap)>
where
    F: FnOnce(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let out = build(&mut tape, &bound)?;
    let value = tape.value(out).clone();
    let mut grads = tape.backward(out)?;
    Ok((value, bound.collect_grads(&mut grads)))
}

/// Adam hyperparameters and per-parameter moment state.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// One Adam update with bias correction and decoupled weight decay.
/// Frozen parameters must not appear in `grads`; they are left bit-identical.
pub fn adam_step(params: &mut ParamSet, grads: &GradMap, state: &mut AdamState) -> Result<()> {
    for name in grads.keys() {
        if !params.contains(name) {
            return Err(Error::Config(format!("gradient for unknown parameter {name}")));
        }
        if params.is_frozen(name) {
            return Err(Error::Config(format!(
                "gradient supplied for frozen parameter {name}"
            )));
        }
    }
    state.step = state
        .step
        .checked_add(1)
        .ok_or_else(|| Error::Config("adam step counter overflow".into()))?;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, grad) in grads {
        let p = params.get_mut(name).expect("checked above");
        if p.shape() != grad.shape() {
            return Err(Error::shape("adam_step", p.shape(), grad.shape()));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let (b1, b2) = (state.beta1, state.beta2);
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= state.lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * *pv);
        }
    }
    Ok(())
}

/// Deterministic seed derivation for independent RNG streams.
pub fn derive_seed(base: u64, tag: &str, k: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(b as u64);
        h ^= h >> 29;
    }
    h = h.wrapping_add(k.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    h ^= h >> 32;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    h
}

pub fn rng_from(base: u64, tag: &str, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, k))
}

/// Primitives covered by [`grad_check`].
pub const CHECKED_PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "mul",
    "gelu",
    "tanh",
    "softmax",
    "layer_norm",
    "conv1d",
    "embedding",
    "concat",
    "slice",
    "mean",
    "squared_error",
];

fn check_expression(prim: &str, inputs: &[Var], tape: &mut Tape) -> Result<Var> {
    let out = match prim {
        "matmul" => tape.matmul(inputs[0], inputs[1])?,
        "add" => tape.add(inputs[0], inputs[1])?,
        "mul" => tape.mul(inputs[0], inputs[1])?,
        "gelu" => tape.gelu(inputs[0])?,
        "tanh" => tape.tanh(inputs[0])?,
        "softmax" => tape.softmax(inputs[0], SoftmaxMask::Full)?,
        "layer_norm" => tape.layer_norm(inputs[0], 1e-5)?,
        "conv1d" => tape.conv1d(inputs[0], inputs[1], inputs[2])?,
        "embedding" => {
            let rows = tape.shape(inputs[0])[0];
            let indices: Vec<usize> = (0..rows).rev().collect();
            tape.embedding(inputs[0], &indices)?
        }
        "concat" => tape.concat(&inputs.to_vec(), 0)?,
        "slice" => {
            let rows = tape.shape(inputs[0])[0];
            tape.slice_rows(inputs[0], rows / 4, rows / 2)?
        }
        "mean" => tape.mean_all(inputs[0])?,
        "squared_error" => tape.squared_error(inputs[0], inputs[1])?,
        other => {
            return Err(Error::Config(format!(
                "grad_check: unsupported primitive {other}"
            )))
        }
    };
    // Reduce to a scalar through fixed pseudo-random weights so every output
    // component of the primitive contributes to the checked gradient.
    let n = tape.value(out).len();
    let weights: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).cos() + 1.5).collect();
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

/// Default sample point for a primitive, for callers that do not supply one.
pub fn grad_check_point(prim: &str, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = rng_from(seed, "grad_check_point", 0);
    let mut randn = |shape: Vec<usize>| Tensor::randn(shape, 1.0, &mut rng);
    Ok(match prim {
        "matmul" => vec![randn(vec![3, 4]), randn(vec![4, 2])],
        "add" | "mul" => vec![randn(vec![3, 4]), randn(vec![4])],
        "gelu" | "tanh" => vec![randn(vec![2, 5])],
        "softmax" => vec![randn(vec![1, 4])],
        "layer_norm" => vec![randn(vec![2, 6])],
        "conv1d" => vec![randn(vec![5, 3]), randn(vec![3, 3, 2]), randn(vec![2])],
        "embedding" => vec![randn(vec![4, 3])],
        "concat" => vec![randn(vec![2, 3]), randn(vec![3, 3])],
        "slice" => vec![randn(vec![4, 3])],
        "mean" => vec![randn(vec![3, 3])],
        "squared_error" => vec![randn(vec![2, 3]), randn(vec![2, 3])],
        other => {
            return Err(Error::Config(format!(
                "grad_check: unsupported primitive {other}"
            )))
        }
    })
}

/// Compare analytic gradients of a primitive against central finite
/// differences at the given sample point. Returns the max over all input
/// elements of `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn grad_check(prim: &str, point: &[Tensor], h: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "grad_check: step {h} outside [1e-7, 1e-3]"
        )));
    }
    if point.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("grad_check: non-finite sample point".into()));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = check_expression(prim, &vars, &mut tape)?;
        Ok(tape.value(out).item())
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = check_expression(prim, &vars, &mut tape)?;
    let mut grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(point[ti].shape().to_vec()));
        for ei in 0..point[ti].len() {
            let mut plus = point.to_vec();
            plus[ti].data_mut()[ei] += h;
            let mut minus = point.to_vec();
            minus[ti].data_mut()[ei] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.data()[ei];
            let err = (a - numeric).abs() / a.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Gaussian-initialized tensor helper used by all model builders.
pub fn scaled_normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}
