//! Parameter-efficient adaptation layers: the bottleneck+FiLM adapter and the
//! IA3 rescaling variant, plus the parameter accounting for every adaptation
//! mode.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{dt_param_count, DTConfig};
use crate::optim::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-block adapter: down/up projections around a GELU bottleneck followed
/// by feature-wise linear modulation (scale gamma, shift beta).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBlock {
    /// `[d_x, d_h]`
    pub down: Tensor,
    /// `[d_h, d_x]`
    pub up: Tensor,
    /// `[d_x]`
    pub gamma: Tensor,
    /// `[d_x]`
    pub beta: Tensor,
}

/// Adapter parameters for every decoder block; the only parameters updated
/// during adapter-based fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub d_h: usize,
    pub blocks: Vec<AdapterBlock>,
}

impl AdapterParams {
    fn check_dims(cfg: &DTConfig, d_h: usize) -> Result<()> {
        if d_h == 0 {
            return Err(Error::Config("adapter bottleneck d_h must be positive".into()));
        }
        if d_h >= cfg.d_x {
            return Err(Error::Config(format!(
                "adapter bottleneck d_h={d_h} must be smaller than d_x={}",
                cfg.d_x
            )));
        }
        Ok(())
    }

    /// Exact pass-through: zero up-projection and shift, unit scale. The
    /// enclosing block adds an internal residual, so the block output equals
    /// the unadapted output bit-for-bit.
    pub fn identity(cfg: &DTConfig, d_h: usize) -> Result<Self> {
        Self::check_dims(cfg, d_h)?;
        let blocks = (0..cfg.n_blocks)
            .map(|_| AdapterBlock {
                down: Tensor::zeros(vec![cfg.d_x, d_h]),
                up: Tensor::zeros(vec![d_h, cfg.d_x]),
                gamma: Tensor::ones(vec![cfg.d_x]),
                beta: Tensor::zeros(vec![cfg.d_x]),
            })
            .collect();
        Ok(AdapterParams { d_h, blocks })
    }

    /// Scaled-normal random initialization (the HDT-Rand baseline).
    pub fn randn(cfg: &DTConfig, d_h: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::check_dims(cfg, d_h)?;
        let blocks = (0..cfg.n_blocks)
            .map(|_| AdapterBlock {
                down: Tensor::randn(vec![cfg.d_x, d_h], std, rng),
                up: Tensor::randn(vec![d_h, cfg.d_x], std, rng),
                gamma: Tensor::randn(vec![cfg.d_x], std, rng),
                beta: Tensor::randn(vec![cfg.d_x], std, rng),
            })
            .collect();
        Ok(AdapterParams { d_h, blocks })
    }

    pub fn value_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.down.len() + b.up.len() + b.gamma.len() + b.beta.len())
            .sum()
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (l, b) in self.blocks.iter().enumerate() {
            set.insert(format!("adapter.block{l}.down"), b.down.clone());
            set.insert(format!("adapter.block{l}.up"), b.up.clone());
            set.insert(format!("adapter.block{l}.gamma"), b.gamma.clone());
            set.insert(format!("adapter.block{l}.beta"), b.beta.clone());
        }
        set
    }

    pub fn from_param_set(set: &ParamSet, cfg: &DTConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut d_h = 0;
        for l in 0..cfg.n_blocks {
            let fetch = |leaf: &str| {
                set.get(&format!("adapter.block{l}.{leaf}"))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("missing adapter.block{l}.{leaf}")))
            };
            let block = AdapterBlock {
                down: fetch("down")?,
                up: fetch("up")?,
                gamma: fetch("gamma")?,
                beta: fetch("beta")?,
            };
            d_h = block.down.shape()[1];
            blocks.push(block);
        }
        Ok(AdapterParams { d_h, blocks })
    }
}

/// IA3 rescaling vectors per block: keys, values, and feed-forward output.
#[derive(Clone, Debug, PartialEq)]
pub struct Ia3Params {
    /// Per block: (`l_k`, `l_v`, `l_ff`), each `[d_x]`.
    pub blocks: Vec<(Tensor, Tensor, Tensor)>,
}

impl Ia3Params {
    /// All-ones vectors: a pass-through model.
    pub fn ones(cfg: &DTConfig) -> Self {
        let blocks = (0..cfg.n_blocks)
            .map(|_| {
                (
                    Tensor::ones(vec![cfg.d_x]),
                    Tensor::ones(vec![cfg.d_x]),
                    Tensor::ones(vec![cfg.d_x]),
                )
            })
            .collect();
        Ia3Params { blocks }
    }

    pub fn value_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|(k, v, f)| k.len() + v.len() + f.len())
            .sum()
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (l, (k, v, f)) in self.blocks.iter().enumerate() {
            set.insert(format!("ia3.block{l}.k"), k.clone());
            set.insert(format!("ia3.block{l}.v"), v.clone());
            set.insert(format!("ia3.block{l}.ff"), f.clone());
        }
        set
    }

    pub fn from_param_set(set: &ParamSet, cfg: &DTConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for l in 0..cfg.n_blocks {
            let fetch = |leaf: &str| {
                set.get(&format!("ia3.block{l}.{leaf}"))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("missing ia3.block{l}.{leaf}")))
            };
            blocks.push((fetch("k")?, fetch("v")?, fetch("ff")?));
        }
        Ok(Ia3Params { blocks })
    }
}

/// Tape-side adapter handles for one block.
#[derive(Clone, Copy, Debug)]
pub struct AdapterBlockVars {
    pub down: Var,
    pub up: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Tape-side IA3 handles for one block.
#[derive(Clone, Copy, Debug)]
pub struct Ia3BlockVars {
    pub k: Var,
    pub v: Var,
    pub ff: Var,
}

/// Adaptation wiring for a forward pass. The variants hold tape vars so the
/// same forward serves frozen parameters, trainable parameters, and
/// hyper-network-generated parameters.
#[derive(Clone, Debug, Default)]
pub enum AdaptationVars {
    #[default]
    None,
    Adapters(Vec<AdapterBlockVars>),
    Ia3(Vec<Ia3BlockVars>),
}

impl AdaptationVars {
    /// Bind concrete adapter parameters onto the tape. `trainable` decides
    /// whether gradients flow to them.
    pub fn bind_adapters(tape: &mut Tape, params: &AdapterParams, trainable: bool) -> Self {
        let blocks = params
            .blocks
            .iter()
            .map(|b| {
                let mut put = |t: &Tensor| {
                    if trainable {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                };
                AdapterBlockVars {
                    down: put(&b.down),
                    up: put(&b.up),
                    gamma: put(&b.gamma),
                    beta: put(&b.beta),
                }
            })
            .collect();
        AdaptationVars::Adapters(blocks)
    }

    pub fn bind_ia3(tape: &mut Tape, params: &Ia3Params, trainable: bool) -> Self {
        let blocks = params
            .blocks
            .iter()
            .map(|(k, v, f)| {
                let mut put = |t: &Tensor| {
                    if trainable {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                };
                Ia3BlockVars {
                    k: put(k),
                    v: put(v),
                    ff: put(f),
                }
            })
            .collect();
        AdaptationVars::Ia3(blocks)
    }

    /// Bind from a ParamSet already managed by an optimizer (respects frozen
    /// flags via [`BoundParams`]).
    pub fn adapters_from_bound(bound: &BoundParams, cfg: &DTConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for l in 0..cfg.n_blocks {
            blocks.push(AdapterBlockVars {
                down: bound.var(&format!("adapter.block{l}.down"))?,
                up: bound.var(&format!("adapter.block{l}.up"))?,
                gamma: bound.var(&format!("adapter.block{l}.gamma"))?,
                beta: bound.var(&format!("adapter.block{l}.beta"))?,
            });
        }
        Ok(AdaptationVars::Adapters(blocks))
    }

    pub fn ia3_from_bound(bound: &BoundParams, cfg: &DTConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for l in 0..cfg.n_blocks {
            blocks.push(Ia3BlockVars {
                k: bound.var(&format!("ia3.block{l}.k"))?,
                v: bound.var(&format!("ia3.block{l}.v"))?,
                ff: bound.var(&format!("ia3.block{l}.ff"))?,
            });
        }
        Ok(AdaptationVars::Ia3(blocks))
    }
}

/// `Adapter_l(X) = (GELU(X D_l) U_l) ⊙ γ_l + β_l`.
///
/// The caller adds the internal residual (`X + adapter_forward(X)`): the
/// bottleneck alone cannot represent identity, and adaptation must start
/// from the frozen model's behavior.
pub fn adapter_forward(tape: &mut Tape, x: Var, block: &AdapterBlockVars) -> Result<Var> {
    let down = tape.matmul(x, block.down)?;
    let hidden = tape.gelu(down)?;
    let up = tape.matmul(hidden, block.up)?;
    let scaled = tape.mul(up, block.gamma)?;
    tape.add(scaled, block.beta)
}

/// Rescale attention keys, values, and the feed-forward output with the
/// block's IA3 vectors, broadcasting each vector over positions.
pub fn ia3_rescale(
    tape: &mut Tape,
    keys: Var,
    values: Var,
    ff: Var,
    block: &Ia3BlockVars,
) -> Result<(Var, Var, Var)> {
    let k = tape.mul(keys, block.k)?;
    let v = tape.mul(values, block.v)?;
    let f = tape.mul(ff, block.ff)?;
    Ok((k, v, f))
}

/// Which parameters an adaptation mode trains, for parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptationKind {
    Adapter { d_h: usize },
    Ia3,
    Full,
    Prompt { len: usize },
}

/// Closed-form count of trainable values for an adaptation mode.
pub fn count_adaptation_params(cfg: &DTConfig, kind: AdaptationKind) -> Result<usize> {
    match kind {
        AdaptationKind::Adapter { d_h } => {
            if d_h == 0 {
                return Err(Error::Config("adapter bottleneck d_h must be positive".into()));
            }
            Ok(cfg.n_blocks * (2 * cfg.d_x * d_h + 2 * cfg.d_x))
        }
        AdaptationKind::Ia3 => Ok(cfg.n_blocks * 3 * cfg.d_x),
        AdaptationKind::Full => Ok(dt_param_count(cfg)),
        AdaptationKind::Prompt { len } => Ok(len * (cfg.d_s + 2)),
    }
}
