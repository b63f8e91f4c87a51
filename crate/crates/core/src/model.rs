//! Decision transformer: interleaved (reward-to-go, state, action) token
//! stream through a causal pre-LN decoder, predicting actions at state
//! tokens with a tanh head.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapter_forward, AdaptationVars};
use crate::error::{Error, Result};
use crate::optim::{BoundParams, ParamSet};
use crate::tape::{SoftmaxMask, Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Model dimensions and sequence settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DTConfig {
    /// Token embedding width.
    pub d_x: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Context length K: number of (rtg, state, action) timesteps per segment.
    pub context_len: usize,
    pub d_s: usize,
    pub d_a: usize,
    /// Maximum environment timestep; sizes the timestep embedding table.
    pub max_ep_len: usize,
    /// Rewards-to-go are divided by this before embedding.
    pub rtg_scale: f64,
    /// Maximum number of prompt tokens accepted by the forward pass.
    #[serde(default = "default_prompt_cap")]
    pub prompt_cap: usize,
}

fn default_prompt_cap() -> usize {
    60
}

impl DTConfig {
    /// Full-size configuration matching the reported model table.
    pub fn full(d_s: usize, d_a: usize) -> Self {
        DTConfig {
            d_x: 512,
            n_blocks: 4,
            n_heads: 8,
            context_len: 20,
            d_s,
            d_a,
            max_ep_len: 200,
            rtg_scale: 10.0,
            prompt_cap: 60,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.n_blocks == 0 || self.n_heads == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_x % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_x={} must be divisible by n_heads={}",
                self.d_x, self.n_heads
            )));
        }
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be at least 1".into()));
        }
        if self.max_ep_len < self.context_len {
            return Err(Error::Config(format!(
                "max_ep_len={} must be at least context_len={}",
                self.max_ep_len, self.context_len
            )));
        }
        if self.rtg_scale <= 0.0 {
            return Err(Error::Config("rtg_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_x / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_x
    }
}

/// K-step window of aligned (reward-to-go, state, action, timestep) tuples.
/// `action_mask[i]` is false where the action is a placeholder (the not yet
/// acted current timestep) and must be excluded from losses.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySegment {
    /// `[K, d_s]`
    pub states: Tensor,
    /// `[K, d_a]`; placeholder rows are zero.
    pub actions: Tensor,
    pub rewards_to_go: Vec<f64>,
    pub timesteps: Vec<u32>,
    pub action_mask: Vec<bool>,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        if k == 0 {
            return Err(Error::Precondition("empty trajectory segment".into()));
        }
        if self.states.shape()[0] != k
            || self.actions.shape()[0] != k
            || self.rewards_to_go.len() != k
            || self.action_mask.len() != k
        {
            return Err(Error::Data("segment field lengths disagree".into()));
        }
        if !self.timesteps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Data(format!(
                "segment timesteps not strictly increasing: {:?}",
                self.timesteps
            )));
        }
        Ok(())
    }
}

/// Read-only token prefix prepended before the segment (the PDT baseline).
/// States and rewards-to-go live on the tape so prompt-tuning can flow
/// gradients into them; timesteps index the embedding table directly.
pub struct PromptVars {
    /// `[P, d_s]`
    pub states: Var,
    /// `[P, 1]`, already divided by rtg_scale.
    pub rtg: Var,
    pub timesteps: Vec<u32>,
}

impl PromptVars {
    /// Token count contributed to the sequence (two per prompt step).
    pub fn token_len(&self) -> usize {
        2 * self.timesteps.len()
    }
}

fn name(prefix: &str, rest: &str) -> String {
    format!("{prefix}{rest}")
}

/// Initialize DT parameters: scaled-normal weights (std 0.02), zero biases,
/// unit layer-norm gains.
pub fn init_dt_params(cfg: &DTConfig, rng: &mut impl Rng) -> ParamSet {
    let std = 0.02;
    let mut p = ParamSet::new();
    p.insert("dt.embed_state.w", Tensor::randn(vec![cfg.d_s, cfg.d_x], std, rng));
    p.insert("dt.embed_state.b", Tensor::zeros(vec![cfg.d_x]));
    p.insert("dt.embed_action.w", Tensor::randn(vec![cfg.d_a, cfg.d_x], std, rng));
    p.insert("dt.embed_action.b", Tensor::zeros(vec![cfg.d_x]));
    p.insert("dt.embed_rtg.w", Tensor::randn(vec![1, cfg.d_x], std, rng));
    p.insert("dt.embed_rtg.b", Tensor::zeros(vec![cfg.d_x]));
    p.insert(
        "dt.embed_timestep",
        Tensor::randn(vec![cfg.max_ep_len, cfg.d_x], std, rng),
    );
    for l in 0..cfg.n_blocks {
        let b = |rest: &str| format!("dt.block{l}.{rest}");
        p.insert(b("ln1.gain"), Tensor::ones(vec![cfg.d_x]));
        p.insert(b("ln1.bias"), Tensor::zeros(vec![cfg.d_x]));
        for proj in ["wq", "wk", "wv", "wo"] {
            p.insert(
                b(&format!("attn.{proj}")),
                Tensor::randn(vec![cfg.d_x, cfg.d_x], std, rng),
            );
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            p.insert(b(&format!("attn.{bias}")), Tensor::zeros(vec![cfg.d_x]));
        }
        p.insert(b("ln2.gain"), Tensor::ones(vec![cfg.d_x]));
        p.insert(b("ln2.bias"), Tensor::zeros(vec![cfg.d_x]));
        p.insert(b("ffn.w1"), Tensor::randn(vec![cfg.d_x, cfg.ffn_dim()], std, rng));
        p.insert(b("ffn.b1"), Tensor::zeros(vec![cfg.ffn_dim()]));
        p.insert(b("ffn.w2"), Tensor::randn(vec![cfg.ffn_dim(), cfg.d_x], std, rng));
        p.insert(b("ffn.b2"), Tensor::zeros(vec![cfg.d_x]));
    }
    p.insert("dt.final_ln.gain", Tensor::ones(vec![cfg.d_x]));
    p.insert("dt.final_ln.bias", Tensor::zeros(vec![cfg.d_x]));
    p.insert("dt.head.w", Tensor::randn(vec![cfg.d_x, cfg.d_a], std, rng));
    p.insert("dt.head.b", Tensor::zeros(vec![cfg.d_a]));
    p
}

/// Closed-form DT parameter count for a config; the golden identity against
/// `init_dt_params(cfg).value_count()`.
pub fn dt_param_count(cfg: &DTConfig) -> usize {
    let d = cfg.d_x;
    let embeds = (cfg.d_s * d + d) + (cfg.d_a * d + d) + (d + d) + cfg.max_ep_len * d;
    let attn = 4 * (d * d + d);
    let ffn = d * cfg.ffn_dim() + cfg.ffn_dim() + cfg.ffn_dim() * d + d;
    let per_block = 2 * d + attn + 2 * d + ffn;
    let head = d * cfg.d_a + cfg.d_a;
    embeds + cfg.n_blocks * per_block + 2 * d + head
}

fn affine_layer_norm(
    tape: &mut Tape,
    x: Var,
    bound: &BoundParams,
    gain: &str,
    bias: &str,
) -> Result<Var> {
    let normed = tape.layer_norm(x, LN_EPS)?;
    let g = bound.var(gain)?;
    let b = bound.var(bias)?;
    let scaled = tape.mul(normed, g)?;
    tape.add(scaled, b)
}

fn linear(tape: &mut Tape, x: Var, bound: &BoundParams, w: &str, b: &str) -> Result<Var> {
    let wv = bound.var(w)?;
    let bv = bound.var(b)?;
    let prod = tape.matmul(x, wv)?;
    tape.add(prod, bv)
}

/// Embed one (rtg, state) or (rtg, state, action) stream into interleaved
/// tokens. Shared by segment tokenization and prompt embedding.
fn embed_stream(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    cfg: &DTConfig,
    states: Var,
    rtg: Var,
    timesteps: &[u32],
    actions: Option<Var>,
) -> Result<Var> {
    if let Some(&bad) = timesteps.iter().find(|&&t| t as usize >= cfg.max_ep_len) {
        return Err(Error::Config(format!(
            "timestep {bad} out of range for max_ep_len {}",
            cfg.max_ep_len
        )));
    }
    let idx: Vec<usize> = timesteps.iter().map(|&t| t as usize).collect();
    let table = bound.var(&name(prefix, "embed_timestep"))?;
    let t_emb = tape.embedding(table, &idx)?;

    let s_tok = linear(
        tape,
        states,
        bound,
        &name(prefix, "embed_state.w"),
        &name(prefix, "embed_state.b"),
    )?;
    let s_tok = tape.add(s_tok, t_emb)?;
    let r_tok = linear(
        tape,
        rtg,
        bound,
        &name(prefix, "embed_rtg.w"),
        &name(prefix, "embed_rtg.b"),
    )?;
    let r_tok = tape.add(r_tok, t_emb)?;

    // Interleave per-timestep tokens by widening rows then reshaping:
    // row t of [K, m*d_x] flattens to m consecutive d_x rows.
    let k = timesteps.len();
    match actions {
        Some(acts) => {
            let a_tok = linear(
                tape,
                acts,
                bound,
                &name(prefix, "embed_action.w"),
                &name(prefix, "embed_action.b"),
            )?;
            let a_tok = tape.add(a_tok, t_emb)?;
            let wide = tape.concat(&[r_tok, s_tok, a_tok], 1)?;
            tape.reshape(wide, vec![3 * k, cfg.d_x])
        }
        None => {
            let wide = tape.concat(&[r_tok, s_tok], 1)?;
            tape.reshape(wide, vec![2 * k, cfg.d_x])
        }
    }
}

/// Token embedding sequence for a segment: `[3K, d_x]`, ordered
/// (rtg_t, state_t, action_t) per timestep. Attention over the result is
/// causal: token i attends only to tokens <= i.
pub fn tokenize_segment(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    cfg: &DTConfig,
    seg: &TrajectorySegment,
) -> Result<Var> {
    seg.validate()?;
    let states = tape.constant(seg.states.clone());
    let actions = tape.constant(seg.actions.clone());
    let rtg_scaled: Vec<f64> = seg.rewards_to_go.iter().map(|r| r / cfg.rtg_scale).collect();
    let rtg = tape.constant(Tensor::new(vec![seg.len(), 1], rtg_scaled)?);
    embed_stream(
        tape,
        bound,
        prefix,
        cfg,
        states,
        rtg,
        &seg.timesteps,
        Some(actions),
    )
}

fn attention(
    tape: &mut Tape,
    bound: &BoundParams,
    block: &str,
    cfg: &DTConfig,
    x: Var,
    ia3: Option<&crate::adapt::Ia3BlockVars>,
) -> Result<Var> {
    let q = linear(tape, x, bound, &format!("{block}attn.wq"), &format!("{block}attn.bq"))?;
    let mut k = linear(tape, x, bound, &format!("{block}attn.wk"), &format!("{block}attn.bk"))?;
    let mut v = linear(tape, x, bound, &format!("{block}attn.wv"), &format!("{block}attn.bv"))?;
    if let Some(vars) = ia3 {
        k = tape.mul(k, vars.k)?;
        v = tape.mul(v, vars.v)?;
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax(scores, SoftmaxMask::Causal)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat(&heads, 1)?;
    linear(
        tape,
        merged,
        bound,
        &format!("{block}attn.wo"),
        &format!("{block}attn.bo"),
    )
}

/// Full decoder forward. Returns predicted actions `[K, d_a]`, one per state
/// token, each in `[-1, 1]` (tanh head).
pub fn dt_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    cfg: &DTConfig,
    seg: &TrajectorySegment,
    adaptation: &AdaptationVars,
    prompt: Option<&PromptVars>,
) -> Result<Var> {
    let k = seg.len();
    let seg_tokens = tokenize_segment(tape, bound, prefix, cfg, seg)?;
    let (mut x, offset) = match prompt {
        Some(p) => {
            if p.token_len() > cfg.prompt_cap {
                return Err(Error::Config(format!(
                    "prompt of {} tokens exceeds cap {}",
                    p.token_len(),
                    cfg.prompt_cap
                )));
            }
            let prompt_tokens =
                embed_stream(tape, bound, prefix, cfg, p.states, p.rtg, &p.timesteps, None)?;
            (tape.concat(&[prompt_tokens, seg_tokens], 0)?, p.token_len())
        }
        None => (seg_tokens, 0),
    };

    match adaptation {
        AdaptationVars::Adapters(blocks) if blocks.len() != cfg.n_blocks => {
            return Err(Error::Config(format!(
                "adapter stack has {} blocks, model has {}",
                blocks.len(),
                cfg.n_blocks
            )));
        }
        AdaptationVars::Ia3(blocks) if blocks.len() != cfg.n_blocks => {
            return Err(Error::Config(format!(
                "ia3 stack has {} blocks, model has {}",
                blocks.len(),
                cfg.n_blocks
            )));
        }
        _ => {}
    }

    for l in 0..cfg.n_blocks {
        let block = format!("{prefix}block{l}.");
        let ia3_vars = match adaptation {
            AdaptationVars::Ia3(blocks) => Some(&blocks[l]),
            _ => None,
        };
        let normed = affine_layer_norm(
            tape,
            x,
            bound,
            &format!("{block}ln1.gain"),
            &format!("{block}ln1.bias"),
        )?;
        let attn_out = attention(tape, bound, &block, cfg, normed, ia3_vars)?;
        x = tape.add(x, attn_out)?;

        let normed2 = affine_layer_norm(
            tape,
            x,
            bound,
            &format!("{block}ln2.gain"),
            &format!("{block}ln2.bias"),
        )?;
        let h = linear(
            tape,
            normed2,
            bound,
            &format!("{block}ffn.w1"),
            &format!("{block}ffn.b1"),
        )?;
        let h = tape.gelu(h)?;
        let mut f = linear(
            tape,
            h,
            bound,
            &format!("{block}ffn.w2"),
            &format!("{block}ffn.b2"),
        )?;
        match adaptation {
            AdaptationVars::Adapters(blocks) => {
                // Internal residual around the adapter, placed before the
                // block's final residual connection.
                let adapted = adapter_forward(tape, f, &blocks[l])?;
                f = tape.add(f, adapted)?;
            }
            AdaptationVars::Ia3(blocks) => {
                f = tape.mul(f, blocks[l].ff)?;
            }
            AdaptationVars::None => {}
        }
        x = tape.add(x, f)?;
    }

    let x = affine_layer_norm(
        tape,
        x,
        bound,
        &name(prefix, "final_ln.gain"),
        &name(prefix, "final_ln.bias"),
    )?;
    // Predictions read at state-token positions: offset + 3t + 1.
    let positions: Vec<usize> = (0..k).map(|t| offset + 3 * t + 1).collect();
    let at_states = tape.gather_rows(x, &positions)?;
    let logits = linear(
        tape,
        at_states,
        bound,
        &name(prefix, "head.w"),
        &name(prefix, "head.b"),
    )?;
    tape.tanh(logits)
}

/// Mean squared error over unmasked positions and action dims.
pub fn action_loss(tape: &mut Tape, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::shape("action_loss", &shape, target.shape()));
    }
    let (k, d_a) = target.dims2("action_loss")?;
    if mask.len() != k {
        return Err(Error::shape("action_loss", &[mask.len()], &[k]));
    }
    let live = mask.iter().filter(|&&m| m).count();
    if live == 0 {
        return Err(Error::Data("degenerate batch: every position masked".into()));
    }
    let mut mask_data = Vec::with_capacity(k * d_a);
    for &m in mask {
        mask_data.extend(std::iter::repeat(if m { 1.0 } else { 0.0 }).take(d_a));
    }
    let mask_t = tape.constant(Tensor::new(vec![k, d_a], mask_data)?);
    let tgt = tape.constant(target.clone());
    let diff = tape.sub(pred, tgt)?;
    let masked = tape.mul(diff, mask_t)?;
    let zeros = tape.constant(Tensor::zeros(vec![k, d_a]));
    let sse = tape.squared_error(masked, zeros)?;
    tape.scale(sse, 1.0 / (live * d_a) as f64)
}

/// Rolling evaluation context: at most the K most recent tuples. The current
/// timestep's action slot is a zero placeholder masked out of losses.
#[derive(Clone, Debug)]
pub struct RolloutContext {
    context_len: usize,
    d_s: usize,
    d_a: usize,
    states: VecDeque<Vec<f64>>,
    actions: VecDeque<Option<Vec<f64>>>,
    rtgs: VecDeque<f64>,
    timesteps: VecDeque<u32>,
}

impl RolloutContext {
    pub fn new(cfg: &DTConfig) -> Self {
        RolloutContext {
            context_len: cfg.context_len,
            d_s: cfg.d_s,
            d_a: cfg.d_a,
            states: VecDeque::new(),
            actions: VecDeque::new(),
            rtgs: VecDeque::new(),
            timesteps: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Open the current timestep: state observed, action still pending.
    pub fn push_state(&mut self, state: Vec<f64>, rtg: f64, timestep: u32) {
        debug_assert_eq!(state.len(), self.d_s);
        self.states.push_back(state);
        self.actions.push_back(None);
        self.rtgs.push_back(rtg);
        self.timesteps.push_back(timestep);
        if self.states.len() > self.context_len {
            self.states.pop_front();
            self.actions.pop_front();
            self.rtgs.pop_front();
            self.timesteps.pop_front();
        }
    }

    /// Record the action actually taken for the most recent state.
    pub fn set_last_action(&mut self, action: Vec<f64>) {
        debug_assert_eq!(action.len(), self.d_a);
        if let Some(slot) = self.actions.back_mut() {
            *slot = Some(action);
        }
    }

    /// Materialize the window as a segment.
    pub fn segment(&self) -> Result<TrajectorySegment> {
        let k = self.len();
        if k == 0 {
            return Err(Error::Precondition("empty rollout context".into()));
        }
        let mut states = Vec::with_capacity(k * self.d_s);
        let mut actions = Vec::with_capacity(k * self.d_a);
        let mut mask = Vec::with_capacity(k);
        for (s, a) in self.states.iter().zip(&self.actions) {
            states.extend_from_slice(s);
            match a {
                Some(a) => {
                    actions.extend_from_slice(a);
                    mask.push(true);
                }
                None => {
                    actions.extend(std::iter::repeat(0.0).take(self.d_a));
                    mask.push(false);
                }
            }
        }
        Ok(TrajectorySegment {
            states: Tensor::new(vec![k, self.d_s], states)?,
            actions: Tensor::new(vec![k, self.d_a], actions)?,
            rewards_to_go: self.rtgs.iter().copied().collect(),
            timesteps: self.timesteps.iter().copied().collect(),
            action_mask: mask,
        })
    }
}

/// Predict the action for the newest context entry. Deterministic in its
/// inputs; equals `dt_forward` on the materialized window.
pub fn select_action(
    params: &ParamSet,
    cfg: &DTConfig,
    ctx: &RolloutContext,
    adaptation: &AdaptationParams,
    prompt: Option<&PromptData>,
) -> Result<Vec<f64>> {
    let seg = ctx.segment()?;
    let pred = predict_actions(params, cfg, &seg, adaptation, prompt)?;
    let k = seg.len();
    Ok(pred.row(k - 1).to_vec())
}

/// Concrete (off-tape) adaptation parameters for evaluation-time forwards.
#[derive(Clone, Debug, Default)]
pub enum AdaptationParams {
    #[default]
    None,
    Adapters(crate::adapt::AdapterParams),
    Ia3(crate::adapt::Ia3Params),
}

impl AdaptationParams {
    pub fn bind(&self, tape: &mut Tape) -> AdaptationVars {
        match self {
            AdaptationParams::None => AdaptationVars::None,
            AdaptationParams::Adapters(a) => AdaptationVars::bind_adapters(tape, a, false),
            AdaptationParams::Ia3(i) => AdaptationVars::bind_ia3(tape, i, false),
        }
    }
}

/// Concrete prompt values for evaluation-time forwards.
#[derive(Clone, Debug)]
pub struct PromptData {
    /// `[P, d_s]`
    pub states: Tensor,
    /// Raw (unscaled) rewards-to-go, length P.
    pub rtg: Vec<f64>,
    pub timesteps: Vec<u32>,
}

impl PromptData {
    pub fn bind(&self, tape: &mut Tape, cfg: &DTConfig) -> Result<PromptVars> {
        let p = self.timesteps.len();
        let scaled: Vec<f64> = self.rtg.iter().map(|r| r / cfg.rtg_scale).collect();
        Ok(PromptVars {
            states: tape.constant(self.states.clone()),
            rtg: tape.constant(Tensor::new(vec![p, 1], scaled)?),
            timesteps: self.timesteps.clone(),
        })
    }
}

/// One-shot forward pass without gradients: bind everything as constants.
pub fn predict_actions(
    params: &ParamSet,
    cfg: &DTConfig,
    seg: &TrajectorySegment,
    adaptation: &AdaptationParams,
    prompt: Option<&PromptData>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut frozen = params.clone();
    frozen.freeze_all();
    let bound = BoundParams::bind(&mut tape, &frozen);
    let adaptation_vars = adaptation.bind(&mut tape);
    let prompt_vars = match prompt {
        Some(p) => Some(p.bind(&mut tape, cfg)?),
        None => None,
    };
    let out = dt_forward(
        &mut tape,
        &bound,
        "dt.",
        cfg,
        seg,
        &adaptation_vars,
        prompt_vars.as_ref(),
    )?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::rng_from;

    pub(crate) fn tiny_cfg() -> DTConfig {
        DTConfig {
            d_x: 8,
            n_blocks: 1,
            n_heads: 1,
            context_len: 2,
            d_s: 3,
            d_a: 2,
            max_ep_len: 10,
            rtg_scale: 1.0,
            prompt_cap: 60,
        }
    }

    pub(crate) fn random_segment(cfg: &DTConfig, k: usize, seed: u64) -> TrajectorySegment {
        let mut rng = rng_from(seed, "segment", 0);
        TrajectorySegment {
            states: Tensor::randn(vec![k, cfg.d_s], 1.0, &mut rng),
            actions: Tensor::randn(vec![k, cfg.d_a], 0.5, &mut rng),
            rewards_to_go: (0..k).map(|i| (k - i) as f64).collect(),
            timesteps: (0..k as u32).collect(),
            action_mask: vec![true; k],
        }
    }

    #[test]
    fn param_count_identity() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(0, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        assert_eq!(params.value_count(), dt_param_count(&cfg));
    }

    #[test]
    fn full_size_param_count_near_13m() {
        let cfg = DTConfig::full(39, 4);
        let count = dt_param_count(&cfg);
        assert_eq!(count, 12_739_076);
        let rel = (count as f64 - 13.0e6).abs() / 13.0e6;
        assert!(rel < 0.05, "relative gap to 13M is {rel}");
        // Adapter fraction of the base model: ~0.5%.
        let adapter =
            crate::adapt::count_adaptation_params(&cfg, crate::adapt::AdaptationKind::Adapter { d_h: 16 })
                .unwrap();
        let pct = 100.0 * adapter as f64 / count as f64;
        assert!((pct - 0.5).abs() < 0.06, "adapter share {pct}%");
    }

    #[test]
    fn tokenize_lengths() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(1, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        for (k, want) in [(1, 3), (2, 6)] {
            let seg = random_segment(&cfg, k, k as u64);
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params);
            let tokens = tokenize_segment(&mut tape, &bound, "dt.", &cfg, &seg).unwrap();
            assert_eq!(tape.shape(tokens), &[want, cfg.d_x]);
        }
        // K = 20 from the default config gives 60 tokens.
        let full = DTConfig::full(3, 2);
        let mut rng = rng_from(2, "init", 0);
        let params = init_dt_params(&full, &mut rng);
        let seg = random_segment(&full, 20, 9);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let tokens = tokenize_segment(&mut tape, &bound, "dt.", &full, &seg).unwrap();
        assert_eq!(tape.shape(tokens), &[60, full.d_x]);
    }

    #[test]
    fn tokenize_rejects_out_of_range_timestep() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(1, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        let mut seg = random_segment(&cfg, 2, 3);
        seg.timesteps = vec![8, 10];
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        assert!(tokenize_segment(&mut tape, &bound, "dt.", &cfg, &seg).is_err());
    }

    #[test]
    fn tokens_before_changed_action_are_identical() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(4, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        let seg_a = random_segment(&cfg, 2, 5);
        let mut seg_b = seg_a.clone();
        // Change only the final action.
        let last = seg_b.actions.len() - 1;
        seg_b.actions.data_mut()[last] += 1.0;

        let embed = |seg: &TrajectorySegment| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params);
            let tokens = tokenize_segment(&mut tape, &bound, "dt.", &cfg, seg).unwrap();
            tape.value(tokens).clone()
        };
        let ta = embed(&seg_a);
        let tb = embed(&seg_b);
        // All rows except the final action token (row 3*1+2 = 5) match.
        for row in 0..5 {
            assert_eq!(ta.row(row), tb.row(row), "row {row} differs");
        }
        assert_ne!(ta.row(5), tb.row(5));
    }

    #[test]
    fn predictions_bounded_by_tanh() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(8, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        let seg = random_segment(&cfg, 2, 11);
        let pred = predict_actions(&params, &cfg, &seg, &AdaptationParams::None, None).unwrap();
        assert!(pred.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn causal_mask_shields_earlier_predictions() {
        // Perturb s_{t+1}: prediction for a_t is bit-identical.
        let cfg = tiny_cfg();
        let mut rng = rng_from(9, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        let seg_a = random_segment(&cfg, 2, 13);
        let mut seg_b = seg_a.clone();
        let row_start = cfg.d_s; // second state row
        seg_b.states.data_mut()[row_start] += 2.0;

        let pa = predict_actions(&params, &cfg, &seg_a, &AdaptationParams::None, None).unwrap();
        let pb = predict_actions(&params, &cfg, &seg_b, &AdaptationParams::None, None).unwrap();
        assert_eq!(pa.row(0), pb.row(0));
        assert_ne!(pa.row(1), pb.row(1));
    }

    #[test]
    fn identity_adapters_do_not_change_output() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(10, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        let seg = random_segment(&cfg, 2, 17);
        let plain = predict_actions(&params, &cfg, &seg, &AdaptationParams::None, None).unwrap();
        let identity = crate::adapt::AdapterParams::identity(&cfg, 4).unwrap();
        let adapted = predict_actions(
            &params,
            &cfg,
            &seg,
            &AdaptationParams::Adapters(identity),
            None,
        )
        .unwrap();
        assert_eq!(plain, adapted);
        let ones = crate::adapt::Ia3Params::ones(&cfg);
        let rescaled =
            predict_actions(&params, &cfg, &seg, &AdaptationParams::Ia3(ones), None).unwrap();
        assert_eq!(plain, rescaled);
    }

    #[test]
    fn action_loss_reference_values() {
        let cfg = tiny_cfg();
        let target = Tensor::zeros(vec![2, cfg.d_a]);
        // pred == target -> 0
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::zeros(vec![2, cfg.d_a]));
        let loss = action_loss(&mut tape, pred, &target, &[true, true]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        // pred - target = 1 everywhere, full mask -> 1
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::ones(vec![2, cfg.d_a]));
        let loss = action_loss(&mut tape, pred, &target, &[true, true]).unwrap();
        assert_eq!(tape.value(loss).item(), 1.0);
    }

    #[test]
    fn action_loss_matches_double_loop() {
        let mut rng = rng_from(21, "loss", 0);
        let k = 5;
        let d_a = 3;
        let pred_t = Tensor::randn(vec![k, d_a], 1.0, &mut rng);
        let target = Tensor::randn(vec![k, d_a], 1.0, &mut rng);
        let mask = [true, false, true, true, false];

        let mut tape = Tape::new();
        let pred = tape.leaf(pred_t.clone());
        let loss = action_loss(&mut tape, pred, &target, &mask).unwrap();

        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..k {
            if !mask[i] {
                continue;
            }
            for j in 0..d_a {
                let d = pred_t.data()[i * d_a + j] - target.data()[i * d_a + j];
                sum += d * d;
                n += 1;
            }
        }
        assert!((tape.value(loss).item() - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn action_loss_rejects_all_masked() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::zeros(vec![2, 2]));
        let target = Tensor::zeros(vec![2, 2]);
        assert!(action_loss(&mut tape, pred, &target, &[false, false]).is_err());
    }

    #[test]
    fn select_action_matches_explicit_window() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(30, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        let mut ctx = RolloutContext::new(&cfg);
        // Fill beyond capacity so the oldest tuple is evicted.
        let mut tuples = Vec::new();
        for t in 0..4u32 {
            let state: Vec<f64> = (0..cfg.d_s).map(|i| (t as f64) + i as f64 * 0.1).collect();
            let action = vec![0.1 * t as f64; cfg.d_a];
            tuples.push((state, action, 5.0 - t as f64, t));
        }
        for (state, action, rtg, t) in &tuples {
            ctx.push_state(state.clone(), *rtg, *t);
            let a = select_action(&params, &cfg, &ctx, &AdaptationParams::None, None).unwrap();
            assert_eq!(a.len(), cfg.d_a);
            // Determinism: same context twice gives the same action.
            let b = select_action(&params, &cfg, &ctx, &AdaptationParams::None, None).unwrap();
            assert_eq!(a, b);
            ctx.set_last_action(action.clone());
        }
        assert_eq!(ctx.len(), cfg.context_len);

        // Explicit recomputation over the last K tuples.
        ctx.push_state(vec![9.0, 9.1, 9.2], 1.0, 4);
        let via_ctx = select_action(&params, &cfg, &ctx, &AdaptationParams::None, None).unwrap();
        let seg = TrajectorySegment {
            states: Tensor::from_rows(&[&tuples[3].0, &[9.0, 9.1, 9.2]]),
            actions: Tensor::from_rows(&[&tuples[3].1, &[0.0, 0.0]]),
            rewards_to_go: vec![tuples[3].2, 1.0],
            timesteps: vec![3, 4],
            action_mask: vec![true, false],
        };
        let pred = predict_actions(&params, &cfg, &seg, &AdaptationParams::None, None).unwrap();
        assert_eq!(via_ctx.as_slice(), pred.row(1));
    }

    #[test]
    fn select_action_on_empty_context_errors() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(31, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        let ctx = RolloutContext::new(&cfg);
        assert!(select_action(&params, &cfg, &ctx, &AdaptationParams::None, None).is_err());
    }

    #[test]
    fn single_step_context_matches_padded_segment() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(32, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        let mut ctx = RolloutContext::new(&cfg);
        ctx.push_state(vec![0.5, -0.5, 0.25], 3.0, 0);
        let via_ctx = select_action(&params, &cfg, &ctx, &AdaptationParams::None, None).unwrap();
        let seg = TrajectorySegment {
            states: Tensor::from_rows(&[&[0.5, -0.5, 0.25]]),
            actions: Tensor::zeros(vec![1, cfg.d_a]),
            rewards_to_go: vec![3.0],
            timesteps: vec![0],
            action_mask: vec![false],
        };
        let pred = predict_actions(&params, &cfg, &seg, &AdaptationParams::None, None).unwrap();
        assert_eq!(via_ctx.as_slice(), pred.row(0));
    }

    #[test]
    fn prompt_over_cap_is_rejected() {
        let mut cfg = tiny_cfg();
        cfg.prompt_cap = 4;
        let mut rng = rng_from(33, "init", 0);
        let params = init_dt_params(&cfg, &mut rng);
        let seg = random_segment(&cfg, 2, 40);
        let prompt = PromptData {
            states: Tensor::zeros(vec![3, cfg.d_s]),
            rtg: vec![1.0, 1.0, 1.0],
            timesteps: vec![0, 1, 2],
        };
        let err = predict_actions(&params, &cfg, &seg, &AdaptationParams::None, Some(&prompt));
        assert!(err.is_err());
    }
}
