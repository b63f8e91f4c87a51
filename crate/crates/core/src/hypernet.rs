//! Demonstration-conditioned hyper-network: encodes an action-free
//! demonstration plus a layer id into a task encoding z, then emits that
//! block's adapter (or IA3) parameters through linear heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdapterBlockVars, AdapterParams, Ia3BlockVars, Ia3Params};
use crate::error::{Error, Result};
use crate::model::DTConfig;
use crate::optim::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Action-free expert sequence (states, rewards-to-go, timesteps). Meta-IL
/// demonstrations additionally carry the expert actions, which the
/// hyper-network never reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    /// `[H_d, d_s]`
    pub states: Tensor,
    pub rewards_to_go: Vec<f64>,
    pub timesteps: Vec<u32>,
    /// `[H_d, d_a]`, present only in meta-IL demonstrations.
    pub actions: Option<Tensor>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Precondition("empty demonstration".into()));
        }
        let n = self.len();
        if self.states.shape()[0] != n || self.rewards_to_go.len() != n {
            return Err(Error::Data("demonstration field lengths disagree".into()));
        }
        if let Some(a) = &self.actions {
            if a.shape()[0] != n {
                return Err(Error::Data("demonstration actions length disagrees".into()));
            }
        }
        Ok(())
    }

    /// Strip actions (the h° view consumed by the hyper-network).
    pub fn action_free(&self) -> Demonstration {
        Demonstration {
            states: self.states.clone(),
            rewards_to_go: self.rewards_to_go.clone(),
            timesteps: self.timesteps.clone(),
            actions: None,
        }
    }

    pub fn total_return(&self) -> f64 {
        self.rewards_to_go.first().copied().unwrap_or(0.0)
    }
}

/// Which parameter family the generation heads emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HyperNetVariant {
    /// Bottleneck+FiLM adapters with the given hidden width.
    Adapter { d_h: usize },
    /// IA3 rescaling vectors, generated as `1 + head(z)` so zero heads give
    /// the pass-through model.
    Ia3,
}

/// Hyper-network dimensions plus the target-model dims its heads must match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    /// Modality embedding width inside the hyper-network.
    pub d_e: usize,
    /// Task-encoding width.
    pub d_z: usize,
    /// 1-D convolution kernel width (odd).
    pub conv_kernel: usize,
    pub variant: HyperNetVariant,
    /// Target model dims the heads are sized for.
    pub d_x: usize,
    pub n_blocks: usize,
    pub d_s: usize,
    /// Normalizers shared with the target model.
    pub rtg_scale: f64,
    pub max_ep_len: usize,
}

impl HyperNetConfig {
    /// Defaults reconciling the generation-head sizes with the reported
    /// 2.3M-parameter hyper-network at full model scale.
    pub fn for_target(cfg: &DTConfig, variant: HyperNetVariant) -> Self {
        HyperNetConfig {
            d_e: 64,
            d_z: 128,
            conv_kernel: 3,
            variant,
            d_x: cfg.d_x,
            n_blocks: cfg.n_blocks,
            d_s: cfg.d_s,
            rtg_scale: cfg.rtg_scale,
            max_ep_len: cfg.max_ep_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.d_z == 0 {
            return Err(Error::Config("hyper-net widths must be positive".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv kernel must be odd".into()));
        }
        if let HyperNetVariant::Adapter { d_h } = self.variant {
            if d_h == 0 || d_h >= self.d_x {
                return Err(Error::Config(format!(
                    "adapter bottleneck d_h={d_h} must be in 1..d_x={}",
                    self.d_x
                )));
            }
        }
        Ok(())
    }

    /// Heads must exactly reshape to the target config's adaptation params.
    pub fn check_target(&self, cfg: &DTConfig) -> Result<()> {
        if self.d_x != cfg.d_x || self.n_blocks != cfg.n_blocks || self.d_s != cfg.d_s {
            return Err(Error::Config(format!(
                "hyper-network sized for (d_x={}, blocks={}, d_s={}), target has (d_x={}, blocks={}, d_s={})",
                self.d_x, self.n_blocks, self.d_s, cfg.d_x, cfg.n_blocks, cfg.d_s
            )));
        }
        Ok(())
    }
}

/// Closed-form parameter count for a hyper-network config.
pub fn hypernet_param_count(cfg: &HyperNetConfig) -> usize {
    let embeds = cfg.d_s * cfg.d_e + 3 * cfg.d_e;
    let conv1 = cfg.conv_kernel * cfg.d_e * cfg.d_z + cfg.d_z;
    let conv2 = cfg.conv_kernel * cfg.d_z * cfg.d_z + cfg.d_z;
    let heads = match cfg.variant {
        HyperNetVariant::Adapter { d_h } => 2 * cfg.d_x * d_h * cfg.d_z + 2 * cfg.d_x * cfg.d_z,
        HyperNetVariant::Ia3 => 3 * cfg.d_x * cfg.d_z,
    };
    embeds + conv1 + conv2 + heads
}

/// Initialize hyper-network parameters (prefix `hyper.`), scaled-normal
/// std 0.02 for weights and zero conv biases.
pub fn init_hypernet_params(cfg: &HyperNetConfig, rng: &mut impl Rng) -> ParamSet {
    let std = 0.02;
    let mut p = ParamSet::new();
    p.insert("hyper.embed_state.w", Tensor::randn(vec![cfg.d_s, cfg.d_e], std, rng));
    p.insert("hyper.embed_rtg.w", Tensor::randn(vec![1, cfg.d_e], std, rng));
    p.insert("hyper.embed_time.w", Tensor::randn(vec![1, cfg.d_e], std, rng));
    p.insert("hyper.embed_layer.w", Tensor::randn(vec![1, cfg.d_e], std, rng));
    p.insert(
        "hyper.conv1.kernel",
        Tensor::randn(vec![cfg.conv_kernel, cfg.d_e, cfg.d_z], std, rng),
    );
    p.insert("hyper.conv1.bias", Tensor::zeros(vec![cfg.d_z]));
    p.insert(
        "hyper.conv2.kernel",
        Tensor::randn(vec![cfg.conv_kernel, cfg.d_z, cfg.d_z], std, rng),
    );
    p.insert("hyper.conv2.bias", Tensor::zeros(vec![cfg.d_z]));
    match cfg.variant {
        HyperNetVariant::Adapter { d_h } => {
            let flat = cfg.d_x * d_h;
            p.insert("hyper.head_down.w", Tensor::randn(vec![flat, cfg.d_z], std, rng));
            p.insert("hyper.head_up.w", Tensor::randn(vec![flat, cfg.d_z], std, rng));
            p.insert("hyper.head_gamma.w", Tensor::randn(vec![cfg.d_x, cfg.d_z], std, rng));
            p.insert("hyper.head_beta.w", Tensor::randn(vec![cfg.d_x, cfg.d_z], std, rng));
        }
        HyperNetVariant::Ia3 => {
            p.insert("hyper.head_k.w", Tensor::randn(vec![cfg.d_x, cfg.d_z], std, rng));
            p.insert("hyper.head_v.w", Tensor::randn(vec![cfg.d_x, cfg.d_z], std, rng));
            p.insert("hyper.head_ff.w", Tensor::randn(vec![cfg.d_x, cfg.d_z], std, rng));
        }
    }
    p
}

/// Encode a demonstration plus a layer id into the task encoding z (`[d_z]`).
///
/// Per timestep a reward token `L_r(r̂) + L_t(t) + L_l(l)` and a state token
/// `L_s(s) + L_t(t) + L_l(l)` are interleaved into a `2·H_d` sequence, run
/// through the two-layer convolution stack with a GELU between, then
/// mean-pooled over time.
pub fn encode_demo(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &HyperNetConfig,
    demo: &Demonstration,
    layer_id: usize,
) -> Result<Var> {
    demo.validate()?;
    if layer_id >= cfg.n_blocks {
        return Err(Error::Config(format!(
            "layer id {layer_id} out of range for {} blocks",
            cfg.n_blocks
        )));
    }
    let n = demo.len();
    let states = tape.constant(demo.states.clone());
    let rtg_scaled: Vec<f64> = demo
        .rewards_to_go
        .iter()
        .map(|r| r / cfg.rtg_scale)
        .collect();
    let rtg = tape.constant(Tensor::new(vec![n, 1], rtg_scaled)?);
    // Timesteps normalized by the horizon so raw step indices do not swamp
    // the other modalities at init.
    let t_norm: Vec<f64> = demo
        .timesteps
        .iter()
        .map(|&t| t as f64 / cfg.max_ep_len as f64)
        .collect();
    let times = tape.constant(Tensor::new(vec![n, 1], t_norm)?);

    let l_s = bound.var("hyper.embed_state.w")?;
    let l_r = bound.var("hyper.embed_rtg.w")?;
    let l_t = bound.var("hyper.embed_time.w")?;
    let l_l = bound.var("hyper.embed_layer.w")?;

    let s_emb = tape.matmul(states, l_s)?;
    let r_emb = tape.matmul(rtg, l_r)?;
    let t_emb = tape.matmul(times, l_t)?;

    let layer_scalar = tape.constant(Tensor::new(vec![1, 1], vec![layer_id as f64])?);
    let l_emb_row = tape.matmul(layer_scalar, l_l)?;
    let l_emb = tape.reshape(l_emb_row, vec![cfg.d_e])?;

    let s_tok = tape.add(s_emb, t_emb)?;
    let s_tok = tape.add(s_tok, l_emb)?;
    let r_tok = tape.add(r_emb, t_emb)?;
    let r_tok = tape.add(r_tok, l_emb)?;

    // Interleave (reward, state) per timestep.
    let wide = tape.concat(&[r_tok, s_tok], 1)?;
    let tokens = tape.reshape(wide, vec![2 * n, cfg.d_e])?;

    let c1k = bound.var("hyper.conv1.kernel")?;
    let c1b = bound.var("hyper.conv1.bias")?;
    let h = tape.conv1d(tokens, c1k, c1b)?;
    let h = tape.gelu(h)?;
    let c2k = bound.var("hyper.conv2.kernel")?;
    let c2b = bound.var("hyper.conv2.bias")?;
    let h = tape.conv1d(h, c2k, c2b)?;
    tape.mean_rows(h)
}

fn head_apply(tape: &mut Tape, bound: &BoundParams, head: &str, z: Var) -> Result<Var> {
    let w = bound.var(head)?;
    let d_z = tape.shape(z)[0];
    let z_col = tape.reshape(z, vec![d_z, 1])?;
    tape.matmul(w, z_col)
}

/// Generate on-tape adapter parameters for every block. Gradients flow back
/// to the hyper-network parameters.
pub fn generate_adapter_vars(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &HyperNetConfig,
    target: &DTConfig,
    demo: &Demonstration,
) -> Result<Vec<AdapterBlockVars>> {
    cfg.check_target(target)?;
    let d_h = match cfg.variant {
        HyperNetVariant::Adapter { d_h } => d_h,
        HyperNetVariant::Ia3 => {
            return Err(Error::Config(
                "ia3-variant hyper-network cannot generate adapter layers".into(),
            ))
        }
    };
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for l in 0..cfg.n_blocks {
        let z = encode_demo(tape, bound, cfg, demo, l)?;
        let down_flat = head_apply(tape, bound, "hyper.head_down.w", z)?;
        let up_flat = head_apply(tape, bound, "hyper.head_up.w", z)?;
        let gamma_col = head_apply(tape, bound, "hyper.head_gamma.w", z)?;
        let beta_col = head_apply(tape, bound, "hyper.head_beta.w", z)?;
        blocks.push(AdapterBlockVars {
            down: tape.reshape(down_flat, vec![cfg.d_x, d_h])?,
            up: tape.reshape(up_flat, vec![d_h, cfg.d_x])?,
            gamma: tape.reshape(gamma_col, vec![cfg.d_x])?,
            beta: tape.reshape(beta_col, vec![cfg.d_x])?,
        });
    }
    Ok(blocks)
}

/// Generate on-tape IA3 vectors (`1 + head(z)`) for every block.
pub fn generate_ia3_vars(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &HyperNetConfig,
    target: &DTConfig,
    demo: &Demonstration,
) -> Result<Vec<Ia3BlockVars>> {
    cfg.check_target(target)?;
    if cfg.variant != HyperNetVariant::Ia3 {
        return Err(Error::Config(
            "adapter-variant hyper-network cannot generate ia3 vectors".into(),
        ));
    }
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for l in 0..cfg.n_blocks {
        let z = encode_demo(tape, bound, cfg, demo, l)?;
        let mut vars = Vec::with_capacity(3);
        for head in ["hyper.head_k.w", "hyper.head_v.w", "hyper.head_ff.w"] {
            let col = head_apply(tape, bound, head, z)?;
            let flat = tape.reshape(col, vec![cfg.d_x])?;
            let ones = tape.constant(Tensor::ones(vec![cfg.d_x]));
            vars.push(tape.add(flat, ones)?);
        }
        blocks.push(Ia3BlockVars {
            k: vars[0],
            v: vars[1],
            ff: vars[2],
        });
    }
    Ok(blocks)
}

/// Materialize generated adapter parameters as plain tensors (the ψ
/// initialization used at adaptation time). Deterministic in its inputs.
pub fn generate_adapters(
    phi: &ParamSet,
    cfg: &HyperNetConfig,
    target: &DTConfig,
    demo: &Demonstration,
) -> Result<AdapterParams> {
    let d_h = match cfg.variant {
        HyperNetVariant::Adapter { d_h } => d_h,
        HyperNetVariant::Ia3 => {
            return Err(Error::Config(
                "ia3-variant hyper-network cannot generate adapter layers".into(),
            ))
        }
    };
    let mut tape = Tape::new();
    let mut frozen = phi.clone();
    frozen.freeze_all();
    let bound = BoundParams::bind(&mut tape, &frozen);
    let blocks = generate_adapter_vars(&mut tape, &bound, cfg, target, demo)?;
    let blocks = blocks
        .into_iter()
        .map(|b| crate::adapt::AdapterBlock {
            down: tape.value(b.down).clone(),
            up: tape.value(b.up).clone(),
            gamma: tape.value(b.gamma).clone(),
            beta: tape.value(b.beta).clone(),
        })
        .collect();
    Ok(AdapterParams { d_h, blocks })
}

/// Materialize generated IA3 parameters as plain tensors.
pub fn generate_ia3(
    phi: &ParamSet,
    cfg: &HyperNetConfig,
    target: &DTConfig,
    demo: &Demonstration,
) -> Result<Ia3Params> {
    let mut tape = Tape::new();
    let mut frozen = phi.clone();
    frozen.freeze_all();
    let bound = BoundParams::bind(&mut tape, &frozen);
    let blocks = generate_ia3_vars(&mut tape, &bound, cfg, target, demo)?;
    let blocks = blocks
        .into_iter()
        .map(|b| {
            (
                tape.value(b.k).clone(),
                tape.value(b.v).clone(),
                tape.value(b.ff).clone(),
            )
        })
        .collect();
    Ok(Ia3Params { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::rng_from;

    fn tiny_target() -> DTConfig {
        DTConfig {
            d_x: 8,
            n_blocks: 2,
            n_heads: 1,
            context_len: 2,
            d_s: 3,
            d_a: 2,
            max_ep_len: 10,
            rtg_scale: 1.0,
            prompt_cap: 60,
        }
    }

    fn tiny_hcfg(kernel: usize) -> HyperNetConfig {
        let mut cfg = HyperNetConfig::for_target(&tiny_target(), HyperNetVariant::Adapter { d_h: 2 });
        cfg.d_e = 4;
        cfg.d_z = 5;
        cfg.conv_kernel = kernel;
        cfg
    }

    fn demo_of_len(n: usize, seed: u64) -> Demonstration {
        let mut rng = rng_from(seed, "demo", 0);
        Demonstration {
            states: Tensor::randn(vec![n, 3], 1.0, &mut rng),
            rewards_to_go: (0..n).map(|i| (n - i) as f64).collect(),
            timesteps: (0..n as u32).collect(),
            actions: None,
        }
    }

    fn encode(cfg: &HyperNetConfig, phi: &ParamSet, demo: &Demonstration, l: usize) -> Tensor {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, phi);
        let z = encode_demo(&mut tape, &bound, cfg, demo, l).unwrap();
        tape.value(z).clone()
    }

    #[test]
    fn param_count_closed_form_matches_init() {
        let cfg = tiny_hcfg(3);
        let mut rng = rng_from(1, "hyper", 0);
        let phi = init_hypernet_params(&cfg, &mut rng);
        assert_eq!(phi.value_count(), hypernet_param_count(&cfg));
    }

    #[test]
    fn full_scale_count_near_2_3m() {
        let target = DTConfig::full(39, 4);
        let cfg = HyperNetConfig::for_target(&target, HyperNetVariant::Adapter { d_h: 16 });
        let count = hypernet_param_count(&cfg);
        let rel = (count as f64 - 2.3e6).abs() / 2.3e6;
        assert!(rel < 0.15, "hyper-network count {count} vs 2.3M (rel {rel})");
        // IA3-variant hyper-network is the small one (reported ~0.2M).
        let ia3 = HyperNetConfig::for_target(&target, HyperNetVariant::Ia3);
        let ia3_count = hypernet_param_count(&ia3);
        assert!(
            (100_000..400_000).contains(&ia3_count),
            "ia3 hyper-network count {ia3_count}"
        );
    }

    #[test]
    fn layer_id_changes_encoding() {
        let cfg = tiny_hcfg(3);
        let mut rng = rng_from(2, "hyper", 0);
        let phi = init_hypernet_params(&cfg, &mut rng);
        let demo = demo_of_len(4, 7);
        let z0 = encode(&cfg, &phi, &demo, 0);
        let z1 = encode(&cfg, &phi, &demo, 1);
        assert_ne!(z0, z1);
    }

    #[test]
    fn length_one_demo_encodes_finite() {
        let cfg = tiny_hcfg(3);
        let mut rng = rng_from(3, "hyper", 0);
        let phi = init_hypernet_params(&cfg, &mut rng);
        let demo = demo_of_len(1, 8);
        let z = encode(&cfg, &phi, &demo, 0);
        assert_eq!(z.shape(), &[cfg.d_z]);
        assert!(z.is_finite());
    }

    #[test]
    fn empty_demo_is_rejected() {
        let cfg = tiny_hcfg(3);
        let mut rng = rng_from(4, "hyper", 0);
        let phi = init_hypernet_params(&cfg, &mut rng);
        let demo = Demonstration {
            states: Tensor::zeros(vec![1, 3]),
            rewards_to_go: vec![],
            timesteps: vec![],
            actions: None,
        };
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &phi);
        assert!(encode_demo(&mut tape, &bound, &cfg, &demo, 0).is_err());
    }

    #[test]
    fn kernel_one_mean_pool_is_repetition_invariant() {
        let cfg = tiny_hcfg(1);
        let mut rng = rng_from(5, "hyper", 0);
        let phi = init_hypernet_params(&cfg, &mut rng);
        let demo = demo_of_len(3, 9);
        let doubled = Demonstration {
            states: Tensor::new(
                vec![6, 3],
                [demo.states.data(), demo.states.data()].concat(),
            )
            .unwrap(),
            rewards_to_go: [demo.rewards_to_go.clone(), demo.rewards_to_go.clone()].concat(),
            timesteps: [demo.timesteps.clone(), demo.timesteps.clone()].concat(),
            actions: None,
        };
        let z = encode(&cfg, &phi, &demo, 0);
        let z2 = encode(&cfg, &phi, &doubled, 0);
        for (a, b) in z.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_heads_generate_identity_behaving_adapters() {
        let cfg = tiny_hcfg(3);
        let target = tiny_target();
        let mut rng = rng_from(6, "hyper", 0);
        let mut phi = init_hypernet_params(&cfg, &mut rng);
        for head in ["head_down.w", "head_up.w", "head_gamma.w", "head_beta.w"] {
            let name = format!("hyper.{head}");
            let shape = phi.get(&name).unwrap().shape().to_vec();
            *phi.get_mut(&name).unwrap() = Tensor::zeros(shape);
        }
        let demo = demo_of_len(4, 10);
        let psi = generate_adapters(&phi, &cfg, &target, &demo).unwrap();
        for b in &psi.blocks {
            assert!(b.down.data().iter().all(|&v| v == 0.0));
            assert!(b.up.data().iter().all(|&v| v == 0.0));
            assert!(b.gamma.data().iter().all(|&v| v == 0.0));
            assert!(b.beta.data().iter().all(|&v| v == 0.0));
        }
        // Zero-generated adapters leave the model output unchanged.
        let mut rng = rng_from(7, "dt", 0);
        let theta = crate::model::init_dt_params(&target, &mut rng);
        let seg = crate::model::TrajectorySegment {
            states: Tensor::randn(vec![2, 3], 1.0, &mut rng),
            actions: Tensor::randn(vec![2, 2], 0.5, &mut rng),
            rewards_to_go: vec![2.0, 1.0],
            timesteps: vec![0, 1],
            action_mask: vec![true, true],
        };
        let plain = crate::model::predict_actions(
            &theta,
            &target,
            &seg,
            &crate::model::AdaptationParams::None,
            None,
        )
        .unwrap();
        let adapted = crate::model::predict_actions(
            &theta,
            &target,
            &seg,
            &crate::model::AdaptationParams::Adapters(psi),
            None,
        )
        .unwrap();
        assert_eq!(plain, adapted);
    }

    #[test]
    fn generation_is_deterministic_and_action_blind() {
        let cfg = tiny_hcfg(3);
        let target = tiny_target();
        let mut rng = rng_from(8, "hyper", 0);
        let phi = init_hypernet_params(&cfg, &mut rng);
        let mut demo = demo_of_len(4, 11);
        let a = generate_adapters(&phi, &cfg, &target, &demo).unwrap();
        let b = generate_adapters(&phi, &cfg, &target, &demo).unwrap();
        assert_eq!(a, b);
        // Attach and then perturb actions: outputs bit-identical.
        demo.actions = Some(Tensor::ones(vec![4, 2]));
        let c = generate_adapters(&phi, &cfg, &target, &demo).unwrap();
        demo.actions = Some(Tensor::zeros(vec![4, 2]));
        let d = generate_adapters(&phi, &cfg, &target, &demo).unwrap();
        assert_eq!(a, c);
        assert_eq!(c, d);
    }

    #[test]
    fn generated_shapes_satisfy_adapter_contract() {
        let cfg = tiny_hcfg(3);
        let target = tiny_target();
        let mut rng = rng_from(9, "hyper", 0);
        let phi = init_hypernet_params(&cfg, &mut rng);
        let demo = demo_of_len(5, 12);
        let psi = generate_adapters(&phi, &cfg, &target, &demo).unwrap();
        assert_eq!(psi.blocks.len(), target.n_blocks);
        assert_eq!(
            psi.value_count(),
            crate::adapt::count_adaptation_params(
                &target,
                crate::adapt::AdaptationKind::Adapter { d_h: 2 }
            )
            .unwrap()
        );
        for b in &psi.blocks {
            assert_eq!(b.down.shape(), &[8, 2]);
            assert_eq!(b.up.shape(), &[2, 8]);
            assert_eq!(b.gamma.shape(), &[8]);
            assert_eq!(b.beta.shape(), &[8]);
        }
    }

    #[test]
    fn mismatched_target_is_a_config_error() {
        let cfg = tiny_hcfg(3);
        let mut target = tiny_target();
        target.d_x = 16;
        let mut rng = rng_from(10, "hyper", 0);
        let phi = init_hypernet_params(&cfg, &mut rng);
        let demo = demo_of_len(3, 13);
        let err = generate_adapters(&phi, &cfg, &target, &demo).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn ia3_variant_generates_near_ones_at_init() {
        let target = tiny_target();
        let mut cfg = HyperNetConfig::for_target(&target, HyperNetVariant::Ia3);
        cfg.d_e = 4;
        cfg.d_z = 5;
        let mut rng = rng_from(11, "hyper", 0);
        let phi = init_hypernet_params(&cfg, &mut rng);
        let demo = demo_of_len(4, 14);
        let iota = generate_ia3(&phi, &cfg, &target, &demo).unwrap();
        assert_eq!(iota.blocks.len(), target.n_blocks);
        for (k, v, f) in &iota.blocks {
            for t in [k, v, f] {
                assert!(t.data().iter().all(|&x| (x - 1.0).abs() < 0.5));
            }
        }
    }
}
