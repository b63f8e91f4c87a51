//! Training and adaptation procedures: multi-task DT pre-training,
//! hyper-network training against the frozen base model, and the online
//! (meta-LfO) and supervised (meta-IL) adaptation loops shared by every
//! baseline mode.

use serde::{Deserialize, Serialize};

use crate::adapt::{count_adaptation_params, AdaptationKind, AdapterParams, Ia3Params};
use crate::error::{Error, Result};
use crate::eval::{run_episode, PolicySpec, RolloutLog};
use crate::hypernet::{
    generate_adapter_vars, generate_adapters, generate_ia3, init_hypernet_params, HyperNetConfig,
    HyperNetVariant,
};
use crate::maze::{episode_success, MazeLayout, TaskSpec};
use crate::model::{
    action_loss, dt_forward, init_dt_params, AdaptationParams, DTConfig, PromptData, PromptVars,
    TrajectorySegment,
};
use crate::optim::{adam_step, derive_seed, rng_from, AdamState, BoundParams, GradMap, ParamSet};
use crate::replay::{ReplayBuffer, Trajectory};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Budgets and learning rates for every loop. Defaults mirror the reported
/// hyperparameters; `desk()` applies the small-scale overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    /// Training / fine-tuning iterations N.
    pub iterations: usize,
    /// Per-task batch size M.
    pub batch_per_task: usize,
    /// Online rollout budget N_epi.
    pub rollout_budget: usize,
    /// Episodes collected between update phases (1 keeps the strict
    /// one-episode-one-step loop; 20 matches the table's per-iteration
    /// rollout budget).
    pub episodes_per_update: usize,
    /// Gradient steps per update phase.
    pub grad_steps_per_update: usize,
    /// Per-step probability of replacing the policy action with a uniform
    /// sample.
    pub epsilon: f64,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub weight_decay: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        TrainBudget {
            iterations: 4000,
            batch_per_task: 16,
            rollout_budget: 4000,
            episodes_per_update: 1,
            grad_steps_per_update: 1,
            epsilon: 0.2,
            lr_theta: 1e-4,
            lr_phi: 1e-4,
            lr_psi: 1e-4,
            weight_decay: 1e-4,
        }
    }
}

impl TrainBudget {
    /// Desk-scale overrides: 400 training iterations, 200-episode rollout
    /// budget.
    pub fn desk() -> Self {
        TrainBudget {
            iterations: 400,
            rollout_budget: 200,
            ..TrainBudget::default()
        }
    }
}

/// One task's offline data plus its expert demonstrations.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub task: TaskSpec,
    pub trajectories: Vec<Trajectory>,
    pub demos: Vec<Trajectory>,
}

impl TaskDataset {
    fn check(&self, need_demos: bool) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Data(format!(
                "task {} has an empty dataset",
                self.task.task_id
            )));
        }
        if need_demos && self.demos.is_empty() {
            return Err(Error::Data(format!(
                "task {} has no demonstrations",
                self.task.task_id
            )));
        }
        Ok(())
    }
}

/// Truncate a demonstration to the prompt cap (first cap/2 steps) as raw
/// prompt values.
pub fn prompt_from_demo(demo: &Trajectory, cfg: &DTConfig) -> PromptData {
    let steps = (cfg.prompt_cap / 2).max(1).min(demo.len());
    PromptData {
        states: Tensor::new(
            vec![steps, demo.d_s],
            demo.states[..steps * demo.d_s].to_vec(),
        )
        .expect("prompt states"),
        rtg: demo.rewards_to_go[..steps].to_vec(),
        timesteps: demo.timesteps[..steps].to_vec(),
    }
}

fn non_finite_guard(loss: f64, what: &str) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: format!("{what} loss"),
        });
    }
    Ok(loss)
}

/// Sum of per-segment action losses on one tape, scaled by `scale`, then one
/// backward pass. Returns (scaled loss value, gradients).
fn segments_loss_grads(
    params: &ParamSet,
    cfg: &DTConfig,
    segments: &[TrajectorySegment],
    adaptation_of: impl FnOnce(&mut Tape, &BoundParams) -> Result<crate::adapt::AdaptationVars>,
    prompt_of: impl FnOnce(&mut Tape, &BoundParams) -> Result<Option<PromptVars>>,
    scale: f64,
) -> Result<(f64, GradMap)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let adaptation = adaptation_of(&mut tape, &bound)?;
    let prompt = prompt_of(&mut tape, &bound)?;
    let mut total = None;
    for seg in segments {
        let pred = dt_forward(&mut tape, &bound, "dt.", cfg, seg, &adaptation, prompt.as_ref())?;
        let loss = action_loss(&mut tape, pred, &seg.actions, &seg.action_mask)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Precondition("no segments in batch".into()))?;
    let scaled = tape.scale(total, scale)?;
    let value = tape.value(scaled).item();
    let mut grads = tape.backward(scaled)?;
    Ok((value, bound.collect_grads(&mut grads)))
}

fn merge_grads(into: &mut GradMap, from: GradMap) -> Result<()> {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => acc.add_assign(&g)?,
            None => {
                into.insert(name, g);
            }
        }
    }
    Ok(())
}

/// Output of a pre-training or hyper-network training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamSet,
    pub loss_history: Vec<f64>,
    pub optimizer_steps: u64,
}

/// Multi-task DT pre-training: every iteration samples M segments per task
/// and takes one combined MSE step on theta. With `prompted`, each task batch
/// is conditioned on a demonstration prefix (the PDT-style base model).
pub fn pretrain_dt(
    cfg: &DTConfig,
    datasets: &[TaskDataset],
    budget: &TrainBudget,
    seed: u64,
    prompted: bool,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Data("no training tasks".into()));
    }
    for ds in datasets {
        ds.check(prompted)?;
    }
    let mut rng = rng_from(seed, "dt_init", 0);
    let mut theta = init_dt_params(cfg, &mut rng);
    let mut adam = AdamState::new(budget.lr_theta).with_weight_decay(budget.weight_decay);
    let mut history = Vec::with_capacity(budget.iterations);
    let scale = 1.0 / (datasets.len() * budget.batch_per_task) as f64;
    for n in 0..budget.iterations {
        let mut grads = GradMap::new();
        let mut loss = 0.0;
        for (ti, ds) in datasets.iter().enumerate() {
            let mut rng = rng_from(seed, "pretrain_batch", (n * datasets.len() + ti) as u64);
            let segments: Vec<TrajectorySegment> = (0..budget.batch_per_task)
                .map(|_| {
                    let idx = rand::Rng::gen_range(&mut rng, 0..ds.trajectories.len());
                    ds.trajectories[idx].sample_segment(cfg.context_len, &mut rng)
                })
                .collect::<Result<_>>()?;
            let prompt_data = if prompted {
                let idx = rand::Rng::gen_range(&mut rng, 0..ds.demos.len());
                Some(prompt_from_demo(&ds.demos[idx], cfg))
            } else {
                None
            };
            let (l, g) = segments_loss_grads(
                &theta,
                cfg,
                &segments,
                |_, _| Ok(crate::adapt::AdaptationVars::None),
                |tape, _| match &prompt_data {
                    Some(p) => Ok(Some(p.bind(tape, cfg)?)),
                    None => Ok(None),
                },
                scale,
            )?;
            loss += l;
            merge_grads(&mut grads, g)?;
        }
        non_finite_guard(loss, "pretrain")
            .map_err(|e| Error::NonFinite { op: format!("iteration {n}: {e}") })?;
        adam_step(&mut theta, &grads, &mut adam)?;
        history.push(loss);
    }
    Ok(TrainOutput {
        params: theta,
        loss_history: history,
        optimizer_steps: adam.step,
    })
}

/// Hyper-network training: theta stays frozen; every iteration samples, per
/// task, M segments plus one demonstration, generates that task's adapters
/// from the action-free demo, and takes one combined MSE step on phi.
pub fn train_hypernet(
    theta: &ParamSet,
    hyper_cfg: &HyperNetConfig,
    cfg: &DTConfig,
    datasets: &[TaskDataset],
    budget: &TrainBudget,
    seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    hyper_cfg.validate()?;
    hyper_cfg.check_target(cfg)?;
    if datasets.is_empty() {
        return Err(Error::Data("no training tasks".into()));
    }
    for ds in datasets {
        ds.check(true)?;
    }
    let mut frozen_theta = theta.clone();
    frozen_theta.freeze_all();
    let mut rng = rng_from(seed, "hyper_init", 0);
    let mut phi = init_hypernet_params(hyper_cfg, &mut rng);
    let mut adam = AdamState::new(budget.lr_phi).with_weight_decay(budget.weight_decay);
    let mut history = Vec::with_capacity(budget.iterations);
    let scale = 1.0 / (datasets.len() * budget.batch_per_task) as f64;
    for n in 0..budget.iterations {
        let mut grads = GradMap::new();
        let mut loss = 0.0;
        for (ti, ds) in datasets.iter().enumerate() {
            let mut rng = rng_from(seed, "hypernet_batch", (n * datasets.len() + ti) as u64);
            let segments: Vec<TrajectorySegment> = (0..budget.batch_per_task)
                .map(|_| {
                    let idx = rand::Rng::gen_range(&mut rng, 0..ds.trajectories.len());
                    ds.trajectories[idx].sample_segment(cfg.context_len, &mut rng)
                })
                .collect::<Result<_>>()?;
            let demo_idx = rand::Rng::gen_range(&mut rng, 0..ds.demos.len());
            let demo = ds.demos[demo_idx].to_demonstration(false)?;
            let mut combined = frozen_theta.clone();
            combined.extend_prefixed("", &phi);
            let (l, g) = segments_loss_grads(
                &combined,
                cfg,
                &segments,
                |tape, bound| {
                    Ok(crate::adapt::AdaptationVars::Adapters(generate_adapter_vars(
                        tape, bound, hyper_cfg, cfg, &demo,
                    )?))
                },
                |_, _| Ok(None),
                scale,
            )?;
            loss += l;
            merge_grads(&mut grads, g)?;
        }
        if let Some(name) = grads.keys().find(|k| k.starts_with("dt.")) {
            return Err(Error::Config(format!(
                "gradient leaked to frozen base parameter {name}"
            )));
        }
        non_finite_guard(loss, "hypernet")
            .map_err(|e| Error::NonFinite { op: format!("iteration {n}: {e}") })?;
        adam_step(&mut phi, &grads, &mut adam)?;
        history.push(loss);
    }
    Ok(TrainOutput {
        params: phi,
        loss_history: history,
        optimizer_steps: adam.step,
    })
}

/// Adaptation mode: the proposed method or one of the baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Hyper-network-initialized adapters; fine-tunes the adapters only.
    Hdt,
    /// Randomly initialized adapters (std 0.02).
    HdtRand,
    /// Full fine-tune of every base-model parameter.
    FullDt,
    /// Prompt-tuning: the raw demonstration prefix values are the trainable
    /// set; the base model stays frozen.
    Pdt,
    /// IA3 rescaling vectors.
    Ia3,
}

impl AdaptMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hdt" => Ok(AdaptMode::Hdt),
            "hdt-rand" => Ok(AdaptMode::HdtRand),
            "full-dt" => Ok(AdaptMode::FullDt),
            "pdt" => Ok(AdaptMode::Pdt),
            "ia3" => Ok(AdaptMode::Ia3),
            other => Err(Error::Config(format!("unknown adaptation mode {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptMode::Hdt => "hdt",
            AdaptMode::HdtRand => "hdt-rand",
            AdaptMode::FullDt => "full-dt",
            AdaptMode::Pdt => "pdt",
            AdaptMode::Ia3 => "ia3",
        }
    }
}

/// Adaptation data regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptSetting {
    /// Supervised fine-tuning on a demonstration with expert actions.
    Il,
    /// Online adaptation from an action-free demonstration.
    Lfo,
}

impl AdaptSetting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "il" => Ok(AdaptSetting::Il),
            "lfo" => Ok(AdaptSetting::Lfo),
            other => Err(Error::Config(format!("unknown adaptation setting {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptSetting::Il => "il",
            AdaptSetting::Lfo => "lfo",
        }
    }
}

/// Everything an adaptation run needs.
pub struct AdaptInputs<'a> {
    pub theta: &'a ParamSet,
    /// Trained hyper-network; required for Hdt, optional for Ia3.
    pub phi: Option<&'a ParamSet>,
    pub hyper_cfg: Option<&'a HyperNetConfig>,
    pub cfg: &'a DTConfig,
    pub layout: &'a MazeLayout,
    pub task: TaskSpec,
    /// Expert demonstration (must include actions for the IL setting).
    pub demo: &'a Trajectory,
    /// Adapter bottleneck width for HdtRand (Hdt takes it from the
    /// hyper-network config).
    pub d_h: usize,
}

/// Result of one adaptation run.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub mode: AdaptMode,
    pub setting: AdaptSetting,
    /// The full parameter set after adaptation (frozen base + trainable set).
    pub params: ParamSet,
    /// Names of the trainable parameters.
    pub trainable_names: Vec<String>,
    pub trainable_count: usize,
    pub loss_history: Vec<f64>,
    pub rollout_log: RolloutLog,
}

impl AdaptOutcome {
    /// Materialize the adapted policy's evaluation-time view.
    pub fn policy_view(&self, cfg: &DTConfig) -> Result<(AdaptationParams, Option<PromptData>)> {
        mode_policy_view(self.mode, &self.params, cfg)
    }
}

fn mode_kind(mode: AdaptMode, cfg: &DTConfig, d_h: usize, prompt_len: usize) -> AdaptationKind {
    match mode {
        AdaptMode::Hdt | AdaptMode::HdtRand => AdaptationKind::Adapter { d_h },
        AdaptMode::Ia3 => AdaptationKind::Ia3,
        AdaptMode::FullDt => AdaptationKind::Full,
        AdaptMode::Pdt => AdaptationKind::Prompt {
            len: prompt_len.min(cfg.prompt_cap / 2),
        },
    }
}

fn mode_policy_view(
    mode: AdaptMode,
    params: &ParamSet,
    cfg: &DTConfig,
) -> Result<(AdaptationParams, Option<PromptData>)> {
    match mode {
        AdaptMode::Hdt | AdaptMode::HdtRand => Ok((
            AdaptationParams::Adapters(AdapterParams::from_param_set(params, cfg)?),
            None,
        )),
        AdaptMode::Ia3 => Ok((
            AdaptationParams::Ia3(Ia3Params::from_param_set(params, cfg)?),
            None,
        )),
        AdaptMode::FullDt => Ok((AdaptationParams::None, None)),
        AdaptMode::Pdt => {
            let data = params
                .get("prompt.data")
                .ok_or_else(|| Error::Config("missing prompt.data".into()))?;
            let (p, w) = data.dims2("prompt.data")?;
            let d_s = cfg.d_s;
            debug_assert_eq!(w, d_s + 2);
            let mut states = Vec::with_capacity(p * d_s);
            let mut rtg = Vec::with_capacity(p);
            let mut timesteps = Vec::with_capacity(p);
            for r in 0..p {
                let row = data.row(r);
                states.extend_from_slice(&row[..d_s]);
                rtg.push(row[d_s]);
                let t = row[d_s + 1].round().clamp(0.0, (cfg.max_ep_len - 1) as f64);
                timesteps.push(t as u32);
            }
            Ok((
                AdaptationParams::None,
                Some(PromptData {
                    states: Tensor::new(vec![p, d_s], states)?,
                    rtg,
                    timesteps,
                }),
            ))
        }
    }
}

/// Evaluation-time view of an adapted parameter set for a given mode.
pub fn policy_view_for(
    mode: AdaptMode,
    params: &ParamSet,
    cfg: &DTConfig,
) -> Result<(AdaptationParams, Option<PromptData>)> {
    mode_policy_view(mode, params, cfg)
}

struct ModeState {
    mode: AdaptMode,
    cfg: DTConfig,
    /// Frozen base plus the mode's trainable set.
    params: ParamSet,
    trainable_names: Vec<String>,
    adam: AdamState,
}

impl ModeState {
    fn init(
        mode: AdaptMode,
        inputs: &AdaptInputs,
        budget: &TrainBudget,
        seed: u64,
    ) -> Result<ModeState> {
        let cfg = inputs.cfg.clone();
        cfg.validate()?;
        let mut params = inputs.theta.clone();
        if mode == AdaptMode::FullDt {
            for name in params.names().map(String::from).collect::<Vec<_>>() {
                params.set_frozen(&name, false)?;
            }
        } else {
            params.freeze_all();
        }
        let lr = match mode {
            AdaptMode::FullDt => budget.lr_theta,
            _ => budget.lr_psi,
        };
        match mode {
            AdaptMode::Hdt => {
                let phi = inputs
                    .phi
                    .ok_or_else(|| Error::Config("hdt mode requires a trained hyper-network".into()))?;
                let hcfg = inputs
                    .hyper_cfg
                    .ok_or_else(|| Error::Config("hdt mode requires the hyper-network config".into()))?;
                let demo = inputs.demo.to_demonstration(false)?;
                let psi = generate_adapters(phi, hcfg, &cfg, &demo)?;
                params.extend_prefixed("", &psi.to_param_set());
            }
            AdaptMode::HdtRand => {
                let mut rng = rng_from(seed, "rand_psi", inputs.task.task_id as u64);
                let psi = AdapterParams::randn(&cfg, inputs.d_h, 0.02, &mut rng)?;
                params.extend_prefixed("", &psi.to_param_set());
            }
            AdaptMode::Ia3 => {
                let iota = match (inputs.phi, inputs.hyper_cfg) {
                    (Some(phi), Some(hcfg)) if hcfg.variant == HyperNetVariant::Ia3 => {
                        generate_ia3(phi, hcfg, &cfg, &inputs.demo.to_demonstration(false)?)?
                    }
                    _ => Ia3Params::ones(&cfg),
                };
                params.extend_prefixed("", &iota.to_param_set());
            }
            AdaptMode::Pdt => {
                let prompt = prompt_from_demo(inputs.demo, &cfg);
                let p = prompt.timesteps.len();
                let mut data = Vec::with_capacity(p * (cfg.d_s + 2));
                for r in 0..p {
                    data.extend_from_slice(prompt.states.row(r));
                    data.push(prompt.rtg[r]);
                    data.push(prompt.timesteps[r] as f64);
                }
                params.insert("prompt.data", Tensor::new(vec![p, cfg.d_s + 2], data)?);
            }
            AdaptMode::FullDt => {}
        }
        let trainable_names: Vec<String> = params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(n, _)| n.to_string())
            .collect();
        Ok(ModeState {
            mode,
            cfg,
            params,
            trainable_names,
            adam: AdamState::new(lr).with_weight_decay(budget.weight_decay),
        })
    }

    fn trainable_count(&self) -> usize {
        self.trainable_names
            .iter()
            .map(|n| self.params.get(n).map_or(0, |t| t.len()))
            .sum()
    }

    fn policy_view(&self) -> Result<(AdaptationParams, Option<PromptData>)> {
        mode_policy_view(self.mode, &self.params, &self.cfg)
    }

    /// One gradient step on the trainable set over a batch of segments.
    fn grad_step(&mut self, segments: &[TrajectorySegment]) -> Result<f64> {
        let scale = 1.0 / segments.len().max(1) as f64;
        let mode = self.mode;
        let cfg = self.cfg.clone();
        // Prompt timesteps come from the current raw values.
        let prompt_timesteps = if mode == AdaptMode::Pdt {
            let data = self.params.get("prompt.data").expect("pdt prompt present");
            let (p, w) = data.dims2("prompt.data")?;
            Some(
                (0..p)
                    .map(|r| {
                        let t = data.data()[r * w + cfg.d_s + 1]
                            .round()
                            .clamp(0.0, (cfg.max_ep_len - 1) as f64);
                        t as u32
                    })
                    .collect::<Vec<u32>>(),
            )
        } else {
            None
        };
        let (loss, grads) = segments_loss_grads(
            &self.params,
            &cfg,
            segments,
            |_tape, bound| match mode {
                AdaptMode::Hdt | AdaptMode::HdtRand => {
                    crate::adapt::AdaptationVars::adapters_from_bound(bound, &cfg)
                }
                AdaptMode::Ia3 => crate::adapt::AdaptationVars::ia3_from_bound(bound, &cfg),
                AdaptMode::FullDt | AdaptMode::Pdt => Ok(crate::adapt::AdaptationVars::None),
            },
            |tape, bound| match mode {
                AdaptMode::Pdt => {
                    let var = bound.var("prompt.data")?;
                    let d_s = cfg.d_s;
                    let states = tape.slice_cols(var, 0, d_s)?;
                    let rtg_raw = tape.slice_cols(var, d_s, 1)?;
                    let rtg = tape.scale(rtg_raw, 1.0 / cfg.rtg_scale)?;
                    Ok(Some(PromptVars {
                        states,
                        rtg,
                        timesteps: prompt_timesteps.clone().expect("pdt timesteps"),
                    }))
                }
                _ => Ok(None),
            },
            scale,
        )?;
        for name in grads.keys() {
            if self.params.is_frozen(name) {
                return Err(Error::Config(format!(
                    "gradient leaked to frozen parameter {name}"
                )));
            }
        }
        non_finite_guard(loss, self.mode.as_str())?;
        adam_step(&mut self.params, &grads, &mut self.adam)?;
        Ok(loss)
    }
}

/// Meta-LfO adaptation (online, action-free demonstration). The adapter
/// parameters are initialized from the hyper-network and are the only
/// parameters updated.
pub fn adapt_meta_lfo(inputs: &AdaptInputs, budget: &TrainBudget, seed: u64) -> Result<AdaptOutcome> {
    run_adaptation(AdaptMode::Hdt, AdaptSetting::Lfo, inputs, budget, seed)
}

/// Meta-IL adaptation (supervised on one expert demonstration with actions).
pub fn adapt_meta_il(inputs: &AdaptInputs, budget: &TrainBudget, seed: u64) -> Result<AdaptOutcome> {
    run_adaptation(AdaptMode::Hdt, AdaptSetting::Il, inputs, budget, seed)
}

/// Baseline adaptation with the given mode's trainable set, sharing the same
/// outer loops as the main method.
pub fn run_baseline(
    mode: AdaptMode,
    setting: AdaptSetting,
    inputs: &AdaptInputs,
    budget: &TrainBudget,
    seed: u64,
) -> Result<AdaptOutcome> {
    run_adaptation(mode, setting, inputs, budget, seed)
}

fn run_adaptation(
    mode: AdaptMode,
    setting: AdaptSetting,
    inputs: &AdaptInputs,
    budget: &TrainBudget,
    seed: u64,
) -> Result<AdaptOutcome> {
    let mut state = ModeState::init(mode, inputs, budget, seed)?;
    let d_h = match mode {
        AdaptMode::Hdt => match inputs.hyper_cfg.map(|h| h.variant) {
            Some(HyperNetVariant::Adapter { d_h }) => d_h,
            _ => inputs.d_h,
        },
        _ => inputs.d_h,
    };
    let expected = count_adaptation_params(
        &state.cfg,
        mode_kind(mode, &state.cfg, d_h, inputs.demo.len()),
    )?;
    let got = state.trainable_count();
    if got != expected {
        return Err(Error::Config(format!(
            "{} trainable count {got} does not match the closed form {expected}",
            mode.as_str()
        )));
    }

    let mut loss_history = Vec::new();
    let mut rollout_log = RolloutLog::default();

    match setting {
        AdaptSetting::Il => {
            if !inputs.demo.has_actions() {
                return Err(Error::Precondition(
                    "meta-IL requires a demonstration with expert actions".into(),
                ));
            }
            for n in 0..budget.iterations {
                let mut rng = rng_from(seed, "il_sample", n as u64);
                let segments: Vec<TrajectorySegment> = (0..budget.batch_per_task)
                    .map(|_| inputs.demo.sample_segment(state.cfg.context_len, &mut rng))
                    .collect::<Result<_>>()?;
                loss_history.push(state.grad_step(&segments)?);
            }
        }
        AdaptSetting::Lfo => {
            let rtg_target = inputs.demo.total_return();
            let mut buffer = ReplayBuffer::new();
            let mut update_counter = 0u64;
            while rollout_log.len() < budget.rollout_budget {
                let take = budget
                    .episodes_per_update
                    .min(budget.rollout_budget - rollout_log.len())
                    .max(1);
                for _ in 0..take {
                    let episode_idx = rollout_log.len() as u64;
                    let (adaptation, prompt) = state.policy_view()?;
                    let spec = PolicySpec::Dt {
                        params: &state.params,
                        cfg: &state.cfg,
                        adaptation,
                        prompt,
                        rtg_target,
                    };
                    let env_seed = derive_seed(seed, "adapt_episode", episode_idx);
                    let mut explore_rng = rng_from(seed, "adapt_explore", episode_idx);
                    let (traj, replaced) = run_episode(
                        inputs.layout,
                        inputs.task,
                        &spec,
                        budget.epsilon,
                        env_seed,
                        &mut explore_rng,
                    )?;
                    rollout_log.push(
                        traj.total_return(),
                        episode_success(&traj),
                        replaced,
                        traj.len(),
                    );
                    buffer.push(traj)?;
                }
                for _ in 0..budget.grad_steps_per_update {
                    let mut rng = rng_from(seed, "lfo_sample", update_counter);
                    update_counter += 1;
                    let segments: Vec<TrajectorySegment> = (0..budget.batch_per_task)
                        .map(|_| buffer.sample_segment(state.cfg.context_len, &mut rng))
                        .collect::<Result<_>>()?;
                    loss_history.push(state.grad_step(&segments)?);
                }
            }
            debug_assert!(rollout_log.len() <= budget.rollout_budget);
        }
    }

    Ok(AdaptOutcome {
        mode,
        setting,
        trainable_names: state.trainable_names.clone(),
        trainable_count: state.trainable_count(),
        params: state.params,
        loss_history,
        rollout_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{task_by_id, rollout_expert};
    use crate::model::{select_action, RolloutContext};
    use crate::optim::rng_from;

    fn tiny_cfg() -> DTConfig {
        DTConfig {
            d_x: 8,
            n_blocks: 1,
            n_heads: 1,
            context_len: 6,
            d_s: 4,
            d_a: 2,
            max_ep_len: 130,
            rtg_scale: 10.0,
            prompt_cap: 12,
        }
    }

    fn tiny_hyper(cfg: &DTConfig) -> HyperNetConfig {
        let mut h = HyperNetConfig::for_target(cfg, HyperNetVariant::Adapter { d_h: 2 });
        h.d_e = 4;
        h.d_z = 4;
        h
    }

    fn maze_datasets(task_ids: &[u32], episodes: usize, seed: u64) -> Vec<TaskDataset> {
        let layout = MazeLayout::medium();
        task_ids
            .iter()
            .map(|&id| {
                let task = task_by_id(id).unwrap();
                let trajectories: Vec<Trajectory> = (0..episodes)
                    .map(|e| {
                        rollout_expert(&layout, task, 0.1, derive_seed(seed, "ds", (id as u64) << 8 | e as u64))
                            .unwrap()
                    })
                    .collect();
                let demos = vec![rollout_expert(&layout, task, 0.0, derive_seed(seed, "dm", id as u64)).unwrap()];
                TaskDataset {
                    task,
                    trajectories,
                    demos,
                }
            })
            .collect()
    }

    #[test]
    fn pretrain_bookkeeping_one_step_per_iteration() {
        let cfg = tiny_cfg();
        let datasets = maze_datasets(&[0], 1, 3);
        let budget = TrainBudget {
            iterations: 1,
            batch_per_task: 1,
            ..TrainBudget::default()
        };
        let out = pretrain_dt(&cfg, &datasets, &budget, 5, false).unwrap();
        assert_eq!(out.optimizer_steps, 1);
        assert_eq!(out.loss_history.len(), 1);
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let datasets = maze_datasets(&[0, 1], 2, 4);
        let budget = TrainBudget {
            iterations: 3,
            batch_per_task: 2,
            ..TrainBudget::default()
        };
        let a = pretrain_dt(&cfg, &datasets, &budget, 9, false).unwrap();
        let b = pretrain_dt(&cfg, &datasets, &budget, 9, false).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn pretrain_loss_halves_on_tiny_tasks() {
        let cfg = DTConfig {
            d_x: 32,
            n_blocks: 1,
            n_heads: 2,
            context_len: 8,
            d_s: 4,
            d_a: 2,
            max_ep_len: 130,
            rtg_scale: 10.0,
            prompt_cap: 16,
        };
        let datasets = maze_datasets(&[0, 10], 3, 6);
        let budget = TrainBudget {
            iterations: 50,
            batch_per_task: 8,
            lr_theta: 1e-3,
            ..TrainBudget::default()
        };
        let out = pretrain_dt(&cfg, &datasets, &budget, 2, false).unwrap();
        let first = out.loss_history[0];
        let last = *out.loss_history.last().unwrap();
        assert!(
            last < 0.5 * first,
            "loss went {first} -> {last}, expected at least a halving"
        );
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let cfg = tiny_cfg();
        let datasets = vec![TaskDataset {
            task: task_by_id(0).unwrap(),
            trajectories: Vec::new(),
            demos: Vec::new(),
        }];
        assert!(pretrain_dt(&cfg, &datasets, &TrainBudget::desk(), 1, false).is_err());
    }

    #[test]
    fn hypernet_training_leaves_theta_bit_identical() {
        let cfg = tiny_cfg();
        let hcfg = tiny_hyper(&cfg);
        let datasets = maze_datasets(&[0], 2, 7);
        let mut rng = rng_from(1, "theta", 0);
        let theta = init_dt_params(&cfg, &mut rng);
        let before = theta.clone();
        let budget = TrainBudget {
            iterations: 2,
            batch_per_task: 2,
            ..TrainBudget::default()
        };
        let out = train_hypernet(&theta, &hcfg, &cfg, &datasets, &budget, 11).unwrap();
        assert_eq!(theta, before);
        assert_eq!(out.optimizer_steps, 2);
        assert!(out.params.names().all(|n| n.starts_with("hyper.")));
    }

    #[test]
    fn hypernet_beats_any_single_shared_predictor() {
        // Two tasks ask for opposite actions from identical contexts; the
        // best demonstration-blind predictor has MSE c^2 (predict zero), so
        //任何 lower joint loss proves the demo conditioning works.
        let cfg = DTConfig {
            d_x: 8,
            n_blocks: 1,
            n_heads: 1,
            context_len: 1,
            d_s: 2,
            d_a: 1,
            max_ep_len: 4,
            rtg_scale: 1.0,
            prompt_cap: 4,
        };
        let hcfg = {
            let mut h = HyperNetConfig::for_target(&cfg, HyperNetVariant::Adapter { d_h: 2 });
            h.d_e = 4;
            h.d_z = 4;
            h
        };
        // Targets sit inside the frozen random model's reachable output range
        // (the final layer norm plus the std-0.02 head cap outputs near 0.16).
        let c = 0.12;
        let mk_task = |id: u32, action: f64, demo_sign: f64| {
            let states = vec![0.3, 0.7, 0.3, 0.7];
            let traj = Trajectory::new(
                id,
                2,
                1,
                states,
                vec![action, action],
                vec![0.0, 0.0],
                vec![0, 1],
            )
            .unwrap();
            let demo = Trajectory::new(
                id,
                2,
                1,
                vec![demo_sign; 6],
                vec![0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0],
                vec![0, 1, 2],
            )
            .unwrap();
            TaskDataset {
                task: task_by_id(id).unwrap(),
                trajectories: vec![traj],
                demos: vec![demo],
            }
        };
        let datasets = vec![mk_task(0, c, 1.0), mk_task(1, -c, -1.0)];
        let mut rng = rng_from(3, "theta", 0);
        let theta = init_dt_params(&cfg, &mut rng);
        let budget = TrainBudget {
            iterations: 800,
            batch_per_task: 8,
            lr_phi: 5e-3,
            ..TrainBudget::default()
        };
        let out = train_hypernet(&theta, &hcfg, &cfg, &datasets, &budget, 17).unwrap();
        let single_model_optimum = c * c;
        let last = *out.loss_history.last().unwrap();
        assert!(
            last < 0.5 * single_model_optimum,
            "joint loss {last} did not beat the shared-predictor optimum {single_model_optimum}"
        );
    }

    /// Roll the plain policy greedily for `steps` steps and return the
    /// resulting trajectory (rewards are all zero far from the goal).
    fn self_rollout(cfg: &DTConfig, theta: &ParamSet, task: TaskSpec, steps: usize) -> Trajectory {
        let layout = MazeLayout::medium();
        let mut env = crate::maze::MazeEnv::reset(&layout, task, 21).unwrap();
        let mut ctx = RolloutContext::new(cfg);
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        for t in 0..steps {
            let obs = env.observation();
            ctx.push_state(obs.to_vec(), 0.0, t as u32);
            let a = select_action(theta, cfg, &ctx, &AdaptationParams::None, None).unwrap();
            ctx.set_last_action(a.clone());
            let step = env.step([a[0], a[1]]).unwrap();
            assert_eq!(step.reward, 0.0, "test needs a reward-free stretch");
            states.extend_from_slice(&obs);
            actions.extend_from_slice(&a);
            rewards.push(0.0);
        }
        Trajectory::new(
            task.task_id,
            cfg.d_s,
            cfg.d_a,
            states,
            actions,
            rewards,
            (0..steps as u32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn meta_il_self_imitation_is_a_fixed_point() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(5, "theta", 0);
        let theta = init_dt_params(&cfg, &mut rng);
        // Zero generation heads make the initial adapters an exact identity,
        // so the adapted policy equals the plain policy that made the demo.
        let hcfg = tiny_hyper(&cfg);
        let mut rng = rng_from(6, "phi", 0);
        let mut phi = init_hypernet_params(&hcfg, &mut rng);
        for head in ["head_down.w", "head_up.w", "head_gamma.w", "head_beta.w"] {
            let name = format!("hyper.{head}");
            let shape = phi.get(&name).unwrap().shape().to_vec();
            *phi.get_mut(&name).unwrap() = Tensor::zeros(shape);
        }
        // Goal (6,6) is far from the (3,3) start: no rewards in 6 steps.
        let task = task_by_id(24).unwrap();
        let demo = self_rollout(&cfg, &theta, task, cfg.context_len);
        let layout = MazeLayout::medium();
        let inputs = AdaptInputs {
            theta: &theta,
            phi: Some(&phi),
            hyper_cfg: Some(&hcfg),
            cfg: &cfg,
            layout: &layout,
            task,
            demo: &demo,
            d_h: 2,
        };
        let budget = TrainBudget {
            iterations: 10,
            batch_per_task: 4,
            ..TrainBudget::default()
        };
        let before = generate_adapters(&phi, &hcfg, &cfg, &demo.to_demonstration(false).unwrap()).unwrap();
        let out = adapt_meta_il(&inputs, &budget, 31).unwrap();
        assert!(out.loss_history.iter().all(|&l| l == 0.0), "losses {:?}", out.loss_history);
        let after = AdapterParams::from_param_set(&out.params, &cfg).unwrap();
        let drift: f64 = before
            .blocks
            .iter()
            .zip(&after.blocks)
            .map(|(a, b)| {
                let mut d = 0.0;
                for (x, y) in a.down.data().iter().zip(b.down.data()) {
                    d += (x - y) * (x - y);
                }
                for (x, y) in a.up.data().iter().zip(b.up.data()) {
                    d += (x - y) * (x - y);
                }
                d
            })
            .sum::<f64>()
            .sqrt();
        assert!(drift < 1e-3, "adapter drift {drift}");
    }

    #[test]
    fn meta_il_requires_actions() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(7, "theta", 0);
        let theta = init_dt_params(&cfg, &mut rng);
        let hcfg = tiny_hyper(&cfg);
        let mut rng = rng_from(8, "phi", 0);
        let phi = init_hypernet_params(&hcfg, &mut rng);
        let layout = MazeLayout::medium();
        let task = task_by_id(0).unwrap();
        let mut demo = rollout_expert(&layout, task, 0.0, 4).unwrap();
        demo.actions.clear();
        let inputs = AdaptInputs {
            theta: &theta,
            phi: Some(&phi),
            hyper_cfg: Some(&hcfg),
            cfg: &cfg,
            layout: &layout,
            task,
            demo: &demo,
            d_h: 2,
        };
        let err = adapt_meta_il(&inputs, &TrainBudget { iterations: 1, ..TrainBudget::default() }, 1);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn lfo_respects_budget_and_freezes_bases() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(9, "theta", 0);
        let theta = init_dt_params(&cfg, &mut rng);
        let hcfg = tiny_hyper(&cfg);
        let mut rng = rng_from(10, "phi", 0);
        let phi = init_hypernet_params(&hcfg, &mut rng);
        let theta_before = theta.clone();
        let phi_before = phi.clone();
        let layout = MazeLayout::medium();
        let task = task_by_id(50).unwrap();
        let demo = rollout_expert(&layout, task, 0.0, 14).unwrap();
        let inputs = AdaptInputs {
            theta: &theta,
            phi: Some(&phi),
            hyper_cfg: Some(&hcfg),
            cfg: &cfg,
            layout: &layout,
            task,
            demo: &demo,
            d_h: 2,
        };
        let budget = TrainBudget {
            rollout_budget: 3,
            batch_per_task: 2,
            ..TrainBudget::default()
        };
        let out = adapt_meta_lfo(&inputs, &budget, 41).unwrap();
        assert_eq!(out.rollout_log.len(), 3);
        assert!(out.loss_history.iter().all(|l| l.is_finite()));
        assert_eq!(theta, theta_before);
        assert_eq!(phi, phi_before);
        assert_eq!(
            out.trainable_count,
            count_adaptation_params(&cfg, AdaptationKind::Adapter { d_h: 2 }).unwrap()
        );
        // Only adapter parameters are trainable in the outcome.
        assert!(out.trainable_names.iter().all(|n| n.starts_with("adapter.")));
        for (name, p) in out.params.iter() {
            if name.starts_with("dt.") {
                assert_eq!(Some(&p.tensor), theta_before.get(name), "{name} drifted");
            }
        }
    }

    #[test]
    fn baseline_trainable_counts_match_closed_forms() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(11, "theta", 0);
        let theta = init_dt_params(&cfg, &mut rng);
        let layout = MazeLayout::medium();
        let task = task_by_id(51).unwrap();
        let demo = rollout_expert(&layout, task, 0.0, 15).unwrap();
        let inputs = AdaptInputs {
            theta: &theta,
            phi: None,
            hyper_cfg: None,
            cfg: &cfg,
            layout: &layout,
            task,
            demo: &demo,
            d_h: 2,
        };
        let budget = TrainBudget {
            iterations: 1,
            batch_per_task: 2,
            ..TrainBudget::default()
        };
        for (mode, kind) in [
            (AdaptMode::HdtRand, AdaptationKind::Adapter { d_h: 2 }),
            (AdaptMode::FullDt, AdaptationKind::Full),
            (AdaptMode::Ia3, AdaptationKind::Ia3),
            (
                AdaptMode::Pdt,
                AdaptationKind::Prompt {
                    len: cfg.prompt_cap / 2,
                },
            ),
        ] {
            let out = run_baseline(mode, AdaptSetting::Il, &inputs, &budget, 51).unwrap();
            assert_eq!(
                out.trainable_count,
                count_adaptation_params(&cfg, kind).unwrap(),
                "{}",
                mode.as_str()
            );
        }
        // Full fine-tune trains 100% of the base model.
        let full = count_adaptation_params(&cfg, AdaptationKind::Full).unwrap();
        assert_eq!(full, theta.value_count());
    }

    #[test]
    fn ia3_with_no_updates_behaves_like_base_model() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(12, "theta", 0);
        let theta = init_dt_params(&cfg, &mut rng);
        let layout = MazeLayout::medium();
        let task = task_by_id(52).unwrap();
        let demo = rollout_expert(&layout, task, 0.0, 16).unwrap();
        let inputs = AdaptInputs {
            theta: &theta,
            phi: None,
            hyper_cfg: None,
            cfg: &cfg,
            layout: &layout,
            task,
            demo: &demo,
            d_h: 2,
        };
        let state = ModeState::init(AdaptMode::Ia3, &inputs, &TrainBudget::default(), 3).unwrap();
        let (adaptation, prompt) = state.policy_view().unwrap();
        assert!(prompt.is_none());
        let seg = demo.segment(0, cfg.context_len).unwrap();
        let plain =
            crate::model::predict_actions(&theta, &cfg, &seg, &AdaptationParams::None, None).unwrap();
        let adapted = crate::model::predict_actions(&theta, &cfg, &seg, &adaptation, None).unwrap();
        assert_eq!(plain, adapted);
    }

    #[test]
    fn pdt_updates_only_the_prompt() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(13, "theta", 0);
        let theta = init_dt_params(&cfg, &mut rng);
        let layout = MazeLayout::medium();
        let task = task_by_id(53).unwrap();
        let demo = rollout_expert(&layout, task, 0.0, 17).unwrap();
        let inputs = AdaptInputs {
            theta: &theta,
            phi: None,
            hyper_cfg: None,
            cfg: &cfg,
            layout: &layout,
            task,
            demo: &demo,
            d_h: 2,
        };
        let budget = TrainBudget {
            iterations: 3,
            batch_per_task: 2,
            lr_psi: 1e-2,
            ..TrainBudget::default()
        };
        let out = run_baseline(AdaptMode::Pdt, AdaptSetting::Il, &inputs, &budget, 61).unwrap();
        assert_eq!(out.trainable_names, vec!["prompt.data".to_string()]);
        // Prompt states moved; base model untouched.
        let before = prompt_from_demo(&demo, &cfg);
        let (_, after) = out.policy_view(&cfg).unwrap();
        let after = after.unwrap();
        assert_ne!(before.states, after.states);
        for (name, p) in out.params.iter() {
            if name.starts_with("dt.") {
                assert_eq!(Some(&p.tensor), theta.get(name));
            }
        }
    }
}
