//! Command-line interface: data generation, pre-training, hyper-network
//! training, adaptation, evaluation, projection export, and gradient checks.
//!
//! Every run writes a `config_echo.json` with all resolved settings next to
//! its outputs; re-running from the echo reproduces results bit-exactly.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hyperdt_core::eval::{evaluate_policy, PolicySpec};
use hyperdt_core::hypernet::{generate_adapters, HyperNetConfig, HyperNetVariant};
use hyperdt_core::maze::{self, MazeLayout, TaskSpec};
use hyperdt_core::model::AdaptationParams;
use hyperdt_core::optim::derive_seed;
use hyperdt_core::pca;
use hyperdt_core::plot::{self, Series};
use hyperdt_core::storage::{self, CheckpointMeta};
use hyperdt_core::train::{self, AdaptInputs, AdaptMode, AdaptSetting, TaskDataset, TrainBudget};
use hyperdt_core::{DTConfig, Error};

#[derive(Parser)]
#[command(
    name = "hyperdt",
    about = "Decision transformer with hyper-network-initialized adapters on a pointmaze suite",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate offline datasets and expert demonstrations.
    GenData(GenDataArgs),
    /// Pre-train the base decision transformer across tasks.
    Pretrain(PretrainArgs),
    /// Train the adapter-generating hyper-network against a frozen base.
    TrainHypernet(TrainHypernetArgs),
    /// Adapt to one task with a chosen mode and setting.
    Adapt(AdaptArgs),
    /// Evaluate a policy (expert oracle, base model, or adapted model).
    Eval(EvalArgs),
    /// Export a 2-D PCA projection of generated adapter parameters.
    ExportProj(ExportProjArgs),
    /// Finite-difference checks for the autodiff primitives.
    GradCheck(GradCheckArgs),
}

/// Model dimension flags shared by training commands.
#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    d_x: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Context length K.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rtg_scale: Option<f64>,
    #[arg(long)]
    prompt_cap: Option<usize>,
}

/// Desk-scale defaults sized for the pointmaze suite.
fn desk_model() -> DTConfig {
    DTConfig {
        d_x: 64,
        n_blocks: 2,
        n_heads: 2,
        context_len: 6,
        d_s: maze::OBS_DIM,
        d_a: maze::ACTION_DIM,
        max_ep_len: maze::EPISODE_LEN as usize + 10,
        rtg_scale: 10.0,
        prompt_cap: 20,
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut DTConfig) {
        if let Some(v) = self.d_x {
            cfg.d_x = v;
        }
        if let Some(v) = self.blocks {
            cfg.n_blocks = v;
        }
        if let Some(v) = self.heads {
            cfg.n_heads = v;
        }
        if let Some(v) = self.k {
            cfg.context_len = v;
        }
        if let Some(v) = self.rtg_scale {
            cfg.rtg_scale = v;
        }
        if let Some(v) = self.prompt_cap {
            cfg.prompt_cap = v;
        }
    }
}

/// Budget override flags shared by training/adaptation commands.
#[derive(Args, Clone)]
struct BudgetArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    rollout_budget: Option<usize>,
    #[arg(long)]
    episodes_per_update: Option<usize>,
    #[arg(long)]
    grad_steps_per_update: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Learning rate applied to whichever parameter set the command trains.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

impl BudgetArgs {
    fn apply(&self, b: &mut TrainBudget) {
        if let Some(v) = self.iterations {
            b.iterations = v;
        }
        if let Some(v) = self.batch {
            b.batch_per_task = v;
        }
        if let Some(v) = self.rollout_budget {
            b.rollout_budget = v;
        }
        if let Some(v) = self.episodes_per_update {
            b.episodes_per_update = v;
        }
        if let Some(v) = self.grad_steps_per_update {
            b.grad_steps_per_update = v;
        }
        if let Some(v) = self.epsilon {
            b.epsilon = v;
        }
        if let Some(v) = self.lr {
            b.lr_theta = v;
            b.lr_phi = v;
            b.lr_psi = v;
        }
        if let Some(v) = self.weight_decay {
            b.weight_decay = v;
        }
    }
}

fn parse_tasks(spec: &str) -> Result<Vec<TaskSpec>, Error> {
    match spec {
        "train" => Ok(maze::train_tasks()),
        "test" => Ok(maze::test_tasks()),
        "all" => Ok(maze::all_tasks()),
        list => list
            .split(',')
            .map(|part| {
                let id: u32 = part
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad task id {part:?}")))?;
                maze::task_by_id(id)
            })
            .collect(),
    }
}

fn load_layout(path: &Option<PathBuf>) -> Result<MazeLayout, Error> {
    match path {
        Some(p) => MazeLayout::load(p),
        None => Ok(MazeLayout::medium()),
    }
}

fn load_datasets(data_dir: &Path, tasks: &[TaskSpec]) -> Result<Vec<TaskDataset>, Error> {
    tasks
        .iter()
        .map(|&task| {
            Ok(TaskDataset {
                task,
                trajectories: maze::load_task_dataset(data_dir, task.task_id)?,
                demos: maze::load_demos(data_dir, task.task_id)?,
            })
        })
        .collect()
}

fn echo_config<T: Serialize>(out_dir: &Path, config: &T) -> Result<(), Error> {
    storage::save_json(&out_dir.join("config_echo.json"), config)
}

fn maybe_from_config<T: for<'de> Deserialize<'de>>(
    path: &Option<PathBuf>,
) -> Result<Option<T>, Error> {
    match path {
        Some(p) => Ok(Some(storage::load_json(p)?)),
        None => Ok(None),
    }
}

fn dt_config_from_meta(meta: &CheckpointMeta) -> Result<DTConfig, Error> {
    let model = meta
        .config
        .get("model")
        .cloned()
        .ok_or_else(|| Error::Data("checkpoint lacks a model config".into()))?;
    serde_json::from_value(model).map_err(|e| Error::Data(format!("bad model config: {e}")))
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// train | test | all | comma-separated ids
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    episodes_per_task: Option<usize>,
    /// Gaussian action-noise std for dataset episodes (the canonical demo is
    /// always noise-free).
    #[arg(long)]
    noise: Option<f64>,
    /// Demonstrations per task (alternates carry light noise).
    #[arg(long)]
    demos_per_task: Option<usize>,
    /// Custom maze layout file (ASCII, '#' wall, '.' open).
    #[arg(long)]
    layout: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct GenDataConfig {
    command: String,
    out_dir: PathBuf,
    seed: u64,
    tasks: String,
    episodes_per_task: usize,
    noise: f64,
    #[serde(default = "one")]
    demos_per_task: usize,
    layout: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn run_gen_data(args: GenDataArgs) -> Result<(), Error> {
    let mut cfg = maybe_from_config::<GenDataConfig>(&args.config)?.unwrap_or(GenDataConfig {
        command: "gen-data".into(),
        out_dir: PathBuf::from("runs/data"),
        seed: 0,
        tasks: "all".into(),
        episodes_per_task: 100,
        noise: 0.1,
        demos_per_task: 1,
        layout: None,
    });
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.tasks {
        cfg.tasks = v;
    }
    if let Some(v) = args.episodes_per_task {
        cfg.episodes_per_task = v;
    }
    if let Some(v) = args.noise {
        cfg.noise = v;
    }
    if let Some(v) = args.demos_per_task {
        cfg.demos_per_task = v;
    }
    if let Some(v) = args.layout {
        cfg.layout = Some(v);
    }
    let layout = load_layout(&cfg.layout)?;
    let tasks = parse_tasks(&cfg.tasks)?;
    let summary = maze::generate_dataset_with_demos(
        &layout,
        &tasks,
        cfg.episodes_per_task,
        cfg.noise,
        cfg.demos_per_task,
        cfg.seed,
        &cfg.out_dir,
    )?;
    storage::save_json(&cfg.out_dir.join("summary.json"), &summary)?;
    echo_config(&cfg.out_dir, &cfg)?;
    println!(
        "wrote {} episodes and {} demos under {} (expert successes {}/{})",
        summary.episodes_written,
        summary.demos_written,
        cfg.out_dir.display(),
        summary.expert_successes,
        tasks.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// train | comma-separated ids
    #[arg(long)]
    tasks: Option<String>,
    /// Condition every batch on a demonstration prefix (PDT-style base).
    #[arg(long)]
    prompted: bool,
    /// Also write an SVG loss chart.
    #[arg(long)]
    svg: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Serialize, Deserialize)]
struct PretrainConfig {
    command: String,
    data_dir: PathBuf,
    out_dir: PathBuf,
    seed: u64,
    tasks: String,
    prompted: bool,
    model: DTConfig,
    budget: TrainBudget,
}

fn run_pretrain(args: PretrainArgs) -> Result<(), Error> {
    let mut cfg = maybe_from_config::<PretrainConfig>(&args.config)?.unwrap_or(PretrainConfig {
        command: "pretrain".into(),
        data_dir: PathBuf::from("runs/data"),
        out_dir: PathBuf::from("runs/pretrain"),
        seed: 0,
        tasks: "train".into(),
        prompted: false,
        model: desk_model(),
        budget: TrainBudget::desk(),
    });
    if let Some(v) = args.data_dir {
        cfg.data_dir = v;
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.tasks {
        cfg.tasks = v;
    }
    if args.prompted {
        cfg.prompted = true;
    }
    args.model.apply(&mut cfg.model);
    args.budget.apply(&mut cfg.budget);

    let tasks = parse_tasks(&cfg.tasks)?;
    let datasets = load_datasets(&cfg.data_dir, &tasks)?;
    let started = Instant::now();
    let out = train::pretrain_dt(&cfg.model, &datasets, &cfg.budget, cfg.seed, cfg.prompted)?;
    let meta = CheckpointMeta {
        config: serde_json::to_value(&cfg).map_err(|e| Error::Data(e.to_string()))?,
        seed: cfg.seed,
        iteration: out.optimizer_steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    storage::save_checkpoint(&cfg.out_dir.join("dt.ckpt"), &out.params, &meta)?;
    plot::write_series_csv(
        &cfg.out_dir.join("loss.csv"),
        &[Series {
            label: "train_loss",
            values: &out.loss_history,
        }],
    )?;
    if args.svg {
        plot::write_line_chart(
            &cfg.out_dir.join("loss.svg"),
            "pre-training loss",
            "mse",
            &[Series {
                label: "train_loss",
                values: &out.loss_history,
            }],
        )?;
    }
    echo_config(&cfg.out_dir, &cfg)?;
    println!(
        "pretrained {} params in {:.1}s; final loss {:.5} -> {}",
        out.params.value_count(),
        started.elapsed().as_secs_f64(),
        out.loss_history.last().copied().unwrap_or(f64::NAN),
        cfg.out_dir.join("dt.ckpt").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-hypernet

#[derive(Args)]
struct TrainHypernetArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Pre-trained base checkpoint.
    #[arg(long)]
    dt: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tasks: Option<String>,
    /// adapter | ia3
    #[arg(long)]
    variant: Option<String>,
    /// Adapter bottleneck width (adapter variant).
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    d_e: Option<usize>,
    #[arg(long)]
    d_z: Option<usize>,
    #[arg(long)]
    svg: bool,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Serialize, Deserialize)]
struct TrainHypernetConfig {
    command: String,
    data_dir: PathBuf,
    dt: PathBuf,
    out_dir: PathBuf,
    seed: u64,
    tasks: String,
    hyper: HyperNetConfig,
    budget: TrainBudget,
}

fn run_train_hypernet(args: TrainHypernetArgs) -> Result<(), Error> {
    let base = maybe_from_config::<TrainHypernetConfig>(&args.config)?;
    let dt_path = args
        .dt
        .clone()
        .or_else(|| base.as_ref().map(|c| c.dt.clone()))
        .unwrap_or_else(|| PathBuf::from("runs/pretrain/dt.ckpt"));
    let (theta, theta_meta) = storage::load_checkpoint(&dt_path)?;
    let model = dt_config_from_meta(&theta_meta)?;
    let mut cfg = base.unwrap_or_else(|| {
        let mut hyper = HyperNetConfig::for_target(&model, HyperNetVariant::Adapter { d_h: 8 });
        hyper.d_e = 32;
        hyper.d_z = 32;
        TrainHypernetConfig {
            command: "train-hypernet".into(),
            data_dir: PathBuf::from("runs/data"),
            dt: dt_path.clone(),
            out_dir: PathBuf::from("runs/hypernet"),
            seed: 0,
            tasks: "train".into(),
            hyper,
            budget: TrainBudget::desk(),
        }
    });
    cfg.dt = dt_path;
    if let Some(v) = args.data_dir {
        cfg.data_dir = v;
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.tasks {
        cfg.tasks = v;
    }
    if let Some(v) = &args.variant {
        cfg.hyper.variant = match v.as_str() {
            "adapter" => HyperNetVariant::Adapter {
                d_h: args.d_h.unwrap_or(8),
            },
            "ia3" => HyperNetVariant::Ia3,
            other => return Err(Error::Config(format!("unknown variant {other}"))),
        };
    } else if let Some(d_h) = args.d_h {
        cfg.hyper.variant = HyperNetVariant::Adapter { d_h };
    }
    if let Some(v) = args.d_e {
        cfg.hyper.d_e = v;
    }
    if let Some(v) = args.d_z {
        cfg.hyper.d_z = v;
    }
    args.budget.apply(&mut cfg.budget);
    // Head shapes must target the loaded model.
    cfg.hyper.d_x = model.d_x;
    cfg.hyper.n_blocks = model.n_blocks;
    cfg.hyper.d_s = model.d_s;
    cfg.hyper.rtg_scale = model.rtg_scale;
    cfg.hyper.max_ep_len = model.max_ep_len;

    let tasks = parse_tasks(&cfg.tasks)?;
    let datasets = load_datasets(&cfg.data_dir, &tasks)?;
    let started = Instant::now();
    let out = train::train_hypernet(&theta, &cfg.hyper, &model, &datasets, &cfg.budget, cfg.seed)?;
    let meta = CheckpointMeta {
        config: serde_json::json!({
            "command": "train-hypernet",
            "hyper": cfg.hyper,
            "model": model,
            "budget": cfg.budget,
            "dt": cfg.dt,
        }),
        seed: cfg.seed,
        iteration: out.optimizer_steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    storage::save_checkpoint(&cfg.out_dir.join("hypernet.ckpt"), &out.params, &meta)?;
    plot::write_series_csv(
        &cfg.out_dir.join("loss.csv"),
        &[Series {
            label: "train_loss",
            values: &out.loss_history,
        }],
    )?;
    if args.svg {
        plot::write_line_chart(
            &cfg.out_dir.join("loss.svg"),
            "hyper-network training loss",
            "mse",
            &[Series {
                label: "train_loss",
                values: &out.loss_history,
            }],
        )?;
    }
    echo_config(&cfg.out_dir, &cfg)?;
    println!(
        "trained hyper-network ({} params) in {:.1}s; final loss {:.5}",
        out.params.value_count(),
        started.elapsed().as_secs_f64(),
        out.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// adapt

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// hdt | hdt-rand | full-dt | pdt | ia3
    #[arg(long)]
    mode: Option<String>,
    /// il | lfo
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    task: Option<u32>,
    #[arg(long)]
    dt: Option<PathBuf>,
    #[arg(long)]
    hypernet: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Adapter bottleneck width for hdt-rand.
    #[arg(long)]
    d_h: Option<usize>,
    /// Post-adaptation evaluation episodes (0 disables).
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long)]
    svg: bool,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Serialize, Deserialize)]
struct AdaptConfig {
    command: String,
    mode: AdaptMode,
    setting: AdaptSetting,
    task: u32,
    dt: PathBuf,
    hypernet: Option<PathBuf>,
    data_dir: PathBuf,
    out_dir: PathBuf,
    seed: u64,
    d_h: usize,
    eval_episodes: usize,
    layout: Option<PathBuf>,
    budget: TrainBudget,
}

fn run_adapt(args: AdaptArgs) -> Result<(), Error> {
    let mut cfg = maybe_from_config::<AdaptConfig>(&args.config)?.unwrap_or(AdaptConfig {
        command: "adapt".into(),
        mode: AdaptMode::Hdt,
        setting: AdaptSetting::Lfo,
        task: 50,
        dt: PathBuf::from("runs/pretrain/dt.ckpt"),
        hypernet: None,
        data_dir: PathBuf::from("runs/data"),
        out_dir: PathBuf::from("runs/adapt"),
        seed: 0,
        d_h: 8,
        eval_episodes: 10,
        layout: None,
        budget: TrainBudget {
            iterations: 200,
            ..TrainBudget::desk()
        },
    });
    if let Some(v) = &args.mode {
        cfg.mode = AdaptMode::parse(v)?;
    }
    if let Some(v) = &args.setting {
        cfg.setting = AdaptSetting::parse(v)?;
    }
    if let Some(v) = args.task {
        cfg.task = v;
    }
    if let Some(v) = args.dt {
        cfg.dt = v;
    }
    if let Some(v) = args.hypernet {
        cfg.hypernet = Some(v);
    }
    if let Some(v) = args.data_dir {
        cfg.data_dir = v;
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.d_h {
        cfg.d_h = v;
    }
    if let Some(v) = args.eval_episodes {
        cfg.eval_episodes = v;
    }
    if let Some(v) = args.layout {
        cfg.layout = Some(v);
    }
    args.budget.apply(&mut cfg.budget);

    let layout = load_layout(&cfg.layout)?;
    let (theta, theta_meta) = storage::load_checkpoint(&cfg.dt)?;
    let model = dt_config_from_meta(&theta_meta)?;
    let task = maze::task_by_id(cfg.task)?;
    let demo = maze::load_demo(&cfg.data_dir, cfg.task)?;
    let hyper = match &cfg.hypernet {
        Some(p) => {
            let (phi, meta) = storage::load_checkpoint(p)?;
            let hcfg: HyperNetConfig = serde_json::from_value(
                meta.config
                    .get("hyper")
                    .cloned()
                    .ok_or_else(|| Error::Data("hypernet checkpoint lacks its config".into()))?,
            )
            .map_err(|e| Error::Data(format!("bad hyper config: {e}")))?;
            Some((phi, hcfg))
        }
        None => None,
    };
    let inputs = AdaptInputs {
        theta: &theta,
        phi: hyper.as_ref().map(|(p, _)| p),
        hyper_cfg: hyper.as_ref().map(|(_, c)| c),
        cfg: &model,
        layout: &layout,
        task,
        demo: &demo,
        d_h: cfg.d_h,
    };
    let started = Instant::now();
    let outcome = train::run_baseline(cfg.mode, cfg.setting, &inputs, &cfg.budget, cfg.seed)?;
    let meta = CheckpointMeta {
        config: serde_json::json!({
            "command": "adapt",
            "mode": cfg.mode,
            "setting": cfg.setting,
            "task": cfg.task,
            "model": model,
            "budget": cfg.budget,
            "rtg_target": demo.total_return(),
            "trainable_count": outcome.trainable_count,
        }),
        seed: cfg.seed,
        iteration: outcome.loss_history.len() as u64,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    storage::save_checkpoint(&cfg.out_dir.join("adapted.ckpt"), &outcome.params, &meta)?;
    storage::save_json(&cfg.out_dir.join("rollout_log.json"), &outcome.rollout_log)?;
    plot::write_series_csv(
        &cfg.out_dir.join("loss.csv"),
        &[Series {
            label: "adapt_loss",
            values: &outcome.loss_history,
        }],
    )?;
    if args.svg && !outcome.loss_history.is_empty() {
        plot::write_line_chart(
            &cfg.out_dir.join("loss.svg"),
            "adaptation loss",
            "mse",
            &[Series {
                label: "adapt_loss",
                values: &outcome.loss_history,
            }],
        )?;
    }

    let mut eval_summary = None;
    if cfg.eval_episodes > 0 {
        let (adaptation, prompt) = outcome.policy_view(&model)?;
        let spec = PolicySpec::Dt {
            params: &outcome.params,
            cfg: &model,
            adaptation,
            prompt,
            rtg_target: demo.total_return(),
        };
        let mut record = evaluate_policy(&spec, &layout, &[task], cfg.eval_episodes, cfg.seed)?;
        record.trainable_count = Some(outcome.trainable_count);
        storage::save_json(&cfg.out_dir.join("metrics.json"), &record)?;
        eval_summary = Some(record.mean_success_rate);
    }
    echo_config(&cfg.out_dir, &cfg)?;
    println!(
        "adapted mode={} setting={} task={} trainable={} in {:.1}s{}{}",
        cfg.mode.as_str(),
        cfg.setting.as_str(),
        cfg.task,
        outcome.trainable_count,
        started.elapsed().as_secs_f64(),
        outcome
            .rollout_log
            .first_success
            .map(|e| format!("; first success at episode {e}"))
            .unwrap_or_default(),
        eval_summary
            .map(|s| format!("; eval success rate {s:.2}"))
            .unwrap_or_default()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate the scripted expert oracle instead of a model.
    #[arg(long)]
    expert: bool,
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    dt: Option<PathBuf>,
    /// Adapted checkpoint produced by `adapt`.
    #[arg(long)]
    adapted: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    rtg_target: Option<f64>,
    #[arg(long)]
    layout: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct EvalConfig {
    command: String,
    expert: bool,
    tasks: String,
    dt: Option<PathBuf>,
    adapted: Option<PathBuf>,
    episodes: usize,
    seed: u64,
    out_dir: PathBuf,
    rtg_target: Option<f64>,
    layout: Option<PathBuf>,
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let mut cfg = maybe_from_config::<EvalConfig>(&args.config)?.unwrap_or(EvalConfig {
        command: "eval".into(),
        expert: false,
        tasks: "test".into(),
        dt: None,
        adapted: None,
        episodes: 10,
        seed: 0,
        out_dir: PathBuf::from("runs/eval"),
        rtg_target: None,
        layout: None,
    });
    if args.expert {
        cfg.expert = true;
    }
    if let Some(v) = args.tasks {
        cfg.tasks = v;
    }
    if let Some(v) = args.dt {
        cfg.dt = Some(v);
    }
    if let Some(v) = args.adapted {
        cfg.adapted = Some(v);
    }
    if let Some(v) = args.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = args.rtg_target {
        cfg.rtg_target = Some(v);
    }
    if let Some(v) = args.layout {
        cfg.layout = Some(v);
    }

    let layout = load_layout(&cfg.layout)?;
    let tasks = parse_tasks(&cfg.tasks)?;
    let record = if cfg.expert {
        evaluate_policy(&PolicySpec::Expert, &layout, &tasks, cfg.episodes, cfg.seed)?
    } else if let Some(adapted_path) = &cfg.adapted {
        let (params, meta) = storage::load_checkpoint(adapted_path)?;
        let model = dt_config_from_meta(&meta)?;
        let mode: AdaptMode = serde_json::from_value(
            meta.config
                .get("mode")
                .cloned()
                .ok_or_else(|| Error::Data("adapted checkpoint lacks its mode".into()))?,
        )
        .map_err(|e| Error::Data(format!("bad mode: {e}")))?;
        let rtg_target = cfg
            .rtg_target
            .or_else(|| meta.config.get("rtg_target").and_then(serde_json::Value::as_f64))
            .unwrap_or(90.0);
        let (adaptation, prompt) = train::policy_view_for(mode, &params, &model)?;
        let spec = PolicySpec::Dt {
            params: &params,
            cfg: &model,
            adaptation,
            prompt,
            rtg_target,
        };
        evaluate_policy(&spec, &layout, &tasks, cfg.episodes, cfg.seed)?
    } else if let Some(dt_path) = &cfg.dt {
        let (theta, meta) = storage::load_checkpoint(dt_path)?;
        let model = dt_config_from_meta(&meta)?;
        let spec = PolicySpec::Dt {
            params: &theta,
            cfg: &model,
            adaptation: AdaptationParams::None,
            prompt: None,
            rtg_target: cfg.rtg_target.unwrap_or(90.0),
        };
        evaluate_policy(&spec, &layout, &tasks, cfg.episodes, cfg.seed)?
    } else {
        return Err(Error::Config(
            "eval needs --expert, --adapted <ckpt>, or --dt <ckpt>".into(),
        ));
    };
    storage::save_json(&cfg.out_dir.join("metrics.json"), &record)?;
    echo_config(&cfg.out_dir, &cfg)?;
    println!(
        "evaluated {} episodes over {} tasks: mean success rate {:.3}",
        record.episodes_logged,
        record.per_task.len(),
        record.mean_success_rate
    );
    for t in &record.per_task {
        println!(
            "  task {:>2}: success {:.2} ({}/{})",
            t.task_id, t.success_rate, t.successes, t.episodes
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export-proj

#[derive(Args)]
struct ExportProjArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hypernet: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<String>,
    /// Demo samples per task fed to the hyper-network (sample 0 is the
    /// noise-free expert, the rest add action noise 0.05).
    #[arg(long)]
    samples_per_task: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layout: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct ExportProjConfig {
    command: String,
    hypernet: PathBuf,
    tasks: String,
    samples_per_task: usize,
    out: PathBuf,
    seed: u64,
    layout: Option<PathBuf>,
}

fn run_export_proj(args: ExportProjArgs) -> Result<(), Error> {
    let mut cfg =
        maybe_from_config::<ExportProjConfig>(&args.config)?.unwrap_or(ExportProjConfig {
            command: "export-proj".into(),
            hypernet: PathBuf::from("runs/hypernet/hypernet.ckpt"),
            tasks: "train".into(),
            samples_per_task: 10,
            out: PathBuf::from("runs/projection.csv"),
            seed: 0,
            layout: None,
        });
    if let Some(v) = args.hypernet {
        cfg.hypernet = v;
    }
    if let Some(v) = args.tasks {
        cfg.tasks = v;
    }
    if let Some(v) = args.samples_per_task {
        cfg.samples_per_task = v;
    }
    if let Some(v) = args.out {
        cfg.out = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.layout {
        cfg.layout = Some(v);
    }

    let layout = load_layout(&cfg.layout)?;
    let (phi, meta) = storage::load_checkpoint(&cfg.hypernet)?;
    let hcfg: HyperNetConfig = serde_json::from_value(
        meta.config
            .get("hyper")
            .cloned()
            .ok_or_else(|| Error::Data("hypernet checkpoint lacks its config".into()))?,
    )
    .map_err(|e| Error::Data(format!("bad hyper config: {e}")))?;
    let model = dt_config_from_meta(&meta)?;
    let tasks = parse_tasks(&cfg.tasks)?;
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for task in &tasks {
        for sample in 0..cfg.samples_per_task {
            let rollout_seed =
                derive_seed(cfg.seed, "proj_demo", (task.task_id as u64) << 16 | sample as u64);
            let noise = if sample == 0 { 0.0 } else { 0.05 };
            let demo_traj = maze::rollout_expert(&layout, *task, noise, rollout_seed)?;
            let demo = demo_traj.to_demonstration(false)?;
            let psi = generate_adapters(&phi, &hcfg, &model, &demo)?;
            vectors.push(pca::flatten_adapters(&psi));
            labels.push(task.task_id);
        }
    }
    let projection = pca::project_2d(&labels, &vectors)?;
    pca::export_projection(&cfg.out, &projection)?;
    if let Some(dir) = cfg.out.parent() {
        if !dir.as_os_str().is_empty() {
            echo_config(dir, &cfg)?;
        }
    }
    println!(
        "projected {} adapter vectors ({} tasks) -> {} (explained variance {:.3}/{:.3})",
        vectors.len(),
        tasks.len(),
        cfg.out.display(),
        projection.explained_variance[0],
        projection.explained_variance[1]
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// grad-check

#[derive(Args)]
struct GradCheckArgs {
    /// all | one primitive name
    #[arg(long, default_value = "all")]
    primitive: String,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_grad_check(args: GradCheckArgs) -> Result<(), Error> {
    let prims: Vec<&str> = if args.primitive == "all" {
        hyperdt_core::optim::CHECKED_PRIMITIVES.to_vec()
    } else {
        vec![args.primitive.as_str()]
    };
    let mut worst: f64 = 0.0;
    for prim in prims {
        let point = hyperdt_core::optim::grad_check_point(prim, args.seed)?;
        let err = hyperdt_core::grad_check(prim, &point, args.step)?;
        println!("{prim:>14}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    if worst > args.tol {
        return Err(Error::NonFinite {
            op: format!(
                "gradient check exceeded tolerance: {worst:.3e} > {:.1e}",
                args.tol
            ),
        });
    }
    println!("all checked primitives within {:.1e}", args.tol);
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Pretrain(args) => run_pretrain(args),
        Command::TrainHypernet(args) => run_train_hypernet(args),
        Command::Adapt(args) => run_adapt(args),
        Command::Eval(args) => run_eval(args),
        Command::ExportProj(args) => run_export_proj(args),
        Command::GradCheck(args) => run_grad_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
