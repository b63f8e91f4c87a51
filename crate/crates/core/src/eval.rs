//! Policy rollouts, success-rate metrics, and the data-efficiency statistic.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maze::{self, expert_action, MazeEnv, MazeLayout, TaskSpec, ACTION_DIM, OBS_DIM};
use crate::model::{select_action, AdaptationParams, DTConfig, PromptData, RolloutContext};
use crate::optim::{derive_seed, rng_from, ParamSet};
use crate::replay::Trajectory;

/// A rollable policy: either the scripted expert oracle or a decision
/// transformer with optional adaptation and prompt.
pub enum PolicySpec<'a> {
    Expert,
    Dt {
        params: &'a ParamSet,
        cfg: &'a DTConfig,
        adaptation: AdaptationParams,
        prompt: Option<PromptData>,
        /// Initial rewards-to-go target; decremented by received rewards and
        /// floored at zero during the episode.
        rtg_target: f64,
    },
}

enum LivePolicy<'a> {
    Expert,
    Dt {
        params: &'a ParamSet,
        cfg: &'a DTConfig,
        adaptation: &'a AdaptationParams,
        prompt: Option<&'a PromptData>,
        ctx: RolloutContext,
        rtg: f64,
        t: u32,
    },
}

impl<'a> LivePolicy<'a> {
    fn start(spec: &'a PolicySpec<'a>) -> LivePolicy<'a> {
        match spec {
            PolicySpec::Expert => LivePolicy::Expert,
            PolicySpec::Dt {
                params,
                cfg,
                adaptation,
                prompt,
                rtg_target,
            } => LivePolicy::Dt {
                params,
                cfg,
                adaptation,
                prompt: prompt.as_ref(),
                ctx: RolloutContext::new(cfg),
                rtg: *rtg_target,
                t: 0,
            },
        }
    }

    fn act(&mut self, layout: &MazeLayout, task: &TaskSpec, obs: &[f64; OBS_DIM]) -> Result<[f64; ACTION_DIM]> {
        match self {
            LivePolicy::Expert => expert_action(layout, obs, task),
            LivePolicy::Dt {
                params,
                cfg,
                adaptation,
                prompt,
                ctx,
                rtg,
                t,
            } => {
                ctx.push_state(obs.to_vec(), *rtg, *t);
                let a = select_action(params, cfg, ctx, adaptation, *prompt)?;
                Ok([a[0], a[1]])
            }
        }
    }

    /// Record the executed action (possibly an exploration action) and the
    /// received reward.
    fn record(&mut self, action: [f64; ACTION_DIM], reward: f64) {
        if let LivePolicy::Dt { ctx, rtg, t, .. } = self {
            ctx.set_last_action(action.to_vec());
            *rtg = (*rtg - reward).max(0.0);
            *t += 1;
        }
    }
}

/// Roll one full episode. With probability `epsilon` per step the policy
/// action is replaced by a uniform sample in [-1,1]^2. Returns the relabeled
/// trajectory and the number of replaced actions.
pub fn run_episode(
    layout: &MazeLayout,
    task: TaskSpec,
    spec: &PolicySpec,
    epsilon: f64,
    env_seed: u64,
    explore_rng: &mut impl Rng,
) -> Result<(Trajectory, usize)> {
    let mut env = MazeEnv::reset(layout, task, env_seed)?;
    let mut policy = LivePolicy::start(spec);
    let cap = maze::EPISODE_LEN as usize;
    let mut states = Vec::with_capacity(cap * OBS_DIM);
    let mut actions = Vec::with_capacity(cap * ACTION_DIM);
    let mut rewards = Vec::with_capacity(cap);
    let mut timesteps = Vec::with_capacity(cap);
    let mut replaced = 0usize;
    let mut t = 0u32;
    while !env.done() {
        let obs = env.observation();
        let mut action = policy.act(layout, &task, &obs)?;
        if epsilon > 0.0 && explore_rng.gen::<f64>() < epsilon {
            action = [
                explore_rng.gen_range(-1.0..=1.0),
                explore_rng.gen_range(-1.0..=1.0),
            ];
            replaced += 1;
        }
        let step = env.step(action)?;
        policy.record(action, step.reward);
        states.extend_from_slice(&obs);
        actions.extend_from_slice(&action);
        rewards.push(step.reward);
        timesteps.push(t);
        t += 1;
    }
    let traj = Trajectory::new(
        task.task_id,
        OBS_DIM,
        ACTION_DIM,
        states,
        actions,
        rewards,
        timesteps,
    )?;
    Ok((traj, replaced))
}

/// Per-task evaluation numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: u32,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Evaluation summary across tasks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub per_task: Vec<TaskMetrics>,
    pub mean_success_rate: f64,
    pub episodes_logged: usize,
    /// Number of parameters the evaluated adaptation trains; None for the
    /// expert oracle or unadapted models.
    pub trainable_count: Option<usize>,
}

/// Mean and std across seeds; std is None for single-seed records.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean: f64,
    pub std: Option<f64>,
    pub seeds: usize,
}

pub fn aggregate_over_seeds(values: &[f64]) -> SeedAggregate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let std = if n >= 2 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Some(var.sqrt())
    } else {
        None
    };
    SeedAggregate {
        mean,
        std,
        seeds: n,
    }
}

/// Number of worker threads for evaluation, from HYPERDT_EVAL_THREADS
/// (default 1). Results are independent of the thread count.
pub fn eval_threads() -> usize {
    std::env::var("HYPERDT_EVAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Greedy (epsilon = 0) evaluation over tasks; deterministic in `seed`.
/// Episodes are seeded per (task, episode), so any task-level parallelism
/// leaves the numbers bit-identical.
pub fn evaluate_policy(
    spec: &PolicySpec,
    layout: &MazeLayout,
    tasks: &[TaskSpec],
    episodes_per_task: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    let threads = eval_threads().min(tasks.len().max(1));
    let eval_task = |task: &TaskSpec| -> Result<TaskMetrics> {
        let mut successes = 0;
        let mut returns = 0.0;
        for ep in 0..episodes_per_task {
            let env_seed = derive_seed(seed, "eval_episode", (task.task_id as u64) << 20 | ep as u64);
            let mut rng = rng_from(seed, "eval_explore", (task.task_id as u64) << 20 | ep as u64);
            let (traj, _) = run_episode(layout, *task, spec, 0.0, env_seed, &mut rng)?;
            if maze::episode_success(&traj) {
                successes += 1;
            }
            returns += traj.total_return();
        }
        Ok(TaskMetrics {
            task_id: task.task_id,
            episodes: episodes_per_task,
            successes,
            success_rate: successes as f64 / episodes_per_task.max(1) as f64,
            mean_return: returns / episodes_per_task.max(1) as f64,
        })
    };

    let per_task: Vec<TaskMetrics> = if threads <= 1 {
        tasks.iter().map(eval_task).collect::<Result<_>>()?
    } else {
        let chunk = tasks.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|chunk_tasks| scope.spawn(move || chunk_tasks.iter().map(eval_task).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(tasks.len());
            for h in handles {
                all.extend(h.join().expect("eval worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };

    let mean = per_task.iter().map(|t| t.success_rate).sum::<f64>() / per_task.len().max(1) as f64;
    Ok(MetricsRecord {
        episodes_logged: per_task.iter().map(|t| t.episodes).sum(),
        mean_success_rate: mean,
        per_task,
        trainable_count: None,
    })
}

/// Per-episode adaptation log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub total_reward: f64,
    pub success: bool,
    pub replaced_actions: usize,
    pub steps: usize,
}

/// Full online-adaptation rollout log.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RolloutLog {
    pub episodes: Vec<EpisodeLog>,
    /// 1-based episode count at the first success.
    pub first_success: Option<usize>,
}

impl RolloutLog {
    pub fn push(&mut self, total_reward: f64, success: bool, replaced: usize, steps: usize) {
        let episode = self.episodes.len() + 1;
        self.episodes.push(EpisodeLog {
            episode,
            total_reward,
            success,
            replaced_actions: replaced,
            steps,
        });
        if success && self.first_success.is_none() {
            self.first_success = Some(episode);
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn success_count(&self) -> usize {
        self.episodes.iter().filter(|e| e.success).count()
    }
}

/// Rollouts-until-success statistic: mean of the two smallest first-success
/// episode counts across seeds; "x" when no seed ever succeeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DataEfficiency {
    Episodes(f64),
    NoSuccess,
}

impl fmt::Display for DataEfficiency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataEfficiency::Episodes(n) => write!(f, "{n}"),
            DataEfficiency::NoSuccess => write!(f, "x"),
        }
    }
}

impl Serialize for DataEfficiency {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DataEfficiency::Episodes(n) => s.serialize_f64(*n),
            DataEfficiency::NoSuccess => s.serialize_str("x"),
        }
    }
}

impl DataEfficiency {
    /// Treat "x" as worse than any finite count when ordering.
    pub fn not_worse_than(&self, other: &DataEfficiency) -> bool {
        match (self, other) {
            (DataEfficiency::Episodes(a), DataEfficiency::Episodes(b)) => a <= b,
            (DataEfficiency::Episodes(_), DataEfficiency::NoSuccess) => true,
            (DataEfficiency::NoSuccess, DataEfficiency::Episodes(_)) => false,
            (DataEfficiency::NoSuccess, DataEfficiency::NoSuccess) => true,
        }
    }
}

/// Combine per-seed rollout logs into the data-efficiency statistic.
/// Requires at least two seeds.
pub fn data_efficiency(logs: &[RolloutLog]) -> Result<DataEfficiency> {
    if logs.len() < 2 {
        return Err(Error::Precondition(
            "data efficiency needs rollout logs from at least 2 seeds".into(),
        ));
    }
    let mut firsts: Vec<usize> = logs.iter().filter_map(|l| l.first_success).collect();
    firsts.sort_unstable();
    match firsts.as_slice() {
        [] => Ok(DataEfficiency::NoSuccess),
        [only] => Ok(DataEfficiency::Episodes(*only as f64)),
        [a, b, ..] => Ok(DataEfficiency::Episodes((a + b) as f64 / 2.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{task_by_id, MazeLayout};

    #[test]
    fn expert_policy_scores_perfectly() {
        let layout = MazeLayout::medium();
        let tasks: Vec<TaskSpec> = [0, 25, 50].iter().map(|&i| task_by_id(i).unwrap()).collect();
        let record = evaluate_policy(&PolicySpec::Expert, &layout, &tasks, 3, 7).unwrap();
        assert_eq!(record.mean_success_rate, 1.0);
        assert_eq!(record.episodes_logged, 9);
    }

    #[test]
    fn evaluation_is_thread_count_invariant() {
        let layout = MazeLayout::medium();
        let tasks: Vec<TaskSpec> = [0, 1, 2, 3].iter().map(|&i| task_by_id(i).unwrap()).collect();
        let a = evaluate_policy(&PolicySpec::Expert, &layout, &tasks, 2, 3).unwrap();
        std::env::set_var("HYPERDT_EVAL_THREADS", "3");
        let b = evaluate_policy(&PolicySpec::Expert, &layout, &tasks, 2, 3).unwrap();
        std::env::remove_var("HYPERDT_EVAL_THREADS");
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn epsilon_one_replaces_almost_every_action() {
        let layout = MazeLayout::medium();
        let task = task_by_id(0).unwrap();
        let mut rng = crate::optim::rng_from(1, "explore", 0);
        let mut replaced = 0;
        let mut steps = 0;
        for ep in 0..9 {
            let (traj, r) = run_episode(&layout, task, &PolicySpec::Expert, 1.0, ep, &mut rng).unwrap();
            replaced += r;
            steps += traj.len();
        }
        let frac = replaced as f64 / steps as f64;
        assert!((0.98..=1.0).contains(&frac), "replacement fraction {frac}");
    }

    #[test]
    fn epsilon_binomial_fraction() {
        let layout = MazeLayout::medium();
        let task = task_by_id(0).unwrap();
        let mut rng = crate::optim::rng_from(2, "explore", 0);
        let mut replaced = 0;
        let mut steps = 0;
        // 84 episodes x 120 steps > 10,000 steps.
        for ep in 0..84 {
            let (traj, r) = run_episode(&layout, task, &PolicySpec::Expert, 0.2, ep, &mut rng).unwrap();
            replaced += r;
            steps += traj.len();
        }
        assert!(steps >= 10_000);
        let frac = replaced as f64 / steps as f64;
        assert!((frac - 0.2).abs() <= 0.02, "replacement fraction {frac}");
    }

    #[test]
    fn data_efficiency_examples() {
        let log_with = |first: Option<usize>| RolloutLog {
            episodes: Vec::new(),
            first_success: first,
        };
        let logs = [log_with(Some(20)), log_with(Some(30)), log_with(Some(80))];
        assert_eq!(
            data_efficiency(&logs).unwrap(),
            DataEfficiency::Episodes(25.0)
        );
        let logs = [log_with(Some(20)), log_with(Some(20))];
        assert_eq!(
            data_efficiency(&logs).unwrap(),
            DataEfficiency::Episodes(20.0)
        );
        let logs = [log_with(None), log_with(None)];
        assert_eq!(data_efficiency(&logs).unwrap(), DataEfficiency::NoSuccess);
        assert_eq!(data_efficiency(&logs).unwrap().to_string(), "x");
        assert!(data_efficiency(&logs[..1]).is_err());
    }

    #[test]
    fn seed_aggregate_flags_single_seed() {
        let single = aggregate_over_seeds(&[0.7]);
        assert!(single.std.is_none());
        let multi = aggregate_over_seeds(&[0.4, 0.8]);
        assert!((multi.mean - 0.6).abs() < 1e-12);
        assert!(multi.std.unwrap() > 0.0);
    }

    #[test]
    fn rollout_log_tracks_first_success() {
        let mut log = RolloutLog::default();
        log.push(0.0, false, 3, 120);
        log.push(7.0, true, 2, 120);
        log.push(9.0, true, 1, 120);
        assert_eq!(log.first_success, Some(2));
        assert_eq!(log.success_count(), 2);
    }
}
