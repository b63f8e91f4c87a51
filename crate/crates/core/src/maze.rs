//! Pointmaze task suite: an 8x8 medium-maze layout, 50 training and 10
//! testing (start, goal) tasks, point-mass dynamics with wall collision, a
//! scripted BFS-waypoint expert, and offline dataset generation.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::derive_seed;
use crate::replay::Trajectory;
use crate::storage::save_trajectory;

/// Steps per episode.
pub const EPISODE_LEN: u32 = 120;
/// Reward is 1 within this distance of the goal center.
pub const GOAL_RADIUS: f64 = 0.5;
/// An episode succeeds when its accumulated sparse reward exceeds this.
pub const SUCCESS_THRESHOLD: f64 = 5.0;
/// Observation layout: (x, y, vx, vy). The goal is never observable.
pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

const DEFAULT_LAYOUT: &str = include_str!("../assets/medium_maze.txt");

/// Boolean wall grid with unit cells. `#` is a wall, `.` open.
#[derive(Clone, Debug, PartialEq)]
pub struct MazeLayout {
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
}

impl MazeLayout {
    pub fn from_ascii(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::Data("empty maze layout".into()));
        }
        let cols = lines[0].chars().count();
        let rows = lines.len();
        let mut walls = Vec::with_capacity(rows * cols);
        for line in &lines {
            if line.chars().count() != cols {
                return Err(Error::Data("ragged maze layout rows".into()));
            }
            for ch in line.chars() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    other => {
                        return Err(Error::Data(format!("bad maze character {other:?}")));
                    }
                }
            }
        }
        let layout = MazeLayout { rows, cols, walls };
        layout.validate()?;
        Ok(layout)
    }

    /// The default checked-in medium-maze layout.
    pub fn medium() -> Self {
        Self::from_ascii(DEFAULT_LAYOUT).expect("embedded layout is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ascii(&text)
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity((self.cols + 1) * self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(if self.is_wall(r, c) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    fn validate(&self) -> Result<()> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                let border = r == 0 || c == 0 || r == self.rows - 1 || c == self.cols - 1;
                if border && !self.is_wall(r, c) {
                    return Err(Error::Data(format!("border cell ({r},{c}) must be a wall")));
                }
            }
        }
        // Open region must be connected.
        let open: Vec<(usize, usize)> = (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.is_wall(r, c))
            .collect();
        let Some(&first) = open.first() else {
            return Err(Error::Data("maze has no open cells".into()));
        };
        let mut seen = vec![false; self.rows * self.cols];
        let mut queue = VecDeque::from([first]);
        seen[first.0 * self.cols + first.1] = true;
        let mut count = 0;
        while let Some((r, c)) = queue.pop_front() {
            count += 1;
            for (nr, nc) in self.neighbors(r, c) {
                if !self.is_wall(nr, nc) && !seen[nr * self.cols + nc] {
                    seen[nr * self.cols + nc] = true;
                    queue.push_back((nr, nc));
                }
            }
        }
        if count != open.len() {
            return Err(Error::Data("maze open region is not connected".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_wall(&self, r: usize, c: usize) -> bool {
        r >= self.rows || c >= self.cols || self.walls[r * self.cols + c]
    }

    /// Wall test on continuous coordinates (x along rows, y along columns).
    pub fn blocked(&self, x: f64, y: f64) -> bool {
        if x < 0.0 || y < 0.0 {
            return true;
        }
        self.is_wall(x.floor() as usize, y.floor() as usize)
    }

    fn neighbors(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        const DELTAS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        DELTAS.iter().filter_map(move |&(dr, dc)| {
            let nr = r.checked_add_signed(dr)?;
            let nc = c.checked_add_signed(dc)?;
            (nr < self.rows && nc < self.cols).then_some((nr, nc))
        })
    }

    /// BFS shortest path between open cells, start and goal inclusive.
    pub fn shortest_path(
        &self,
        start: (usize, usize),
        goal: (usize, usize),
    ) -> Result<Vec<(usize, usize)>> {
        if self.is_wall(start.0, start.1) || self.is_wall(goal.0, goal.1) {
            return Err(Error::Data(format!(
                "path endpoints must be open cells: {start:?} -> {goal:?}"
            )));
        }
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.rows * self.cols];
        let mut seen = vec![false; self.rows * self.cols];
        let mut queue = VecDeque::from([start]);
        seen[start.0 * self.cols + start.1] = true;
        while let Some((r, c)) = queue.pop_front() {
            if (r, c) == goal {
                let mut path = vec![goal];
                let mut cur = goal;
                while cur != start {
                    cur = prev[cur.0 * self.cols + cur.1].expect("bfs chain");
                    path.push(cur);
                }
                path.reverse();
                return Ok(path);
            }
            for (nr, nc) in self.neighbors(r, c) {
                if !self.is_wall(nr, nc) && !seen[nr * self.cols + nc] {
                    seen[nr * self.cols + nc] = true;
                    prev[nr * self.cols + nc] = Some((r, c));
                    queue.push_back((nr, nc));
                }
            }
        }
        Err(Error::Data(format!("goal {goal:?} unreachable from {start:?}")))
    }
}

/// One task: a (start, goal) cell pair on the shared layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub start: (usize, usize),
    pub goal: (usize, usize),
}

impl TaskSpec {
    pub fn start_center(&self) -> (f64, f64) {
        (self.start.0 as f64 + 0.5, self.start.1 as f64 + 0.5)
    }

    pub fn goal_center(&self) -> (f64, f64) {
        (self.goal.0 as f64 + 0.5, self.goal.1 as f64 + 0.5)
    }
}

const TRAIN_TASKS: [((usize, usize), (usize, usize)); 50] = [
    ((3, 3), (1, 1)),
    ((3, 3), (1, 2)),
    ((3, 3), (1, 5)),
    ((3, 3), (1, 6)),
    ((3, 3), (2, 1)),
    ((3, 3), (2, 2)),
    ((3, 3), (2, 4)),
    ((3, 3), (2, 5)),
    ((3, 3), (2, 6)),
    ((3, 3), (3, 2)),
    ((3, 3), (3, 4)),
    ((3, 3), (4, 1)),
    ((3, 3), (4, 2)),
    ((3, 3), (4, 4)),
    ((3, 3), (4, 5)),
    ((3, 3), (4, 6)),
    ((3, 3), (5, 1)),
    ((3, 3), (5, 3)),
    ((3, 3), (5, 4)),
    ((3, 3), (5, 6)),
    ((3, 3), (6, 1)),
    ((3, 3), (6, 2)),
    ((3, 3), (6, 3)),
    ((3, 3), (6, 5)),
    ((3, 3), (6, 6)),
    ((4, 4), (1, 1)),
    ((4, 4), (1, 2)),
    ((4, 4), (1, 5)),
    ((4, 4), (1, 6)),
    ((4, 4), (2, 1)),
    ((4, 4), (2, 2)),
    ((4, 4), (2, 4)),
    ((4, 4), (2, 5)),
    ((4, 4), (2, 6)),
    ((4, 4), (3, 2)),
    ((4, 4), (3, 3)),
    ((4, 4), (3, 4)),
    ((4, 4), (4, 1)),
    ((4, 4), (4, 2)),
    ((4, 4), (4, 5)),
    ((4, 4), (4, 6)),
    ((4, 4), (5, 1)),
    ((4, 4), (5, 3)),
    ((4, 4), (5, 4)),
    ((4, 4), (5, 6)),
    ((4, 4), (6, 1)),
    ((4, 4), (6, 2)),
    ((4, 4), (6, 3)),
    ((4, 4), (6, 5)),
    ((4, 4), (6, 6)),
];

const TEST_TASKS: [((usize, usize), (usize, usize)); 10] = [
    ((3, 2), (1, 1)),
    ((3, 2), (4, 4)),
    ((3, 2), (2, 5)),
    ((3, 4), (4, 6)),
    ((3, 4), (1, 6)),
    ((3, 4), (2, 2)),
    ((4, 5), (6, 5)),
    ((4, 5), (3, 2)),
    ((4, 5), (5, 3)),
    ((5, 4), (3, 2)),
];

/// Training tasks 0..=49.
pub fn train_tasks() -> Vec<TaskSpec> {
    TRAIN_TASKS
        .iter()
        .enumerate()
        .map(|(i, &(start, goal))| TaskSpec {
            task_id: i as u32,
            start,
            goal,
        })
        .collect()
}

/// Testing tasks 50..=59.
pub fn test_tasks() -> Vec<TaskSpec> {
    TEST_TASKS
        .iter()
        .enumerate()
        .map(|(i, &(start, goal))| TaskSpec {
            task_id: 50 + i as u32,
            start,
            goal,
        })
        .collect()
}

pub fn all_tasks() -> Vec<TaskSpec> {
    let mut tasks = train_tasks();
    tasks.extend(test_tasks());
    tasks
}

pub fn task_by_id(id: u32) -> Result<TaskSpec> {
    all_tasks()
        .into_iter()
        .find(|t| t.task_id == id)
        .ok_or_else(|| Error::Config(format!("unknown task id {id}")))
}

/// Continuous point-mass state.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub position: (f64, f64),
    pub velocity: (f64, f64),
    pub step_count: u32,
    /// Seed the episode was reset with; dynamics themselves are
    /// deterministic.
    pub seed: u64,
}

/// One transition result.
#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub obs: [f64; OBS_DIM],
    pub reward: f64,
    pub done: bool,
}

/// A live episode on one task.
#[derive(Clone, Debug)]
pub struct MazeEnv {
    pub layout: MazeLayout,
    pub task: TaskSpec,
    pub state: EnvState,
    done: bool,
}

impl MazeEnv {
    /// Start an episode: position is the start-cell center plus uniform noise
    /// in [-0.1, 0.1]^2, velocity zero. Deterministic in the seed.
    pub fn reset(layout: &MazeLayout, task: TaskSpec, seed: u64) -> Result<Self> {
        if layout.is_wall(task.start.0, task.start.1) || layout.is_wall(task.goal.0, task.goal.1) {
            return Err(Error::Config(format!(
                "task {} start/goal must be open cells",
                task.task_id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "maze_reset", task.task_id as u64));
        let (cx, cy) = task.start_center();
        let position = (
            cx + rng.gen_range(-0.1..=0.1),
            cy + rng.gen_range(-0.1..=0.1),
        );
        Ok(MazeEnv {
            layout: layout.clone(),
            task,
            state: EnvState {
                position,
                velocity: (0.0, 0.0),
                step_count: 0,
                seed,
            },
            done: false,
        })
    }

    pub fn observation(&self) -> [f64; OBS_DIM] {
        [
            self.state.position.0,
            self.state.position.1,
            self.state.velocity.0,
            self.state.velocity.1,
        ]
    }

    pub fn done(&self) -> bool {
        self.done
    }

    /// Advance one step: `v' = 0.9 v + 0.2 a`, `p' = p + 0.25 v'`, with
    /// axis-separated wall collision (a blocked axis keeps its coordinate and
    /// zeroes its velocity). Reward 1 within GOAL_RADIUS of the goal center.
    pub fn step(&mut self, action: [f64; ACTION_DIM]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Precondition("step on a finished episode".into()));
        }
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let (px, py) = self.state.position;
        let (vx, vy) = self.state.velocity;
        let mut nvx = 0.9 * vx + 0.2 * ax;
        let mut nvy = 0.9 * vy + 0.2 * ay;

        let mut nx = px + 0.25 * nvx;
        if self.layout.blocked(nx, py) {
            nx = px;
            nvx = 0.0;
        }
        let mut ny = py + 0.25 * nvy;
        if self.layout.blocked(nx, ny) {
            ny = py;
            nvy = 0.0;
        }

        self.state.position = (nx, ny);
        self.state.velocity = (nvx, nvy);
        self.state.step_count += 1;
        let (gx, gy) = self.task.goal_center();
        let dist = ((nx - gx).powi(2) + (ny - gy).powi(2)).sqrt();
        let reward = if dist < GOAL_RADIUS { 1.0 } else { 0.0 };
        self.done = self.state.step_count == EPISODE_LEN;
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: self.done,
        })
    }
}

/// Scripted expert: BFS shortest path on open cells, proportional control
/// toward the next waypoint: `a = clip(1.8 (waypoint - p) - 1.0 v)`.
pub fn expert_action(layout: &MazeLayout, obs: &[f64; OBS_DIM], task: &TaskSpec) -> Result<[f64; ACTION_DIM]> {
    let (px, py) = (obs[0], obs[1]);
    let (vx, vy) = (obs[2], obs[3]);
    let cell = (px.floor() as usize, py.floor() as usize);
    let path = layout.shortest_path(cell, task.goal)?;
    let waypoint_cell = if path.len() >= 2 { path[1] } else { path[0] };
    let (wx, wy) = if waypoint_cell == task.goal {
        task.goal_center()
    } else {
        (waypoint_cell.0 as f64 + 0.5, waypoint_cell.1 as f64 + 0.5)
    };
    Ok([
        (1.8 * (wx - px) - 1.0 * vx).clamp(-1.0, 1.0),
        (1.8 * (wy - py) - 1.0 * vy).clamp(-1.0, 1.0),
    ])
}

/// True when the accumulated sparse reward exceeds the success threshold.
pub fn episode_success(trajectory: &Trajectory) -> bool {
    trajectory.total_return() > SUCCESS_THRESHOLD
}

/// Roll one expert episode, optionally perturbing actions with clipped
/// Gaussian noise. Returns the complete relabeled trajectory.
pub fn rollout_expert(
    layout: &MazeLayout,
    task: TaskSpec,
    noise_std: f64,
    seed: u64,
) -> Result<Trajectory> {
    if noise_std < 0.0 {
        return Err(Error::Config("noise std must be non-negative".into()));
    }
    let mut env = MazeEnv::reset(layout, task, seed)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "expert_noise", task.task_id as u64));
    let normal = rand_distr::Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("bad noise std: {e}")))?;
    let mut states = Vec::with_capacity(EPISODE_LEN as usize * OBS_DIM);
    let mut actions = Vec::with_capacity(EPISODE_LEN as usize * ACTION_DIM);
    let mut rewards = Vec::with_capacity(EPISODE_LEN as usize);
    let mut timesteps = Vec::with_capacity(EPISODE_LEN as usize);
    let mut t = 0u32;
    while !env.done() {
        let obs = env.observation();
        let mut action = expert_action(layout, &obs, &task)?;
        if noise_std > 0.0 {
            for a in &mut action {
                *a = (*a + rand_distr::Distribution::sample(&normal, &mut noise_rng))
                    .clamp(-1.0, 1.0);
            }
        }
        let result = env.step(action)?;
        states.extend_from_slice(&obs);
        actions.extend_from_slice(&action);
        rewards.push(result.reward);
        timesteps.push(t);
        t += 1;
    }
    Trajectory::new(
        task.task_id,
        OBS_DIM,
        ACTION_DIM,
        states,
        actions,
        rewards,
        timesteps,
    )
}

/// Where generated data lands under an output directory.
pub fn dataset_dir(root: &Path, task_id: u32) -> std::path::PathBuf {
    root.join(format!("task_{task_id:03}"))
}

pub fn demo_path(root: &Path, task_id: u32) -> std::path::PathBuf {
    root.join("demos").join(format!("task_{task_id:03}.traj"))
}

/// Extra demonstration variants beyond the canonical noise-free one.
pub fn alt_demo_path(root: &Path, task_id: u32, k: usize) -> std::path::PathBuf {
    root.join("demos").join(format!("task_{task_id:03}_alt{k}.traj"))
}

/// Summary of one generation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub episodes_written: usize,
    pub demos_written: usize,
    pub expert_successes: usize,
}

/// Generate the offline datasets (noisy expert episodes per task) and one
/// noise-free demonstration per task, written as trajectory files.
pub fn generate_dataset(
    layout: &MazeLayout,
    tasks: &[TaskSpec],
    episodes_per_task: usize,
    noise_std: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetSummary> {
    generate_dataset_with_demos(layout, tasks, episodes_per_task, noise_std, 1, seed, out_dir)
}

/// Like [`generate_dataset`] but writing `demos_per_task` demonstrations per
/// task: the canonical one is noise-free, the alternates carry light action
/// noise (0.05) for hyper-network training diversity.
pub fn generate_dataset_with_demos(
    layout: &MazeLayout,
    tasks: &[TaskSpec],
    episodes_per_task: usize,
    noise_std: f64,
    demos_per_task: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetSummary> {
    let mut episodes_written = 0;
    let mut demos_written = 0;
    let mut expert_successes = 0;
    for task in tasks {
        let dir = dataset_dir(out_dir, task.task_id);
        for ep in 0..episodes_per_task {
            let ep_seed = derive_seed(seed, "dataset_episode", (task.task_id as u64) << 20 | ep as u64);
            let traj = rollout_expert(layout, *task, noise_std, ep_seed)?;
            save_trajectory(&dir.join(format!("ep_{ep:04}.traj")), &traj)?;
            episodes_written += 1;
        }
        let demo_seed = derive_seed(seed, "demo_episode", task.task_id as u64);
        let demo = rollout_expert(layout, *task, 0.0, demo_seed)?;
        if episode_success(&demo) {
            expert_successes += 1;
        }
        save_trajectory(&demo_path(out_dir, task.task_id), &demo)?;
        demos_written += 1;
        for k in 1..demos_per_task {
            let alt_seed = derive_seed(seed, "alt_demo", (task.task_id as u64) << 20 | k as u64);
            let alt = rollout_expert(layout, *task, 0.05, alt_seed)?;
            save_trajectory(&alt_demo_path(out_dir, task.task_id, k), &alt)?;
            demos_written += 1;
        }
    }
    Ok(DatasetSummary {
        episodes_written,
        demos_written,
        expert_successes,
    })
}

/// Load every episode file for a task, sorted by file name.
pub fn load_task_dataset(root: &Path, task_id: u32) -> Result<Vec<Trajectory>> {
    let dir = dataset_dir(root, task_id);
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "traj"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no trajectory files in {}", dir.display())));
    }
    paths.iter().map(|p| crate::storage::load_trajectory(p)).collect()
}

pub fn load_demo(root: &Path, task_id: u32) -> Result<Trajectory> {
    crate::storage::load_trajectory(&demo_path(root, task_id))
}

/// Canonical demo plus any alternates present, sorted.
pub fn load_demos(root: &Path, task_id: u32) -> Result<Vec<Trajectory>> {
    let mut demos = vec![load_demo(root, task_id)?];
    for k in 1.. {
        let path = alt_demo_path(root, task_id, k);
        if !path.exists() {
            break;
        }
        demos.push(crate::storage::load_trajectory(&path)?);
    }
    Ok(demos)
}
