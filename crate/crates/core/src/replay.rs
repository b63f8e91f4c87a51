//! Trajectories, reward-to-go relabeling, and the replay buffer that feeds
//! segment sampling during training and adaptation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hypernet::Demonstration;
use crate::model::TrajectorySegment;
use crate::tensor::Tensor;

/// Suffix sums of rewards: `rtg[t] = sum(rewards[t..])`.
pub fn relabel_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (slot, &r) in rtg.iter_mut().zip(rewards).rev() {
        acc += r;
        *slot = acc;
    }
    rtg
}

/// One complete episode. Actions may be absent for observation-only data.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task_id: u32,
    pub d_s: usize,
    pub d_a: usize,
    /// `len * d_s`, row-major.
    pub states: Vec<f64>,
    /// `len * d_a`, row-major; empty when the trajectory is action-free.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub rewards_to_go: Vec<f64>,
    pub timesteps: Vec<u32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn has_actions(&self) -> bool {
        !self.actions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Data("empty trajectory".into()));
        }
        if self.states.len() != n * self.d_s {
            return Err(Error::Data("trajectory states length mismatch".into()));
        }
        if !self.actions.is_empty() && self.actions.len() != n * self.d_a {
            return Err(Error::Data("trajectory actions length mismatch".into()));
        }
        if self.rewards_to_go.len() != n || self.timesteps.len() != n {
            return Err(Error::Data("trajectory field lengths disagree".into()));
        }
        if self.rewards_to_go != relabel_rtg(&self.rewards) {
            return Err(Error::Data(
                "rewards_to_go is not the suffix sum of rewards".into(),
            ));
        }
        Ok(())
    }

    /// Build from rewards, relabeling rewards-to-go.
    pub fn new(
        task_id: u32,
        d_s: usize,
        d_a: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        timesteps: Vec<u32>,
    ) -> Result<Self> {
        let rewards_to_go = relabel_rtg(&rewards);
        let out = Trajectory {
            task_id,
            d_s,
            d_a,
            states,
            actions,
            rewards,
            rewards_to_go,
            timesteps,
        };
        out.validate()?;
        Ok(out)
    }

    /// View as a demonstration, optionally keeping expert actions.
    pub fn to_demonstration(&self, with_actions: bool) -> Result<Demonstration> {
        let n = self.len();
        let actions = if with_actions {
            if !self.has_actions() {
                return Err(Error::Precondition(
                    "trajectory has no actions to demonstrate".into(),
                ));
            }
            Some(Tensor::new(vec![n, self.d_a], self.actions.clone())?)
        } else {
            None
        };
        Ok(Demonstration {
            states: Tensor::new(vec![n, self.d_s], self.states.clone())?,
            rewards_to_go: self.rewards_to_go.clone(),
            timesteps: self.timesteps.clone(),
            actions,
        })
    }

    /// Contiguous window `[start, start+k)` as a training segment. The
    /// trajectory must carry actions.
    pub fn segment(&self, start: usize, k: usize) -> Result<TrajectorySegment> {
        if !self.has_actions() {
            return Err(Error::Precondition("segment from action-free trajectory".into()));
        }
        let n = self.len();
        if start + k > n {
            return Err(Error::Config(format!(
                "segment {start}..{} out of range for length {n}",
                start + k
            )));
        }
        Ok(TrajectorySegment {
            states: Tensor::new(
                vec![k, self.d_s],
                self.states[start * self.d_s..(start + k) * self.d_s].to_vec(),
            )?,
            actions: Tensor::new(
                vec![k, self.d_a],
                self.actions[start * self.d_a..(start + k) * self.d_a].to_vec(),
            )?,
            rewards_to_go: self.rewards_to_go[start..start + k].to_vec(),
            timesteps: self.timesteps[start..start + k].to_vec(),
            action_mask: vec![true; k],
        })
    }

    /// Uniform-random window of length at most `k`.
    pub fn sample_segment(&self, k: usize, rng: &mut impl Rng) -> Result<TrajectorySegment> {
        let n = self.len();
        let take = k.min(n);
        let start = if n == take { 0 } else { rng.gen_range(0..=n - take) };
        self.segment(start, take)
    }
}

/// Growable store of complete, relabeled trajectories with a uniform segment
/// sampler.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    trajectories: Vec<Trajectory>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Insert after validating the relabel invariant.
    pub fn push(&mut self, trajectory: Trajectory) -> Result<()> {
        trajectory.validate()?;
        if !trajectory.has_actions() {
            return Err(Error::Precondition(
                "replay buffer requires trajectories with actions".into(),
            ));
        }
        self.trajectories.push(trajectory);
        Ok(())
    }

    /// Sample one segment: trajectory uniform, then window uniform.
    pub fn sample_segment(&self, k: usize, rng: &mut impl Rng) -> Result<TrajectorySegment> {
        if self.trajectories.is_empty() {
            return Err(Error::Precondition("sampling from empty replay buffer".into()));
        }
        let idx = rng.gen_range(0..self.trajectories.len());
        self.trajectories[idx].sample_segment(k, rng)
    }
}
