//! Small deterministic environments with pixel observations.
//!
//! * [`BeamCatch`]: objects fall down a grid and the agent, moving along the
//!   bottom row, must be under each one when it lands.
//! * [`ChainEnv`]: a one-row corridor with a goal at the right end, plus
//!   [`chain_mdp`], its exact tabular model.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::TabularMdp;

pub const FRAME_STACK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    /// `(stack depth, height, width)`
    fn observation_shape(&self) -> [usize; 3];
    fn n_actions(&self) -> usize;
    fn max_episode_length(&self) -> usize;
    /// Bound on `|reward|` for any single step.
    fn reward_bound(&self) -> f64;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<Step>;
}

/// Rolling stack of the most recent frames, oldest first.
#[derive(Clone, Debug)]
struct FrameStack {
    frames: VecDeque<Vec<f64>>,
}

impl FrameStack {
    fn filled_with(frame: Vec<f64>) -> Self {
        Self {
            frames: std::iter::repeat_n(frame, FRAME_STACK).collect(),
        }
    }

    fn push(&mut self, frame: Vec<f64>) {
        self.frames.pop_front();
        self.frames.push_back(frame);
    }

    fn observation(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamCatchConfig {
    pub height: usize,
    pub width: usize,
    /// Steps between spawns; 0 disables spawning after reset.
    pub spawn_every: usize,
    pub max_objects: usize,
    /// Whether `reset` drops one object at a random column.
    pub initial_object: bool,
    pub max_episode_length: usize,
}

impl Default for BeamCatchConfig {
    fn default() -> Self {
        Self {
            height: 12,
            width: 12,
            spawn_every: 3,
            max_objects: 4,
            initial_object: true,
            max_episode_length: 10_000,
        }
    }
}

impl BeamCatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 1 {
            return Err(Error::config("beam_catch", "grid must be at least 2 rows by 1 column"));
        }
        if self.max_objects == 0 {
            return Err(Error::config("beam_catch.max_objects", "must be positive"));
        }
        if self.max_episode_length == 0 {
            return Err(Error::config("max_episode_length", "must be positive"));
        }
        Ok(())
    }
}

pub const AGENT_PIXEL: f64 = 0.5;
pub const OBJECT_PIXEL: f64 = 1.0;

/// Pixel catch game: actions are `0 = left`, `1 = stay`, `2 = right`.
#[derive(Clone, Debug)]
pub struct BeamCatch {
    config: BeamCatchConfig,
    agent: usize,
    /// `(row, column)` of each falling object.
    objects: Vec<(usize, usize)>,
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
    stack: FrameStack,
}

impl BeamCatch {
    pub fn new(config: BeamCatchConfig) -> Result<Self> {
        config.validate()?;
        let mut env = Self {
            config,
            agent: 0,
            objects: Vec::new(),
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            stack: FrameStack::filled_with(Vec::new()),
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &BeamCatchConfig {
        &self.config
    }

    pub fn agent_column(&self) -> usize {
        self.agent
    }

    pub fn objects(&self) -> &[(usize, usize)] {
        &self.objects
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Places the agent and the objects directly; used to set up scenarios.
    pub fn set_state(&mut self, agent: usize, objects: Vec<(usize, usize)>) {
        assert!(agent < self.config.width);
        assert!(objects.iter().all(|&(r, c)| r < self.config.height && c < self.config.width));
        self.agent = agent;
        self.objects = objects;
        self.stack = FrameStack::filled_with(self.frame());
    }

    fn spawn(&mut self) {
        if self.objects.len() < self.config.max_objects {
            let col = self.rng.random_range(0..self.config.width);
            self.objects.push((0, col));
        }
    }

    fn frame(&self) -> Vec<f64> {
        let (h, w) = (self.config.height, self.config.width);
        let mut f = vec![0.0; h * w];
        for &(r, c) in &self.objects {
            f[r * w + c] = OBJECT_PIXEL;
        }
        let bottom = (h - 1) * w + self.agent;
        if f[bottom] == 0.0 {
            f[bottom] = AGENT_PIXEL;
        }
        f
    }
}

impl Environment for BeamCatch {
    fn observation_shape(&self) -> [usize; 3] {
        [FRAME_STACK, self.config.height, self.config.width]
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn max_episode_length(&self) -> usize {
        self.config.max_episode_length
    }

    fn reward_bound(&self) -> f64 {
        1.0
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.agent = self.config.width / 2;
        self.objects.clear();
        self.steps = 0;
        self.done = false;
        if self.config.initial_object {
            self.spawn();
        }
        self.stack = FrameStack::filled_with(self.frame());
        self.stack.observation()
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; call reset first".into()));
        }
        if action >= 3 {
            return Err(Error::Usage(format!("beam_catch has 3 actions, got {action}")));
        }
        let w = self.config.width;
        self.agent = match action {
            0 => self.agent.saturating_sub(1),
            2 => (self.agent + 1).min(w - 1),
            _ => self.agent,
        };
        let bottom = self.config.height - 1;
        let mut reward = 0.0;
        for obj in self.objects.iter_mut() {
            obj.0 += 1;
        }
        self.objects.retain(|&(r, c)| {
            if r == bottom {
                reward += if c == self.agent { 1.0 } else { -1.0 };
                false
            } else {
                true
            }
        });
        self.steps += 1;
        if self.config.spawn_every > 0 && self.steps % self.config.spawn_every == 0 {
            self.spawn();
        }
        self.done = self.steps >= self.config.max_episode_length;
        let frame = self.frame();
        self.stack.push(frame);
        Ok(Step {
            observation: self.stack.observation(),
            reward,
            done: self.done,
        })
    }
}

/// Largest grid and horizon [`optimal_return`] accepts.
pub const MAX_ORACLE_CELLS: usize = 256;
pub const MAX_ORACLE_HORIZON: usize = 64;

/// Best achievable undiscounted beam-catch return over `horizon` steps for the
/// episode started with `seed`.
///
/// Spawn columns come from the episode's own generator and never depend on
/// the agent, so the latent object schedule is fixed by the seed; the
/// remaining decision problem is solved exactly by dynamic programming over
/// `(step, agent column)`.
pub fn optimal_return(config: &BeamCatchConfig, seed: u64, horizon: usize) -> Result<f64> {
    config.validate()?;
    if config.height * config.width > MAX_ORACLE_CELLS || horizon > MAX_ORACLE_HORIZON {
        return Err(Error::Size(format!(
            "oracle limited to {MAX_ORACLE_CELLS} cells and horizon {MAX_ORACLE_HORIZON}; got {}x{} and {horizon}",
            config.height, config.width
        )));
    }
    let w = config.width;
    let horizon = horizon.min(config.max_episode_length);

    // Replay the spawn process on its own to get landing (step, column) events.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut falling: Vec<(usize, usize)> = Vec::new();
    let spawn = |rng: &mut ChaCha8Rng, falling: &mut Vec<(usize, usize)>| {
        if falling.len() < config.max_objects {
            falling.push((0, rng.random_range(0..w)));
        }
    };
    if config.initial_object {
        spawn(&mut rng, &mut falling);
    }
    let mut landings: Vec<Vec<usize>> = vec![Vec::new(); horizon + 1];
    for t in 1..=horizon {
        for f in falling.iter_mut() {
            f.0 += 1;
        }
        falling.retain(|&(r, c)| {
            if r == config.height - 1 {
                landings[t].push(c);
                false
            } else {
                true
            }
        });
        if config.spawn_every > 0 && t % config.spawn_every == 0 {
            spawn(&mut rng, &mut falling);
        }
    }

    // best[c] = best return from step t onward with the agent at column c
    let mut best = vec![0.0f64; w];
    for t in (1..=horizon).rev() {
        let mut next = vec![f64::NEG_INFINITY; w];
        for (c_prev, slot) in next.iter_mut().enumerate() {
            let lo = c_prev.saturating_sub(1);
            let hi = (c_prev + 1).min(w - 1);
            for c in lo..=hi {
                let r: f64 = landings[t].iter().map(|&lc| if lc == c { 1.0 } else { -1.0 }).sum();
                *slot = slot.max(r + best[c]);
            }
        }
        best = next;
    }
    Ok(best[w / 2])
}

/// One-row corridor: actions `0 = left`, `1 = right`; entering the goal cell
/// on the right pays 1 and ends the episode.
#[derive(Clone, Debug)]
pub struct ChainEnv {
    n_states: usize,
    max_episode_length: usize,
    pos: usize,
    steps: usize,
    done: bool,
    stack: FrameStack,
}

impl ChainEnv {
    /// `n_states` non-goal cells followed by one goal cell.
    pub fn new(n_states: usize, max_episode_length: usize) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::config("chain.n_states", "must be at least 2"));
        }
        if max_episode_length == 0 {
            return Err(Error::config("max_episode_length", "must be positive"));
        }
        let mut env = Self {
            n_states,
            max_episode_length,
            pos: 0,
            steps: 0,
            done: false,
            stack: FrameStack::filled_with(Vec::new()),
        };
        env.reset(0);
        Ok(env)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn frame(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.n_states + 1];
        f[self.pos] = 1.0;
        f
    }
}

impl Environment for ChainEnv {
    fn observation_shape(&self) -> [usize; 3] {
        [FRAME_STACK, 1, self.n_states + 1]
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn max_episode_length(&self) -> usize {
        self.max_episode_length
    }

    fn reward_bound(&self) -> f64 {
        1.0
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.pos = 0;
        self.steps = 0;
        self.done = false;
        self.stack = FrameStack::filled_with(self.frame());
        self.stack.observation()
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; call reset first".into()));
        }
        if action >= 2 {
            return Err(Error::Usage(format!("chain has 2 actions, got {action}")));
        }
        self.pos = if action == 1 { self.pos + 1 } else { self.pos.saturating_sub(1) };
        let reached = self.pos == self.n_states;
        self.steps += 1;
        self.done = reached || self.steps >= self.max_episode_length;
        let frame = self.frame();
        self.stack.push(frame);
        Ok(Step {
            observation: self.stack.observation(),
            reward: if reached { 1.0 } else { 0.0 },
            done: self.done,
        })
    }
}

/// Tabular model of [`ChainEnv`]: states `0..n_states` are corridor cells,
/// state `n_states` is the absorbing goal. Action 1 moves right, action 0
/// left (clamped at 0); entering the goal pays 1.
///
/// The optimal value of cell `s` is `gamma^(n_states - 1 - s)`: the number of
/// steps that precede the paying step.
pub fn chain_mdp(n_states: usize, gamma: f64) -> Result<TabularMdp> {
    if n_states < 2 {
        return Err(Error::config("chain.n_states", "must be at least 2"));
    }
    let total = n_states + 1;
    let goal = n_states;
    let mut transition = vec![0.0; total * 2 * total];
    let mut reward = vec![0.0; total * 2];
    for s in 0..total {
        for a in 0..2 {
            let next = if s == goal {
                goal
            } else if a == 1 {
                s + 1
            } else {
                s.saturating_sub(1)
            };
            transition[(s * 2 + a) * total + next] = 1.0;
            if s != goal && next == goal {
                reward[s * 2 + a] = 1.0;
            }
        }
    }
    TabularMdp::new(total, 2, transition, reward, gamma, Some(1.0))
}

/// Closed-form optimal state values for [`chain_mdp`].
pub fn chain_optimal_values(n_states: usize, gamma: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n_states)
        .map(|s| gamma.powi((n_states - 1 - s) as i32))
        .collect();
    v.push(0.0);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{bellman_value_iteration, DEFAULT_MAX_ITERS};

    #[test]
    fn same_seed_same_observation() {
        let mut env = BeamCatch::new(BeamCatchConfig::default()).unwrap();
        let a = env.reset(17);
        let b = env.reset(17);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4 * 12 * 12);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn different_seeds_differ() {
        let mut env = BeamCatch::new(BeamCatchConfig::default()).unwrap();
        env.reset(1);
        let mut layouts = Vec::new();
        for seed in 0..8 {
            env.reset(seed);
            let mut cols = Vec::new();
            for _ in 0..12 {
                env.step(1).unwrap();
                cols.extend(env.objects().iter().map(|o| o.1));
            }
            layouts.push(cols);
        }
        layouts.dedup();
        assert!(layouts.len() > 1);
    }

    #[test]
    fn catch_and_miss_rewards() {
        let mut env = BeamCatch::new(BeamCatchConfig {
            spawn_every: 0,
            initial_object: false,
            ..Default::default()
        })
        .unwrap();
        env.reset(0);
        env.set_state(4, vec![(10, 4)]);
        assert_eq!(env.step(1).unwrap().reward, 1.0);
        env.set_state(4, vec![(10, 6)]);
        assert_eq!(env.step(1).unwrap().reward, -1.0);
        env.set_state(4, vec![(3, 6)]);
        assert_eq!(env.step(1).unwrap().reward, 0.0);
    }

    #[test]
    fn step_after_terminal_is_an_error() {
        let mut env = BeamCatch::new(BeamCatchConfig {
            max_episode_length: 2,
            ..Default::default()
        })
        .unwrap();
        env.reset(0);
        env.step(0).unwrap();
        assert!(env.step(0).unwrap().done);
        assert!(matches!(env.step(0), Err(Error::Usage(_))));
    }

    #[test]
    fn scripted_runs_are_reproducible() {
        let script = [0, 2, 2, 1, 0, 1, 2, 0, 0, 1, 2, 2, 2, 1, 0];
        let run = || {
            let mut env = BeamCatch::new(BeamCatchConfig::default()).unwrap();
            let mut out = vec![env.reset(5)];
            for &a in &script {
                let s = env.step(a).unwrap();
                out.push(s.observation);
                out.push(vec![s.reward]);
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn oracle_trivial_cases() {
        let none = BeamCatchConfig {
            spawn_every: 0,
            initial_object: false,
            ..Default::default()
        };
        assert_eq!(optimal_return(&none, 0, 64).unwrap(), 0.0);
        let single = BeamCatchConfig {
            width: 1,
            spawn_every: 0,
            ..Default::default()
        };
        assert_eq!(optimal_return(&single, 0, 64).unwrap(), 1.0);
        assert!(matches!(
            optimal_return(&BeamCatchConfig::default(), 0, 65),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn chain_closed_form() {
        assert_eq!(chain_optimal_values(2, 0.99)[0], 0.99);
        let v0 = chain_optimal_values(5, 0.0);
        assert_eq!(v0, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let mdp = chain_mdp(6, 0.9).unwrap();
        let vi = bellman_value_iteration(&mdp, 1e-12, DEFAULT_MAX_ITERS).unwrap();
        for (got, want) in vi.fixed_point.state_values().iter().zip(chain_optimal_values(6, 0.9)) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn chain_env_reaches_goal() {
        let mut env = ChainEnv::new(3, 100).unwrap();
        env.reset(0);
        assert_eq!(env.step(1).unwrap().reward, 0.0);
        assert_eq!(env.step(1).unwrap().reward, 0.0);
        let s = env.step(1).unwrap();
        assert_eq!(s.reward, 1.0);
        assert!(s.done);
    }
}
