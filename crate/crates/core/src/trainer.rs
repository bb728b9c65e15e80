//! Training loop: rollout collection, advantage estimation, and per-minibatch
//! updates. In `stackelberg` mode each minibatch runs a leader stage on the
//! perception parameters followed by a follower stage on the policy
//! parameters; in `ppo_baseline` mode one joint PPO step updates both.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, global_grad_norm, Adam, Checkpoint, Graph, ParamSet, Tensor};
use crate::config::{EnvId, Mode, TrainerConfig};
use crate::env::{BeamCatch, ChainEnv, Environment};
use crate::error::{Error, Result};
use crate::gae::{check_normalized, compute_gae, mean_std, normalize, Trajectory};
use crate::perception::{
    leader_utility_graph, perception_cost, perception_cost_graph, policy_term, AttentionStack,
};
use crate::policy::{follower_loss, ActionDistribution, Decision, FollowerInputs, FollowerLossParts, PolicyNet};

/// Episodes averaged into `mean_episode_return`.
const RETURN_WINDOW: usize = 10;

pub fn make_env(config: &TrainerConfig) -> Result<Box<dyn Environment>> {
    Ok(match config.env {
        EnvId::BeamCatch => Box::new(BeamCatch::new(config.beam_catch_config())?),
        EnvId::Chain => Box::new(ChainEnv::new(config.chain_length, config.max_episode_length)?),
    })
}

/// Independent random streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_ACTIONS: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_EPISODES: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// Perception and policy modules together.
#[derive(Clone, Debug)]
pub struct Agent {
    pub perception: AttentionStack,
    pub policy: PolicyNet,
}

impl Agent {
    pub fn new(config: &TrainerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, STREAM_INIT);
        let perception = AttentionStack::new(config.perception_config()?, &mut rng)?;
        let policy = PolicyNet::new(config.policy_config(), &mut rng)?;
        Ok(Self { perception, policy })
    }

    /// Rebuilds an agent from a checkpoint written by [`Agent::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TrainerConfig)> {
        let config: TrainerConfig = serde_json::from_value(
            ckpt.metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no config snapshot".into()))?,
        )
        .map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
        let mut agent = Self::new(&config)?;
        ckpt.load_into(agent.perception.params_mut())?;
        ckpt.load_into(agent.policy.params_mut())?;
        Ok((agent, config))
    }

    pub fn checkpoint(&self, config: &TrainerConfig, iteration: usize) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.add_params(self.perception.params());
        ckpt.add_params(self.policy.params());
        ckpt.metadata = serde_json::json!({
            "config": config,
            "iteration": iteration,
        });
        ckpt
    }

    /// Distributions and values for a `(B, stack, H, W)` batch, no gradients.
    pub fn evaluate(&self, observations: Tensor) -> Result<(Vec<ActionDistribution>, Vec<f64>)> {
        self.perception.check_observation_shape(observations.shape())?;
        let mut g = Graph::new();
        let pv = g.bind(self.perception.params(), true);
        let fv = g.bind(self.policy.params(), true);
        let obs = g.constant(observations);
        let p = self.perception.forward(&mut g, &pv, obs);
        let out = self.policy.forward(&mut g, &fv, p.features);
        g.check_finite()?;
        let n = self.policy.n_actions();
        let dists = g
            .value(out.logits)
            .data()
            .chunks(n)
            .map(|row| ActionDistribution::from_logits(row.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((dists, g.value(out.values).data().to_vec()))
    }

    fn single(&self, obs: &[f64], shape: [usize; 3]) -> Result<(ActionDistribution, f64)> {
        let t = Tensor::new(vec![1, shape[0], shape[1], shape[2]], obs.to_vec())?;
        let (mut d, v) = self.evaluate(t)?;
        Ok((d.pop().expect("one row"), v[0]))
    }
}

/// A minibatch drawn from one rollout.
#[derive(Clone, Debug)]
pub struct MiniBatch {
    /// `(B, stack, H, W)`
    pub observations: Tensor,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Mean and population std of the normalized advantages of the rollout.
    pub advantage_stats: (f64, f64),
}

impl MiniBatch {
    pub fn from_rollout(
        traj: &Trajectory,
        advantages: &[f64],
        returns: &[f64],
        indices: &[usize],
        advantage_stats: (f64, f64),
    ) -> Result<Self> {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&traj.obs_shape);
        let mut obs = Vec::with_capacity(indices.len() * traj.obs_len());
        for &i in indices {
            obs.extend_from_slice(traj.observation(i));
        }
        Ok(Self {
            observations: Tensor::new(shape, obs)?,
            actions: indices.iter().map(|&i| traj.actions[i]).collect(),
            old_log_probs: indices.iter().map(|&i| traj.log_probs[i]).collect(),
            advantages: indices.iter().map(|&i| advantages[i]).collect(),
            returns: indices.iter().map(|&i| returns[i]).collect(),
            advantage_stats,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn inputs(&self) -> FollowerInputs<'_> {
        FollowerInputs {
            actions: &self.actions,
            old_log_probs: &self.old_log_probs,
            advantages: &self.advantages,
            returns: &self.returns,
            advantage_stats: Some(self.advantage_stats),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LeaderStats {
    pub leader_utility: f64,
    pub u_policy: f64,
    pub raw_cost: f64,
    pub weighted_cost: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FollowerStats {
    pub loss: FollowerLossParts,
    pub raw_cost: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: usize,
    /// Mean return of the most recent completed episodes; NaN before the
    /// first episode ends.
    pub mean_episode_return: f64,
    pub leader_utility: f64,
    pub u_policy: f64,
    pub raw_cost: f64,
    pub weighted_cost: f64,
    pub clip_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub leader_grad_norm: f64,
    pub follower_grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Leader,
    Follower,
    Joint,
}

/// Parameter checksums around one stage (debug mode only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageRecord {
    pub iteration: usize,
    pub stage: StageKind,
    pub perception_before: u64,
    pub perception_after: u64,
    pub policy_before: u64,
    pub policy_after: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DebugLog {
    pub stages: Vec<StageRecord>,
    /// Largest global gradient norm seen after clipping.
    pub max_clipped_norm: f64,
}

pub struct Trainer {
    config: TrainerConfig,
    env: Box<dyn Environment>,
    agent: Agent,
    leader_opt: Adam,
    follower_opt: Adam,
    action_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    episode_rng: ChaCha8Rng,
    obs: Vec<f64>,
    episode_return: f64,
    recent_returns: VecDeque<f64>,
    episodes_completed: usize,
    iteration: usize,
    env_steps: usize,
    debug: DebugLog,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let agent = Agent::new(&config)?;
        let env = make_env(&config)?;
        if env.observation_shape() != config.observation_shape() {
            return Err(Error::Shape("environment observation shape disagrees with the config".into()));
        }
        Self::with_parts(config, env, agent)
    }

    /// Trainer over a caller-supplied environment and agent.
    pub fn with_parts(config: TrainerConfig, mut env: Box<dyn Environment>, agent: Agent) -> Result<Self> {
        config.validate()?;
        agent.perception.check_observation_shape(&{
            let s = env.observation_shape();
            [1, s[0], s[1], s[2]]
        })?;
        if agent.policy.n_actions() != env.n_actions() {
            return Err(Error::Shape("policy and environment disagree on the action count".into()));
        }
        let mut episode_rng = stream(config.seed, STREAM_EPISODES);
        let obs = env.reset(episode_rng.next_u64());
        Ok(Self {
            leader_opt: Adam::new(agent.perception.params()),
            follower_opt: Adam::new(agent.policy.params()),
            action_rng: stream(config.seed, STREAM_ACTIONS),
            shuffle_rng: stream(config.seed, STREAM_SHUFFLE),
            episode_rng,
            obs,
            episode_return: 0.0,
            recent_returns: VecDeque::with_capacity(RETURN_WINDOW),
            episodes_completed: 0,
            iteration: 0,
            env_steps: 0,
            debug: DebugLog::default(),
            config,
            env,
            agent,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut Agent {
        &mut self.agent
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn episodes_completed(&self) -> usize {
        self.episodes_completed
    }

    pub fn debug_log(&self) -> &DebugLog {
        &self.debug
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.agent.checkpoint(&self.config, self.iteration)
    }

    /// Runs the current policy for `length` steps, resetting on episode end.
    pub fn collect_rollout(&mut self, length: usize) -> Result<Trajectory> {
        let shape = self.env.observation_shape();
        let obs_len: usize = shape.iter().product();
        let mut traj = Trajectory {
            obs_shape: shape.to_vec(),
            observations: Vec::with_capacity(length * obs_len),
            actions: Vec::with_capacity(length),
            rewards: Vec::with_capacity(length),
            values: Vec::with_capacity(length + 1),
            log_probs: Vec::with_capacity(length),
            dones: Vec::with_capacity(length),
        };
        for _ in 0..length {
            let (dist, value) = self.agent.single(&self.obs, shape)?;
            let action = dist.sample(&mut self.action_rng);
            let step = self.env.step(action)?;
            traj.observations.extend_from_slice(&self.obs);
            traj.actions.push(action);
            traj.rewards.push(step.reward);
            traj.values.push(value);
            traj.log_probs.push(dist.log_prob(action));
            traj.dones.push(step.done);
            self.episode_return += step.reward;
            self.env_steps += 1;
            if step.done {
                if self.recent_returns.len() == RETURN_WINDOW {
                    self.recent_returns.pop_front();
                }
                self.recent_returns.push_back(self.episode_return);
                self.episodes_completed += 1;
                self.episode_return = 0.0;
                self.obs = self.env.reset(self.episode_rng.next_u64());
            } else {
                self.obs = step.observation;
            }
        }
        let (_, bootstrap) = self.agent.single(&self.obs, shape)?;
        traj.values.push(bootstrap);
        Ok(traj)
    }

    fn checksums(&self) -> (u64, u64) {
        (self.agent.perception.params().checksum(), self.agent.policy.params().checksum())
    }

    fn record_stage(&mut self, stage: StageKind, before: (u64, u64)) -> Result<()> {
        let after = self.checksums();
        let rec = StageRecord {
            iteration: self.iteration,
            stage,
            perception_before: before.0,
            perception_after: after.0,
            policy_before: before.1,
            policy_after: after.1,
        };
        self.debug.stages.push(rec);
        match stage {
            StageKind::Leader if before.1 != after.1 => {
                Err(Error::Contract("leader stage changed policy parameters".into()))
            }
            StageKind::Follower if before.0 != after.0 => {
                Err(Error::Contract("follower stage changed perception parameters".into()))
            }
            _ => Ok(()),
        }
    }

    fn note_clipped_norm(&mut self, norm: f64) -> Result<()> {
        self.debug.max_clipped_norm = self.debug.max_clipped_norm.max(norm);
        if norm > self.config.max_grad_norm + 1e-9 {
            return Err(Error::Contract(format!(
                "clipped gradient norm {norm} exceeds {}",
                self.config.max_grad_norm
            )));
        }
        Ok(())
    }

    /// Leader utility terms for `mb` with the current parameters, no update.
    pub fn leader_objective(&self, mb: &MiniBatch) -> Result<LeaderStats> {
        let mut g = Graph::new();
        let (stats, _, _) = self.build_leader(&mut g, mb, true)?;
        Ok(stats)
    }

    /// Gradient of the leader utility (ascent direction) with respect to each
    /// perception parameter, before clipping.
    pub fn leader_gradient(&self, mb: &MiniBatch) -> Result<(LeaderStats, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let (stats, loss, pv) = self.build_leader(&mut g, mb, false)?;
        let grads = g.backward(loss)?;
        let ascent = pv
            .iter()
            .map(|&v| grads.get(v).map_or_else(|| vec![0.0; g.value(v).len()], |d| d.iter().map(|x| -x).collect()))
            .collect();
        Ok((stats, ascent))
    }

    fn build_leader(
        &self,
        g: &mut Graph,
        mb: &MiniBatch,
        frozen: bool,
    ) -> Result<(LeaderStats, crate::autodiff::Var, Vec<crate::autodiff::Var>)> {
        mb.inputs().validate()?;
        let pv = g.bind(self.agent.perception.params(), frozen);
        let fv = g.bind(self.agent.policy.params(), true);
        let obs = g.constant(mb.observations.clone());
        let p = self.agent.perception.forward(g, &pv, obs);
        let out = self.agent.policy.forward(g, &fv, p.features);
        let u_policy = policy_term(g, out.log_probs, &mb.actions, &mb.advantages);
        let (raw, weighted) = perception_cost_graph(g, &p.attention, self.config.lambda_cost)?;
        let u_leader = leader_utility_graph(g, u_policy, weighted, self.config.alpha_coop, self.config.leader_weighting)?;
        let stats = LeaderStats {
            leader_utility: g.value(u_leader).item(),
            u_policy: g.value(u_policy).item(),
            raw_cost: g.value(raw).item(),
            weighted_cost: g.value(weighted).item(),
            grad_norm: 0.0,
        };
        if !stats.leader_utility.is_finite() {
            g.check_finite()?;
            return Err(Error::Numeric { node: u_leader.index(), op: "leader_utility" });
        }
        let loss = g.neg(u_leader);
        Ok((stats, loss, pv))
    }

    /// Ascends the leader utility on the perception parameters with the
    /// policy frozen.
    pub fn leader_stage(&mut self, mb: &MiniBatch) -> Result<LeaderStats> {
        let before = self.config.debug_checks.then(|| self.checksums());
        let mut g = Graph::new();
        let (mut stats, loss, pv) = self.build_leader(&mut g, mb, false)?;
        let grads = g.backward(loss)?;
        let params = self.agent.perception.params_mut();
        grads.assign(params, &pv);
        stats.grad_norm = global_grad_norm(params.tensors());
        clip_global_norm(params.tensors_mut(), self.config.max_grad_norm);
        let clipped = global_grad_norm(params.tensors());
        self.leader_opt.step(params, self.config.learning_rate)?;
        if let Some(before) = before {
            self.note_clipped_norm(clipped)?;
            self.record_stage(StageKind::Leader, before)?;
        }
        Ok(stats)
    }

    /// Follower loss terms for `mb` with the current parameters, no update.
    /// `joint` selects the baseline objective, which carries no cost term.
    pub fn follower_objective(&self, mb: &MiniBatch, joint: bool) -> Result<FollowerStats> {
        let mut g = Graph::new();
        let (stats, _, _, _) = self.build_follower(&mut g, mb, true, true, joint)?;
        Ok(stats)
    }

    /// Gradient of the follower loss with respect to each policy parameter,
    /// perception frozen, before clipping.
    pub fn follower_gradient(&self, mb: &MiniBatch) -> Result<(FollowerStats, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let (stats, loss, _, fv) = self.build_follower(&mut g, mb, true, false, false)?;
        let grads = g.backward(loss)?;
        let out = fv
            .iter()
            .map(|&v| grads.get(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
            .collect();
        Ok((stats, out))
    }

    fn build_follower(
        &self,
        g: &mut Graph,
        mb: &MiniBatch,
        perception_frozen: bool,
        policy_frozen: bool,
        joint: bool,
    ) -> Result<(FollowerStats, crate::autodiff::Var, Vec<crate::autodiff::Var>, Vec<crate::autodiff::Var>)> {
        let pv = g.bind(self.agent.perception.params(), perception_frozen);
        let fv = g.bind(self.agent.policy.params(), policy_frozen);
        let obs = g.constant(mb.observations.clone());
        let p = self.agent.perception.forward(g, &pv, obs);
        let out = self.agent.policy.forward(g, &fv, p.features);
        let raw_cost = if p.attention.is_empty() {
            f64::NAN
        } else {
            let maps: Vec<Tensor> = p.attention.iter().map(|&a| g.value(a).clone()).collect();
            perception_cost(&maps, self.config.lambda_cost)?.0
        };
        let cost = if joint { 0.0 } else { self.config.lambda_cost * raw_cost };
        let (loss, parts) = follower_loss(g, &out, &mb.inputs(), &self.config.loss_coefficients(), cost)?;
        Ok((
            FollowerStats { loss: parts, raw_cost, grad_norm: 0.0 },
            loss,
            pv,
            fv,
        ))
    }

    /// Descends the follower loss on the policy parameters, with features
    /// recomputed from the current (already updated) perception parameters.
    pub fn follower_stage(&mut self, mb: &MiniBatch) -> Result<FollowerStats> {
        let before = self.config.debug_checks.then(|| self.checksums());
        let mut g = Graph::new();
        let (mut stats, loss, _, fv) = self.build_follower(&mut g, mb, true, false, false)?;
        let grads = g.backward(loss)?;
        let params = self.agent.policy.params_mut();
        grads.assign(params, &fv);
        stats.grad_norm = global_grad_norm(params.tensors());
        clip_global_norm(params.tensors_mut(), self.config.max_grad_norm);
        let clipped = global_grad_norm(params.tensors());
        self.follower_opt.step(params, self.config.learning_rate)?;
        if let Some(before) = before {
            self.note_clipped_norm(clipped)?;
            self.record_stage(StageKind::Follower, before)?;
        }
        Ok(stats)
    }

    /// One PPO step over both modules with a shared gradient clip.
    pub fn joint_stage(&mut self, mb: &MiniBatch) -> Result<FollowerStats> {
        let before = self.config.debug_checks.then(|| self.checksums());
        let mut g = Graph::new();
        let (mut stats, loss, pv, fv) = self.build_follower(&mut g, mb, false, false, true)?;
        let grads = g.backward(loss)?;
        let Agent { perception, policy } = &mut self.agent;
        grads.assign(perception.params_mut(), &pv);
        grads.assign(policy.params_mut(), &fv);
        let both = |p: &ParamSet, q: &ParamSet| global_grad_norm(p.tensors().iter().chain(q.tensors()));
        stats.grad_norm = both(perception.params(), policy.params());
        clip_global_norm(
            perception
                .params_mut()
                .tensors_mut()
                .iter_mut()
                .chain(policy.params_mut().tensors_mut().iter_mut()),
            self.config.max_grad_norm,
        );
        let clipped = both(perception.params(), policy.params());
        self.leader_opt.step(perception.params_mut(), self.config.learning_rate)?;
        self.follower_opt.step(policy.params_mut(), self.config.learning_rate)?;
        if let Some(before) = before {
            self.note_clipped_norm(clipped)?;
            self.record_stage(StageKind::Joint, before)?;
        }
        Ok(stats)
    }

    fn abort(&self, stage: &'static str, e: Error) -> Error {
        match e {
            Error::Aborted { .. } => e,
            other => Error::Aborted {
                iteration: self.iteration,
                stage,
                reason: other.to_string(),
            },
        }
    }

    /// Collect, estimate advantages, then `ppo_epochs` passes of shuffled
    /// minibatch updates.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        let traj = self
            .collect_rollout(self.config.rollout_length)
            .map_err(|e| self.abort("rollout", e))?;
        let adv = compute_gae(&traj, self.config.gamma, self.config.gae_lambda)
            .and_then(|a| normalize(&a))
            .map_err(|e| self.abort("advantage", e))?;
        let stats = mean_std(&adv.advantages);
        check_normalized(stats.0, stats.1).map_err(|e| self.abort("advantage", e))?;

        let mut leader_sum = LeaderStats::default();
        let mut follower_sum = FollowerStats::default();
        let mut count = 0usize;
        let mut order: Vec<usize> = (0..traj.len()).collect();
        for _ in 0..self.config.ppo_epochs {
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.chunks(self.config.batch_size) {
                let mb = MiniBatch::from_rollout(&traj, &adv.advantages, &adv.returns, chunk, stats)
                    .map_err(|e| self.abort("minibatch", e))?;
                let f = match self.config.mode {
                    Mode::Stackelberg => {
                        let l = self.leader_stage(&mb).map_err(|e| self.abort("leader", e))?;
                        leader_sum.leader_utility += l.leader_utility;
                        leader_sum.u_policy += l.u_policy;
                        leader_sum.raw_cost += l.raw_cost;
                        leader_sum.weighted_cost += l.weighted_cost;
                        leader_sum.grad_norm += l.grad_norm;
                        self.follower_stage(&mb).map_err(|e| self.abort("follower", e))?
                    }
                    Mode::PpoBaseline => self.joint_stage(&mb).map_err(|e| self.abort("joint", e))?,
                };
                follower_sum.loss.clip_objective += f.loss.clip_objective;
                follower_sum.loss.value_loss += f.loss.value_loss;
                follower_sum.loss.entropy += f.loss.entropy;
                follower_sum.raw_cost += f.raw_cost;
                follower_sum.grad_norm += f.grad_norm;
                count += 1;
            }
        }
        let n = count as f64;
        let leader = self.config.mode == Mode::Stackelberg;
        let or_nan = |v: f64| if leader { v / n } else { f64::NAN };
        let raw_cost = if leader { leader_sum.raw_cost / n } else { follower_sum.raw_cost / n };
        let metrics = IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_episode_return: if self.recent_returns.is_empty() {
                f64::NAN
            } else {
                self.recent_returns.iter().sum::<f64>() / self.recent_returns.len() as f64
            },
            leader_utility: or_nan(leader_sum.leader_utility),
            u_policy: or_nan(leader_sum.u_policy),
            raw_cost,
            weighted_cost: raw_cost * self.config.lambda_cost,
            clip_loss: follower_sum.loss.clip_objective / n,
            value_loss: follower_sum.loss.value_loss / n,
            entropy: follower_sum.loss.entropy / n,
            leader_grad_norm: or_nan(leader_sum.grad_norm),
            follower_grad_norm: follower_sum.grad_norm / n,
        };
        self.iteration += 1;
        Ok(metrics)
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<IterationMetrics>,
    pub checkpoint: Checkpoint,
}

/// Runs `total_timesteps / rollout_length` iterations in memory.
pub fn train(config: &TrainerConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics = Vec::with_capacity(config.iterations());
    for _ in 0..config.iterations() {
        metrics.push(trainer.train_iteration()?);
    }
    Ok(TrainOutcome {
        metrics,
        checkpoint: trainer.checkpoint(),
    })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt.json";

/// Like [`train`], writing `metrics.csv` (one row per iteration, flushed as
/// it goes), `timing.csv` (wall-clock seconds per iteration) and checkpoints
/// under `dir`.
pub fn train_to_dir(config: &TrainerConfig, dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut writer = csv::Writer::from_path(&metrics_path)?;
    let timing_path = dir.join(TIMING_FILE);
    let mut timing = File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?;
    writeln!(timing, "iteration,wall_time_s").map_err(|e| Error::io(&timing_path, e))?;

    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics = Vec::with_capacity(config.iterations());
    for i in 0..config.iterations() {
        let m = trainer.train_iteration()?;
        writer.serialize(&m)?;
        writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(timing, "{},{:.3}", m.iteration, start.elapsed().as_secs_f64())
            .map_err(|e| Error::io(&timing_path, e))?;
        metrics.push(m);
        if config.checkpoint_every > 0 && (i + 1) % config.checkpoint_every == 0 {
            trainer.checkpoint().save(&dir.join(format!("iter{:05}.ckpt.json", i + 1)))?;
        }
    }
    let checkpoint = trainer.checkpoint();
    checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome { metrics, checkpoint })
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<IterationMetrics>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalResult {
    fn from_returns(returns: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&returns);
        Self { returns, mean, std }
    }

    /// Standard error of the mean (sample std over `sqrt(n)`).
    pub fn std_error(&self) -> f64 {
        let n = self.returns.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        self.std * (n / (n - 1.0)).sqrt() / n.sqrt()
    }
}

/// Greedy rollouts of a checkpointed agent; `episode_cap` overrides the
/// configured episode length when given.
pub fn evaluate(ckpt: &Checkpoint, episodes: usize, seed: u64, episode_cap: Option<usize>) -> Result<EvalResult> {
    let (agent, mut config) = Agent::from_checkpoint(ckpt)?;
    if let Some(cap) = episode_cap {
        config.max_episode_length = cap;
    }
    let mut env = make_env(&config)?;
    let shape = env.observation_shape();
    run_episodes(env.as_mut(), episodes, seed, |obs, _| {
        Ok(agent.single(obs, shape)?.0.greedy())
    })
}

/// Returns of a policy choosing uniformly at random, on the environment
/// described by `config`.
pub fn random_policy_returns(config: &TrainerConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
    let mut env = make_env(config)?;
    let n = env.n_actions();
    run_episodes(env.as_mut(), episodes, seed, |_, rng| Ok(rng.random_range(0..n)))
}

fn run_episodes(
    env: &mut dyn Environment,
    episodes: usize,
    seed: u64,
    mut choose: impl FnMut(&[f64], &mut ChaCha8Rng) -> Result<usize>,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    let mut seeds = stream(seed, STREAM_EVAL);
    let mut rng = stream(seed, STREAM_ACTIONS);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(seeds.next_u64());
        let mut total = 0.0;
        loop {
            let a = choose(&obs, &mut rng)?;
            let step = env.step(a)?;
            total += step.reward;
            if step.done {
                break;
            }
            obs = step.observation;
        }
        returns.push(total);
    }
    Ok(EvalResult::from_returns(returns))
}

/// Directory name for one run: unique per (mode, config lineage, seed).
pub fn run_dir(root: &Path, config: &TrainerConfig) -> PathBuf {
    root.join(format!(
        "{}-{:016x}-seed{}",
        config.mode.as_str(),
        config.lineage_hash(),
        config.seed
    ))
}

/// Seed of the `index`-th run in a multi-seed study.
pub fn fan_out_seed(master: u64, index: usize) -> u64 {
    master.wrapping_add(index as u64)
}

/// Single sampled decision for one observation, for callers outside the
/// training loop.
pub fn sample_decision<R: Rng + ?Sized>(agent: &Agent, obs: &[f64], shape: [usize; 3], rng: &mut R) -> Result<Decision> {
    let (dist, value) = agent.single(obs, shape)?;
    let action = dist.sample(rng);
    Ok(Decision {
        action,
        log_prob: dist.log_prob(action),
        value,
    })
}
