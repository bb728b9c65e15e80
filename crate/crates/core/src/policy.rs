//! The follower: an actor-critic MLP on top of perception features, and the
//! clipped PPO loss it minimizes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::gae::{check_normalized, mean_std};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub n_actions: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            hidden: vec![256, 256],
            n_actions: 3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
}

/// Shared tanh trunk with a categorical action head and a scalar value head.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    config: PolicyConfig,
    params: ParamSet,
    trunk: Vec<Dense>,
    action_head: Dense,
    value_head: Dense,
}

/// Graph handles produced by [`PolicyNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    /// `(B, n_actions)`
    pub logits: Var,
    /// `(B, n_actions)`
    pub log_probs: Var,
    /// `(B,)`
    pub values: Var,
}

/// One sampled decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        if config.feature_dim == 0 || config.n_actions == 0 || config.hidden.contains(&0) {
            return Err(Error::config("policy", "feature_dim, n_actions and hidden widths must be positive"));
        }
        let mut params = ParamSet::new();
        let dense = |params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut R| {
            let w = init::orthogonal(fan_in, fan_out, gain, rng);
            Dense {
                weight: params.push(
                    format!("policy.{name}.weight"),
                    Tensor::new(vec![fan_in, fan_out], w).expect("shape matches"),
                ),
                bias: params.push(format!("policy.{name}.bias"), Tensor::zeros(&[fan_out])),
            }
        };
        let mut trunk = Vec::new();
        let mut width = config.feature_dim;
        for (i, &h) in config.hidden.iter().enumerate() {
            trunk.push(dense(&mut params, &format!("hidden{i}"), width, h, 2f64.sqrt(), rng));
            width = h;
        }
        let action_head = dense(&mut params, "action", width, config.n_actions, 0.01, rng);
        let value_head = dense(&mut params, "value", width, 1, 1.0, rng);
        Ok(Self {
            config,
            params,
            trunk,
            action_head,
            value_head,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    /// `features` is `(B, feature_dim)`; `vars` are this module's bound
    /// parameters.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], features: Var) -> PolicyOutput {
        let mut x = features;
        for d in &self.trunk {
            let h = g.matmul(x, vars[d.weight]);
            let h = g.add_bias(h, vars[d.bias]);
            x = g.tanh(h);
        }
        let logits = g.matmul(x, vars[self.action_head.weight]);
        let logits = g.add_bias(logits, vars[self.action_head.bias]);
        let log_probs = g.log_softmax(logits);
        let v = g.matmul(x, vars[self.value_head.weight]);
        let v = g.add_bias(v, vars[self.value_head.bias]);
        let batch = g.shape(v)[0];
        let values = g.reshape(v, &[batch]);
        PolicyOutput { logits, log_probs, values }
    }

    /// Action distributions and values for a `(B, feature_dim)` batch.
    pub fn evaluate(&self, features: &Tensor) -> Result<(Vec<ActionDistribution>, Vec<f64>)> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "features must be (batch, {}), got {shape:?}",
                self.config.feature_dim
            )));
        }
        let mut g = Graph::new();
        let vars = g.bind(&self.params, true);
        let f = g.constant(features.clone());
        let out = self.forward(&mut g, &vars, f);
        g.check_finite()?;
        let n = self.config.n_actions;
        let dists = g
            .value(out.logits)
            .data()
            .chunks(n)
            .map(|row| ActionDistribution::from_logits(row.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((dists, g.value(out.values).data().to_vec()))
    }

    /// Samples one action per row of `features`.
    pub fn act<R: Rng + ?Sized>(&self, features: &Tensor, rng: &mut R) -> Result<Vec<Decision>> {
        let (dists, values) = self.evaluate(features)?;
        Ok(dists
            .iter()
            .zip(values)
            .map(|(d, value)| {
                let action = d.sample(rng);
                Decision {
                    action,
                    log_prob: d.log_prob(action),
                    value,
                }
            })
            .collect())
    }
}

/// Categorical distribution over actions, stored as log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    log_probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Shape("distribution needs at least one action".into()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidValue("logits must be finite".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(Self {
            log_probs: logits.iter().map(|l| l - lse).collect(),
        })
    }

    pub fn n_actions(&self) -> usize {
        self.log_probs.len()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.log_probs[action]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn entropy(&self) -> f64 {
        -self.log_probs.iter().map(|l| l.exp() * l).sum::<f64>()
    }

    /// Inverse-CDF sampling with one uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, l) in self.log_probs.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return i;
            }
        }
        self.log_probs.len() - 1
    }

    /// Most likely action, lowest index on ties.
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.log_probs.iter().enumerate() {
            if l > self.log_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Mean entropy of a batch of distributions.
pub fn entropy(dists: &[ActionDistribution]) -> f64 {
    dists.iter().map(ActionDistribution::entropy).sum::<f64>() / dists.len() as f64
}

/// `exp(new - old)` elementwise.
pub fn ppo_ratio(new_log_probs: &[f64], old_log_probs: &[f64]) -> Result<Vec<f64>> {
    if new_log_probs.len() != old_log_probs.len() {
        return Err(Error::Shape(format!(
            "log-prob lengths differ: {} vs {}",
            new_log_probs.len(),
            old_log_probs.len()
        )));
    }
    let r: Vec<f64> = new_log_probs.iter().zip(old_log_probs).map(|(n, o)| (n - o).exp()).collect();
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::UndefinedRatio);
    }
    Ok(r)
}

/// `mean(min(r A, clip(r, 1 - eps, 1 + eps) A))`. Larger is better.
pub fn clip_loss(ratio: &[f64], advantages: &[f64], epsilon: f64) -> Result<f64> {
    if ratio.len() != advantages.len() || ratio.is_empty() {
        return Err(Error::Shape(format!(
            "ratio and advantages need the same nonzero length, got {} and {}",
            ratio.len(),
            advantages.len()
        )));
    }
    check_epsilon(epsilon)?;
    Ok(ratio
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * a))
        .sum::<f64>()
        / ratio.len() as f64)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::config("clip_epsilon", "must be a positive finite number"));
    }
    Ok(())
}

/// Graph version of [`clip_loss`]; `new_log_probs` are the chosen-action
/// log-probabilities, shape `(B,)`.
pub fn clip_surrogate(g: &mut Graph, new_log_probs: Var, old_log_probs: &[f64], advantages: &[f64], epsilon: f64) -> Var {
    let old = g.constant(Tensor::from_vec(old_log_probs.to_vec()));
    let adv = g.constant(Tensor::from_vec(advantages.to_vec()));
    let diff = g.sub(new_log_probs, old);
    let ratio = g.exp(diff);
    let unclipped = g.mul(ratio, adv);
    let clipped = g.clip(ratio, 1.0 - epsilon, 1.0 + epsilon);
    let clipped = g.mul(clipped, adv);
    let m = g.minimum(unclipped, clipped);
    g.mean(m)
}

/// Mean entropy of the rows of a `(B, n)` log-probability node.
pub fn entropy_graph(g: &mut Graph, log_probs: Var) -> Var {
    let batch = g.shape(log_probs)[0] as f64;
    let p = g.exp(log_probs);
    let plogp = g.mul(p, log_probs);
    let s = g.sum(plogp);
    g.scale(s, -1.0 / batch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

/// Minibatch data consumed by [`follower_loss`].
#[derive(Clone, Copy, Debug)]
pub struct FollowerInputs<'a> {
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
    /// Mean and population std of the advantages of the whole rollout this
    /// minibatch was drawn from. `None` checks the minibatch itself.
    pub advantage_stats: Option<(f64, f64)>,
}

impl FollowerInputs<'_> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.actions.len();
        if n == 0 || self.old_log_probs.len() != n || self.advantages.len() != n || self.returns.len() != n {
            return Err(Error::Shape(format!(
                "minibatch lengths disagree: actions {n}, old_log_probs {}, advantages {}, returns {}",
                self.old_log_probs.len(),
                self.advantages.len(),
                self.returns.len()
            )));
        }
        let (mean, std) = self.advantage_stats.unwrap_or_else(|| mean_std(self.advantages));
        check_normalized(mean, std)
    }
}

/// Scalar parts of the follower loss, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FollowerLossParts {
    pub clip_objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub cost: f64,
    pub total: f64,
}

/// Builds `-clip + value_coef * mse(V, R) - entropy_coef * H + cost` on `g`.
///
/// `cost` enters as a constant: it carries no gradient to either module.
pub fn follower_loss(
    g: &mut Graph,
    out: &PolicyOutput,
    inputs: &FollowerInputs<'_>,
    coefs: &LossCoefficients,
    cost: f64,
) -> Result<(Var, FollowerLossParts)> {
    inputs.validate()?;
    check_epsilon(coefs.clip_epsilon)?;
    let n_actions = g.shape(out.log_probs)[1];
    if let Some(&bad) = inputs.actions.iter().find(|&&a| a >= n_actions) {
        return Err(Error::Shape(format!("action {bad} out of range for {n_actions} actions")));
    }
    let chosen = g.gather(out.log_probs, inputs.actions);
    let surrogate = clip_surrogate(g, chosen, inputs.old_log_probs, inputs.advantages, coefs.clip_epsilon);
    let returns = g.constant(Tensor::from_vec(inputs.returns.to_vec()));
    let err = g.sub(out.values, returns);
    let sq = g.square(err);
    let value_loss = g.mean(sq);
    let ent = entropy_graph(g, out.log_probs);

    let neg_clip = g.neg(surrogate);
    let v_term = g.scale(value_loss, coefs.value_coef);
    let e_term = g.scale(ent, -coefs.entropy_coef);
    let total = g.add(neg_clip, v_term);
    let total = g.add(total, e_term);
    let total = g.add_scalar(total, cost);

    let parts = FollowerLossParts {
        clip_objective: g.value(surrogate).item(),
        value_loss: g.value(value_loss).item(),
        entropy: g.value(ent).item(),
        cost,
        total: g.value(total).item(),
    };
    if !parts.total.is_finite() {
        g.check_finite()?;
        return Err(Error::Numeric {
            node: total.index(),
            op: "follower_loss",
        });
    }
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_examples() {
        assert!((clip_loss(&[1.5], &[1.0], 0.2).unwrap() - 1.2).abs() < 1e-15);
        assert!((clip_loss(&[0.5], &[-1.0], 0.2).unwrap() - (-0.8)).abs() < 1e-15);
        assert!((clip_loss(&[1.0], &[2.0], 0.2).unwrap() - 2.0).abs() < 1e-15);
        assert!(clip_loss(&[1.0], &[1.0], 0.0).is_err());
        assert!(clip_loss(&[1.0], &[1.0], f64::INFINITY).is_err());
    }

    #[test]
    fn ratio_overflow_is_undefined() {
        assert!(matches!(ppo_ratio(&[800.0], &[0.0]), Err(Error::UndefinedRatio)));
        assert_eq!(ppo_ratio(&[0.3], &[0.3]).unwrap(), vec![1.0]);
    }

    #[test]
    fn entropy_bounds() {
        let uniform = ActionDistribution::from_logits(vec![0.0; 4]).unwrap();
        assert!((uniform.entropy() - 4f64.ln()).abs() < 1e-15);
        let peaked = ActionDistribution::from_logits(vec![0.0, 1e3, 0.0]).unwrap();
        assert!(peaked.entropy() < 1e-12);
        assert_eq!(peaked.greedy(), 1);
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        let d = ActionDistribution::from_logits(vec![0.0, 1.0, -1.0]).unwrap();
        let p = d.probs();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[d.sample(&mut rng)] += 1;
        }
        for (c, q) in counts.iter().zip(&p) {
            assert!((*c as f64 / n as f64 - q).abs() < 0.01);
        }
    }

    #[test]
    fn fresh_policy_is_nearly_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::new(PolicyConfig { feature_dim: 8, hidden: vec![16, 16], n_actions: 3 }, &mut rng).unwrap();
        let f = Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let (dists, _) = net.evaluate(&f).unwrap();
        for d in dists {
            for p in d.probs() {
                assert!((p - 1.0 / 3.0).abs() < 0.02);
            }
        }
    }

    #[test]
    fn act_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::new(PolicyConfig { feature_dim: 4, hidden: vec![8], n_actions: 3 }, &mut rng).unwrap();
        let f = Tensor::new(vec![3, 4], vec![0.5; 12]).unwrap();
        let a = net.act(&f, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = net.act(&f, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(net.act(&Tensor::zeros(&[1, 5]), &mut rng).is_err());
    }

    #[test]
    fn unnormalized_advantages_violate_the_contract() {
        let inputs = FollowerInputs {
            actions: &[0, 1, 0],
            old_log_probs: &[0.0; 3],
            advantages: &[5.0, 6.0, 7.0],
            returns: &[0.0; 3],
            advantage_stats: None,
        };
        assert!(matches!(inputs.validate(), Err(Error::Contract(_))));
    }
}
