//! The leader: a convolutional feature extractor with a single-head
//! self-attention block after each convolution stage, the attention cost it
//! pays, and the utility it maximizes.
//!
//! Layout for the default configuration on a `(B, 4, 12, 12)` input:
//!
//! ```text
//! conv 4->16  k5 s2  relu  attention over 6x6 positions
//! conv 16->32 k3 s2  relu  attention over 3x3 positions
//! conv 32->32 k3 s2  relu  attention over 2x2 positions
//! flatten  linear -> feature_dim  relu
//! ```
//!
//! The stacked frames enter as input channels of the first convolution, which
//! is where temporal mixing happens. Each attention block computes
//! `A = softmax(Q K^T / sqrt(C))` over spatial positions and adds `A V` back
//! onto its input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptionConfig {
    pub stack_depth: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Number of attention blocks; block `k` follows convolution stage `k`.
    pub attention_layers: usize,
    pub feature_dim: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            stack_depth: 4,
            height: 12,
            width: 12,
            channels: vec![16, 32, 32],
            kernels: vec![5, 3, 3],
            strides: vec![2, 2, 2],
            attention_layers: 3,
            feature_dim: 128,
        }
    }
}

impl PerceptionConfig {
    /// Spatial size after each convolution stage (padding is `kernel / 2`).
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.kernels
            .iter()
            .zip(&self.strides)
            .map(|(&k, &s)| {
                let p = k / 2;
                h = (h + 2 * p - k) / s + 1;
                w = (w + 2 * p - k) / s + 1;
                (h, w)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::config(
                "perception",
                "channels, kernels and strides must be nonempty lists of equal length",
            ));
        }
        if self.attention_layers > n {
            return Err(Error::config("attention_layers", format!("at most {n} (one per convolution stage)")));
        }
        if self.stack_depth == 0 || self.height == 0 || self.width == 0 || self.feature_dim == 0 {
            return Err(Error::config("perception", "dimensions must be positive"));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::config("perception", "channels and strides must be positive, kernels odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    query: usize,
    key: usize,
    value: usize,
}

/// Parameters of the perception module plus the attention maps of the most
/// recent [`AttentionStack::extract_features`] call.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    config: PerceptionConfig,
    params: ParamSet,
    conv: Vec<ConvIdx>,
    attn: Vec<AttnIdx>,
    proj_weight: usize,
    proj_bias: usize,
    last_attention: Vec<Tensor>,
}

/// Graph handles produced by [`AttentionStack::forward`].
#[derive(Clone, Debug)]
pub struct PerceptionOutput {
    /// `(B, feature_dim)`
    pub features: Var,
    /// One `(B, N_k, N_k)` row-stochastic map per attention block.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    /// `(B, feature_dim)`
    pub features: Tensor,
    pub attention_record: Vec<Tensor>,
}

impl AttentionStack {
    pub fn new<R: Rng + ?Sized>(config: PerceptionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut conv = Vec::new();
        let mut attn = Vec::new();
        let mut in_ch = config.stack_depth;
        for (i, (&out_ch, &k)) in config.channels.iter().zip(&config.kernels).enumerate() {
            let fan_in = in_ch * k * k;
            let w = init::orthogonal(out_ch, fan_in, 2f64.sqrt(), rng);
            let weight = params.push(
                format!("perception.conv{i}.weight"),
                Tensor::new(vec![out_ch, in_ch, k, k], w)?,
            );
            let bias = params.push(format!("perception.conv{i}.bias"), Tensor::zeros(&[out_ch]));
            conv.push(ConvIdx { weight, bias });
            if i < config.attention_layers {
                // zero queries give uniform attention at initialization
                let query = params.push(format!("perception.attn{i}.query"), Tensor::zeros(&[out_ch, out_ch]));
                let key = params.push(
                    format!("perception.attn{i}.key"),
                    Tensor::new(vec![out_ch, out_ch], init::orthogonal(out_ch, out_ch, 1.0, rng))?,
                );
                let value = params.push(
                    format!("perception.attn{i}.value"),
                    Tensor::new(vec![out_ch, out_ch], init::orthogonal(out_ch, out_ch, 1.0, rng))?,
                );
                attn.push(AttnIdx { query, key, value });
            }
            in_ch = out_ch;
        }
        let (h, w) = *config.stage_sizes().last().expect("validated nonempty");
        let flat = in_ch * h * w;
        let proj_weight = params.push(
            "perception.proj.weight",
            Tensor::new(vec![flat, config.feature_dim], init::orthogonal(flat, config.feature_dim, 2f64.sqrt(), rng))?,
        );
        let proj_bias = params.push("perception.proj.bias", Tensor::zeros(&[config.feature_dim]));
        Ok(Self {
            config,
            params,
            conv,
            attn,
            proj_weight,
            proj_bias,
            last_attention: Vec::new(),
        })
    }

    pub fn config(&self) -> &PerceptionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_attention_layers(&self) -> usize {
        self.attn.len()
    }

    pub fn last_attention(&self) -> &[Tensor] {
        &self.last_attention
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn check_observation_shape(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.stack_depth || shape[2] != c.height || shape[3] != c.width {
            return Err(Error::Shape(format!(
                "observations must be (batch, {}, {}, {}), got {shape:?}",
                c.stack_depth, c.height, c.width
            )));
        }
        if shape[0] == 0 {
            return Err(Error::Shape("empty observation batch".into()));
        }
        Ok(())
    }

    /// Builds the forward pass on `g`. `vars` are this module's parameters as
    /// bound by [`Graph::bind`]; `obs` is `(B, stack, H, W)`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], obs: Var) -> PerceptionOutput {
        let batch = g.shape(obs)[0];
        let sizes = self.config.stage_sizes();
        let mut x = obs;
        let mut attention = Vec::with_capacity(self.attn.len());
        for (i, conv) in self.conv.iter().enumerate() {
            let k = self.config.kernels[i];
            x = g.conv2d(x, vars[conv.weight], vars[conv.bias], self.config.strides[i], k / 2);
            x = g.relu(x);
            if let Some(a) = self.attn.get(i) {
                let ch = self.config.channels[i];
                let (h, w) = sizes[i];
                let n = h * w;
                let grid = g.reshape(x, &[batch, ch, n]);
                let tokens = g.transpose_last2(grid);
                let flat = g.reshape(tokens, &[batch * n, ch]);
                let q = g.matmul(flat, vars[a.query]);
                let q = g.reshape(q, &[batch, n, ch]);
                let kk = g.matmul(flat, vars[a.key]);
                let kk = g.reshape(kk, &[batch, n, ch]);
                let v = g.matmul(flat, vars[a.value]);
                let v = g.reshape(v, &[batch, n, ch]);
                let scores = g.batch_matmul(q, kk, true);
                let scores = g.scale(scores, 1.0 / (ch as f64).sqrt());
                let weights = g.softmax(scores);
                attention.push(weights);
                let ctx = g.batch_matmul(weights, v, false);
                let mixed = g.add(tokens, ctx);
                let back = g.transpose_last2(mixed);
                x = g.reshape(back, &[batch, ch, h, w]);
            }
        }
        let shape = g.shape(x).to_vec();
        let flat = g.reshape(x, &[batch, shape[1] * shape[2] * shape[3]]);
        let proj = g.matmul(flat, vars[self.proj_weight]);
        let proj = g.add_bias(proj, vars[self.proj_bias]);
        let features = g.relu(proj);
        PerceptionOutput { features, attention }
    }

    /// Pure feature extraction for a `(B, stack, H, W)` batch. Records the
    /// attention maps in `last_attention`.
    pub fn extract_features(&mut self, observations: &Tensor) -> Result<FeatureBatch> {
        self.check_observation_shape(observations.shape())?;
        if observations.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("observations must be normalized to [0, 1]".into()));
        }
        let mut g = Graph::new();
        let vars = g.bind(&self.params, true);
        let obs = g.constant(observations.clone());
        let out = self.forward(&mut g, &vars, obs);
        g.check_finite()?;
        let record: Vec<Tensor> = out.attention.iter().map(|&a| g.value(a).clone()).collect();
        self.last_attention = record.clone();
        Ok(FeatureBatch {
            features: g.value(out.features).clone(),
            attention_record: record,
        })
    }
}

/// Normalized attention cost of a record and its `lambda_c`-weighted value.
///
/// `raw = (1/K) sum_k ||A_k||_1 / numel(A_k)`, which lies in `[0, 1]` for
/// maps with entries in `[0, 1]`.
pub fn perception_cost(record: &[Tensor], lambda_c: f64) -> Result<(f64, f64)> {
    if record.is_empty() {
        return Err(Error::Usage("perception cost needs at least one attention map".into()));
    }
    let raw = record
        .iter()
        .map(|a| a.data().iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64)
        .sum::<f64>()
        / record.len() as f64;
    Ok((raw, lambda_c * raw))
}

/// Differentiable version of [`perception_cost`]; returns `(raw, weighted)`.
pub fn perception_cost_graph(g: &mut Graph, attention: &[Var], lambda_c: f64) -> Result<(Var, Var)> {
    if attention.is_empty() {
        return Err(Error::Usage("perception cost needs at least one attention map".into()));
    }
    let k = attention.len() as f64;
    let mut total: Option<Var> = None;
    for &a in attention {
        let abs = g.abs(a);
        let m = g.mean(abs);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    let raw = g.scale(total.expect("nonempty"), 1.0 / k);
    let weighted = g.scale(raw, lambda_c);
    Ok((raw, weighted))
}

/// Which term of the leader utility the cooperation weight multiplies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderWeighting {
    /// `alpha * (-cost) + (1 - alpha) * u_policy`
    #[default]
    AlphaOnCost,
    /// `alpha * u_policy - (1 - alpha) * cost`
    AlphaOnReturn,
}

fn check_alpha(alpha_coop: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha_coop) {
        return Err(Error::config("alpha_coop", "must lie in [0, 1]"));
    }
    Ok(())
}

/// Leader utility from the policy term and the raw attention cost.
pub fn leader_utility(
    u_policy: f64,
    raw_cost: f64,
    alpha_coop: f64,
    lambda_c: f64,
    weighting: LeaderWeighting,
) -> Result<f64> {
    check_alpha(alpha_coop)?;
    let cost = lambda_c * raw_cost;
    Ok(match weighting {
        LeaderWeighting::AlphaOnCost => alpha_coop * (-cost) + (1.0 - alpha_coop) * u_policy,
        LeaderWeighting::AlphaOnReturn => alpha_coop * u_policy - (1.0 - alpha_coop) * cost,
    })
}

/// Graph version of [`leader_utility`], taking the already weighted cost.
pub fn leader_utility_graph(
    g: &mut Graph,
    u_policy: Var,
    weighted_cost: Var,
    alpha_coop: f64,
    weighting: LeaderWeighting,
) -> Result<Var> {
    check_alpha(alpha_coop)?;
    let (w_cost, w_policy) = match weighting {
        LeaderWeighting::AlphaOnCost => (alpha_coop, 1.0 - alpha_coop),
        LeaderWeighting::AlphaOnReturn => (1.0 - alpha_coop, alpha_coop),
    };
    let c = g.scale(weighted_cost, -w_cost);
    let p = g.scale(u_policy, w_policy);
    Ok(g.add(c, p))
}

/// `mean(log pi(a_t) * A_t)` with advantages treated as constants.
pub fn policy_term(g: &mut Graph, log_probs: Var, actions: &[usize], advantages: &[f64]) -> Var {
    let chosen = g.gather(log_probs, actions);
    let adv = g.constant(Tensor::from_vec(advantages.to_vec()));
    let weighted = g.mul(chosen, adv);
    g.mean(weighted)
}
