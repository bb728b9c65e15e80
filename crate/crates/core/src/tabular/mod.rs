//! Exact finite-state Bellman and Stackelberg-Bellman operators.
//!
//! The Stackelberg operator evaluates, for every state-action pair,
//!
//! ```text
//! max_theta  min_phi  R(s,a) - lambda * C(s, theta) + gamma * sum_s' P(s'|s,a) f(s', phi(s'))
//! ```
//!
//! where `theta` ranges over a finite leader grid (it enters only through the
//! perception cost table) and `phi` over a finite list of deterministic
//! state-to-action maps. In [`FollowerMode::Cooperative`] the inner `min` is
//! replaced by `max`. Ties are broken toward the lowest grid index.

pub mod instance;

pub use instance::{InstanceFile, PhiGridSpec};

use rand::Rng;

use crate::error::{Error, Result};

/// Upper bound on the number of follower maps produced by full enumeration.
pub const MAX_ENUMERATED_MAPS: usize = 1 << 20;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

/// Finite discounted MDP with dense tables.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `P(s' | s, a)` at `(s * n_actions + a) * n_states + s'`.
    transition: Vec<f64>,
    /// `R(s, a)` at `s * n_actions + a`.
    reward: Vec<f64>,
    gamma: f64,
    r_max: f64,
}

impl TabularMdp {
    /// Validates and builds an MDP. `r_max` defaults to the largest absolute
    /// reward when not given.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        r_max: Option<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::config("n_states/n_actions", "must be positive"));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Shape(format!(
                "transition needs {} entries, got {}",
                n_states * n_actions * n_states,
                transition.len()
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "reward needs {} entries, got {}",
                n_states * n_actions,
                reward.len()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1)"));
        }
        for (row_idx, row) in transition.chunks(n_states).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidValue(format!(
                    "transition row {row_idx} has an entry outside [0, 1]"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidValue(format!(
                    "transition row {row_idx} sums to {total}"
                )));
            }
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidValue("reward table has a non-finite entry".into()));
        }
        let observed = reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let r_max = match r_max {
            Some(bound) if !bound.is_finite() || bound < observed => {
                return Err(Error::InvalidValue(format!(
                    "declared r_max {bound} is below the largest |reward| {observed}"
                )))
            }
            Some(bound) => bound,
            None => observed,
        };
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// Distribution over next states after taking `a` in `s`.
    pub fn next_state_probs(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn transition_table(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    /// Random instance with Dirichlet-like transition rows and rewards in
    /// `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Self {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let raw: Vec<f64> = (0..n_states).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let z: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|v| v / z).collect();
            // absorb rounding into the largest entry so the row sums to 1
            let err = 1.0 - row.iter().sum::<f64>();
            let imax = (0..n_states)
                .max_by(|&i, &j| row[i].total_cmp(&row[j]))
                .unwrap_or(0);
            row[imax] += err;
            transition.extend(row);
        }
        let reward = (0..n_states * n_actions)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        Self::new(n_states, n_actions, transition, reward, gamma, Some(1.0))
            .expect("random instance is valid by construction")
    }
}

/// Whether the follower minimizes (as the operator is written) or maximizes
/// the continuation value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FollowerMode {
    #[default]
    Adversarial,
    Cooperative,
}

/// A [`TabularMdp`] extended with leader and follower grids and a perception
/// cost table.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularGameMdp {
    base: TabularMdp,
    n_theta: usize,
    phi_grid: Vec<Vec<usize>>,
    /// `C(s, theta)` at `s * n_theta + theta`, each in `[0, 1]`.
    cost: Vec<f64>,
    lambda_cost: f64,
    mode: FollowerMode,
}

impl TabularGameMdp {
    pub fn new(
        base: TabularMdp,
        n_theta: usize,
        phi_grid: Vec<Vec<usize>>,
        cost: Vec<f64>,
        lambda_cost: f64,
    ) -> Result<Self> {
        if n_theta == 0 {
            return Err(Error::config("theta_grid", "must be nonempty"));
        }
        if phi_grid.is_empty() {
            return Err(Error::config("phi_grid", "must be nonempty"));
        }
        for (i, phi) in phi_grid.iter().enumerate() {
            if phi.len() != base.n_states {
                return Err(Error::Shape(format!(
                    "phi_grid[{i}] maps {} states, expected {}",
                    phi.len(),
                    base.n_states
                )));
            }
            if phi.iter().any(|&a| a >= base.n_actions) {
                return Err(Error::InvalidValue(format!("phi_grid[{i}] names an unknown action")));
            }
        }
        if cost.len() != base.n_states * n_theta {
            return Err(Error::Shape(format!(
                "cost needs {} entries, got {}",
                base.n_states * n_theta,
                cost.len()
            )));
        }
        if cost.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidValue("cost entries must lie in [0, 1]".into()));
        }
        if !(lambda_cost >= 0.0 && lambda_cost.is_finite()) {
            return Err(Error::config("lambda_cost", "must be a finite nonnegative number"));
        }
        Ok(Self {
            base,
            n_theta,
            phi_grid,
            cost,
            lambda_cost,
            mode: FollowerMode::Adversarial,
        })
    }

    pub fn with_mode(mut self, mode: FollowerMode) -> Self {
        self.mode = mode;
        self
    }

    /// Every deterministic map from states to actions. Map `m` sends state `s`
    /// to digit `s` of `m` written in base `n_actions` (state 0 is the least
    /// significant digit).
    pub fn enumerate_phi_maps(n_states: usize, n_actions: usize) -> Result<Vec<Vec<usize>>> {
        let count = (n_actions as u128).checked_pow(n_states as u32);
        match count {
            Some(c) if c <= MAX_ENUMERATED_MAPS as u128 => {}
            _ => {
                return Err(Error::Size(format!(
                    "{n_actions}^{n_states} follower maps exceed the enumeration limit {MAX_ENUMERATED_MAPS}"
                )))
            }
        }
        let count = n_actions.pow(n_states as u32);
        Ok((0..count)
            .map(|mut m| {
                (0..n_states)
                    .map(|_| {
                        let a = m % n_actions;
                        m /= n_actions;
                        a
                    })
                    .collect()
            })
            .collect())
    }

    /// Random game over a random MDP with the full follower enumeration.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        n_theta: usize,
        gamma: f64,
        lambda_cost: f64,
    ) -> Self {
        let base = TabularMdp::random(rng, n_states, n_actions, gamma);
        let cost = (0..n_states * n_theta).map(|_| rng.random::<f64>()).collect();
        let phi = Self::enumerate_phi_maps(n_states, n_actions).expect("small instance");
        Self::new(base, n_theta, phi, cost, lambda_cost).expect("valid by construction")
    }

    pub fn base(&self) -> &TabularMdp {
        &self.base
    }

    pub fn n_states(&self) -> usize {
        self.base.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.base.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.base.gamma
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn phi_grid(&self) -> &[Vec<usize>] {
        &self.phi_grid
    }

    pub fn cost(&self, s: usize, theta: usize) -> f64 {
        self.cost[s * self.n_theta + theta]
    }

    pub fn cost_table(&self) -> &[f64] {
        &self.cost
    }

    pub fn lambda_cost(&self) -> f64 {
        self.lambda_cost
    }

    pub fn mode(&self) -> FollowerMode {
        self.mode
    }
}

/// Real-valued table over state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "value table needs {} entries, got {}",
                n_states * n_actions,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("value table has a non-finite entry".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn constant(n_states: usize, n_actions: usize, value: f64) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![value; n_states * n_actions],
        }
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::constant(n_states, n_actions, 0.0)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// `max_a f(s, a)` for every state.
    pub fn state_values(&self) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| self.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Sup-norm distance.
    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "table shapes differ");
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    fn check_shape(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.n_states != n_states || self.n_actions != n_actions {
            return Err(Error::Shape(format!(
                "value table is {}x{}, instance is {n_states}x{n_actions}",
                self.n_states, self.n_actions
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("value table has a non-finite entry".into()));
        }
        Ok(())
    }
}

/// Greedy action per state, lowest index on ties.
pub fn greedy_policy(f: &ValueTable) -> Vec<usize> {
    (0..f.n_states)
        .map(|s| {
            let row = f.row(s);
            let mut best = 0;
            for (a, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Standard Bellman optimality operator on Q-tables.
pub fn bellman_apply(f: &ValueTable, mdp: &TabularMdp) -> Result<ValueTable> {
    f.check_shape(mdp.n_states, mdp.n_actions)?;
    let v = f.state_values();
    let mut out = Vec::with_capacity(f.values.len());
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let cont: f64 = mdp
                .next_state_probs(s, a)
                .iter()
                .zip(&v)
                .map(|(p, vs)| p * vs)
                .sum();
            out.push(mdp.reward(s, a) + mdp.gamma * cont);
        }
    }
    Ok(ValueTable {
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        values: out,
    })
}

/// Result of one application of the Stackelberg-Bellman operator.
#[derive(Clone, Debug, PartialEq)]
pub struct StackelbergStep {
    pub values: ValueTable,
    /// Selected leader grid index per `(s, a)`.
    pub argmax_theta: Vec<usize>,
    /// Selected follower map index per `(s, a)`.
    pub argmin_phi: Vec<usize>,
}

pub fn stackelberg_bellman_apply(f: &ValueTable, g: &TabularGameMdp) -> Result<StackelbergStep> {
    let (ns, na) = (g.n_states(), g.n_actions());
    f.check_shape(ns, na)?;
    let gamma = g.gamma();

    // The leader's choice only touches the cost term, the follower's only the
    // continuation, so the max-min separates per state-action pair.
    let mut best_theta = vec![0usize; ns];
    for (s, best) in best_theta.iter_mut().enumerate() {
        for t in 1..g.n_theta {
            if -g.lambda_cost * g.cost(s, t) > -g.lambda_cost * g.cost(s, *best) {
                *best = t;
            }
        }
    }

    let mut values = Vec::with_capacity(ns * na);
    let mut argmax_theta = Vec::with_capacity(ns * na);
    let mut argmin_phi = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let theta = best_theta[s];
        let leader_term = -g.lambda_cost * g.cost(s, theta);
        for a in 0..na {
            let probs = g.base.next_state_probs(s, a);
            let mut chosen = 0usize;
            let mut chosen_cont = f64::NAN;
            for (m, phi) in g.phi_grid.iter().enumerate() {
                let cont: f64 = probs
                    .iter()
                    .enumerate()
                    .map(|(s2, p)| p * f.get(s2, phi[s2]))
                    .sum();
                let better = m == 0
                    || match g.mode {
                        FollowerMode::Adversarial => cont < chosen_cont,
                        FollowerMode::Cooperative => cont > chosen_cont,
                    };
                if better {
                    chosen = m;
                    chosen_cont = cont;
                }
            }
            values.push(g.base.reward(s, a) + leader_term + gamma * chosen_cont);
            argmax_theta.push(theta);
            argmin_phi.push(chosen);
        }
    }
    Ok(StackelbergStep {
        values: ValueTable {
            n_states: ns,
            n_actions: na,
            values,
        },
        argmax_theta,
        argmin_phi,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    pub fixed_point: ValueTable,
    /// Number of operator applications performed.
    pub iterations: usize,
    /// `||T f_n - f_n||_inf` for every iterate, in order.
    pub residuals: Vec<f64>,
}

/// Runs `f <- op(f)` until the sup-norm residual drops below `tol`.
fn iterate<F>(start: ValueTable, tol: f64, max_iters: usize, mut op: F) -> Result<ValueIteration>
where
    F: FnMut(&ValueTable) -> Result<ValueTable>,
{
    if !(tol > 0.0) {
        return Err(Error::config("tol", "must be positive"));
    }
    let mut f = start;
    let mut residuals = Vec::new();
    for _ in 0..max_iters {
        let next = op(&f)?;
        let r = next.sup_distance(&f);
        residuals.push(r);
        if r < tol {
            return Ok(ValueIteration {
                fixed_point: f,
                iterations: residuals.len(),
                residuals,
            });
        }
        f = next;
    }
    Err(Error::NonConvergence {
        iterations: max_iters,
        last_residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// Stackelberg value iteration from `f = 0`.
pub fn value_iteration(g: &TabularGameMdp, tol: f64, max_iters: usize) -> Result<ValueIteration> {
    value_iteration_from(g, ValueTable::zeros(g.n_states(), g.n_actions()), tol, max_iters)
}

pub fn value_iteration_from(
    g: &TabularGameMdp,
    start: ValueTable,
    tol: f64,
    max_iters: usize,
) -> Result<ValueIteration> {
    start.check_shape(g.n_states(), g.n_actions())?;
    iterate(start, tol, max_iters, |f| Ok(stackelberg_bellman_apply(f, g)?.values))
}

/// Ordinary optimal value iteration on a plain MDP.
pub fn bellman_value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<ValueIteration> {
    iterate(
        ValueTable::zeros(mdp.n_states, mdp.n_actions),
        tol,
        max_iters,
        |f| bellman_apply(f, mdp),
    )
}

/// `||T_S f1 - T_S f2||_inf / ||f1 - f2||_inf`
pub fn contraction_ratio(g: &TabularGameMdp, f1: &ValueTable, f2: &ValueTable) -> Result<f64> {
    f1.check_shape(g.n_states(), g.n_actions())?;
    f2.check_shape(g.n_states(), g.n_actions())?;
    let denom = f1.sup_distance(f2);
    if denom == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    let t1 = stackelberg_bellman_apply(f1, g)?.values;
    let t2 = stackelberg_bellman_apply(f2, g)?.values;
    Ok(t1.sup_distance(&t2) / denom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Equilibrium {
    pub theta_star: Vec<usize>,
    pub phi_star: Vec<usize>,
    pub greedy_policy: Vec<usize>,
}

/// Reads the leader/follower selections off a fixed point. Fails when
/// `f_star` is more than `10 * tol` away from being one.
pub fn extract_equilibrium(g: &TabularGameMdp, f_star: &ValueTable, tol: f64) -> Result<Equilibrium> {
    let step = stackelberg_bellman_apply(f_star, g)?;
    let residual = step.values.sup_distance(f_star);
    let limit = 10.0 * tol;
    if residual > limit {
        return Err(Error::StaleInput { residual, limit });
    }
    Ok(Equilibrium {
        theta_star: step.argmax_theta,
        phi_star: step.argmin_phi,
        greedy_policy: greedy_policy(f_star),
    })
}
