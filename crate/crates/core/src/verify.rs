//! Randomized property suites behind the `verify` command. Each check
//! compares a library routine against an independent, slower computation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, Graph, ParamSet, Tensor, Var};
use crate::error::Result;
use crate::gae::gae;
use crate::tabular::{
    contraction_ratio, stackelberg_bellman_apply, value_iteration_from, FollowerMode, TabularGameMdp, ValueTable,
    DEFAULT_MAX_ITERS, DEFAULT_TOL,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Tabular,
    Gradients,
    Gae,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tabular" => Ok(Suite::Tabular),
            "gradients" => Ok(Suite::Gradients),
            "gae" => Ok(Suite::Gae),
            "all" => Ok(Suite::All),
            _ => Err(format!("unknown suite {s:?}; expected tabular, gradients, gae or all")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn result(name: &str, passed: bool, detail: String) -> PropertyResult {
    PropertyResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

pub const GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];

/// Random game with at most 5 states, 3 actions and 4 leader grid points.
pub fn random_game(rng: &mut ChaCha8Rng) -> TabularGameMdp {
    let ns = rng.random_range(1..=5);
    let na = rng.random_range(1..=3);
    let nt = rng.random_range(1..=4);
    let gamma = GAMMAS[rng.random_range(0..GAMMAS.len())];
    let lambda = rng.random_range(0.0..2.0);
    let g = TabularGameMdp::random(rng, ns, na, nt, gamma, lambda);
    if rng.random_bool(0.5) {
        g.with_mode(FollowerMode::Cooperative)
    } else {
        g
    }
}

pub fn random_table(rng: &mut ChaCha8Rng, ns: usize, na: usize, scale: f64) -> ValueTable {
    ValueTable::new(ns, na, (0..ns * na).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// The operator evaluated by joint enumeration: for each `(s, a)`, the best
/// leader index against the worst (or best, when cooperative) complete
/// follower map, with no separation of the two choices.
pub fn enumerate_operator(f: &ValueTable, g: &TabularGameMdp) -> Vec<f64> {
    let (ns, na) = (g.n_states(), g.n_actions());
    let base = g.base();
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let mut best_leader = f64::NEG_INFINITY;
            for theta in 0..g.n_theta() {
                let mut inner: Option<f64> = None;
                for phi in g.phi_grid() {
                    let mut total = base.reward(s, a) - g.lambda_cost() * g.cost(s, theta);
                    for (s2, p) in base.next_state_probs(s, a).iter().enumerate() {
                        total += base.gamma() * p * f.get(s2, phi[s2]);
                    }
                    inner = Some(match (inner, g.mode()) {
                        (None, _) => total,
                        (Some(v), FollowerMode::Adversarial) => v.min(total),
                        (Some(v), FollowerMode::Cooperative) => v.max(total),
                    });
                }
                best_leader = best_leader.max(inner.expect("nonempty follower grid"));
            }
            out.push(best_leader);
        }
    }
    out
}

pub fn tabular_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let games: Vec<TabularGameMdp> = (0..50).map(|_| random_game(&mut rng)).collect();
    let mut out = Vec::new();

    let mut worst_slack = f64::NEG_INFINITY;
    let mut max_ratio = 0.0f64;
    let mut pairs = 0usize;
    for g in &games {
        let (ns, na) = (g.n_states(), g.n_actions());
        for _ in 0..100 {
            let f1 = random_table(&mut rng, ns, na, 10.0);
            let f2 = random_table(&mut rng, ns, na, 10.0);
            let r = contraction_ratio(g, &f1, &f2)?;
            max_ratio = max_ratio.max(r);
            worst_slack = worst_slack.max(r - g.gamma());
            pairs += 1;
        }
    }
    out.push(result(
        "tabular/contraction",
        worst_slack <= 1e-12,
        format!("{pairs} pairs on {} instances, max ratio {max_ratio:.6}, max ratio - gamma {worst_slack:.3e}", games.len()),
    ));

    let mut worst_gap = 0.0f64;
    let mut worst_bound_excess = f64::NEG_INFINITY;
    let mut all_within = true;
    for g in &games {
        let (ns, na) = (g.n_states(), g.n_actions());
        let a = value_iteration_from(g, ValueTable::zeros(ns, na), DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
        let b = value_iteration_from(g, ValueTable::constant(ns, na, 50.0), DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
        let gap = a.fixed_point.sup_distance(&b.fixed_point);
        let allowed = 2.0 * DEFAULT_TOL / (1.0 - g.gamma());
        worst_gap = worst_gap.max(gap / allowed);
        all_within &= gap <= allowed;
        for run in [&a, &b] {
            let r0 = run.residuals[0];
            for (n, r) in run.residuals.iter().enumerate() {
                let bound = g.gamma().powi(n as i32) * r0 + DEFAULT_TOL;
                worst_bound_excess = worst_bound_excess.max(r - bound);
            }
        }
    }
    out.push(result(
        "tabular/unique-fixed-point",
        all_within,
        format!("max gap / (2 tol / (1 - gamma)) = {worst_gap:.3}"),
    ));
    out.push(result(
        "tabular/geometric-residuals",
        worst_bound_excess <= 0.0,
        format!("max residual excess over gamma^n * r0 + tol: {worst_bound_excess:.3e}"),
    ));

    let mut max_diff = 0.0f64;
    for g in &games {
        let (ns, na) = (g.n_states(), g.n_actions());
        for _ in 0..5 {
            let f = random_table(&mut rng, ns, na, 10.0);
            let fast = stackelberg_bellman_apply(&f, g)?.values;
            let slow = enumerate_operator(&f, g);
            for (x, y) in fast.values().iter().zip(&slow) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
    }
    out.push(result(
        "tabular/enumeration-equivalence",
        max_diff <= 1e-12,
        format!("max |operator - enumeration| = {max_diff:.3e}"),
    ));
    Ok(out)
}

type Builder = fn(&mut Graph, &[Var]) -> Var;

fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect()).expect("shape");
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| { let y = g.add(v[0], v[1]); weighted_sum(g, y) }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| { let y = g.sub(v[0], v[1]); weighted_sum(g, y) }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| { let y = g.mul(v[0], v[1]); weighted_sum(g, y) }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| { let y = g.matmul(v[0], v[1]); weighted_sum(g, y) }),
        ("batch_matmul", vec![vec![2, 3, 4], vec![2, 5, 4]], |g, v| { let y = g.batch_matmul(v[0], v[1], true); weighted_sum(g, y) }),
        ("conv2d", vec![vec![2, 2, 6, 5], vec![3, 2, 3, 3], vec![3]], |g, v| { let y = g.conv2d(v[0], v[1], v[2], 2, 1); weighted_sum(g, y) }),
        ("relu", vec![vec![4, 5]], |g, v| { let y = g.relu(v[0]); weighted_sum(g, y) }),
        ("tanh", vec![vec![4, 5]], |g, v| { let y = g.tanh(v[0]); weighted_sum(g, y) }),
        ("softmax", vec![vec![3, 5]], |g, v| { let y = g.softmax(v[0]); weighted_sum(g, y) }),
        ("log_softmax", vec![vec![3, 5]], |g, v| { let y = g.log_softmax(v[0]); weighted_sum(g, y) }),
        ("sum", vec![vec![3, 5]], |g, v| g.sum(v[0])),
        ("mean", vec![vec![3, 5]], |g, v| g.mean(v[0])),
        ("clip", vec![vec![4, 5]], |g, v| { let y = g.clip(v[0], -0.3, 0.4); weighted_sum(g, y) }),
        ("gather", vec![vec![4, 3]], |g, v| { let y = g.gather(v[0], &[2, 0, 1, 1]); weighted_sum(g, y) }),
        ("scalar_broadcast", vec![vec![4, 5]], |g, v| { let y = g.add_scalar(v[0], 0.7); let y = g.scale(y, -1.3); weighted_sum(g, y) }),
    ]
}

pub fn gradient_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for (name, shapes, build) in primitive_cases() {
        let mut ps = ParamSet::new();
        for (i, s) in shapes.iter().enumerate() {
            let n = s.iter().product();
            ps.push(format!("p{i}"), Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?);
        }
        let err = finite_difference_check(build, &mut ps, 1e-6)?;
        if err > worst {
            worst = err;
            worst_name = name;
        }
    }
    Ok(vec![result(
        "gradients/primitives",
        worst < 1e-4,
        format!("{} primitives, max relative error {worst:.3e} ({worst_name})", primitive_cases().len()),
    )])
}

/// `A_t = sum_k (gamma lambda)^(k - t) delta_k`, truncated at the first done.
pub fn brute_force_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            let mut total = 0.0;
            for k in t..rewards.len() {
                if (t..k).any(|j| dones[j]) {
                    break;
                }
                let next = if dones[k] { 0.0 } else { values[k + 1] };
                let delta = rewards[k] + gamma * next - values[k];
                total += (gamma * lam).powi((k - t) as i32) * delta;
            }
            total
        })
        .collect()
}

pub fn gae_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matches = 0;
    let mut worst = 0.0f64;
    let trials = 100;
    for _ in 0..trials {
        let t = rng.random_range(1..=8);
        let rewards: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..=t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let dones: Vec<bool> = (0..t).map(|_| rng.random_bool(0.3)).collect();
        let gamma = rng.random_range(0.0..0.999);
        let lam = rng.random_range(0.0..=1.0);
        let fast = gae(&rewards, &values, &dones, gamma, lam)?;
        let slow = brute_force_gae(&rewards, &values, &dones, gamma, lam);
        let err = fast
            .raw_advantages
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        if err <= 1e-9 {
            matches += 1;
        }
    }
    let mut tele = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(1..=8);
        let rewards: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..=t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gamma = rng.random_range(0.0..0.999);
        let b = gae(&rewards, &values, &vec![false; t], gamma, 1.0)?;
        for s in 0..t {
            let mut g = 0.0;
            for (k, r) in rewards[s..].iter().enumerate() {
                g += gamma.powi(k as i32) * r;
            }
            g += gamma.powi((t - s) as i32) * values[t];
            tele = tele.max((b.returns[s] - g).abs());
        }
    }
    Ok(vec![
        result(
            "gae/brute-force",
            matches == trials,
            format!("exact match {matches}/{trials}, max error {worst:.3e}"),
        ),
        result(
            "gae/telescoping",
            tele <= 1e-9,
            format!("lambda = 1 returns vs discounted sums, max error {tele:.3e}"),
        ),
    ])
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Tabular | Suite::All) {
        out.extend(tabular_suite(seed)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.extend(gradient_suite(seed)?);
    }
    if matches!(suite, Suite::Gae | Suite::All) {
        out.extend(gae_suite(seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_suite(Suite::All, 0).unwrap() {
            assert!(r.passed, "{r}");
        }
    }
}
