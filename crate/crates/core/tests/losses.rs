//! Loss terms on a frozen synthetic minibatch against scalar hand computation.

use proptest::prelude::*;
use stackrl::autodiff::{Graph, Tensor};
use stackrl::perception::{leader_utility, leader_utility_graph, perception_cost, policy_term, LeaderWeighting};
use stackrl::policy::{
    clip_loss, clip_surrogate, entropy, follower_loss, ppo_ratio, ActionDistribution, FollowerInputs,
    LossCoefficients, PolicyOutput,
};
use stackrl::Error;

const TOL: f64 = 1e-10;

struct Batch {
    logits: Vec<[f64; 3]>,
    values: Vec<f64>,
    actions: Vec<usize>,
    old_log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

fn frozen() -> Batch {
    Batch {
        logits: vec![[0.2, -0.4, 1.1], [1.5, 0.3, -0.7], [-0.2, 0.0, 0.9], [0.6, 0.6, -1.2]],
        values: vec![0.5, -0.3, 1.2, 0.1],
        actions: vec![2, 0, 1, 2],
        old_log_probs: vec![-0.9, -0.5, -1.6, -2.4],
        // exactly zero mean, unit population std
        advantages: vec![1.5, -0.5, 0.5, -1.5].iter().map(|a| a / 1.25f64.sqrt()).collect(),
        returns: vec![0.9, -0.1, 0.7, 0.4],
    }
}

fn log_softmax_row(z: &[f64; 3]) -> [f64; 3] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    [z[0] - lse, z[1] - lse, z[2] - lse]
}

struct Hand {
    clip: f64,
    value: f64,
    entropy: f64,
    u_policy: f64,
}

fn hand(b: &Batch, eps: f64) -> Hand {
    let n = b.actions.len() as f64;
    let (mut clip, mut value, mut ent, mut u_pol) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..b.actions.len() {
        let lp = log_softmax_row(&b.logits[i]);
        let new = lp[b.actions[i]];
        let r = (new - b.old_log_probs[i]).exp();
        let a = b.advantages[i];
        let clipped = if r < 1.0 - eps {
            1.0 - eps
        } else if r > 1.0 + eps {
            1.0 + eps
        } else {
            r
        };
        clip += if r * a < clipped * a { r * a } else { clipped * a };
        value += (b.values[i] - b.returns[i]) * (b.values[i] - b.returns[i]);
        ent -= lp.iter().map(|l| l.exp() * l).sum::<f64>();
        u_pol += new * a;
    }
    Hand {
        clip: clip / n,
        value: value / n,
        entropy: ent / n,
        u_policy: u_pol / n,
    }
}

fn output(g: &mut Graph, b: &Batch) -> PolicyOutput {
    let flat: Vec<f64> = b.logits.iter().flatten().copied().collect();
    let logits = g.variable(Tensor::new(vec![b.logits.len(), 3], flat).unwrap());
    let log_probs = g.log_softmax(logits);
    let values = g.variable(Tensor::from_vec(b.values.clone()));
    PolicyOutput { logits, log_probs, values }
}

fn inputs(b: &Batch) -> FollowerInputs<'_> {
    FollowerInputs {
        actions: &b.actions,
        old_log_probs: &b.old_log_probs,
        advantages: &b.advantages,
        returns: &b.returns,
        advantage_stats: None,
    }
}

#[test]
fn follower_terms_match_hand_computation() {
    let b = frozen();
    let h = hand(&b, 0.2);
    let mut g = Graph::new();
    let out = output(&mut g, &b);
    let cost = 0.37 * 1e-4;
    let (total, parts) = follower_loss(&mut g, &out, &inputs(&b), &LossCoefficients::default(), cost).unwrap();
    assert!((parts.clip_objective - h.clip).abs() < TOL);
    assert!((parts.value_loss - h.value).abs() < TOL);
    assert!((parts.entropy - h.entropy).abs() < TOL);
    let want = -h.clip + 0.5 * h.value - 0.01 * h.entropy + cost;
    assert!((parts.total - want).abs() < TOL);
    assert!((g.value(total).item() - want).abs() < TOL);
}

#[test]
fn leader_terms_match_hand_computation() {
    let b = frozen();
    let h = hand(&b, 0.2);
    let mut g = Graph::new();
    let out = output(&mut g, &b);
    let u_pol = policy_term(&mut g, out.log_probs, &b.actions, &b.advantages);
    assert!((g.value(u_pol).item() - h.u_policy).abs() < TOL);

    let (raw, lambda) = (0.42, 1e-4);
    let weighted = g.constant(Tensor::scalar(lambda * raw));
    for (w, want) in [
        (LeaderWeighting::AlphaOnCost, 0.7 * -(lambda * raw) + 0.3 * h.u_policy),
        (LeaderWeighting::AlphaOnReturn, 0.7 * h.u_policy - 0.3 * (lambda * raw)),
    ] {
        let u = leader_utility_graph(&mut g, u_pol, weighted, 0.7, w).unwrap();
        assert!((g.value(u).item() - want).abs() < TOL);
        assert!((leader_utility(h.u_policy, raw, 0.7, lambda, w).unwrap() - want).abs() < TOL);
    }
}

#[test]
fn standalone_scalars_agree_with_graph() {
    let b = frozen();
    let h = hand(&b, 0.2);
    let new: Vec<f64> = (0..4).map(|i| log_softmax_row(&b.logits[i])[b.actions[i]]).collect();
    let ratio = ppo_ratio(&new, &b.old_log_probs).unwrap();
    assert!((clip_loss(&ratio, &b.advantages, 0.2).unwrap() - h.clip).abs() < TOL);
    let dists: Vec<ActionDistribution> =
        b.logits.iter().map(|z| ActionDistribution::from_logits(z.to_vec()).unwrap()).collect();
    assert!((entropy(&dists) - h.entropy).abs() < TOL);
}

#[test]
fn clip_range_example_is_exact() {
    assert_eq!(clip_loss(&[1.5], &[1.0], 0.2).unwrap(), 1.2);
    assert_eq!(clip_loss(&[0.5], &[-1.0], 0.2).unwrap(), -0.8);
    let adv = [0.3, -1.1, 2.0];
    assert!((clip_loss(&[1.0; 3], &adv, 0.2).unwrap() - 1.2 / 3.0).abs() < 1e-15);
}

#[test]
fn ratio_examples() {
    assert_eq!(ppo_ratio(&[-0.3, 0.8], &[-0.3, 0.8]).unwrap(), vec![1.0, 1.0]);
    let r = ppo_ratio(&[2f64.ln()], &[0.0]).unwrap();
    assert!((r[0] - 2.0).abs() < 1e-15);
    assert!(matches!(ppo_ratio(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
}

#[test]
fn entropy_examples() {
    let uniform = ActionDistribution::from_logits(vec![0.0; 4]).unwrap();
    assert!((uniform.entropy() - 4f64.ln()).abs() < 1e-15);
    let one_hot = ActionDistribution::from_logits(vec![0.0, 1000.0, 0.0]).unwrap();
    assert_eq!(one_hot.entropy(), 0.0);
    let skewed = ActionDistribution::from_logits(vec![0.7f64.ln(), 0.3f64.ln()]).unwrap();
    assert!((skewed.entropy() - 0.610864).abs() < 1e-6);
}

#[test]
fn resting_loss_is_entropy_bonus_plus_cost() {
    // uniform policy, ratio 1, zero advantages, values equal to returns
    let b = Batch {
        logits: vec![[0.0; 3]; 4],
        values: vec![0.5, 0.1, -0.2, 0.9],
        actions: vec![0, 1, 2, 0],
        old_log_probs: vec![-(3f64.ln()); 4],
        advantages: vec![0.0; 4],
        returns: vec![0.5, 0.1, -0.2, 0.9],
    };
    let mut g = Graph::new();
    let out = output(&mut g, &b);
    let mut inp = inputs(&b);
    inp.advantage_stats = Some((0.0, 1.0));
    let cost = 2.5e-5;
    let (_, parts) = follower_loss(&mut g, &out, &inp, &LossCoefficients::default(), cost).unwrap();
    assert!((parts.total - (-0.01 * 3f64.ln() + cost)).abs() < 1e-15);
}

#[test]
fn table_coefficients_are_the_literal_constants() {
    let c = LossCoefficients::default();
    assert_eq!((c.clip_epsilon, c.value_coef, c.entropy_coef), (0.2, 0.5, 0.01));
}

#[test]
fn cost_term_has_no_gradient() {
    let b = frozen();
    let grads_for = |cost: f64| {
        let mut g = Graph::new();
        let out = output(&mut g, &b);
        let (loss, _) = follower_loss(&mut g, &out, &inputs(&b), &LossCoefficients::default(), cost).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut all = grads.get(out.logits).unwrap().to_vec();
        all.extend_from_slice(grads.get(out.values).unwrap());
        all
    };
    assert_eq!(grads_for(0.0), grads_for(0.9));
}

#[test]
fn unnormalized_minibatch_breaks_the_contract() {
    let mut b = frozen();
    for a in &mut b.advantages {
        *a = *a * 3.0 + 1.0;
    }
    let mut g = Graph::new();
    let out = output(&mut g, &b);
    let r = follower_loss(&mut g, &out, &inputs(&b), &LossCoefficients::default(), 0.0);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn alpha_extremes() {
    let w = LeaderWeighting::AlphaOnCost;
    assert_eq!(leader_utility(3.0, 0.4, 1.0, 0.5, w).unwrap(), -0.2);
    assert_eq!(leader_utility(3.0, 0.4, 0.0, 0.5, w).unwrap(), 3.0);
    assert!((leader_utility(1.0, 0.5, 0.7, 1.0, w).unwrap() - (-0.05)).abs() < 1e-15);
    assert!(matches!(leader_utility(1.0, 0.5, 1.5, 1.0, w), Err(Error::Config { .. })));
}

#[test]
fn cost_examples() {
    assert_eq!(perception_cost(&[Tensor::zeros(&[2, 5, 5])], 1e-4).unwrap().0, 0.0);
    assert_eq!(perception_cost(&[Tensor::full(&[1, 3, 3], 1.0)], 0.5).unwrap(), (1.0, 0.5));
    let n = 6;
    let uniform = Tensor::full(&[1, n, n], 1.0 / n as f64);
    let (raw, _) = perception_cost(&[uniform.clone(), uniform], 1e-4).unwrap();
    assert!((raw - 1.0 / n as f64).abs() < 1e-15);
    assert!(matches!(perception_cost(&[], 1e-4), Err(Error::Usage(_))));
}

proptest! {
    #[test]
    fn clip_is_invariant_to_a_common_log_prob_shift(
        pairs in prop::collection::vec((-2.0f64..0.0, -2.0f64..0.0, -2.0f64..2.0), 1..16),
        shift in -5.0f64..5.0,
    ) {
        let new: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let old: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let adv: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let a = clip_loss(&ppo_ratio(&new, &old).unwrap(), &adv, 0.2).unwrap();
        let new_s: Vec<f64> = new.iter().map(|x| x + shift).collect();
        let old_s: Vec<f64> = old.iter().map(|x| x + shift).collect();
        let b = clip_loss(&ppo_ratio(&new_s, &old_s).unwrap(), &adv, 0.2).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn wide_clip_range_is_the_plain_surrogate(
        pairs in prop::collection::vec((0.0f64..5.0, -2.0f64..2.0), 1..16),
    ) {
        let r: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let adv: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let plain = r.iter().zip(&adv).map(|(r, a)| r * a).sum::<f64>() / r.len() as f64;
        prop_assert!((clip_loss(&r, &adv, 1e9).unwrap() - plain).abs() < 1e-12);

        let mut g = Graph::new();
        let lp = g.constant(Tensor::from_vec(r.iter().map(|x| x.max(1e-300).ln()).collect()));
        let s = clip_surrogate(&mut g, lp, &vec![0.0; r.len()], &adv, 1e9);
        prop_assert!((g.value(s).item() - plain).abs() < 1e-9);
    }

    #[test]
    fn utility_decreases_in_cost(u in -3.0f64..3.0, c in 0.0f64..0.9, dc in 0.01f64..0.1,
                                 alpha in 0.01f64..=1.0, lambda in 1e-4f64..1.0) {
        for w in [LeaderWeighting::AlphaOnCost, LeaderWeighting::AlphaOnReturn] {
            if w == LeaderWeighting::AlphaOnReturn && alpha == 1.0 {
                continue;
            }
            let lo = leader_utility(u, c, alpha, lambda, w).unwrap();
            let hi = leader_utility(u, c + dc, alpha, lambda, w).unwrap();
            prop_assert!(hi < lo);
        }
    }
}
