//! Central-difference checks for every primitive and for the full leader and
//! follower graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackrl::autodiff::{finite_difference_check, Graph, ParamSet, Tensor, Var};
use stackrl::perception::{
    leader_utility_graph, perception_cost_graph, policy_term, AttentionStack, LeaderWeighting,
    PerceptionConfig,
};
use stackrl::policy::{follower_loss, FollowerInputs, LossCoefficients, PolicyConfig, PolicyNet};

const EPS: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn params(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> ParamSet {
    let mut ps = ParamSet::new();
    for (i, s) in shapes.iter().enumerate() {
        ps.push(format!("p{i}"), random_tensor(rng, s, -1.0, 1.0));
    }
    ps
}

fn check(shapes: &[&[usize]], build: impl FnMut(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = params(&mut rng, shapes);
    finite_difference_check(build, &mut ps, EPS).unwrap()
}

/// Weighted sum so every output entry carries a distinct upstream gradient.
fn probe(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

macro_rules! primitive {
    ($name:ident, $shapes:expr, |$g:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let err = check($shapes, |$g: &mut Graph, $v: &[Var]| {
                let out = $body;
                probe($g, out)
            });
            assert!(err < 1e-4, "max relative error {err}");
        }
    };
}

primitive!(add, &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
primitive!(sub, &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
primitive!(mul, &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
primitive!(add_scalar, &[&[5]], |g, v| g.add_scalar(v[0], 2.5));
primitive!(scale, &[&[5]], |g, v| g.scale(v[0], -1.5));
primitive!(matmul, &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
primitive!(batch_matmul, &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.batch_matmul(v[0], v[1], false));
primitive!(batch_matmul_transposed, &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.batch_matmul(v[0], v[1], true));
primitive!(add_bias, &[&[3, 4], &[4]], |g, v| g.add_bias(v[0], v[1]));
primitive!(relu, &[&[4, 6]], |g, v| g.relu(v[0]));
primitive!(tanh, &[&[4, 6]], |g, v| g.tanh(v[0]));
primitive!(exp, &[&[4, 6]], |g, v| g.exp(v[0]));
primitive!(abs, &[&[4, 6]], |g, v| g.abs(v[0]));
primitive!(square, &[&[4, 6]], |g, v| g.square(v[0]));
primitive!(softmax, &[&[3, 5]], |g, v| g.softmax(v[0]));
primitive!(log_softmax, &[&[3, 5]], |g, v| g.log_softmax(v[0]));
primitive!(clip, &[&[4, 6]], |g, v| g.clip(v[0], -0.3, 0.4));
primitive!(minimum, &[&[4, 6], &[4, 6]], |g, v| g.minimum(v[0], v[1]));
primitive!(gather, &[&[4, 3]], |g, v| g.gather(v[0], &[2, 0, 1, 1]));
primitive!(reshape, &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
primitive!(transpose_last2, &[&[2, 3, 4]], |g, v| g.transpose_last2(v[0]));
primitive!(conv2d_stride1, &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1));
primitive!(conv2d_stride2_pad2, &[&[2, 2, 7, 6], &[3, 2, 5, 5], &[3]], |g, v| g.conv2d(v[0], v[1], v[2], 2, 2));

#[test]
fn sum_and_mean() {
    let err = check(&[&[3, 4]], |g, v| g.sum(v[0]));
    assert!(err < 1e-4);
    let err = check(&[&[3, 4]], |g, v| g.mean(v[0]));
    assert!(err < 1e-4);
}

#[test]
fn conv_relu_mean_pipeline() {
    let err = check(&[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], |g, v| {
        let c = g.conv2d(v[0], v[1], v[2], 2, 1);
        let r = g.relu(c);
        g.mean(r)
    });
    assert!(err < 1e-4, "{err}");
}

fn small_perception() -> PerceptionConfig {
    PerceptionConfig {
        stack_depth: 2,
        height: 7,
        width: 6,
        channels: vec![3, 4, 3],
        kernels: vec![5, 3, 3],
        strides: vec![2, 2, 1],
        attention_layers: 3,
        feature_dim: 5,
    }
}

/// Perception parameters with nonzero queries so attention is not uniform.
fn perturbed_stack(rng: &mut ChaCha8Rng) -> AttentionStack {
    let mut stack = AttentionStack::new(small_perception(), rng).unwrap();
    for t in stack.params_mut().tensors_mut() {
        for v in t.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    stack
}

struct Fixture {
    stack: AttentionStack,
    policy: PolicyNet,
    obs: Tensor,
    actions: Vec<usize>,
    old_log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stack = perturbed_stack(&mut rng);
    let mut policy = PolicyNet::new(
        PolicyConfig {
            feature_dim: 5,
            hidden: vec![6, 6],
            n_actions: 3,
        },
        &mut rng,
    )
    .unwrap();
    for t in policy.params_mut().tensors_mut() {
        for v in t.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let b = 4;
    let obs = random_tensor(&mut rng, &[b, 2, 7, 6], 0.0, 1.0);
    let raw: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = raw.iter().sum::<f64>() / b as f64;
    let std = (raw.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / b as f64).sqrt();
    Fixture {
        stack,
        policy,
        obs,
        actions: vec![0, 2, 1, 2],
        old_log_probs: vec![-1.0, -1.2, -0.9, -1.1],
        advantages: raw.iter().map(|a| (a - mean) / std).collect(),
        returns: (0..b).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

#[test]
fn leader_utility_graph_matches_central_differences() {
    let f = fixture();
    let n_perception = f.stack.params().len();
    let mut joint = f.stack.params().clone();
    for (name, t) in f.policy.params().iter() {
        joint.push(name, t.value.clone());
    }
    // only the perception parameters are differentiated
    for i in n_perception..joint.len() {
        joint.get_mut(i).requires_grad = false;
    }
    let err = finite_difference_check(
        |g, v| {
            let obs = g.constant(f.obs.clone());
            let p = f.stack.forward(g, &v[..n_perception], obs);
            let out = f.policy.forward(g, &v[n_perception..], p.features);
            let u_pol = policy_term(g, out.log_probs, &f.actions, &f.advantages);
            // a large cost weight keeps the attention term visible
            let (_, weighted) = perception_cost_graph(g, &p.attention, 0.5).unwrap();
            let u = leader_utility_graph(g, u_pol, weighted, 0.7, LeaderWeighting::AlphaOnCost).unwrap();
            g.neg(u)
        },
        &mut joint,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn follower_loss_graph_matches_central_differences() {
    let f = fixture();
    let n_perception = f.stack.params().len();
    let mut joint = f.stack.params().clone();
    for (name, t) in f.policy.params().iter() {
        joint.push(name, t.value.clone());
    }
    let inputs = FollowerInputs {
        actions: &f.actions,
        old_log_probs: &f.old_log_probs,
        advantages: &f.advantages,
        returns: &f.returns,
        advantage_stats: None,
    };
    let err = finite_difference_check(
        |g, v| {
            let obs = g.constant(f.obs.clone());
            let p = f.stack.forward(g, &v[..n_perception], obs);
            let out = f.policy.forward(g, &v[n_perception..], p.features);
            follower_loss(g, &out, &inputs, &LossCoefficients::default(), 0.01).unwrap().0
        },
        &mut joint,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}
