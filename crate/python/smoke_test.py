"""Smoke test for the stackrl_py extension module.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import tempfile
from pathlib import Path

import stackrl_py as s

TINY = """
grid_height = 6
grid_width = 6
conv_channels = [2, 3, 2]
feature_dim = 6
policy_hidden = [8]
rollout_length = 128
batch_size = 32
total_timesteps = 256
max_episode_length = 40
"""


def check_tabular():
    game = s.TabularGame.from_toml(
        "n_states = 1\nn_actions = 1\ngamma = 0.5\nlambda_cost = 0.0\n"
        "theta_grid = 1\ntransition = [1.0]\nreward = [1.0]\ncost = [0.0]\n"
        'phi_grid = "all"\n'
    )
    out = game.solve()
    assert abs(out["values"][0] - 2.0) < 1e-9, out
    assert out["greedy_policy"] == [0]

    rand = s.TabularGame.random(0, 3, 2, 2, 0.9, 0.5)
    n = rand.n_states * rand.n_actions
    a = [float(i) for i in range(n)]
    b = [float(-i) for i in range(n)]
    assert rand.contraction_ratio(a, b) <= 0.9 + 1e-12
    assert len(rand.apply(a)) == n


def check_gae():
    adv, ret = s.gae([1.0, -1.0, 0.5], [0.2, 0.3, 0.4, 9.0], [True, True, True])
    assert all(abs(x - y) < 1e-12 for x, y in zip(adv, [0.8, -1.3, 0.1]))
    assert all(abs(r - a - v) < 1e-12 for r, a, v in zip(ret, adv, [0.2, 0.3, 0.4]))
    assert s.clip_loss([1.5], [1.0]) == 1.2
    try:
        s.gae([1.0], [0.0], [False])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def check_env():
    env = s.BeamCatch(max_episode_length=5)
    obs = env.reset(3)
    assert len(obs) == math.prod(env.observation_shape)
    done = False
    steps = 0
    while not done:
        obs, reward, done = env.step(1)
        assert abs(reward) <= 1.0
        steps += 1
    assert steps == 5
    assert s.BeamCatch().optimal_return(0, 64) == 10.0


def check_training():
    cfg = s.Config(TINY)
    assert cfg.mode == "stackelberg" and cfg.iterations == 2
    try:
        s.Config("gamma = 2.0")
    except ValueError as e:
        assert "gamma" in str(e)
    else:
        raise AssertionError("invalid gamma accepted")

    t = s.Trainer(cfg)
    row = t.train_iteration()
    assert row["env_steps"] == 128 and t.iteration == 1
    with tempfile.TemporaryDirectory() as d:
        a = s.train(cfg, Path(d) / "a")
        b = s.train(cfg, Path(d) / "b")
        assert [r["clip_loss"] for r in a] == [r["clip_loss"] for r in b]
        ckpt = Path(d) / "a" / "final.ckpt.json"
        returns = s.evaluate(ckpt, episodes=3, seed=1)
        assert returns == s.evaluate(ckpt, episodes=3, seed=1)
        assert len(s.random_returns(cfg, episodes=3)) == 3


if __name__ == "__main__":
    check_tabular()
    check_gae()
    check_env()
    check_training()
    print("smoke test passed")
