from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _gradcheck import fd_relative_error, grpo_instance, stpo_instance
from signalrl.agentio import FEATURE_DIM, ParametricPolicy, ParsedResponse
from signalrl.controllers import max_pressure_next
from signalrl.microsim import MetricsReport
from signalrl.netmodel import PHASES, Phase, build_grid
from signalrl.rlopt import (
    ExpertSample,
    NumericalFailure,
    RolloutGroup,
    TrainConfig,
    TrainingDiverged,
    Trajectory,
    clipped_term,
    generate_expert_dataset,
    group_advantages,
    grpo_objective,
    grpo_train,
    kl_divergence,
    load_dataset,
    offline_reward,
    save_dataset,
    stepwise_rewards,
    stpo_advantages,
    stpo_objective,
    trajectory_reward,
)
from signalrl.rlopt.optim import Adam
from signalrl.rlopt.online import online_train


def test_offline_reward_weights():
    cfg = TrainConfig()
    assert offline_reward(ParsedResponse("", Phase.ETWT, True), Phase.ETWT, cfg) == pytest.approx(1.0)
    assert offline_reward(ParsedResponse("", Phase.NTST, True), Phase.ETWT, cfg) == pytest.approx(0.1)
    assert offline_reward(ParsedResponse("", Phase.ETWT, False), Phase.ETWT, cfg) == pytest.approx(0.9)


def test_train_config_validation():
    for bad in ({"k": 1}, {"clip_eps": 0}, {"beta": -1}, {"w_acc": 0.5, "w_fmt": 0.4}, {"stpo_mode": "x"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="lr"):
        TrainConfig.from_dict({"lr": 0.1})


def test_group_advantages_examples():
    assert group_advantages([1, 0, 0, 1]).tolist() == [0.5, -0.5, -0.5, 0.5]
    assert not group_advantages([3, 3, 3]).any()
    with pytest.raises(ValueError):
        group_advantages([1])
    assert np.std(group_advantages([1, 2, 3, 6], normalize_std=True)) == pytest.approx(1.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=32))
def test_group_advantages_centered(rewards):
    assert abs(group_advantages(rewards).sum()) <= 1e-9 * max(1.0, max(abs(r) for r in rewards))


def test_stepwise_examples():
    assert stepwise_rewards(10, 4).tolist() == [2.5] * 4
    assert stepwise_rewards(-3, 3).tolist() == [-1.0] * 3
    with pytest.raises(ValueError):
        stepwise_rewards(1.0, 0)


def test_trajectory_reward():
    assert trajectory_reward(MetricsReport()) == 0
    assert trajectory_reward(MetricsReport(avg_queue=10, awt=20)) == pytest.approx(-12)
    assert trajectory_reward(MetricsReport(avg_queue=9, awt=20)) > trajectory_reward(MetricsReport(avg_queue=10, awt=20))


def test_kl_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(200):
        z1, z2 = rng.normal(scale=4, size=(2, 4))
        lp = z1 - np.log(np.exp(z1).sum())
        lq = z2 - np.log(np.exp(z2).sum())
        assert kl_divergence(lp, lq) >= -1e-15


def test_clipping_region():
    eps = 0.2
    for A in (1.5, -0.7):
        probes = [1 + 2 * eps, 1 + 3 * eps, 2.5] if A > 0 else [1 - 2 * eps, 1 - 3 * eps, 0.1]
        vals = clipped_term(np.array(probes), A, eps)
        assert np.allclose(vals, vals[0])
    assert clipped_term(1 + 2 * eps, 1.0, eps) == pytest.approx(1 + eps)


def test_clipped_sample_has_zero_gradient():
    # A single sample pushed past 1 + eps with A > 0 contributes nothing but KL.
    x = np.zeros(FEATURE_DIM)
    x[-1] = 1.0
    ref = ParametricPolicy.zeros()
    theta = ref.theta.copy()
    theta[0, -1] = np.log(3 * 1.6 / (4 - 1.6))  # pi(ETWT) = 0.4 = 1.6 * 0.25
    group = RolloutGroup(x, [0, 0], [1, 1], [1.0, 1.0])
    _, g = grpo_objective(ParametricPolicy(theta), ref, group, TrainConfig(k=2, beta=0.0))
    assert np.allclose(g, 0)


def test_reference_identity():
    rng = np.random.default_rng(1)
    pol = ParametricPolicy(rng.normal(size=(4, FEATURE_DIM)))
    group = RolloutGroup.from_rewards(rng.normal(size=FEATURE_DIM), rng.integers(0, 4, 8), rng.random(8))
    loss, _ = grpo_objective(pol, pol, group, TrainConfig())
    assert abs(loss) < 1e-9


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(20):
        assert fd_relative_error(*grpo_instance(rng)) < 1e-4
        assert fd_relative_error(*stpo_instance(rng)) < 1e-4
        assert fd_relative_error(*stpo_instance(rng, "literal")) < 1e-4


def _traj(reward, T, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    return Trajectory(rng.normal(size=(T, dim)), rng.integers(0, 4, T), np.full(T, np.log(0.25)), reward)


def test_stpo_advantage_example():
    a = stpo_advantages([_traj(4, 2), _traj(0, 2)])
    assert a[0].tolist() == [1, 1] and a[1].tolist() == [-1, -1]


def test_stpo_group_equivalence():
    rng = np.random.default_rng(3)
    for _ in range(100):
        trajs = [_traj(float(rng.normal(scale=10)), int(rng.integers(1, 9))) for _ in range(int(rng.integers(2, 9)))]
        advs = stpo_advantages(trajs)
        mean_r = np.mean([t.stepwise[0] for t in trajs])
        for t, a in zip(trajs, advs):
            assert np.allclose(a, t.stepwise - mean_r, atol=1e-12)


def test_stpo_equal_rewards_zero_gradient():
    trajs = [_traj(-5.0, 3, seed=s) for s in range(4)]
    ref = ParametricPolicy.zeros(5)
    _, g = stpo_objective(ref, ref, trajs, TrainConfig(k=4))
    assert np.allclose(g, 0)
    with pytest.raises(ValueError):
        stpo_objective(ref, ref, [], TrainConfig())


def test_numerical_failure():
    ref = ParametricPolicy.zeros(3)
    group = RolloutGroup.from_rewards(np.array([np.nan, 1.0, 1.0]), [0, 1], [1, 0])
    with pytest.raises(NumericalFailure):
        grpo_objective(ref, ref, group, TrainConfig(k=2))


def test_adam_raises_on_divergence():
    with pytest.raises(TrainingDiverged):
        Adam(0.1).step(np.zeros(3), lambda th: (float("inf"), np.zeros(3)))


@pytest.fixture(scope="module")
def small_dataset():
    return generate_expert_dataset(build_grid(4, 4, 300), range(5), size=120, seed=1)


def test_dataset_labels_and_size(small_dataset):
    assert len(small_dataset) == 120
    for s in small_dataset:
        assert s.expert_action == max_pressure_next(s.observation)
        assert s.incident is None


def test_dataset_round_trip(small_dataset, tmp_path):
    save_dataset(small_dataset, tmp_path / "d.jsonl")
    assert load_dataset(tmp_path / "d.jsonl") == small_dataset
    line = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
    assert set(line) == {"observation", "incident", "expert_action"}


def test_dataset_bad_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"observation": {}, "incident": null, "expert_action": "ETWT"}\nnot json\n')
    with pytest.raises(ValueError, match="line"):
        load_dataset(p)


def test_zero_iterations_unchanged(small_dataset):
    pol = ParametricPolicy(np.random.default_rng(0).normal(size=(4, FEATURE_DIM)))
    out, hist = grpo_train(small_dataset, pol, TrainConfig(iterations=0))
    assert np.array_equal(out.theta, pol.theta) and hist == []


def test_grpo_improves_and_logs(small_dataset):
    _, hist = grpo_train(small_dataset, ParametricPolicy.zeros(), TrainConfig(iterations=40, batch_size=32))
    assert hist[-1]["accuracy"] > hist[0]["accuracy"]
    assert all(h["kl"] >= 0 for h in hist)
    assert set(hist[0]) >= {"iter", "mean_reward", "kl", "accuracy"}


def test_grpo_empty_dataset():
    with pytest.raises(ValueError):
        grpo_train([], ParametricPolicy.zeros(), TrainConfig())


def test_online_rejects_k1():
    with pytest.raises(ValueError):
        TrainConfig(k=1)


def test_online_smoke():
    from signalrl.microsim import FlowSpec, SimConfig, Simulator, spawn_flow

    net = build_grid(2, 2, 300)

    def env(seed):
        return Simulator(net, spawn_flow(FlowSpec(3000, seed=seed), net, 120), SimConfig(record_events=False))

    pol = ParametricPolicy(np.random.default_rng(0).normal(scale=0.1, size=(4, FEATURE_DIM)))
    out, hist = online_train(env, pol, TrainConfig(k=2, iterations=2), horizon_s=120)
    assert len(hist) == 2 and all(h["kl"] >= 0 for h in hist)
    assert out.theta.shape == pol.theta.shape


def test_expert_sample_validation():
    with pytest.raises(ValueError):
        ExpertSample.from_dict({"observation": {}, "incident": None, "expert_action": "ETWT", "reasoning": "x"})
    assert set(PHASES) == set(Phase)
