"""Random instances and central finite differences for the policy objectives."""

from __future__ import annotations

import numpy as np

from signalrl.agentio import ParametricPolicy
from signalrl.rlopt import RolloutGroup, TrainConfig, Trajectory, grpo_objective, stpo_objective

K = 4
DIM = 10


def fd_relative_error(loss_and_grad, theta: np.ndarray, h: float = 1e-5) -> float:
    _, grad = loss_and_grad(theta)
    num = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        tp, tm = theta.copy(), theta.copy()
        tp[idx] += h
        tm[idx] -= h
        num[idx] = (loss_and_grad(tp)[0] - loss_and_grad(tm)[0]) / (2 * h)
    scale = max(np.linalg.norm(grad), np.linalg.norm(num), 1e-8)
    return float(np.linalg.norm(grad - num) / scale)


def _config(rng) -> TrainConfig:
    return TrainConfig(k=K, clip_eps=float(rng.uniform(0.1, 0.3)), beta=float(rng.uniform(0.0, 0.5)))


def grpo_instance(rng):
    """(loss_and_grad, theta) for a few contexts with k sampled actions each."""
    theta_ref = rng.normal(size=(4, DIM))
    theta = theta_ref + rng.normal(scale=0.3, size=theta_ref.shape)
    cfg = _config(rng)
    groups = [
        RolloutGroup.from_rewards(rng.normal(size=DIM), rng.integers(0, 4, size=K), rng.random(K))
        for _ in range(int(rng.integers(1, 4)))
    ]
    ref = ParametricPolicy(theta_ref)
    return (lambda th: grpo_objective(ParametricPolicy(th), ref, groups, cfg)), theta


def stpo_instance(rng, mode: str = "clipped"):
    """(loss_and_grad, theta) for k trajectories of random length near the reference."""
    theta_ref = rng.normal(size=(4, DIM))
    theta = theta_ref + rng.normal(scale=0.3, size=theta_ref.shape)
    cfg = _config(rng)
    ref = ParametricPolicy(theta_ref)
    trajs = []
    for _ in range(K):
        T = int(rng.integers(1, 7))
        X = rng.normal(size=(T, DIM))
        a = rng.integers(0, 4, size=T)
        lp = ref.log_probs(X)[np.arange(T), a]
        trajs.append(Trajectory(X, a, lp, float(rng.normal(scale=5))))
    return (lambda th: stpo_objective(ParametricPolicy(th), ref, trajs, cfg, mode=mode)), theta
