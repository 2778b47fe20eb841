"""Online stepwise training over simulated episodes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..agentio import ParametricPolicy
from ..asynccomm import AsyncRunner
from ..microsim import MetricsReport, Simulator
from ..netmodel import PHASES
from .objectives import TrainConfig, Trajectory, policy_kl, stpo_objective, trajectory_reward
from .optim import Adam

log = logging.getLogger(__name__)

EnvFactory = Callable[[int], Simulator]


@dataclass
class Rollout:
    trajectory: Trajectory
    metrics: MetricsReport
    messages: int


def rollout(
    env_factory: EnvFactory,
    policy,
    scenario_seed: int,
    horizon_s: int,
    *,
    rng_seed=0,
    communicate: bool = True,
    cfg: TrainConfig | None = None,
) -> Rollout:
    """Run one episode through the half-step scheduler and collect every decision."""
    sim = env_factory(scenario_seed)
    runner = AsyncRunner(sim, policy, communicate=communicate, rng=np.random.default_rng(rng_seed), record_steps=True)
    res = runner.run(horizon_s)
    steps = res.steps
    if not steps:
        raise ValueError("episode produced no decisions; horizon too short")
    traj = Trajectory(
        np.stack([s.features for s in steps]),
        np.array([s.action for s in steps]),
        np.array([s.log_prob for s in steps]),
        trajectory_reward(res.metrics, cfg),
    )
    return Rollout(traj, res.metrics, len(res.messages))


def online_train(
    env_factory: EnvFactory,
    policy: ParametricPolicy,
    cfg: TrainConfig,
    *,
    horizon_s: int = 3600,
    communicate: bool = True,
    shared_seed: bool = True,
    seed_base: int = 1_000_000,
    on_iteration: Callable[[dict], None] | None = None,
) -> tuple[ParametricPolicy, list[dict]]:
    """Roll k episodes from the reference snapshot, score them, step on the stepwise objective.

    With ``shared_seed`` every member of a group sees the same scenario seed
    (common random numbers), so advantages reflect the policy's sampling
    rather than demand noise. Scenario seeds start at ``seed_base`` to keep
    them apart from evaluation seeds.
    """
    if cfg.k < 2:
        raise ValueError("online training needs k >= 2")
    policy = policy.copy()
    policy.greedy = False
    opt = Adam(cfg.learning_rate)
    reference = policy.copy()
    history: list[dict] = []
    for it in range(cfg.iterations):
        if it % cfg.ref_refresh == 0:
            reference = policy.copy()
        group = []
        for j in range(cfg.k):
            scenario = seed_base + cfg.seed * 100_003 + it * (1 if shared_seed else cfg.k) + (0 if shared_seed else j)
            group.append(
                rollout(env_factory, reference, scenario, horizon_s, rng_seed=(cfg.seed, it, j), communicate=communicate, cfg=cfg)
            )
        trajs = [r.trajectory for r in group]

        def loss_and_grad(theta):
            return stpo_objective(ParametricPolicy(theta), reference, trajs, cfg)

        theta = policy.theta
        for _ in range(cfg.updates_per_batch):
            theta, _ = opt.step(theta, loss_and_grad)
        policy = ParametricPolicy(theta, policy.message_threshold, False, policy.name)
        X = np.concatenate([t.features for t in trajs])
        rec = {
            "iter": it,
            "mean_reward": float(np.mean([t.reward for t in trajs])),
            "kl": policy_kl(policy, reference, X),
            "accuracy": None,
            "mean_att": float(np.mean([r.metrics.att for r in group])),
            "messages": int(sum(r.messages for r in group)),
        }
        history.append(rec)
        log.info("online iter %d reward %.4f kl %.2e", it, rec["mean_reward"], rec["kl"])
        if on_iteration is not None:
            on_iteration(rec)
    return policy, history


def evaluate(
    env_factory: EnvFactory,
    policy,
    seeds,
    horizon_s: int = 3600,
    *,
    communicate: bool = True,
    cfg: TrainConfig | None = None,
    rng_seed: int = 0,
) -> list[tuple[float, MetricsReport]]:
    """(R_traj, metrics) per seed for any controller, through the half-step scheduler."""
    out = []
    for s in seeds:
        sim = env_factory(s)
        runner = AsyncRunner(sim, policy, communicate=communicate, rng=np.random.default_rng((rng_seed, s)))
        res = runner.run(horizon_s)
        out.append((trajectory_reward(res.metrics, cfg), res.metrics))
    return out


def action_histogram(traj: Trajectory) -> dict[str, int]:
    counts = np.bincount(traj.actions, minlength=len(PHASES))
    return {p.value: int(c) for p, c in zip(PHASES, counts)}
