"""Rewards, group-centered advantages and the clipped policy objectives.

Both objectives return ``(loss, grad)`` where ``loss`` is the negated
objective and ``grad`` its exact gradient with respect to the policy's
``theta`` (a 4 x D matrix).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from ..agentio import ParametricPolicy, ParsedResponse, log_softmax
from ..microsim import MetricsReport
from ..netmodel import PHASES, Phase


class NumericalFailure(FloatingPointError):
    """Probabilities or objective values became non-finite."""


@dataclass
class TrainConfig:
    k: int = 8
    clip_eps: float = 0.2
    beta: float = 0.04
    w_acc: float = 0.9
    w_fmt: float = 0.1
    learning_rate: float = 0.05
    iterations: int = 200
    # Snapshot the reference policy every this many iterations.
    ref_refresh: int = 1
    batch_size: int = 64
    updates_per_batch: int = 4
    normalize_std: bool = False
    # Weight of average waiting time against average queue length in R_traj.
    wait_weight: float = 0.1
    stpo_mode: str = "clipped"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError(f"group size k must be >= 2, got {self.k}")
        if not self.clip_eps > 0:
            raise ValueError(f"clip_eps must be > 0, got {self.clip_eps}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.w_acc < 0 or self.w_fmt < 0 or abs(self.w_acc + self.w_fmt - 1.0) > 1e-9:
            raise ValueError(f"reward weights must be nonnegative and sum to 1, got ({self.w_acc}, {self.w_fmt})")
        if self.ref_refresh < 1:
            raise ValueError("ref_refresh must be >= 1")
        if self.iterations < 0 or self.batch_size < 1 or self.updates_per_batch < 1:
            raise ValueError("iterations, batch_size and updates_per_batch must be positive")
        if self.stpo_mode not in ("clipped", "literal"):
            raise ValueError(f"stpo_mode must be 'clipped' or 'literal', got {self.stpo_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RolloutGroup:
    """One context with k sampled actions, their rewards and centered advantages."""

    features: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    texts: list[str] | None = None

    def __post_init__(self) -> None:
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.advantages = np.asarray(self.advantages, dtype=float)
        if len(self.actions) < 2:
            raise ValueError("a rollout group needs k >= 2 completions")

    @classmethod
    def from_rewards(cls, features, actions, rewards, normalize_std: bool = False) -> "RolloutGroup":
        return cls(np.asarray(features, dtype=float), actions, rewards, group_advantages(rewards, normalize_std))


@dataclass
class Trajectory:
    features: np.ndarray  # (T, D)
    actions: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,) under the behaviour policy
    reward: float
    stepwise: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.log_probs = np.asarray(self.log_probs, dtype=float)
        if len(self.actions) < 1:
            raise ValueError("a trajectory needs T >= 1 steps")
        if self.stepwise is None:
            self.stepwise = stepwise_rewards(self.reward, len(self.actions))

    @property
    def T(self) -> int:
        return len(self.actions)


def offline_reward(parsed: ParsedResponse, expert: Phase, cfg: TrainConfig) -> float:
    acc = 1.0 if parsed.action is not None and Phase(parsed.action) == Phase(expert) else 0.0
    fmt = 1.0 if parsed.format_ok else 0.0
    return cfg.w_acc * acc + cfg.w_fmt * fmt


def group_advantages(rewards, normalize_std: bool = False) -> np.ndarray:
    """Rewards minus the group mean; optionally divided by the group std."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError(f"group advantages need k >= 2 rewards, got {r.shape}")
    adv = r - r.mean()
    if normalize_std:
        sd = r.std()
        if sd > 0:
            adv = adv / sd
    return adv


def stepwise_rewards(R_traj: float, T: int) -> np.ndarray:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return np.full(T, R_traj / T)


def trajectory_reward(report: MetricsReport, cfg: TrainConfig | None = None, wait_weight: float | None = None) -> float:
    """Negative of (average queue + weight * average waiting time)."""
    lam = wait_weight if wait_weight is not None else (cfg.wait_weight if cfg is not None else 0.1)
    return -(report.avg_queue + lam * report.awt)


def kl_divergence(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis from log-probabilities."""
    return np.sum(np.exp(logp) * (logp - logq), axis=-1)


def clipped_term(ratio, adv, eps: float):
    """min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A), elementwise."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def surrogate(theta, theta_ref, X, actions, adv, eps: float, beta: float, mode: str = "clipped"):
    """Objective and gradient for N contexts with m sampled actions each.

    ``X`` is (N, D); ``actions`` and ``adv`` are (N, m). The surrogate is
    averaged over all N * m samples and the exact KL(pi || pi_ref) over the N
    contexts. Returns ``(objective, grad, stats)``.
    """
    X = np.asarray(X, dtype=float)
    actions = np.asarray(actions, dtype=np.int64)
    adv = np.asarray(adv, dtype=float)
    n, m = actions.shape
    logp = log_softmax(X @ theta.T)
    logq = log_softmax(X @ theta_ref.T)
    if not (np.all(np.isfinite(logp)) and np.all(np.isfinite(logq))):
        raise NumericalFailure("non-finite policy log-probabilities")
    p = np.exp(logp)
    rows = np.arange(n)[:, None]
    lp_a = logp[rows, actions]
    lq_a = logq[rows, actions]
    onehot = np.zeros((n, m, len(PHASES)))
    np.put_along_axis(onehot, actions[:, :, None], 1.0, axis=2)
    score = onehot - p[:, None, :]  # d log pi(a) / d logits
    if mode == "clipped":
        ratio = np.exp(lp_a - lq_a)
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
        term = np.minimum(ratio * adv, clipped * adv)
        # Gradient flows only where the unclipped branch attains the min.
        active = np.where(adv >= 0, ratio < 1.0 + eps, ratio > 1.0 - eps)
        weight = np.where(active, adv * ratio, 0.0)
    elif mode == "literal":
        ratio = np.exp(lp_a - lq_a)
        term = lp_a * adv
        weight = adv
    else:
        raise ValueError(f"unknown objective mode {mode!r}")
    kl = kl_divergence(logp, logq)
    objective = float(term.mean() - beta * kl.mean())
    if not math.isfinite(objective):
        raise NumericalFailure("non-finite objective")
    g_logits = np.einsum("nm,nmk->nk", weight, score) / (n * m)
    g_logits -= beta * p * (logp - logq - kl[:, None]) / n
    grad = g_logits.T @ X
    stats = {"kl": float(kl.mean()), "ratio_mean": float(ratio.mean()), "clip_frac": float(np.mean(np.abs(ratio - 1) > eps))}
    return objective, grad, stats


def grpo_objective(policy: ParametricPolicy, reference: ParametricPolicy, groups, cfg: TrainConfig):
    """Negated clipped GRPO objective and its gradient over one or more rollout groups."""
    if isinstance(groups, RolloutGroup):
        groups = [groups]
    if not groups:
        raise ValueError("no rollout groups")
    X = np.stack([g.features for g in groups])
    actions = np.stack([g.actions for g in groups])
    adv = np.stack([g.advantages for g in groups])
    obj, grad, _ = surrogate(policy.theta, reference.theta, X, actions, adv, cfg.clip_eps, cfg.beta, "clipped")
    return -obj, -grad


def stpo_advantages(trajectories, normalize_std: bool = False) -> list[np.ndarray]:
    """Per-step advantages: each step's r_t minus the group mean of r_t."""
    if len(trajectories) < 2:
        raise ValueError("STPO needs a group of k >= 2 trajectories")
    per_step = np.array([t.reward / t.T for t in trajectories])
    centered = per_step - per_step.mean()
    if normalize_std:
        sd = per_step.std()
        if sd > 0:
            centered = centered / sd
    return [np.full(t.T, c) for t, c in zip(trajectories, centered)]


def stpo_objective(policy: ParametricPolicy, reference: ParametricPolicy, trajectories, cfg: TrainConfig, mode: str | None = None):
    """Negated stepwise objective and gradient pooled over every (o_t, a_t) of the group.

    ``mode="clipped"`` applies the ratio/clip form at each step;
    ``mode="literal"`` weights log pi(a_t | o_t) by A_t directly. Both carry the
    per-step KL penalty.
    """
    if not trajectories:
        raise ValueError("empty trajectory group")
    mode = mode or cfg.stpo_mode
    advs = stpo_advantages(trajectories, cfg.normalize_std)
    X = np.concatenate([t.features for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])[:, None]
    adv = np.concatenate(advs)[:, None]
    obj, grad, _ = surrogate(policy.theta, reference.theta, X, actions, adv, cfg.clip_eps, cfg.beta, mode)
    return -obj, -grad


def policy_kl(policy: ParametricPolicy, reference: ParametricPolicy, X) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return float(kl_divergence(policy.log_probs(X), reference.log_probs(X)).mean())
