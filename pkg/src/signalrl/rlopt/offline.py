"""Expert-labeled scenario datasets and offline GRPO training."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ..agentio import ParametricPolicy, ParsedResponse, featurize
from ..controllers import Controller, DecisionContext, MaxPressureController, RandomController
from ..microsim import FlowSpec, Observation, SimConfig, Simulator, spawn_flow
from ..netmodel import PHASES, GridNetwork, Phase
from .objectives import RolloutGroup, TrainConfig, grpo_objective, group_advantages, offline_reward, policy_kl
from .optim import Adam, TrainingDiverged

log = logging.getLogger(__name__)


@dataclass
class ExpertSample:
    observation: Observation
    incident: str | None
    expert_action: Phase

    def __post_init__(self) -> None:
        self.expert_action = Phase(self.expert_action)

    def to_dict(self) -> dict:
        return {"observation": self.observation.to_dict(), "incident": self.incident, "expert_action": self.expert_action.value}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertSample":
        unknown = set(d) - {"observation", "incident", "expert_action"}
        if unknown:
            raise ValueError(f"unknown sample fields: {sorted(unknown)}")
        return cls(Observation.from_dict(d["observation"]), d.get("incident"), Phase(d["expert_action"]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExpertSample):
            return NotImplemented
        return self.observation == other.observation and self.incident == other.incident and self.expert_action == other.expert_action


def save_dataset(samples: Iterable[ExpertSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def load_dataset(path) -> list[ExpertSample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(ExpertSample.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad expert sample: {exc}") from exc
    return out


def generate_expert_dataset(
    network: GridNetwork,
    flow_seeds: Iterable[int],
    oracle: Controller | None = None,
    size: int = 3000,
    *,
    rate_range_vph: tuple[float, float] = (2000.0, 8000.0),
    prefix_s: int = 900,
    sample_prob: float = 0.2,
    balance: bool = True,
    max_rollouts: int = 1000,
    seed: int = 0,
    sim_config: SimConfig | None = None,
) -> list[ExpertSample]:
    """Observations from random-controller rollouts, each labeled by ``oracle``.

    Rollouts cycle through ``flow_seeds`` (continuing past the list if more
    samples are needed), each with a demand drawn from ``rate_range_vph``.
    Decision instants are kept with probability ``sample_prob``; empty
    observations are skipped since every phase ties there.

    With ``balance`` each phase label is capped at ``ceil(size / 4)``, so
    the rarer left-turn labels are not swamped by through phases. If some
    label cannot fill its quota within ``max_rollouts`` rollouts the
    remainder is topped up from the overflow in collection order.
    """
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    oracle = oracle or MaxPressureController()
    seeds = list(flow_seeds) or [0]
    rng = np.random.default_rng(seed)
    driver = RandomController()
    quota = -(-size // len(PHASES)) if balance else size
    kept: list[ExpertSample] = []
    overflow: list[ExpertSample] = []
    per_label = {p: 0 for p in PHASES}
    i = 0
    while len(kept) < size and i < max_rollouts:
        fseed = seeds[i] if i < len(seeds) else seeds[-1] + 1 + i - len(seeds)
        i += 1
        rate = float(rng.uniform(*rate_range_vph))
        sim = Simulator(network, spawn_flow(FlowSpec(rate, seed=fseed), network, prefix_s), sim_config or SimConfig(record_events=False))
        while sim.time < prefix_s and len(kept) < size:
            for iid in sim.pending():
                obs = sim.observe(iid)
                ctx = DecisionContext(iid, obs, sim.signal(iid).current_phase, sim.time, rng)
                if obs.counts.any() and rng.random() < sample_prob:
                    sample = ExpertSample(obs, None, oracle.decide(ctx).phase)
                    if per_label[sample.expert_action] < quota:
                        per_label[sample.expert_action] += 1
                        kept.append(sample)
                        if len(kept) >= size:
                            break
                    elif len(overflow) < size:
                        overflow.append(sample)
                sim.set_phase(iid, driver.decide(ctx).phase)
            sim.tick()
    if len(kept) < size:
        log.warning("label quotas unfilled after %d rollouts; topping up from overflow", i)
        kept.extend(overflow[: size - len(kept)])
    return kept


def dataset_arrays(dataset: list[ExpertSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([featurize(s.observation) for s in dataset])
    y = np.array([PHASES.index(s.expert_action) for s in dataset], dtype=np.int64)
    return X, y


def agreement(policy: ParametricPolicy, X: np.ndarray, y: np.ndarray) -> float:
    """Fraction of samples whose greedy action equals the label."""
    return float(np.mean(np.argmax(X @ policy.theta.T, axis=1) == y))


def _sample_actions(logp: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(np.exp(logp), axis=1)
    u = rng.random((len(logp), k)) * cdf[:, -1:]
    return np.minimum((u[:, :, None] >= cdf[:, None, :]).sum(axis=2), len(PHASES) - 1)


def grpo_train(
    dataset: list[ExpertSample],
    policy: ParametricPolicy,
    cfg: TrainConfig,
    *,
    on_iteration: Callable[[dict], None] | None = None,
) -> tuple[ParametricPolicy, list[dict]]:
    """Offline GRPO: k sampled actions per scenario, scored against the expert label.

    Actions are sampled from the frozen reference snapshot, which is refreshed
    every ``cfg.ref_refresh`` iterations. Each iteration takes
    ``cfg.updates_per_batch`` ascent steps on one minibatch.
    """
    if not dataset:
        raise ValueError("empty dataset")
    policy = policy.copy()
    X, y = dataset_arrays(dataset)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate)
    reference = policy.copy()
    history: list[dict] = []
    n = len(dataset)
    for it in range(cfg.iterations):
        if it % cfg.ref_refresh == 0:
            reference = policy.copy()
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        Xb = X[idx]
        actions = _sample_actions(reference.log_probs(Xb), cfg.k, rng)
        groups = []
        rewards_all = []
        for row, b in enumerate(idx):
            # The parametric backend always emits a well-formed answer.
            rewards = [
                offline_reward(ParsedResponse("", PHASES[a], True), PHASES[y[b]], cfg) for a in actions[row]
            ]
            rewards_all.extend(rewards)
            groups.append(RolloutGroup(Xb[row], actions[row], rewards, group_advantages(rewards, cfg.normalize_std)))

        def loss_and_grad(theta):
            trial = ParametricPolicy(theta)
            return grpo_objective(trial, reference, groups, cfg)

        theta = policy.theta
        loss = 0.0
        for _ in range(cfg.updates_per_batch):
            theta, loss = opt.step(theta, loss_and_grad)
        if not np.all(np.isfinite(theta)):
            raise TrainingDiverged(f"iteration {it}: non-finite parameters")
        policy = ParametricPolicy(theta, policy.message_threshold, policy.greedy, policy.name)
        rec = {
            "iter": it,
            "mean_reward": float(np.mean(rewards_all)),
            "kl": policy_kl(policy, reference, Xb),
            "accuracy": agreement(policy, X, y),
            "loss": float(loss),
        }
        history.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
    return policy, history


def write_history(history: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
