"""Classical baselines: FixedTime, MaxPressure and Random."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol

import numpy as np

from .microsim import Observation
from .netmodel import MOVEMENTS, PHASES, IntersectionId, Phase

RECEIVING_LANES = len(MOVEMENTS)

if TYPE_CHECKING:
    from .agentio import AgentMessage


@dataclass
class DecisionContext:
    intersection: IntersectionId
    observation: Observation
    current_phase: Phase
    time: int
    rng: np.random.Generator
    incident: str | None = None
    inbox: list["AgentMessage"] = field(default_factory=list)


@dataclass
class Decision:
    phase: Phase
    message: str | None = None
    log_prob: float | None = None
    features: np.ndarray | None = None


class Controller(Protocol):
    name: str
    # Whether the controller reads incident text; EAA is "not applicable" otherwise.
    reads_incidents: bool

    def decide(self, ctx: DecisionContext) -> Decision: ...


@dataclass(frozen=True)
class FixedTimePlan:
    cycle_order: tuple[Phase, ...] = PHASES
    green_s: tuple[int, ...] = (15, 15, 15, 15)

    def __post_init__(self) -> None:
        order = tuple(Phase(p) for p in self.cycle_order)
        if sorted(order) != sorted(PHASES) or len(order) != 4:
            raise ValueError(f"cycle_order must be a permutation of the 4 phases, got {self.cycle_order}")
        if len(self.green_s) != 4 or any(g <= 0 for g in self.green_s):
            raise ValueError(f"green_s needs 4 positive durations, got {self.green_s}")
        object.__setattr__(self, "cycle_order", order)


def fixed_time_next(plan: FixedTimePlan, current: Phase) -> Phase:
    """Next phase in the cycle after ``current``."""
    order = plan.cycle_order
    return order[(order.index(Phase(current)) + 1) % len(order)]


def _downstream_array(obs: Observation, downstream_queues) -> np.ndarray:
    if downstream_queues is None:
        return obs.downstream
    return np.asarray(downstream_queues)


def pressure(obs: Observation, phase: Phase, downstream_queues=None) -> float:
    """Upstream minus downstream queue, summed over the phase's two movements.

    The upstream term is early queued + segment 1 on the movement's lane. The
    downstream term is the per-lane mean of buffered vehicles on the receiving
    arm (arm total / 3), 0 when the movement leaves the grid.
    ``downstream_queues`` holds arm totals as a (4, 2) array laid out like
    ``obs.counts[:, :, 0]`` and defaults to ``obs.downstream``.
    """
    p = PHASES.index(Phase(phase))
    down = _downstream_array(obs, downstream_queues)
    up = obs.counts[p, :, 0] + obs.counts[p, :, 1]
    return float(up.sum()) - float(down[p].sum()) / RECEIVING_LANES


def max_pressure_next(obs: Observation, downstream_queues=None) -> Phase:
    """Phase of highest pressure; ties go to the earliest of ETWT, ELWL, NTST, NLSL."""
    values = [pressure(obs, ph, downstream_queues) for ph in PHASES]
    # Relative tolerance so rounding in the downstream division cannot split a tie.
    tol = 1e-9 * max(1.0, max(abs(v) for v in values))
    best = 0
    for k in range(1, len(PHASES)):
        if values[k] > values[best] + tol:
            best = k
    return PHASES[best]


def random_next(rng: np.random.Generator) -> Phase:
    return PHASES[int(rng.integers(4))]


class FixedTimeController:
    """Cycles the plan; a phase with green g is held for ceil(g / 15) decisions."""

    name = "fixedtime"
    reads_incidents = False

    def __init__(self, plan: FixedTimePlan | None = None, decision_green_s: int = 15) -> None:
        self.plan = plan or FixedTimePlan()
        self.decision_green_s = decision_green_s
        self._held: dict[IntersectionId, int] = {}

    def _repeats(self, phase: Phase) -> int:
        g = self.plan.green_s[self.plan.cycle_order.index(phase)]
        return max(1, math.ceil(g / self.decision_green_s))

    def decide(self, ctx: DecisionContext) -> Decision:
        held = self._held.get(ctx.intersection, 1)
        if held < self._repeats(ctx.current_phase):
            self._held[ctx.intersection] = held + 1
            return Decision(ctx.current_phase)
        self._held[ctx.intersection] = 1
        return Decision(fixed_time_next(self.plan, ctx.current_phase))


class MaxPressureController:
    name = "maxpressure"
    reads_incidents = False

    def decide(self, ctx: DecisionContext) -> Decision:
        return Decision(max_pressure_next(ctx.observation))


class RandomController:
    name = "random"
    # Table-style reporting scores random guessing on incidents.
    reads_incidents = True

    def __init__(self, seed: int | None = None) -> None:
        self.rng = np.random.default_rng(seed) if seed is not None else None

    def decide(self, ctx: DecisionContext) -> Decision:
        rng = self.rng if self.rng is not None else ctx.rng
        return Decision(random_next(rng), log_prob=math.log(0.25))
