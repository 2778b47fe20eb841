"""Parity-partitioned half-step scheduling with one-half-step message latency.

Each decision step has two half-steps. Group 1 (even row + col) reads the
messages group 2 left in the previous half-step, decides, and writes messages
for its group-2 neighbors into a fresh buffer; the environment then advances
by ``offset_s`` and group 2 does the same in the other direction.

Green times vary per intersection (15 s, or 20 s after a phase change), so a
half-step also waits until every member of the acting group has reached the
end of its green. An intersection that is ready early keeps its green until
its group acts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .agentio import AgentMessage
from .controllers import Controller, Decision, DecisionContext
from .microsim import MetricsReport, Simulator
from .netmodel import PHASES, GridNetwork, IntersectionId, ParityPartition, neighbor_distance, parity_partition

log = logging.getLogger(__name__)

DELIVERY_RADIUS_M = 2000.0
DECISION_INTERVAL_S = 15
DEFAULT_OFFSET_S = 7


class MessageBuffer:
    """Pending messages per recipient; reading an inbox empties it."""

    def __init__(self) -> None:
        self._box: dict[IntersectionId, list[AgentMessage]] = {}

    def add(self, recipient: IntersectionId, msg: AgentMessage) -> None:
        self._box.setdefault(tuple(recipient), []).append(msg)

    def read(self, recipient: IntersectionId) -> list[AgentMessage]:
        return self._box.pop(tuple(recipient), [])

    def recipients(self) -> list[IntersectionId]:
        return sorted(self._box)

    def messages(self) -> list[AgentMessage]:
        return [m for r in sorted(self._box) for m in self._box[r]]

    def __len__(self) -> int:
        return sum(len(v) for v in self._box.values())

    def __bool__(self) -> bool:
        return bool(self._box)


def deliver(
    buffer: MessageBuffer,
    sender: IntersectionId,
    body: str,
    recipients,
    network: GridNetwork,
    *,
    partition: ParityPartition | None = None,
    half_step: int = 0,
    radius_m: float = DELIVERY_RADIUS_M,
    violations: list | None = None,
) -> list[AgentMessage]:
    """Queue ``body`` for every recipient of opposite parity within ``radius_m``."""
    partition = partition or parity_partition(network)
    sender = network.check(sender)
    g_sender = partition.group_of(sender)
    out = []
    for r in recipients:
        r = network.check(r)
        if partition.group_of(r) == g_sender:
            note = {"half_step": half_step, "sender": list(sender), "recipient": list(r), "reason": "same parity"}
            log.warning("dropping message %s -> %s: same parity group", sender, r)
            if violations is not None:
                violations.append(note)
            continue
        if neighbor_distance(sender, r, network) > radius_m:
            continue
        msg = AgentMessage(sender, r, body, half_step)
        buffer.add(r, msg)
        out.append(msg)
    return out


def default_incident_provider(sim: Simulator, iid: IntersectionId) -> str | None:
    lines = sim.emergency_advisories(iid)
    return "\n".join(lines) if lines else None


@dataclass
class StepRecord:
    intersection: IntersectionId
    time: int
    features: np.ndarray
    action: int
    log_prob: float


@dataclass
class EpisodeResult:
    metrics: MetricsReport
    events: list[dict] = field(default_factory=list)
    messages: list[dict] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    violations: list[dict] = field(default_factory=list)
    reads: list[tuple[AgentMessage, int]] = field(default_factory=list)


PolicyMap = Controller | Mapping[IntersectionId, Controller]


def _policy_for(policies: PolicyMap, iid: IntersectionId) -> Controller:
    if isinstance(policies, Mapping):
        return policies[iid]
    return policies


class AsyncRunner:
    """Drives one simulator episode through the half-step protocol."""

    def __init__(
        self,
        sim: Simulator,
        policies: PolicyMap,
        *,
        partition: ParityPartition | None = None,
        communicate: bool = True,
        offset_s: int = DEFAULT_OFFSET_S,
        interval_s: int = DECISION_INTERVAL_S,
        radius_m: float = DELIVERY_RADIUS_M,
        rng: np.random.Generator | None = None,
        incident_provider: Callable[[Simulator, IntersectionId], str | None] | None = default_incident_provider,
        record_steps: bool = False,
    ) -> None:
        if not 0 <= offset_s <= interval_s:
            raise ValueError(f"offset must lie in [0, {interval_s}], got {offset_s}")
        self.sim = sim
        self.network = sim.network
        self.policies = policies
        self.partition = partition or parity_partition(sim.network)
        self.groups = (sorted(self.partition.group1), sorted(self.partition.group2))
        self.communicate = communicate
        self.offset_s = int(offset_s)
        self.interval_s = int(interval_s)
        self.radius_m = radius_m
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.incident_provider = incident_provider
        self.record_steps = record_steps
        self.buffer = MessageBuffer()
        self.step_index = 0
        self.half_step = 0  # global half-step counter
        self._earliest = 0
        self.message_log: list[dict] = []
        self.violations: list[dict] = []
        self.reads: list[tuple[AgentMessage, int]] = []
        self.steps: list[StepRecord] = []

    def _wait_ready(self, group: list[IntersectionId], earliest: int, horizon: int) -> bool:
        sim = self.sim
        while sim.time < horizon:
            if sim.time >= earliest and all(sim.signal(i).awaiting_decision for i in group):
                return True
            sim.tick()
        return False

    def _half_step(self, group: list[IntersectionId], within_step: int) -> None:
        sim = self.sim
        h = self.half_step
        nxt = MessageBuffer()
        decisions: list[tuple[IntersectionId, Decision]] = []
        for iid in group:
            inbox = self.buffer.read(iid)
            for m in inbox:
                self.reads.append((m, h))
            incident = self.incident_provider(sim, iid) if self.incident_provider else None
            ctx = DecisionContext(iid, sim.observe(iid), sim.signal(iid).current_phase, sim.time, self.rng, incident, inbox)
            decision = _policy_for(self.policies, iid).decide(ctx)
            decisions.append((iid, decision))
            if self.record_steps and decision.features is not None:
                self.steps.append(
                    StepRecord(iid, sim.time, decision.features, PHASES.index(decision.phase), float(decision.log_prob))
                )
            if self.communicate and decision.message:
                sent = deliver(
                    nxt,
                    iid,
                    decision.message,
                    self.network.neighbors(iid),
                    self.network,
                    partition=self.partition,
                    half_step=h,
                    radius_m=self.radius_m,
                    violations=self.violations,
                )
                for m in sent:
                    self.message_log.append(
                        {
                            "step": self.step_index,
                            "half_step": within_step,
                            "sender": list(m.sender),
                            "recipient": list(m.recipient),
                            "body": m.body,
                        }
                    )
        # Any message left unread was addressed to an agent that does not act now.
        leftover = self.buffer.messages()
        if leftover:
            self.violations.extend(
                {"half_step": h, "sender": list(m.sender), "recipient": list(m.recipient), "reason": "unread"} for m in leftover
            )
        for iid, decision in decisions:
            sim.set_phase(iid, decision.phase)
        self.buffer = nxt
        self.half_step += 1

    def run_decision_step(self, horizon: int) -> bool:
        """One full step (both half-steps). Returns False once the horizon is reached."""
        g1, g2 = self.groups
        if not self._wait_ready(g1, self._earliest, horizon):
            return False
        t1 = self.sim.time
        self._half_step(g1, 1)
        if not self._wait_ready(g2, t1 + self.offset_s, horizon):
            return False
        t2 = self.sim.time
        self._half_step(g2, 2)
        self._earliest = t2 + (self.interval_s - self.offset_s)
        self.step_index += 1
        return True

    def run(self, horizon: int) -> EpisodeResult:
        while self.run_decision_step(horizon):
            pass
        self.sim.run_until(horizon)
        return EpisodeResult(
            metrics=self.sim.metrics(),
            events=self.sim.events,
            messages=self.message_log,
            steps=self.steps,
            violations=self.violations,
            reads=self.reads,
        )


def run_decision_step(runner: AsyncRunner, horizon: int) -> MessageBuffer:
    """Advance ``runner`` by one decision step and return the buffer left for group 1."""
    runner.run_decision_step(horizon)
    return runner.buffer


def run_independent(
    sim: Simulator,
    policies: PolicyMap,
    horizon: int,
    *,
    rng: np.random.Generator | None = None,
    incident_provider: Callable[[Simulator, IntersectionId], str | None] | None = default_incident_provider,
) -> EpisodeResult:
    """Every intersection decides at its own green expiry; no messages."""
    rng = rng if rng is not None else np.random.default_rng(0)
    while sim.time < horizon:
        for iid in sim.pending():
            incident = incident_provider(sim, iid) if incident_provider else None
            ctx = DecisionContext(iid, sim.observe(iid), sim.signal(iid).current_phase, sim.time, rng, incident, [])
            sim.set_phase(iid, _policy_for(policies, iid).decide(ctx).phase)
        sim.tick()
    return EpisodeResult(metrics=sim.metrics(), events=sim.events)
