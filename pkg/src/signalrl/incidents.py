"""Textual incidents, emergency-vehicle flows and their evaluation.

Local incidents are short texts with a set of acceptable phases; a policy is
scored by emergency action accuracy (EAA), the fraction of incidents answered
with an allowed phase. Network-wide incidents are emergency vehicles mixed
into the demand, scored by their travel and waiting times (AETT, AEWT).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .asynccomm import AsyncRunner
from .controllers import Controller, Decision, DecisionContext, MaxPressureController
from .microsim import FlowSpec, Observation, SimConfig, Simulator, spawn_flow
from .netmodel import PHASES, Approach, GridNetwork, IntersectionId, Movement, Phase, movement_for, phase_movements

log = logging.getLogger(__name__)

SCOPES = ("local", "network_wide")
INCIDENT_FIELDS = ("id", "text", "location", "allowed_actions", "scope")


@dataclass(frozen=True)
class Incident:
    id: str
    text: str
    location: IntersectionId | None
    allowed_actions: frozenset[Phase]
    scope: str = "local"

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError(f"incident {self.id}: empty text")
        allowed = frozenset(Phase(a) for a in self.allowed_actions)
        if not allowed:
            raise ValueError(f"incident {self.id}: no allowed actions")
        object.__setattr__(self, "allowed_actions", allowed)
        if self.location is not None:
            object.__setattr__(self, "location", tuple(int(v) for v in self.location))
        if self.scope not in SCOPES:
            raise ValueError(f"incident {self.id}: scope must be one of {SCOPES}, got {self.scope!r}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "location": list(self.location) if self.location is not None else None,
            # Phase order, not set order, so files are stable.
            "allowed_actions": [p.value for p in PHASES if p in self.allowed_actions],
            "scope": self.scope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Incident":
        unknown = set(d) - set(INCIDENT_FIELDS)
        if unknown:
            raise ValueError(f"unknown incident fields: {sorted(unknown)}")
        missing = {"id", "text", "allowed_actions"} - set(d)
        if missing:
            raise ValueError(f"missing incident fields: {sorted(missing)}")
        return cls(str(d["id"]), d["text"], d.get("location"), frozenset(d["allowed_actions"]), d.get("scope", "local"))


def load_fixtures(path=None) -> list[Incident]:
    """Parse a JSONL incident file; ``None`` loads the bundled fixtures."""
    if path is None:
        text = resources.files("signalrl").joinpath("data/incidents.jsonl").read_text()
        source = "<bundled incidents.jsonl>"
    else:
        text = Path(path).read_text()
        source = str(path)
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(Incident.from_dict(json.loads(line)))
        except (ValueError, TypeError, AttributeError) as exc:
            raise ValueError(f"{source}:{lineno}: malformed incident record: {exc}") from exc
    return out


def save_fixtures(incidents: Iterable[Incident], path) -> None:
    with open(path, "w") as fh:
        for inc in incidents:
            fh.write(json.dumps(inc.to_dict()) + "\n")


# -- rule table ---------------------------------------------------------------

_DIR_RE = re.compile(r"\b(north|south|east|west)(?:bound|ern)\b", re.IGNORECASE)
_LEFT_RE = re.compile(r"\bturn(?:ing)? left\b", re.IGNORECASE)
_DEMAND_RE = re.compile(
    r"\b(congestion|jam|heavy|increased|queue|queuing|backed up|passing through|dismiss)", re.IGNORECASE
)
_OBSTRUCTION_RE = re.compile(
    r"\b(stopped|blocking|blocked|struck|spun out|slowing|closed|stalled|disabled)\b", re.IGNORECASE
)

_AXIS_THROUGH = {"E": Phase.ETWT, "W": Phase.ETWT, "N": Phase.NTST, "S": Phase.NTST}
_AXIS_LEFT = {"E": Phase.ELWL, "W": Phase.ELWL, "N": Phase.NLSL, "S": Phase.NLSL}
_CROSS_THROUGH = {"E": Phase.NTST, "W": Phase.NTST, "N": Phase.ETWT, "S": Phase.ETWT}


def rule_phase(text: str) -> Phase | None:
    """Phase suggested by the rule table, or None if no rule fires.

    Rules, in order: a left-turn queue on an axis gets that axis's left
    phase; a demand surge (congestion, heavy traffic, a passing event, a
    dismissal) gets its own axis's through phase; an obstruction (a stopped
    vehicle, a blocked crosswalk) gets the cross street's through phase so the
    blocked movement is not released into it.
    """
    m = _DIR_RE.search(text)
    if m is None:
        return None
    d = m.group(1)[0].upper()
    if _LEFT_RE.search(text):
        return _AXIS_LEFT[d]
    if _DEMAND_RE.search(text):
        return _AXIS_THROUGH[d]
    if _OBSTRUCTION_RE.search(text):
        return _CROSS_THROUGH[d]
    return None


class RuleTablePolicy:
    """Answers incidents from a rule table; otherwise defers to a fallback controller."""

    name = "ruletable"
    reads_incidents = True

    def __init__(
        self,
        table: dict[str, Phase] | None = None,
        fallback: Controller | None = None,
        rules: Callable[[str], Phase | None] | None = rule_phase,
    ) -> None:
        self.table = {k.strip(): Phase(v) for k, v in (table or {}).items()}
        self.fallback = fallback or MaxPressureController()
        self.rules = rules

    @classmethod
    def from_incidents(cls, incidents: Iterable[Incident], fallback: Controller | None = None) -> "RuleTablePolicy":
        """Exact-text table answering each incident with its first allowed phase."""
        table = {inc.text: next(p for p in PHASES if p in inc.allowed_actions) for inc in incidents}
        return cls(table, fallback, rules=None)

    def lookup(self, text: str) -> Phase | None:
        hit = self.table.get(text.strip())
        if hit is None and self.rules is not None:
            hit = self.rules(text)
        return hit

    def decide(self, ctx: DecisionContext) -> Decision:
        if ctx.incident:
            for line in ctx.incident.splitlines():
                hit = self.lookup(line)
                if hit is not None:
                    return Decision(hit)
        return self.fallback.decide(ctx)


_ADVISORY_RE = re.compile(r"approaching from the (north|south|east|west), heading (north|south|east|west)", re.IGNORECASE)


class EmergencyPriorityController:
    """Serves the protected phase of the first advertised emergency vehicle.

    Right turns are never blocked, so advisories for them are skipped; with no
    usable advisory the fallback controller decides.
    """

    name = "emergency-priority"
    reads_incidents = True

    def __init__(self, fallback: Controller | None = None) -> None:
        self.fallback = fallback or MaxPressureController()

    @staticmethod
    def phase_for(approach: Approach, heading: Approach) -> Phase | None:
        mv = movement_for(approach, heading)
        if mv is None or mv is Movement.RIGHT:
            return None
        for p in PHASES:
            if (approach, mv) in phase_movements(p):
                return p
        return None

    def decide(self, ctx: DecisionContext) -> Decision:
        for m in _ADVISORY_RE.finditer(ctx.incident or ""):
            p = self.phase_for(Approach(m.group(1)[0].upper()), Approach(m.group(2)[0].upper()))
            if p is not None:
                return Decision(p)
        return self.fallback.decide(ctx)


# -- synthetic incidents ------------------------------------------------------

_DIRS = ("north", "south", "east", "west")
_DEMAND_TEMPLATES = (
    "At this intersection, heavy {d}bound traffic is building up after a stadium event.",
    "At this intersection, a {d}bound traffic jam is forming behind a lane closure downstream.",
    "At this intersection, increased {d}bound traffic is expected as a nearby factory changes shift.",
)
_OBSTRUCTION_TEMPLATES = (
    "At this intersection, a delivery truck is stopped in the {d}bound lane.",
    "At this intersection, a disabled car is blocking the {d}bound lane.",
    "At this intersection, a film crew is blocking the {d}bound crosswalk.",
)
_LEFT_TEMPLATES = ("At this intersection, a long line of {d}bound vehicles is waiting to turn left.",)


def synthetic_incidents(n: int = 200, seed: int = 0) -> list[Incident]:
    """``n`` single-answer local incidents drawn from fixed templates.

    Answers follow the same semantics as :func:`rule_phase`.
    """
    rng = np.random.default_rng(seed)
    kinds = (_DEMAND_TEMPLATES, _OBSTRUCTION_TEMPLATES, _LEFT_TEMPLATES)
    out = []
    for i in range(n):
        templates = kinds[int(rng.integers(len(kinds)))]
        text = templates[int(rng.integers(len(templates)))].format(d=_DIRS[int(rng.integers(4))])
        phase = rule_phase(text)
        assert phase is not None, text
        out.append(Incident(f"syn-{i}", text, None, frozenset({phase}), "local"))
    return out


# -- evaluation ---------------------------------------------------------------

class ObservationSampler:
    """Pool of mid-congestion observations from one MaxPressure-driven episode."""

    def __init__(
        self,
        network: GridNetwork,
        rate_vph: float = 4000.0,
        warmup_s: int = 300,
        collect_s: int = 300,
        seed: int = 0,
    ) -> None:
        self.network = network
        self.rate_vph = rate_vph
        self.warmup_s = warmup_s
        self.collect_s = collect_s
        self.seed = seed
        self._pool: list[tuple[IntersectionId, Observation, Phase]] | None = None

    def _build(self) -> list[tuple[IntersectionId, Observation, Phase]]:
        horizon = self.warmup_s + self.collect_s
        sim = Simulator(
            self.network, spawn_flow(FlowSpec(self.rate_vph, seed=self.seed), self.network, horizon), SimConfig(record_events=False)
        )
        mp = MaxPressureController()
        rng = np.random.default_rng(self.seed)
        pool = []
        while sim.time < horizon:
            for iid in sim.pending():
                obs = sim.observe(iid)
                if sim.time >= self.warmup_s:
                    pool.append((iid, obs, sim.signal(iid).current_phase))
                ctx = DecisionContext(iid, obs, sim.signal(iid).current_phase, sim.time, rng)
                sim.set_phase(iid, mp.decide(ctx).phase)
            sim.tick()
        return pool

    def sample(self, rng: np.random.Generator, location: IntersectionId | None = None):
        if self._pool is None:
            self._pool = self._build()
        pool = self._pool
        if location is not None:
            pool = [e for e in pool if e[0] == tuple(location)] or pool
        iid, obs, phase = pool[int(rng.integers(len(pool)))]
        return (tuple(location) if location is not None else iid), obs, phase


def eval_eaa(
    policy,
    incidents: list[Incident],
    sampler: ObservationSampler | None = None,
    *,
    network: GridNetwork | None = None,
    seed: int = 0,
) -> float | None:
    """Emergency action accuracy, or None ("not applicable") for controllers that ignore text.

    Each incident is posed once, over an observation drawn from ``sampler``.
    A policy that fails or returns no phase scores 0 on that incident.
    """
    if not getattr(policy, "reads_incidents", False):
        return None
    if not incidents:
        raise ValueError("eval_eaa needs at least one incident")
    if sampler is None:
        from .netmodel import build_grid

        sampler = ObservationSampler(network or build_grid(4, 4, 300.0), seed=seed)
    # Observation draws and policy randomness use separate streams.
    obs_rng, policy_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    score = 0
    for inc in incidents:
        iid, obs, current = sampler.sample(obs_rng, inc.location)
        ctx = DecisionContext(iid, obs, current, 0, policy_rng, inc.text, [])
        try:
            decision = policy.decide(ctx)
            phase = Phase(decision.phase) if decision is not None and decision.phase is not None else None
        except Exception as exc:  # any failure counts as no answer
            log.warning("policy failed on incident %s: %s", inc.id, exc)
            phase = None
        score += int(phase is not None and phase in inc.allowed_actions)
    return score / len(incidents)


def format_eaa(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def emergency_flow(spec: FlowSpec, fraction: float = 0.05) -> FlowSpec:
    """Same demand with each vehicle flagged as emergency with probability ``fraction``."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    return dataclasses.replace(spec, emergency_fraction=float(fraction))


def eval_network_wide(
    policy,
    network: GridNetwork,
    flow: FlowSpec,
    seeds: Iterable[int] = (0,),
    horizon_s: int = 3600,
    *,
    communicate: bool = True,
    sim_config: SimConfig | None = None,
) -> tuple[float, float]:
    """Mean (AETT, AEWT) over one episode per seed, run through the half-step scheduler."""
    if not flow.emergency_fraction > 0:
        raise ValueError("network-wide evaluation needs an emergency fraction > 0")
    aett, aewt, exited = [], [], 0
    for s in seeds:
        spec = dataclasses.replace(flow, seed=int(s))
        sim = Simulator(network, spawn_flow(spec, network, horizon_s), sim_config or SimConfig(record_events=False))
        rep = AsyncRunner(sim, policy, communicate=communicate, rng=np.random.default_rng(s)).run(horizon_s).metrics
        aett.append(rep.aett)
        aewt.append(rep.aewt)
        exited += rep.emergency_exited
    if exited == 0:
        log.warning("no emergency vehicle completed its trip; AETT/AEWT are censored means")
    return float(np.mean(aett)), float(np.mean(aewt))
