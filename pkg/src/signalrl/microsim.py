"""Deterministic one-second queue-propagation traffic simulator.

Vehicles travel lane by lane: a vehicle spends ``free_flow_ticks`` in each
segment (10 s at 10 m/s over a 100 m segment) and moves on when the next
segment, or the stop-line buffer after segment 1, has room. Buffers discharge
at most one vehicle per lane every ``discharge_headway`` ticks, for the
protected movements of a green phase; right turns also discharge during
yellow. A discharged vehicle enters the outermost segment of the lane for its
next movement, or leaves the network after its last intersection.

Within a tick the order is: release source arrivals, discharge buffers,
advance segments, update signal stages.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from .netmodel import (
    APPROACHES,
    MOVEMENTS,
    PHASE_APPROACHES,
    PHASE_MOVEMENT,
    PHASES,
    Approach,
    GridNetwork,
    IntersectionId,
    Movement,
    Phase,
    heading_of,
)

GREEN, YELLOW, ALL_RED = "green", "yellow", "all_red"
FREE_FLOW_SPEED_MPS = 10.0
FLOW_FIELDS = ("total_rate_vph", "seed", "turn_probabilities", "emergency_fraction")
MAX_ROUTE_LENGTH = 64


class ContractViolation(RuntimeError):
    """An operation was called outside its precondition."""


@dataclass(frozen=True)
class FlowSpec:
    total_rate_vph: float
    seed: int = 0
    turn_probabilities: tuple[float, float, float] = (0.7, 0.15, 0.15)
    emergency_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.total_rate_vph < 0 or not math.isfinite(self.total_rate_vph):
            raise ValueError(f"total_rate_vph must be a nonnegative number, got {self.total_rate_vph}")
        probs = tuple(float(p) for p in self.turn_probabilities)
        if len(probs) != 3 or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"turn_probabilities must be a 3-simplex, got {self.turn_probabilities}")
        object.__setattr__(self, "turn_probabilities", probs)
        if not 0.0 <= self.emergency_fraction <= 1.0:
            raise ValueError(f"emergency_fraction must lie in [0, 1], got {self.emergency_fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["turn_probabilities"] = list(self.turn_probabilities)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "FlowSpec":
        unknown = set(data) - set(FLOW_FIELDS)
        if unknown:
            raise ValueError(f"unknown flow fields: {sorted(unknown)}")
        if "total_rate_vph" not in data:
            raise ValueError("missing flow field: total_rate_vph")
        kw = dict(data)
        if "turn_probabilities" in kw:
            kw["turn_probabilities"] = tuple(kw["turn_probabilities"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FlowSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Arrival:
    time: int
    vehicle_id: int
    route: tuple[tuple[IntersectionId, Movement], ...]
    entry_approach: Approach
    is_emergency: bool = False


def spawn_flow(spec: FlowSpec, network: GridNetwork, horizon_s: float) -> list[Arrival]:
    """Poisson arrivals on every boundary arm, sorted by (time, id).

    The arrival process, the route draws and the emergency flags use three
    independent streams derived from ``spec.seed``, so changing the emergency
    fraction leaves arrival times and routes untouched.
    """
    if not horizon_s > 0:
        raise ValueError(f"horizon must be > 0, got {horizon_s}")
    arms = network.entry_arms()
    ss = np.random.SeedSequence(spec.seed)
    arrival_rng, route_rng, emergency_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    if spec.total_rate_vph == 0:
        return []
    rate_per_s = spec.total_rate_vph / 3600.0 / len(arms)
    expected = rate_per_s * horizon_s
    raw: list[tuple[int, int]] = []
    for arm_idx in range(len(arms)):
        # Draw enough gaps in one call, topping up in the rare shortfall.
        t = 0.0
        while True:
            n = int(expected + 6 * math.sqrt(expected) + 10)
            gaps = arrival_rng.exponential(1.0 / rate_per_s, size=n)
            times = t + np.cumsum(gaps)
            inside = times[times < horizon_s]
            raw.extend((int(x), arm_idx) for x in inside)
            if len(inside) < n:
                break
            t = float(times[-1])
    raw.sort()
    probs = np.asarray(spec.turn_probabilities)
    cdf = np.cumsum(probs)
    out = []
    for vid, (t_arr, arm_idx) in enumerate(raw):
        iid, approach = arms[arm_idx]
        route = []
        cur, app = iid, approach
        while True:
            if len(route) >= MAX_ROUTE_LENGTH - 1:
                mv = Movement.THROUGH
            else:
                mv = MOVEMENTS[min(int(np.searchsorted(cdf, route_rng.random(), side="right")), 2)]
            route.append((cur, mv))
            nxt = network.downstream(cur, app, mv)
            if nxt is None:
                break
            cur, app = nxt
        emergency = bool(emergency_rng.random() < spec.emergency_fraction)
        out.append(Arrival(t_arr, vid, tuple(route), approach, emergency))
    return out


@dataclass(frozen=True)
class SimConfig:
    free_flow_speed_mps: float = FREE_FLOW_SPEED_MPS
    discharge_headway: int = 2
    green_s: int = 15
    yellow_s: int = 3
    all_red_s: int = 2
    # Stop-line buffer capacity; None uses the segment capacity.
    buffer_capacity: int | None = None
    # Insert yellow + all-red even when the current phase is reselected.
    always_transition: bool = False
    advisory_radius_segments: int = 2
    record_events: bool = True


@dataclass
class SignalState:
    current_phase: Phase
    stage: str
    stage_remaining: int
    next_phase: Phase | None = None
    awaiting_decision: bool = False


@dataclass
class Observation:
    """Counts the agent sees at one intersection.

    ``counts[p, k]`` holds ``[early_queued, segment_1, ..., segment_n]`` for
    approach ``k`` of phase ``PHASES[p]`` (E, W for the east-west phases,
    N, S for the north-south ones). Right-turn buffers are reported apart,
    ordered as ``APPROACHES``. ``downstream[p, k]`` is the number of buffered
    vehicles on the arm that movement feeds, 0 when it leaves the grid.
    """

    counts: np.ndarray
    right_queued: np.ndarray
    downstream: np.ndarray
    segment_capacity: int
    buffer_capacity: int

    @property
    def segment_count(self) -> int:
        return self.counts.shape[2] - 1

    def early_queued(self, phase: Phase) -> tuple[int, int, int]:
        p = PHASES.index(Phase(phase))
        a, b = int(self.counts[p, 0, 0]), int(self.counts[p, 1, 0])
        return a, b, a + b

    def segment(self, phase: Phase, i: int) -> tuple[int, int, int]:
        p = PHASES.index(Phase(phase))
        a, b = int(self.counts[p, 0, i]), int(self.counts[p, 1, i])
        return a, b, a + b

    def totals(self) -> np.ndarray:
        """Per phase, per count slot, summed over the two approaches."""
        return self.counts.sum(axis=1)

    def approach_queue(self, approach: Approach) -> int:
        """Buffered vehicles over all three lanes of one approach."""
        total = int(self.right_queued[APPROACHES.index(approach)])
        for p, phase in enumerate(PHASES):
            apps = PHASE_APPROACHES[phase]
            if approach in apps:
                total += int(self.counts[p, apps.index(approach), 0])
        return total

    @classmethod
    def empty(cls, segment_count: int = 3, segment_capacity: int = 13, buffer_capacity: int = 13) -> "Observation":
        return cls(
            np.zeros((4, 2, segment_count + 1), dtype=np.int64),
            np.zeros(4, dtype=np.int64),
            np.zeros((4, 2), dtype=np.int64),
            segment_capacity,
            buffer_capacity,
        )

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "right_queued": self.right_queued.tolist(),
            "downstream": self.downstream.tolist(),
            "segment_capacity": self.segment_capacity,
            "buffer_capacity": self.buffer_capacity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(
            np.asarray(d["counts"], dtype=np.int64),
            np.asarray(d["right_queued"], dtype=np.int64),
            np.asarray(d["downstream"], dtype=np.int64),
            int(d["segment_capacity"]),
            int(d["buffer_capacity"]),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            np.array_equal(self.counts, other.counts)
            and np.array_equal(self.right_queued, other.right_queued)
            and np.array_equal(self.downstream, other.downstream)
            and self.segment_capacity == other.segment_capacity
            and self.buffer_capacity == other.buffer_capacity
        )


@dataclass
class MetricsReport:
    att: float = 0.0
    awt: float = 0.0
    aett: float = 0.0
    aewt: float = 0.0
    avg_queue: float = 0.0
    max_queue: int = 0
    vehicles_entered: int = 0
    vehicles_exited: int = 0
    emergency_entered: int = 0
    emergency_exited: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


class Vehicle:
    __slots__ = ("vid", "lanes", "pos", "entry_time", "exit_time", "wait", "t_seg", "t_buf", "is_emergency", "route")

    def __init__(self, vid: int, lanes: tuple[int, ...], entry_time: int, is_emergency: bool, route) -> None:
        self.vid = vid
        self.lanes = lanes
        self.pos = 0
        self.entry_time = entry_time
        self.exit_time: int | None = None
        self.wait = 0
        self.t_seg = 0
        self.t_buf = -1
        self.is_emergency = is_emergency
        self.route = route

    def waiting_seconds(self, now: int) -> int:
        if self.t_buf >= 0:
            return self.wait + (now - self.t_buf)
        return self.wait


_PHASE_INDEX = {p: k for k, p in enumerate(PHASES)}
_LANE_SLOT = {(a, m): ai * 3 + mi for ai, a in enumerate(APPROACHES) for mi, m in enumerate(MOVEMENTS)}


class Simulator:
    """One episode over a grid network.

    All intersections start on ETWT green and sit at a decision instant at
    t = 0. Each green lasts ``green_s``; when it expires the intersection waits
    for :meth:`set_phase` and keeps its current green in the meantime.
    """

    def __init__(self, network: GridNetwork, schedule: list[Arrival], config: SimConfig | None = None) -> None:
        self.network = network
        self.config = config or SimConfig()
        cfg = self.config
        self.n_seg = network.segment_count
        self.seg_cap = network.segment_capacity
        if self.seg_cap < 1:
            raise ValueError("segments too short to hold a vehicle")
        self.buf_cap = cfg.buffer_capacity if cfg.buffer_capacity is not None else self.seg_cap
        self.free_flow_ticks = max(1, int(round(network.segment_length_m / cfg.free_flow_speed_mps)))
        self.time = 0
        self.ids = network.intersections
        n_int = len(self.ids)
        n_lanes = n_int * 12
        self._segs = [[deque() for _ in range(self.n_seg)] for _ in range(n_lanes)]
        self._buf = [deque() for _ in range(n_lanes)]
        self._last = [-(10**9)] * n_lanes
        self._src: dict[int, deque] = {}
        self._buffered = [0] * n_int

        # Lane geometry tables.
        index = network.index
        self._lane_dest_arm = [-1] * n_lanes
        for iid in self.ids:
            base = index[iid] * 12
            for a in APPROACHES:
                for m in MOVEMENTS:
                    ds = network.downstream(iid, a, m)
                    if ds is not None:
                        self._lane_dest_arm[base + _LANE_SLOT[(a, m)]] = index[ds[0]] * 12 + APPROACHES.index(ds[1]) * 3
        self._green_lanes = []
        self._right_lanes = []
        for k in range(n_int):
            base = k * 12
            self._right_lanes.append([base + _LANE_SLOT[(a, Movement.RIGHT)] for a in APPROACHES])
            per_phase = []
            for ph in PHASES:
                per_phase.append([base + _LANE_SLOT[(a, PHASE_MOVEMENT[ph])] for a in PHASE_APPROACHES[ph]])
            self._green_lanes.append(per_phase)

        self.signals = [SignalState(PHASES[0], GREEN, 0, None, True) for _ in range(n_int)]
        self._last_decision = [0] * n_int

        self._schedule = sorted(schedule, key=lambda a: (a.time, a.vehicle_id))
        self._next_arrival = 0
        self.vehicles: list[Vehicle] = []
        self.exited = 0
        self.in_network = 0
        self._queue_sum = 0
        self._max_queue = 0
        self._ticks = 0
        self.discharges = 0
        self.has_emergency = any(a.is_emergency for a in self._schedule)
        self.events: list[dict] = []

    # -- lookup helpers -------------------------------------------------
    def _k(self, iid: IntersectionId) -> int:
        try:
            return self.network.index[tuple(iid)]
        except KeyError:
            raise KeyError(f"intersection {iid} not in network") from None

    def lane_index(self, iid: IntersectionId, approach: Approach, movement: Movement) -> int:
        return self._k(iid) * 12 + _LANE_SLOT[(Approach(approach), Movement(movement))]

    def _route_lanes(self, arrival: Arrival) -> tuple[int, ...]:
        lanes = []
        app = arrival.entry_approach
        for iid, mv in arrival.route:
            lanes.append(self.lane_index(iid, app, mv))
            app = heading_of(app, mv).opposite
        return tuple(lanes)

    # -- signal control -------------------------------------------------
    def pending(self) -> list[IntersectionId]:
        """Intersections currently at a decision instant, in id order."""
        return [self.ids[k] for k, s in enumerate(self.signals) if s.awaiting_decision]

    def signal(self, iid: IntersectionId) -> SignalState:
        return self.signals[self._k(iid)]

    def set_phase(self, iid: IntersectionId, phase: Phase) -> None:
        k = self._k(iid)
        s = self.signals[k]
        if not s.awaiting_decision:
            raise ContractViolation(f"set_phase at {iid} outside a decision instant (t={self.time}, stage={s.stage})")
        phase = Phase(phase)
        cfg = self.config
        if cfg.record_events:
            self.events.append(
                {
                    "time": self.time,
                    "intersection": list(self.ids[k]),
                    "phase": phase.value,
                    "early_queued": self._early_totals(k),
                }
            )
        s.awaiting_decision = False
        self._last_decision[k] = self.time
        if phase == s.current_phase and not cfg.always_transition:
            s.stage, s.stage_remaining, s.next_phase = GREEN, cfg.green_s, None
            return
        s.next_phase = phase
        if cfg.yellow_s > 0:
            s.stage, s.stage_remaining = YELLOW, cfg.yellow_s
        elif cfg.all_red_s > 0:
            s.stage, s.stage_remaining = ALL_RED, cfg.all_red_s
        else:
            s.stage, s.stage_remaining, s.current_phase, s.next_phase = GREEN, cfg.green_s, phase, None

    def _advance_signal(self, s: SignalState) -> None:
        if s.awaiting_decision:
            return
        s.stage_remaining -= 1
        if s.stage_remaining > 0:
            return
        cfg = self.config
        if s.stage == YELLOW and cfg.all_red_s > 0:
            s.stage, s.stage_remaining = ALL_RED, cfg.all_red_s
        elif s.stage in (YELLOW, ALL_RED):
            s.stage, s.stage_remaining = GREEN, cfg.green_s
            s.current_phase, s.next_phase = s.next_phase, None
        else:
            s.stage_remaining = 0
            s.awaiting_decision = True

    # -- dynamics -------------------------------------------------------
    def tick(self) -> None:
        """Advance the simulation by one second."""
        now = self.time
        end = now + 1
        segs, bufs, last = self._segs, self._buf, self._last
        n_seg, seg_cap, buf_cap = self.n_seg, self.seg_cap, self.buf_cap
        outer = n_seg - 1
        buffered = self._buffered

        # 1. release arrivals scheduled at ``now`` into their entry lane.
        sched = self._schedule
        i = self._next_arrival
        while i < len(sched) and sched[i].time <= now:
            arr = sched[i]
            v = Vehicle(arr.vehicle_id, self._route_lanes(arr), arr.time, arr.is_emergency, arr.route)
            self.vehicles.append(v)
            self.in_network += 1
            self._src.setdefault(v.lanes[0], deque()).append(v)
            i += 1
        self._next_arrival = i
        if self._src:
            for lane in list(self._src):
                q = self._src[lane]
                seg = segs[lane][outer]
                while q and len(seg) < seg_cap:
                    v = q.popleft()
                    v.t_seg = now
                    seg.append(v)
                if not q:
                    del self._src[lane]

        # 2. discharge stop-line buffers.
        headway = self.config.discharge_headway
        dest_arm = self._lane_dest_arm
        for k, s in enumerate(self.signals):
            if s.stage == ALL_RED:
                continue
            if s.stage == GREEN:
                lanes = self._green_lanes[k][_PHASE_INDEX[s.current_phase]] + self._right_lanes[k]
            else:
                lanes = self._right_lanes[k]
            for lane in lanes:
                buf = bufs[lane]
                if not buf or end - last[lane] < headway:
                    continue
                v = buf[0]
                if v.pos + 1 == len(v.lanes):
                    buf.popleft()
                    v.wait += end - 1 - v.t_buf
                    v.t_buf = -1
                    v.exit_time = end
                    self.exited += 1
                    self.in_network -= 1
                else:
                    nxt = v.lanes[v.pos + 1]
                    seg = segs[nxt][outer]
                    if len(seg) >= seg_cap:
                        continue
                    buf.popleft()
                    v.wait += end - 1 - v.t_buf
                    v.t_buf = -1
                    v.pos += 1
                    v.t_seg = end
                    seg.append(v)
                last[lane] = end
                buffered[k] -= 1
                self.discharges += 1

        # 3. advance vehicles along segments, nearest the stop line first.
        ff = self.free_flow_ticks
        for lane, lane_segs in enumerate(segs):
            for s_idx in range(n_seg):
                seg = lane_segs[s_idx]
                if not seg or end - seg[0].t_seg < ff:
                    continue
                if s_idx == 0:
                    target = bufs[lane]
                    while seg and len(target) < buf_cap and end - seg[0].t_seg >= ff:
                        v = seg.popleft()
                        v.t_buf = end
                        target.append(v)
                        buffered[lane // 12] += 1
                else:
                    target = lane_segs[s_idx - 1]
                    while seg and len(target) < seg_cap and end - seg[0].t_seg >= ff:
                        v = seg.popleft()
                        v.t_seg = end
                        target.append(v)

        # 4. signal stages.
        for s in self.signals:
            self._advance_signal(s)

        total_q = sum(buffered)
        self._queue_sum += total_q
        mq = max(buffered) if buffered else 0
        if mq > self._max_queue:
            self._max_queue = mq
        self._ticks += 1
        self.time = end

    def place_vehicles(
        self,
        iid: IntersectionId,
        approach: Approach,
        movement: Movement,
        count: int,
        where: int = 0,
        is_emergency: bool = False,
    ) -> list[Vehicle]:
        """Insert vehicles that leave the grid after crossing ``iid``.

        ``where`` is 0 for the stop-line buffer or a 1-based segment index.
        Meant for hand-built scenarios; capacity limits are enforced.
        """
        lane = self.lane_index(iid, approach, movement)
        if where == 0:
            target, cap = self._buf[lane], self.buf_cap
        elif 1 <= where <= self.n_seg:
            target, cap = self._segs[lane][where - 1], self.seg_cap
        else:
            raise ValueError(f"where must be 0..{self.n_seg}, got {where}")
        if len(target) + count > cap:
            raise ValueError(f"placing {count} vehicles exceeds capacity {cap}")
        out = []
        for _ in range(count):
            v = Vehicle(-(len(self.vehicles) + 1), (lane,), self.time, is_emergency, ((tuple(iid), Movement(movement)),))
            if where == 0:
                v.t_buf = self.time
                self._buffered[lane // 12] += 1
            else:
                v.t_seg = self.time
            target.append(v)
            self.vehicles.append(v)
            self.in_network += 1
            out.append(v)
        if is_emergency:
            self.has_emergency = True
        return out

    def run_until(self, t: int) -> None:
        while self.time < t:
            self.tick()

    # -- observation ----------------------------------------------------
    def _early_totals(self, k: int) -> dict[str, int]:
        return {ph.value: sum(len(self._buf[l]) for l in self._green_lanes[k][p]) for p, ph in enumerate(PHASES)}

    def observe(self, iid: IntersectionId) -> Observation:
        k = self._k(iid)
        n = self.n_seg
        counts = np.zeros((4, 2, n + 1), dtype=np.int64)
        downstream = np.zeros((4, 2), dtype=np.int64)
        for p in range(4):
            for j, lane in enumerate(self._green_lanes[k][p]):
                counts[p, j, 0] = len(self._buf[lane])
                lane_segs = self._segs[lane]
                for s in range(n):
                    counts[p, j, s + 1] = len(lane_segs[s])
                arm = self._lane_dest_arm[lane]
                if arm >= 0:
                    downstream[p, j] = len(self._buf[arm]) + len(self._buf[arm + 1]) + len(self._buf[arm + 2])
        right = np.array([len(self._buf[l]) for l in self._right_lanes[k]], dtype=np.int64)
        return Observation(counts, right, downstream, self.seg_cap, self.buf_cap)

    def buffered_total(self, iid: IntersectionId) -> int:
        return self._buffered[self._k(iid)]

    def segment_occupancy(self) -> int:
        """Largest segment occupancy anywhere in the network."""
        return max((len(s) for lane in self._segs for s in lane), default=0)

    def vehicles_in_network(self) -> int:
        return self.in_network

    def emergency_advisories(self, iid: IntersectionId) -> list[str]:
        """One line per emergency vehicle in a buffer or within the advisory radius."""
        if not self.has_emergency:
            return []
        k = self._k(iid)
        base = k * 12
        radius = min(self.config.advisory_radius_segments, self.n_seg)
        lines = []
        for a in APPROACHES:
            for m in MOVEMENTS:
                lane = base + _LANE_SLOT[(a, m)]
                found = any(v.is_emergency for v in self._buf[lane])
                if not found:
                    found = any(v.is_emergency for s in range(radius) for v in self._segs[lane][s])
                if found:
                    heading = heading_of(a, m)
                    lines.append(
                        f"An ambulance is currently approaching from the {a.label.lower()}, "
                        f"heading {heading.label.lower()}."
                    )
        return lines

    # -- metrics --------------------------------------------------------
    def metrics(self) -> MetricsReport:
        now = self.time
        rep = MetricsReport()
        travel_all, wait_all, travel_em, wait_em = [], [], [], []
        for v in self.vehicles:
            t_end = v.exit_time if v.exit_time is not None else now
            tt = t_end - v.entry_time
            w = v.waiting_seconds(now) if v.exit_time is None else v.wait
            travel_all.append(tt)
            wait_all.append(w)
            if v.is_emergency:
                travel_em.append(tt)
                wait_em.append(w)
                rep.emergency_entered += 1
                if v.exit_time is not None:
                    rep.emergency_exited += 1
        rep.att = _mean(travel_all)
        rep.awt = _mean(wait_all)
        rep.aett = _mean(travel_em)
        rep.aewt = _mean(wait_em)
        rep.vehicles_entered = len(self.vehicles)
        rep.vehicles_exited = self.exited
        if self._ticks:
            rep.avg_queue = self._queue_sum / (self._ticks * len(self.ids))
        rep.max_queue = self._max_queue
        return rep

    def last_decision_time(self, iid: IntersectionId) -> int:
        return self._last_decision[self._k(iid)]


def _mean(xs: list) -> float:
    return float(sum(xs)) / len(xs) if xs else 0.0


def observe(sim: Simulator, intersection: IntersectionId) -> Observation:
    return sim.observe(intersection)


def tick(sim: Simulator) -> None:
    sim.tick()


def set_phase(sim: Simulator, intersection: IntersectionId, phase: Phase) -> None:
    sim.set_phase(intersection, phase)


def metrics(sim: Simulator) -> MetricsReport:
    return sim.metrics()
