"""Grid road network, lanes, signal phases and the parity partition."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterator

IntersectionId = tuple[int, int]

VEHICLE_SPACING_M = 7.5
NETWORK_FIELDS = ("rows", "cols", "link_length_m", "segment_count")


class Approach(str, Enum):
    """Arm of an intersection that vehicles arrive on."""

    N = "N"
    S = "S"
    E = "E"
    W = "W"

    @property
    def label(self) -> str:
        return _APPROACH_LABELS[self]

    @property
    def opposite(self) -> "Approach":
        return _OPPOSITE[self]


class Movement(str, Enum):
    THROUGH = "through"
    LEFT = "left"
    RIGHT = "right"


class Phase(str, Enum):
    ETWT = "ETWT"
    ELWL = "ELWL"
    NTST = "NTST"
    NLSL = "NLSL"


APPROACHES = (Approach.N, Approach.S, Approach.E, Approach.W)
MOVEMENTS = (Movement.THROUGH, Movement.LEFT, Movement.RIGHT)
# Fixed phase order; also the MaxPressure tie-break order.
PHASES = (Phase.ETWT, Phase.ELWL, Phase.NTST, Phase.NLSL)

_APPROACH_LABELS = {Approach.N: "North", Approach.S: "South", Approach.E: "East", Approach.W: "West"}
_OPPOSITE = {Approach.N: Approach.S, Approach.S: Approach.N, Approach.E: Approach.W, Approach.W: Approach.E}
# Compass heading after a turn, keyed by current heading.
_LEFT_OF = {Approach.S: Approach.E, Approach.N: Approach.W, Approach.E: Approach.N, Approach.W: Approach.S}
_RIGHT_OF = {Approach.S: Approach.W, Approach.N: Approach.E, Approach.E: Approach.S, Approach.W: Approach.N}
# (drow, dcol) of one step in a compass heading; row 0 is the northern edge.
_STEP = {Approach.N: (-1, 0), Approach.S: (1, 0), Approach.E: (0, 1), Approach.W: (0, -1)}

PHASE_APPROACHES: dict[Phase, tuple[Approach, Approach]] = {
    Phase.ETWT: (Approach.E, Approach.W),
    Phase.ELWL: (Approach.E, Approach.W),
    Phase.NTST: (Approach.N, Approach.S),
    Phase.NLSL: (Approach.N, Approach.S),
}
PHASE_MOVEMENT: dict[Phase, Movement] = {
    Phase.ETWT: Movement.THROUGH,
    Phase.ELWL: Movement.LEFT,
    Phase.NTST: Movement.THROUGH,
    Phase.NLSL: Movement.LEFT,
}
PHASE_DESCRIPTIONS = {
    Phase.ETWT: "Eastern and western through lanes",
    Phase.ELWL: "Eastern and western left lanes",
    Phase.NTST: "North and south through lanes",
    Phase.NLSL: "North and south left lanes",
}

# Right turns are never gated by a phase.
ALWAYS_ALLOWED = frozenset((a, Movement.RIGHT) for a in APPROACHES)


def phase_movements(phase: Phase) -> frozenset[tuple[Approach, Movement]]:
    """The two protected (approach, movement) pairs of ``phase``."""
    phase = Phase(phase)
    mv = PHASE_MOVEMENT[phase]
    return frozenset((a, mv) for a in PHASE_APPROACHES[phase])


def heading_of(approach: Approach, movement: Movement) -> Approach:
    """Compass heading of a vehicle after taking ``movement`` from ``approach``."""
    heading = approach.opposite
    if movement is Movement.LEFT:
        return _LEFT_OF[heading]
    if movement is Movement.RIGHT:
        return _RIGHT_OF[heading]
    return heading


def movement_for(approach: Approach, heading: Approach) -> Movement | None:
    """Inverse of :func:`heading_of`; None for a U-turn."""
    for mv in MOVEMENTS:
        if heading_of(approach, mv) is heading:
            return mv
    return None


@dataclass(frozen=True)
class Lane:
    intersection: IntersectionId
    approach: Approach
    movement: Movement


@dataclass(frozen=True)
class ParityPartition:
    group1: frozenset[IntersectionId]
    group2: frozenset[IntersectionId]

    def group_of(self, iid: IntersectionId) -> int:
        if iid in self.group1:
            return 1
        if iid in self.group2:
            return 2
        raise KeyError(f"unknown intersection {iid}")


@dataclass(frozen=True)
class GridNetwork:
    """A rows x cols grid of four-arm intersections.

    Every intersection has four incoming arms of ``link_length_m``; arms on the
    grid edge are boundary arms fed by an infinite source, and vehicles that
    leave the grid vanish. Each arm carries one lane per movement, and each
    lane is cut into ``segment_count`` equal segments, segment 1 nearest the
    stop line.
    """

    rows: int
    cols: int
    link_length_m: float
    segment_count: int = 3

    def __post_init__(self) -> None:
        if not isinstance(self.rows, int) or not isinstance(self.cols, int):
            raise ValueError("rows and cols must be integers")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid dimensions must be >= 1, got {self.rows}x{self.cols}")
        if not self.link_length_m > 0:
            raise ValueError(f"link_length_m must be > 0, got {self.link_length_m}")
        if not isinstance(self.segment_count, int) or self.segment_count < 1:
            raise ValueError(f"segment_count must be a positive integer, got {self.segment_count}")

    @cached_property
    def intersections(self) -> tuple[IntersectionId, ...]:
        return tuple((r, c) for r in range(self.rows) for c in range(self.cols))

    @cached_property
    def index(self) -> dict[IntersectionId, int]:
        return {iid: k for k, iid in enumerate(self.intersections)}

    @property
    def segment_length_m(self) -> float:
        return self.link_length_m / self.segment_count

    @property
    def segment_capacity(self) -> int:
        return int(math.floor(self.segment_length_m / VEHICLE_SPACING_M))

    def __contains__(self, iid: object) -> bool:
        return iid in self.index

    def check(self, iid: IntersectionId) -> IntersectionId:
        iid = tuple(iid)  # type: ignore[assignment]
        if iid not in self.index:
            raise KeyError(f"intersection {iid} not in {self.rows}x{self.cols} grid")
        return iid

    def position(self, iid: IntersectionId) -> tuple[float, float]:
        """(x, y) in meters; x grows eastward, y grows southward."""
        r, c = self.check(iid)
        return (c * self.link_length_m, r * self.link_length_m)

    def step(self, iid: IntersectionId, heading: Approach) -> IntersectionId | None:
        """Adjacent intersection in compass direction ``heading``, or None at the edge."""
        dr, dc = _STEP[heading]
        nxt = (iid[0] + dr, iid[1] + dc)
        return nxt if nxt in self.index else None

    def neighbors(self, iid: IntersectionId) -> list[IntersectionId]:
        iid = self.check(iid)
        out = []
        for heading in APPROACHES:
            nxt = self.step(iid, heading)
            if nxt is not None:
                out.append(nxt)
        return sorted(out)

    def direction_to(self, src: IntersectionId, dst: IntersectionId) -> Approach | None:
        """Compass direction of ``dst`` as seen from ``src`` when they are adjacent."""
        for heading in APPROACHES:
            if self.step(src, heading) == dst:
                return heading
        return None

    def lanes(self) -> Iterator[Lane]:
        for iid in self.intersections:
            for a in APPROACHES:
                for mv in MOVEMENTS:
                    yield Lane(iid, a, mv)

    def links(self) -> list[tuple[IntersectionId, IntersectionId]]:
        """Directed links between adjacent intersections."""
        return [(i, j) for i in self.intersections for j in self.neighbors(i)]

    def is_boundary_arm(self, iid: IntersectionId, approach: Approach) -> bool:
        # The arm arrives from direction ``approach``.
        return self.step(self.check(iid), approach) is None

    def entry_arms(self) -> list[tuple[IntersectionId, Approach]]:
        return [(i, a) for i in self.intersections for a in APPROACHES if self.is_boundary_arm(i, a)]

    def downstream(self, iid: IntersectionId, approach: Approach, movement: Movement) -> tuple[IntersectionId, Approach] | None:
        """Receiving (intersection, approach) for a movement, or None when it leaves the grid."""
        heading = heading_of(approach, movement)
        nxt = self.step(self.check(iid), heading)
        if nxt is None:
            return None
        return nxt, heading.opposite

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "link_length_m": self.link_length_m,
            "segment_count": self.segment_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridNetwork":
        unknown = set(data) - set(NETWORK_FIELDS)
        if unknown:
            raise ValueError(f"unknown network fields: {sorted(unknown)}")
        missing = {"rows", "cols", "link_length_m"} - set(data)
        if missing:
            raise ValueError(f"missing network fields: {sorted(missing)}")
        return build_grid(data["rows"], data["cols"], data["link_length_m"], data.get("segment_count", 3))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GridNetwork":
        return cls.from_dict(json.loads(text))


def build_grid(rows: int, cols: int, link_length_m: float, segment_count: int = 3) -> GridNetwork:
    if isinstance(rows, bool) or isinstance(cols, bool):
        raise ValueError("rows and cols must be integers")
    return GridNetwork(rows, cols, float(link_length_m), segment_count)


def parity_partition(network: GridNetwork) -> ParityPartition:
    g1 = frozenset(i for i in network.intersections if (i[0] + i[1]) % 2 == 0)
    g2 = frozenset(i for i in network.intersections if (i[0] + i[1]) % 2 == 1)
    return ParityPartition(g1, g2)


def neighbor_distance(a: IntersectionId, b: IntersectionId, network: GridNetwork) -> float:
    """Euclidean distance in meters between two intersections."""
    xa, ya = network.position(a)
    xb, yb = network.position(b)
    return math.hypot(xa - xb, ya - yb)
