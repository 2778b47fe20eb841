from __future__ import annotations

import math

import pytest
from hypothesis import given, strategies as st

from signalrl.netmodel import (
    ALWAYS_ALLOWED,
    PHASES,
    Approach,
    GridNetwork,
    Movement,
    Phase,
    build_grid,
    neighbor_distance,
    parity_partition,
    phase_movements,
)


def test_grid_4x4_300m():
    net = build_grid(4, 4, 300)
    assert len(net.intersections) == 16
    for i, j in net.links():
        assert neighbor_distance(i, j, net) == pytest.approx(300.0)


def test_single_intersection_has_four_boundary_arms():
    net = build_grid(1, 1, 300)
    assert net.intersections == ((0, 0),)
    assert len(net.entry_arms()) == 4
    assert net.links() == []


def test_grid_3x4():
    net = build_grid(3, 4, 300)
    assert len(net.intersections) == 12


@pytest.mark.parametrize("args", [(0, 4, 300), (4, 0, 300), (-1, 2, 300), (2, 2, 0), (2, 2, -5)])
def test_invalid_dimensions_rejected(args):
    with pytest.raises(ValueError):
        build_grid(*args)


def test_phase_movements():
    assert phase_movements(Phase.ETWT) == {(Approach.E, Movement.THROUGH), (Approach.W, Movement.THROUGH)}
    assert phase_movements(Phase.NLSL) == {(Approach.N, Movement.LEFT), (Approach.S, Movement.LEFT)}
    union = [m for p in PHASES for m in phase_movements(p)]
    assert len(union) == 8 and len(set(union)) == 8
    assert not set(union) & ALWAYS_ALLOWED


@pytest.mark.parametrize("rows,cols,sizes", [(4, 4, (8, 8)), (3, 4, (6, 6)), (1, 1, (1, 0))])
def test_parity_partition_sizes(rows, cols, sizes):
    part = parity_partition(build_grid(rows, cols, 300))
    assert (len(part.group1), len(part.group2)) == sizes


@given(st.integers(1, 8), st.integers(1, 8))
def test_partition_is_bipartite(rows, cols):
    net = build_grid(rows, cols, 250)
    part = parity_partition(net)
    assert part.group1 | part.group2 == set(net.intersections)
    assert not part.group1 & part.group2
    for i, j in net.links():
        assert part.group_of(i) != part.group_of(j)


def test_neighbor_distance():
    net = build_grid(4, 4, 300)
    assert neighbor_distance((1, 1), (1, 2), net) == 300
    assert neighbor_distance((1, 1), (1, 1), net) == 0
    assert neighbor_distance((1, 1), (2, 2), net) == pytest.approx(math.sqrt(2) * 300)
    with pytest.raises(KeyError):
        neighbor_distance((0, 0), (9, 9), net)


def test_interior_intersection_arms():
    net = build_grid(3, 3, 300)
    assert len(net.neighbors((1, 1))) == 4
    assert not any(net.is_boundary_arm((1, 1), a) for a in Approach)


def test_grid_closure():
    net = build_grid(3, 3, 300)
    for lane in net.lanes():
        ds = net.downstream(lane.intersection, lane.approach, lane.movement)
        if ds is None:
            continue
        nxt, arm = ds
        assert nxt in net.neighbors(lane.intersection)
        # The receiving arm faces back toward the sender.
        assert net.step(nxt, arm) == lane.intersection


def test_json_round_trip_and_unknown_fields():
    net = build_grid(3, 4, 300)
    assert GridNetwork.from_json(net.to_json()) == net
    with pytest.raises(ValueError, match="colour"):
        GridNetwork.from_dict({**net.to_dict(), "colour": "red"})
