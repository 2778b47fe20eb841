from __future__ import annotations

import numpy as np
import pytest

from _async_props import ChattyRandom, PropertyReport, check_episode
from signalrl.agentio import FEATURE_DIM, ParametricPolicy
from signalrl.asynccomm import AsyncRunner, MessageBuffer, deliver, run_decision_step, run_independent
from signalrl.controllers import MaxPressureController
from signalrl.microsim import FlowSpec, Simulator, spawn_flow
from signalrl.netmodel import build_grid, parity_partition


def test_deliver_interior_and_corner():
    net = build_grid(4, 4, 300)
    buf = MessageBuffer()
    sent = deliver(buf, (1, 1), "hi", net.neighbors((1, 1)), net)
    assert sorted(m.recipient for m in sent) == [(0, 1), (1, 0), (1, 2), (2, 1)]
    buf = MessageBuffer()
    assert len(deliver(buf, (0, 0), "hi", net.neighbors((0, 0)), net)) == 2


def test_deliver_filters_same_parity():
    net = build_grid(4, 4, 300)
    buf, violations = MessageBuffer(), []
    sent = deliver(buf, (1, 1), "hi", [(1, 2), (2, 2)], net, violations=violations)
    assert [m.recipient for m in sent] == [(1, 2)]
    assert violations and violations[0]["reason"] == "same parity"


def test_deliver_radius():
    net = build_grid(2, 2, 2100)
    buf = MessageBuffer()
    assert deliver(buf, (0, 0), "hi", net.neighbors((0, 0)), net) == []
    assert len(buf) == 0


def test_buffer_cleared_on_read():
    buf = MessageBuffer()
    net = build_grid(2, 2, 300)
    deliver(buf, (0, 0), "x", [(0, 1)], net)
    assert len(buf.read((0, 1))) == 1
    assert buf.read((0, 1)) == [] and not buf


def test_message_crosses_within_one_step():
    net = build_grid(2, 2, 300)
    sim = Simulator(net, [])
    runner = AsyncRunner(sim, ChattyRandom(1.0), rng=np.random.default_rng(0))
    run_decision_step(runner, 600)
    # Group 1 spoke in half-step 0; group 2 read it in half-step 1.
    assert {(m.sender, h) for m, h in runner.reads} == {((0, 0), 1), ((1, 1), 1)}
    assert runner.message_log[0]["half_step"] == 1 and runner.message_log[0]["step"] == 0


def test_no_emission_leaves_buffer_empty():
    net = build_grid(3, 3, 300)
    sim = Simulator(net, spawn_flow(FlowSpec(3000, seed=0), net, 300))
    runner = AsyncRunner(sim, MaxPressureController())
    buf = run_decision_step(runner, 300)
    assert len(buf) == 0 and runner.message_log == []


def test_offset_schedules_groups():
    net = build_grid(2, 2, 300)
    sim = Simulator(net, [])
    times = []

    class Recorder(ChattyRandom):
        def decide(self, ctx):
            times.append((ctx.intersection, ctx.time))
            return super().decide(ctx)

    runner = AsyncRunner(sim, Recorder(0.0), offset_s=7, rng=np.random.default_rng(0))
    run_decision_step(runner, 600)
    g1 = parity_partition(net).group1
    assert {t for i, t in times if i in g1} == {0}
    assert {t for i, t in times if i not in g1} == {7}


def test_offset_validation():
    sim = Simulator(build_grid(1, 1, 300), [])
    with pytest.raises(ValueError):
        AsyncRunner(sim, MaxPressureController(), offset_s=16)


def test_randomized_properties_small():
    rep = PropertyReport()
    for seed in range(3):
        check_episode(build_grid(3, 3, 300), seed, 600, rep)
    assert rep.steps > 0 and rep.read > 0
    assert rep.problems == []


class InboxBlind:
    def __init__(self, inner):
        self.inner = inner
        self.name = "blind"
        self.reads_incidents = False

    def decide(self, ctx):
        ctx.inbox = []
        return self.inner.decide(ctx)


def test_synchronous_mode_equals_empty_inboxes():
    net = build_grid(3, 3, 300)
    rng = np.random.default_rng(4)
    theta = rng.normal(scale=0.2, size=(4, FEATURE_DIM))
    theta[:, -5:-1] = rng.normal(scale=5, size=(4, 4))  # make inbox slots matter
    pol = ParametricPolicy(theta, message_threshold=2, greedy=True)

    def run(policy, communicate):
        sim = Simulator(net, spawn_flow(FlowSpec(6000, seed=1), net, 900))
        return AsyncRunner(sim, policy, communicate=communicate).run(900)

    silent = run(pol, False)
    blind = run(InboxBlind(pol), True)
    talking = run(pol, True)
    assert silent.messages == []
    assert [e["phase"] for e in silent.events] == [e["phase"] for e in blind.events]
    assert talking.messages and talking.events != silent.events


def test_run_independent_has_no_messages():
    net = build_grid(2, 2, 300)
    sim = Simulator(net, spawn_flow(FlowSpec(3000, seed=2), net, 300))
    res = run_independent(sim, ChattyRandom(1.0), 300)
    assert res.messages == [] and res.events
