from __future__ import annotations

import io
import os
import socket
import sys
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from signalrl.agentio import (
    FEATURE_DIM,
    INBOX_SLOTS,
    MAX_MESSAGE_CHARS,
    AgentMessage,
    ParametricPolicy,
    TextPolicy,
    WireClient,
    feature_dim,
    featurize,
    inbox_summary,
    log_prob_and_grad,
    parse_response,
    policy_decide,
    render_answer,
    render_prompt,
    serve_lines,
)
from signalrl.controllers import DecisionContext
from signalrl.microsim import Observation
from signalrl.netmodel import PHASES, Phase

SAMPLE_RESPONSE = (
    "<think>The east and west through lanes hold the longest early queue and "
    "the most vehicles in segment 1, so serving them clears the most traffic.</think> \\boxed{ETWT}"
)


def obs_with(counts) -> Observation:
    obs = Observation.empty()
    obs.counts = np.asarray(counts, dtype=np.int64)
    return obs


def sample_obs() -> Observation:
    c = np.zeros((4, 2, 4), dtype=np.int64)
    c[0, 0, 0], c[0, 1, 0] = 2, 1
    return obs_with(c)


# -- rendering ----------------------------------------------------------------

def test_prompt_contains_early_queued_line():
    text = render_prompt(sample_obs()).text
    assert "Early queued: 2 (East), 1 (West), 3 (Total)" in text
    assert "Segment 3:" in text


def test_prompt_block_order():
    msg = AgentMessage((0, 1), (0, 0), "Heavy westbound traffic is approaching.", 0)
    text = render_prompt(sample_obs(), "A vehicle is stalled.", [msg]).text
    keys = ["System:", "Task Description:", "Structured Traffic Observation:", "Incident Information:",
            "Messages From Neighboring Intersections:", "Format Instruction:"]
    pos = [text.index(k) for k in keys]
    assert pos == sorted(pos)
    assert "nearby intersection to the east" in text


def test_optional_blocks_omitted():
    text = render_prompt(Observation.empty()).text
    assert "Incident Information" not in text and "Messages From" not in text
    assert "Format Instruction:" in text
    assert "Early queued: 0 (East), 0 (West), 0 (Total)" in text


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_render_is_injective(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 13, size=(4, 2, 4))
    b = a.copy()
    idx = tuple(rng.integers(0, s) for s in a.shape)
    b[idx] = (b[idx] + 1 + rng.integers(0, 5)) % 14
    assert render_prompt(obs_with(a)).text != render_prompt(obs_with(b)).text


# -- parsing ----------------------------------------------------------------

def test_parse_examples():
    r = parse_response("<think>x</think> \\boxed{ETWT}")
    assert (r.reasoning, r.action, r.format_ok) == ("x", Phase.ETWT, True)
    r = parse_response("\\boxed{ETWT}")
    assert (r.action, r.format_ok) == (Phase.ETWT, False)
    r = parse_response("<think>y</think> \\boxed{GREEN}")
    assert (r.action, r.format_ok) == (None, False)


def test_parse_rejects_order_and_duplicates():
    assert not parse_response("\\boxed{NTST} <think>late</think>").format_ok
    assert not parse_response("<think>a</think><think>b</think> \\boxed{NTST}").format_ok
    assert not parse_response("<think>a</think> \\boxed{NTST} \\boxed{ETWT}").format_ok


@given(st.sampled_from(PHASES), st.text(alphabet=st.characters(blacklist_characters="<>{}\\"), max_size=50))
def test_answer_round_trip(phase, reasoning):
    r = parse_response(render_answer(phase, reasoning))
    assert r.action == phase and r.format_ok


@given(st.one_of(st.text(), st.binary(), st.integers(), st.none()))
def test_parse_is_total(x):
    parse_response(x)


# -- features and parametric policy -------------------------------------------

def test_feature_layout():
    # 4 phases x 2 approaches x (early + 3 segments), raw and normalized.
    assert FEATURE_DIM == feature_dim(3) == 4 * 2 * 4 * 2 + 8 + INBOX_SLOTS + 1
    x = featurize(Observation.empty())
    assert x.shape == (FEATURE_DIM,)
    assert not x[: 4 * 2 * 4 * 2 + 8].any()


def test_feature_locality():
    c = np.ones((4, 2, 4), dtype=np.int64)
    base = featurize(obs_with(c))
    c[2, 1, 3] = 2
    assert np.count_nonzero(featurize(obs_with(c)) != base) == 2


def test_softmax_arithmetic():
    x = np.zeros(FEATURE_DIM)
    x[-1] = 1.0
    theta = np.zeros((4, FEATURE_DIM))
    theta[0, -1] = 10.0
    p = ParametricPolicy(theta).probs(x)
    # exp(10) / (exp(10) + 3) = 0.999864
    assert p[0] == pytest.approx(np.exp(10) / (np.exp(10) + 3), rel=1e-12)
    assert p[0] > 0.9998 and abs(p.sum() - 1) < 1e-12


def test_log_prob_uniform_and_normalized():
    pol = ParametricPolicy.zeros()
    x = np.random.default_rng(0).normal(size=FEATURE_DIM)
    assert log_prob_and_grad(pol, x, Phase.NLSL)[0] == pytest.approx(np.log(0.25))
    rng = np.random.default_rng(1)
    for _ in range(100):
        pol = ParametricPolicy(rng.normal(scale=3, size=(4, FEATURE_DIM)))
        total = sum(np.exp(log_prob_and_grad(pol, x, p)[0]) for p in PHASES)
        assert abs(total - 1) < 1e-12
        assert (pol.probs(x) > 0).all()


def test_log_prob_gradient_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(100):
        dim = 10
        theta = rng.normal(size=(4, dim))
        x = rng.normal(size=dim)
        a = PHASES[rng.integers(4)]
        _, g = log_prob_and_grad(ParametricPolicy(theta), x, a)
        num = np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            tp, tm = theta.copy(), theta.copy()
            tp[idx] += h
            tm[idx] -= h
            num[idx] = (log_prob_and_grad(ParametricPolicy(tp), x, a)[0] - log_prob_and_grad(ParametricPolicy(tm), x, a)[0]) / (2 * h)
        assert np.linalg.norm(g - num) <= 1e-6 * max(1.0, np.linalg.norm(num))


def test_outgoing_message_threshold():
    pol = ParametricPolicy.zeros(message_threshold=8)
    assert policy_decide(pol, sample_obs(), [])[1] is None
    c = np.zeros((4, 2, 4), dtype=np.int64)
    c[0, 0, 0] = 9
    _, msg, _ = policy_decide(pol, obs_with(c), [])
    assert msg == "Heavy westbound traffic is approaching."


def test_inbox_summary_counts_relevant_reports():
    # A report from the eastern neighbor about westbound traffic concerns the east approach.
    msg = AgentMessage((0, 1), (0, 0), "Heavy westbound traffic is approaching.", 0)
    other = AgentMessage((0, 1), (0, 0), "Heavy eastbound traffic is approaching.", 0)
    v = inbox_summary([msg, other], (0, 0))
    assert v.tolist() == [0, 0, 1, 0]


def test_message_validation():
    with pytest.raises(ValueError):
        AgentMessage((0, 0), (0, 0), "x", 0)
    assert len(AgentMessage((0, 0), (0, 1), "x" * 600, 0).body) == MAX_MESSAGE_CHARS


def test_policy_persistence(tmp_path):
    pol = ParametricPolicy(np.random.default_rng(0).normal(size=(4, FEATURE_DIM)), message_threshold=5)
    pol.save(tmp_path / "p.json")
    back = ParametricPolicy.load(tmp_path / "p.json")
    assert np.array_equal(back.theta, pol.theta) and back.message_threshold == 5


# -- text backend ---------------------------------------------------------------

class _Pipe:
    """In-process byte pipe with blocking readline."""

    def __init__(self):
        r, w = os.pipe()
        self.r, self.w = os.fdopen(r, "rb"), os.fdopen(w, "wb")


def _served(respond):
    a, b = _Pipe(), _Pipe()
    threading.Thread(target=serve_lines, args=(a.r, b.w, respond), daemon=True).start()
    return WireClient(b.r, a.w, timeout=2.0)


def _ctx(obs):
    return DecisionContext((0, 0), obs, Phase.ETWT, 0, np.random.default_rng(0))


def test_text_policy_sample_response():
    pol = TextPolicy(_served(lambda prompt: SAMPLE_RESPONSE))
    assert pol.decide(_ctx(sample_obs())).phase == Phase.ETWT
    assert pol.protocol_errors == []


def test_text_policy_falls_back_on_garbage():
    c = np.zeros((4, 2, 4), dtype=np.int64)
    c[2, :, 0] = 5
    pol = TextPolicy(_served(lambda prompt: "no idea"))
    assert pol.decide(_ctx(obs_with(c))).phase == Phase.NTST
    assert pol.protocol_errors[0]["reason"] == "unparseable response"


def test_text_policy_timeout():
    a, b = _Pipe(), _Pipe()  # nobody answers
    pol = TextPolicy(WireClient(b.r, a.w, timeout=0.2))
    assert pol.decide(_ctx(sample_obs())).phase == Phase.ETWT
    assert "wire failure" in pol.protocol_errors[0]["reason"]


def test_wire_ignores_unknown_ids():
    a, b = _Pipe(), _Pipe()
    client = WireClient(b.r, a.w, timeout=2.0)

    def server():
        import json

        req = json.loads(a.r.readline())
        b.w.write(b'{"id": "stray", "text": "x"}\n')
        b.w.write((json.dumps({"id": req["id"], "text": "ok"}) + "\n").encode())
        b.w.flush()

    threading.Thread(target=server, daemon=True).start()
    assert client.request("hello") == "ok"
    assert client.unknown_ids == ["stray"]


def test_wire_over_tcp():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)

    def accept():
        conn, _ = srv.accept()
        serve_lines(conn.makefile("rb"), conn.makefile("wb"), lambda p: render_answer(Phase.NLSL, "x"))

    threading.Thread(target=accept, daemon=True).start()
    client = WireClient.connect_tcp("127.0.0.1", srv.getsockname()[1])
    assert parse_response(client.request("p")).action == Phase.NLSL
    client.close()
    srv.close()


def test_wire_spawned_process():
    code = (
        "import sys\n"
        "from signalrl.agentio import serve_lines, render_answer\n"
        "serve_lines(sys.stdin.buffer, sys.stdout.buffer, lambda p: render_answer('NTST', 'x'))\n"
    )
    client = WireClient.spawn([sys.executable, "-c", code], timeout=20)
    try:
        assert parse_response(client.request("p")).action == Phase.NTST
    finally:
        client.close()


def test_serve_lines_protocol_shape():
    out = io.BytesIO()
    serve_lines(io.BytesIO(b'{"id": "a", "prompt": "p"}\n'), out, lambda p: "t")
    assert out.getvalue() == b'{"id": "a", "text": "t"}\n'
