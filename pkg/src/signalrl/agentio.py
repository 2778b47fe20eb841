"""Prompt rendering, response parsing and the two policy backends.

The parametric backend is a linear softmax policy over a fixed feature
layout. The text backend renders a prompt, sends it over a line-delimited
JSON wire to an external model and parses the reply.
"""

from __future__ import annotations

import itertools
import json
import logging
import queue
import re
import socket
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .controllers import Decision, DecisionContext, max_pressure_next
from .microsim import Observation
from .netmodel import (
    APPROACHES,
    PHASE_APPROACHES,
    PHASE_DESCRIPTIONS,
    PHASES,
    Approach,
    IntersectionId,
    Phase,
)

log = logging.getLogger(__name__)

MAX_MESSAGE_CHARS = 512
INBOX_SLOTS = 4
COUNT_SLOTS = 4  # early queued + 3 segments in the default layout
DOWNSTREAM_SLOTS = len(PHASES) * 2
FEATURE_DIM = len(PHASES) * 2 * COUNT_SLOTS * 2 + DOWNSTREAM_SLOTS + INBOX_SLOTS + 1  # 77

SYSTEM_LINE = "You are a traffic signal control agent."
TASK_DESCRIPTION = (
    "You control the signal at a four-way intersection of a north-south road and an "
    "east-west road. Every approach has a through lane and a left-turn lane; right turns "
    "are always permitted. Each lane is split into segments numbered outward from the stop "
    "line, and early queued vehicles are already waiting at the stop line. Pick the signal "
    "phase that will most improve traffic during the next green period."
)
FORMAT_INSTRUCTION = (
    "Choose exactly one of the signals listed above. Reason about the choice first and put "
    "that reasoning inside <think>...</think> tags, then put only the chosen signal inside "
    "\\boxed{}."
)

_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_BOXED_RE = re.compile(r"\\boxed\{\s*([^{}]*?)\s*\}")
_MESSAGE_RE = re.compile(r"<message>(.*?)</message>", re.DOTALL)
_HEAVY_RE = re.compile(r"heavy\s+(north|south|east|west)bound", re.IGNORECASE)


@dataclass
class AgentMessage:
    sender: IntersectionId
    recipient: IntersectionId
    body: str
    issued_half_step: int

    def __post_init__(self) -> None:
        self.sender = tuple(self.sender)
        self.recipient = tuple(self.recipient)
        if self.sender == self.recipient:
            raise ValueError("a message needs distinct sender and recipient")
        self.body = self.body[:MAX_MESSAGE_CHARS]


@dataclass
class Prompt:
    system_line: str
    task_description: str
    observation_block: str
    format_instruction: str
    incident_block: str | None = None
    messages_block: str | None = None

    @property
    def text(self) -> str:
        parts = [
            f"System: {self.system_line}",
            f"Task Description: {self.task_description}",
            f"Structured Traffic Observation:\n{self.observation_block}",
        ]
        if self.incident_block:
            parts.append(f"Incident Information:\n{self.incident_block}")
        if self.messages_block:
            parts.append(f"Messages From Neighboring Intersections:\n{self.messages_block}")
        parts.append(f"Format Instruction: {self.format_instruction}")
        return "\n".join(parts)

    def __str__(self) -> str:
        return self.text


@dataclass
class ParsedResponse:
    reasoning: str = ""
    action: Phase | None = None
    format_ok: bool = False
    message: str | None = None


def _direction_word(a: IntersectionId, b: IntersectionId) -> str | None:
    """Compass word for where ``a`` lies as seen from ``b`` (adjacent cells only)."""
    dr, dc = a[0] - b[0], a[1] - b[1]
    return {(-1, 0): "north", (1, 0): "south", (0, 1): "east", (0, -1): "west"}.get((dr, dc))


def render_observation(obs: Observation) -> str:
    blocks = []
    n = obs.segment_count
    for p, ph in enumerate(PHASES):
        a, b = (x.label for x in PHASE_APPROACHES[ph])
        lines = [f"Signal: {ph.value}", f"Allowed lanes: {PHASE_DESCRIPTIONS[ph]}"]
        rows = [("Early queued", 0)] + [(f"Segment {i}", i) for i in range(1, n + 1)]
        for label, slot in rows:
            x, y = int(obs.counts[p, 0, slot]), int(obs.counts[p, 1, slot])
            lines.append(f"- {label}: {x} ({a}), {y} ({b}), {x + y} (Total)")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def render_message(msg: AgentMessage) -> str:
    where = _direction_word(msg.sender, msg.recipient)
    origin = f"the nearby intersection to the {where}" if where else f"intersection {msg.sender}"
    return f"Report from {origin}: {msg.body}"


def render_prompt(obs: Observation, incident: str | None = None, inbox: Iterable[AgentMessage] = ()) -> Prompt:
    inbox = list(inbox)
    return Prompt(
        system_line=SYSTEM_LINE,
        task_description=TASK_DESCRIPTION,
        observation_block=render_observation(obs),
        format_instruction=FORMAT_INSTRUCTION,
        incident_block=incident or None,
        messages_block="\n".join(render_message(m) for m in inbox) or None,
    )


def render_answer(phase: Phase, reasoning: str = "") -> str:
    return f"<think>{reasoning}</think> \\boxed{{{Phase(phase).value}}}"


def parse_response(text) -> ParsedResponse:
    """Extract reasoning, action and format validity; never raises."""
    try:
        text = text if isinstance(text, str) else str(text)
    except Exception:
        return ParsedResponse()
    thinks = list(_THINK_RE.finditer(text))
    boxes = list(_BOXED_RE.finditer(text))
    out = ParsedResponse()
    if thinks:
        out.reasoning = thinks[0].group(1).strip()
    if boxes:
        token = boxes[0].group(1).strip()
        if token in Phase._value2member_map_:
            out.action = Phase(token)
    msg = _MESSAGE_RE.search(text)
    if msg:
        out.message = msg.group(1).strip()[:MAX_MESSAGE_CHARS] or None
    # Stray or unbalanced tags also break the format.
    balanced = text.count("<think>") == 1 and text.count("</think>") == 1
    out.format_ok = (
        out.action is not None
        and len(thinks) == 1
        and len(boxes) == 1
        and balanced
        and thinks[0].end() <= boxes[0].start()
    )
    return out


# -- features ------------------------------------------------------------

def inbox_summary(inbox: Iterable[AgentMessage], recipient: IntersectionId | None = None) -> np.ndarray:
    """Heavy-traffic reports per approach of the recipient (N, S, E, W).

    A report counts for approach d when it comes from the neighbor on side d
    and names traffic heading toward the recipient.
    """
    out = np.zeros(INBOX_SLOTS)
    for msg in inbox:
        side = _direction_word(msg.sender, recipient if recipient is not None else msg.recipient)
        m = _HEAVY_RE.search(msg.body)
        if side is None or m is None:
            continue
        approach = Approach(side[0].upper())
        if m.group(1).lower() == approach.opposite.label.lower():
            out[APPROACHES.index(approach)] += 1
    return out


def featurize(obs: Observation, inbox_vec: np.ndarray | None = None) -> np.ndarray:
    """Raw counts, capacity-normalized counts, downstream totals, inbox slots, bias.

    Layout: ``counts`` flattened over (phase, approach, slot), the same block
    divided by buffer capacity (slot 0) or segment capacity (segments), the
    (phase, approach) receiving-arm totals of ``obs.downstream``, then
    ``INBOX_SLOTS`` inbox entries and a constant 1 (lets ties break by phase).
    """
    counts = obs.counts.astype(float)
    scale = np.full(counts.shape[2], float(obs.segment_capacity))
    scale[0] = float(obs.buffer_capacity)
    inbox_vec = np.zeros(INBOX_SLOTS) if inbox_vec is None else np.asarray(inbox_vec, dtype=float)
    down = np.asarray(obs.downstream, dtype=float).ravel()
    return np.concatenate([counts.ravel(), (counts / scale).ravel(), down, inbox_vec, [1.0]])


def feature_dim(segment_count: int = 3) -> int:
    return len(PHASES) * 2 * (segment_count + 1) * 2 + DOWNSTREAM_SLOTS + INBOX_SLOTS + 1


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


# -- parametric backend -----------------------------------------------------

@dataclass
class ParametricPolicy:
    """Linear softmax policy; logits are ``theta @ features``."""

    theta: np.ndarray
    message_threshold: int = 8
    greedy: bool = False
    name: str = "parametric"
    reads_incidents = False

    @classmethod
    def zeros(cls, dim: int = FEATURE_DIM, **kw) -> "ParametricPolicy":
        return cls(np.zeros((len(PHASES), dim)), **kw)

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def copy(self) -> "ParametricPolicy":
        return ParametricPolicy(self.theta.copy(), self.message_threshold, self.greedy, self.name)

    def log_probs(self, features: np.ndarray) -> np.ndarray:
        return log_softmax(np.asarray(features) @ self.theta.T)

    def probs(self, features: np.ndarray) -> np.ndarray:
        return np.exp(self.log_probs(features))

    def outgoing_message(self, obs: Observation) -> str | None:
        queues = [obs.approach_queue(a) for a in APPROACHES]
        k = int(np.argmax(queues))
        if queues[k] <= self.message_threshold:
            return None
        heading = APPROACHES[k].opposite
        return f"Heavy {heading.label.lower()}bound traffic is approaching."

    def decide(self, ctx: DecisionContext) -> Decision:
        x = featurize(ctx.observation, inbox_summary(ctx.inbox, ctx.intersection))
        logp = self.log_probs(x)
        if self.greedy:
            a = int(np.argmax(logp))
        else:
            cdf = np.cumsum(np.exp(logp))
            a = min(int(np.searchsorted(cdf, ctx.rng.random() * cdf[-1], side="right")), 3)
        return Decision(PHASES[a], self.outgoing_message(ctx.observation), float(logp[a]), x)

    # -- persistence ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "signalrl.parametric-policy",
            "phase_order": [p.value for p in PHASES],
            "feature_dim": self.dim,
            "inbox_slots": INBOX_SLOTS,
            "message_threshold": self.message_threshold,
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParametricPolicy":
        if d.get("phase_order") != [p.value for p in PHASES]:
            raise ValueError(f"unexpected phase order {d.get('phase_order')}")
        theta = np.asarray(d["theta"], dtype=float)
        if theta.shape != (len(PHASES), int(d["feature_dim"])):
            raise ValueError(f"theta shape {theta.shape} does not match feature_dim {d['feature_dim']}")
        return cls(theta, message_threshold=int(d.get("message_threshold", 8)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ParametricPolicy":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def log_prob_and_grad(policy: ParametricPolicy, features: np.ndarray, action: Phase) -> tuple[float, np.ndarray]:
    """Exact log pi(action | features) and its gradient with respect to theta."""
    a = PHASES.index(Phase(action))
    logp = policy.log_probs(features)
    onehot = np.zeros(len(PHASES))
    onehot[a] = 1.0
    grad = np.outer(onehot - np.exp(logp), features)
    return float(logp[a]), grad


def policy_decide(policy, obs: Observation, inbox: list[AgentMessage], *, intersection=(0, 0), incident=None, rng=None, current_phase=Phase.ETWT):
    """Convenience wrapper returning (phase, outgoing message, log prob)."""
    ctx = DecisionContext(
        intersection, obs, current_phase, 0, rng if rng is not None else np.random.default_rng(0), incident, list(inbox)
    )
    d = policy.decide(ctx)
    return d.phase, d.message, d.log_prob


# -- text backend -----------------------------------------------------------

class WireTimeout(TimeoutError):
    pass


class WireClient:
    """Line-delimited JSON requests ``{"id", "prompt"}`` answered by ``{"id", "text"}``.

    ``reader`` and ``writer`` are binary file objects (a pipe pair or a socket
    file). A background thread collects replies; replies with an unknown id
    are dropped with a warning.
    """

    def __init__(self, reader, writer, timeout: float = 10.0, *, closer: Callable[[], None] | None = None) -> None:
        self.reader = reader
        self.writer = writer
        self.timeout = timeout
        self._closer = closer
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._waiting: dict[str, queue.Queue] = {}
        self.unknown_ids: list[str] = []
        self._thread = threading.Thread(target=self._pump, daemon=True)
        self._thread.start()

    @classmethod
    def connect_tcp(cls, host: str, port: int, timeout: float = 10.0) -> "WireClient":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        rfile, wfile = sock.makefile("rb"), sock.makefile("wb")

        def close():
            # Shut down first so the reply thread's blocking readline returns.
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            wfile.close()
            rfile.close()
            sock.close()

        return cls(rfile, wfile, timeout, closer=close)

    @classmethod
    def spawn(cls, argv: list[str], timeout: float = 10.0) -> "WireClient":
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

        def close():
            proc.stdin.close()
            proc.wait(timeout=5)
            proc.stdout.close()

        return cls(proc.stdout, proc.stdin, timeout, closer=close)

    def _pump(self) -> None:
        for raw in iter(self.reader.readline, b""):
            try:
                msg = json.loads(raw)
                rid, text = str(msg["id"]), msg["text"]
            except (ValueError, KeyError, TypeError):
                log.warning("malformed wire response: %r", raw[:200])
                continue
            with self._lock:
                slot = self._waiting.pop(rid, None)
            if slot is None:
                log.warning("ignoring response with unknown id %s", rid)
                self.unknown_ids.append(rid)
                continue
            slot.put(text)

    def request(self, prompt: str) -> str:
        rid = f"req-{next(self._ids)}"
        slot: queue.Queue = queue.Queue(maxsize=1)
        with self._lock:
            self._waiting[rid] = slot
        line = json.dumps({"id": rid, "prompt": prompt}) + "\n"
        self.writer.write(line.encode())
        self.writer.flush()
        try:
            return slot.get(timeout=self.timeout)
        except queue.Empty:
            with self._lock:
                self._waiting.pop(rid, None)
            raise WireTimeout(f"no response to {rid} within {self.timeout}s") from None

    def close(self) -> None:
        if self._closer is not None:
            self._closer()


def serve_lines(reader, writer, respond: Callable[[str], str]) -> None:
    """Answer wire requests until EOF; the counterpart of :class:`WireClient`."""
    for raw in iter(reader.readline, b""):
        req = json.loads(raw)
        out = {"id": req["id"], "text": respond(req["prompt"])}
        writer.write((json.dumps(out) + "\n").encode())
        writer.flush()


@dataclass
class TextPolicy:
    """Queries an external text model; falls back to MaxPressure on any wire or parse failure."""

    client: WireClient
    name: str = "text"
    reads_incidents = True
    protocol_errors: list[dict] = field(default_factory=list)

    def decide(self, ctx: DecisionContext) -> Decision:
        prompt = render_prompt(ctx.observation, ctx.incident, ctx.inbox)
        try:
            parsed = parse_response(self.client.request(prompt.text))
        except (WireTimeout, OSError, ValueError) as exc:
            return self._fallback(ctx, f"wire failure: {exc}")
        if parsed.action is None:
            return self._fallback(ctx, "unparseable response")
        return Decision(parsed.action, parsed.message)

    def _fallback(self, ctx: DecisionContext, reason: str) -> Decision:
        event = {"event": "protocol-error", "time": ctx.time, "intersection": list(ctx.intersection), "reason": reason}
        self.protocol_errors.append(event)
        log.warning("text policy fallback at %s: %s", ctx.intersection, reason)
        return Decision(max_pressure_next(ctx.observation))
