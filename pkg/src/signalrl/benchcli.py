"""Command-line harness: scenario generation, simulation, training, evaluation.

Every command reads its settings from flags and, where it takes a
``--config``, from a JSON experiment file whose fields flags override.
Outputs are sorted JSON, JSONL logs and CSV tables with fixed float
formatting, so a config plus its seed list determines every byte.

Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .agentio import ParametricPolicy, TextPolicy, WireClient
from .asynccomm import AsyncRunner, run_independent
from .controllers import FixedTimeController, FixedTimePlan, MaxPressureController, RandomController
from .incidents import (
    EmergencyPriorityController,
    RuleTablePolicy,
    emergency_flow,
    eval_eaa,
    eval_network_wide,
    format_eaa,
    load_fixtures,
    synthetic_incidents,
)
from .microsim import FlowSpec, MetricsReport, SimConfig, Simulator, spawn_flow
from .netmodel import GridNetwork, build_grid
from .rlopt import TrainConfig, generate_expert_dataset, grpo_train, load_dataset, save_dataset
from .rlopt.offline import write_history
from .rlopt.online import online_train

log = logging.getLogger("signalrl")

CONTROLLER_KINDS = ("fixedtime", "maxpressure", "random", "parametric", "ruletable", "emergency", "text")
METRIC_COLUMNS = ("att", "awt", "avg_queue", "aett", "aewt")


class UsageError(ValueError):
    """Bad flags or config fields; exits with code 2."""


def _check_fields(cls, d: dict, where: str) -> None:
    if not isinstance(d, dict):
        raise UsageError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise UsageError(f"{where}: unknown field(s) {sorted(unknown)}")


@dataclass
class NetworkSpec:
    rows: int = 4
    cols: int = 4
    link_length_m: float = 300.0
    segment_count: int = 3

    def build(self) -> GridNetwork:
        return build_grid(self.rows, self.cols, self.link_length_m, self.segment_count)


@dataclass
class FlowConfig:
    total_rate_vph: float = 4000.0
    turn_probabilities: tuple[float, float, float] = (0.7, 0.15, 0.15)
    emergency_fraction: float = 0.0

    def spec(self, seed: int) -> FlowSpec:
        return FlowSpec(self.total_rate_vph, int(seed), tuple(self.turn_probabilities), self.emergency_fraction)


@dataclass
class ControllerSpec:
    kind: str = "maxpressure"
    # Kind-specific: policy_path and greedy (parametric), green_s (fixedtime),
    # argv or host/port plus timeout (text).
    params: dict = field(default_factory=dict)
    name: str | None = None

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass
class AblationFlags:
    no_expert_stage: bool = False
    no_openworld_stage: bool = False
    no_communication: bool = False


@dataclass
class DatasetSpec:
    path: str | None = None
    size: int = 500
    flow_seeds: list[int] = field(default_factory=lambda: list(range(10)))
    seed: int = 0


@dataclass
class IncidentSpec:
    fixtures: str | None = None  # None: bundled fixtures
    synthetic: int = 0
    synthetic_seed: int = 0
    emergency_fraction: float = 0.05
    network_wide: bool = True


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    network: NetworkSpec = field(default_factory=NetworkSpec)
    flow: FlowConfig = field(default_factory=FlowConfig)
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    horizon_s: int = 3600
    seeds: list[int] = field(default_factory=lambda: [0])
    runner: str = "async"
    ablation: AblationFlags = field(default_factory=AblationFlags)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    offline: dict = field(default_factory=dict)
    online: dict = field(default_factory=dict)
    online_horizon_s: int = 900
    incidents: IncidentSpec = field(default_factory=IncidentSpec)
    output_dir: str = "runs/experiment"
    workers: int = 1

    _NESTED = {
        "network": NetworkSpec,
        "flow": FlowConfig,
        "controller": ControllerSpec,
        "ablation": AblationFlags,
        "dataset": DatasetSpec,
        "incidents": IncidentSpec,
    }

    def __post_init__(self) -> None:
        if not self.seeds:
            raise UsageError("seeds: at least one seed is required")
        if not isinstance(self.horizon_s, int) or self.horizon_s <= 0:
            raise UsageError(f"horizon_s: must be a positive integer, got {self.horizon_s!r}")
        if self.runner not in ("async", "independent"):
            raise UsageError(f"runner: must be 'async' or 'independent', got {self.runner!r}")
        if self.controller.kind not in CONTROLLER_KINDS:
            raise UsageError(f"controller.kind: must be one of {CONTROLLER_KINDS}, got {self.controller.kind!r}")
        if self.workers < 1:
            raise UsageError("workers: must be >= 1")
        for key in ("offline", "online"):
            try:
                self.train_config(key)
            except (ValueError, TypeError) as exc:
                raise UsageError(f"{key}: {exc}") from exc

    def train_config(self, stage: str) -> TrainConfig:
        return TrainConfig.from_dict(getattr(self, stage))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_fields(cls, d, "config")
        kw = dict(d)
        for key, sub in cls._NESTED.items():
            if key in kw:
                _check_fields(sub, kw[key], key)
                try:
                    kw[key] = sub(**kw[key])
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"{key}: {exc}") from exc
        if "seeds" in kw:
            kw["seeds"] = [int(s) for s in kw["seeds"]]
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)


# -- helpers ------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def _round(obj):
    """Round floats for stable text output."""
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_round(obj), sort_keys=True, indent=2) + "\n")


def write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(_round(r), sort_keys=True) + "\n")


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def build_controller(spec: ControllerSpec, seed: int = 0):
    p = dict(spec.params)
    kind = spec.kind
    if kind == "fixedtime":
        return FixedTimeController(FixedTimePlan(green_s=tuple(p.get("green_s", (15, 15, 15, 15)))))
    if kind == "maxpressure":
        return MaxPressureController()
    if kind == "random":
        return RandomController(seed=p.get("seed", seed))
    if kind == "parametric":
        if "policy_path" not in p:
            raise UsageError("controller.params.policy_path: required for a parametric controller")
        pol = ParametricPolicy.load(p["policy_path"])
        pol.greedy = bool(p.get("greedy", False))
        return pol
    if kind == "ruletable":
        return RuleTablePolicy()
    if kind == "emergency":
        return EmergencyPriorityController()
    if kind == "text":
        timeout = float(p.get("timeout", 10.0))
        if "argv" in p:
            client = WireClient.spawn(list(p["argv"]), timeout)
        elif "host" in p and "port" in p:
            client = WireClient.connect_tcp(p["host"], int(p["port"]), timeout)
        else:
            raise UsageError("controller.params: a text controller needs argv or host/port")
        return TextPolicy(client)
    raise UsageError(f"controller.kind: unknown {kind!r}")


def run_episode(cfg: ExperimentConfig, seed: int, controller=None):
    """One episode; returns (metrics, decision events, messages)."""
    net = cfg.network.build()
    sim = Simulator(net, spawn_flow(cfg.flow.spec(seed), net, cfg.horizon_s), SimConfig())
    ctrl = controller if controller is not None else build_controller(cfg.controller, seed)
    rng = np.random.default_rng(seed)
    if cfg.runner == "independent":
        res = run_independent(sim, ctrl, cfg.horizon_s, rng=rng)
    else:
        communicate = not cfg.ablation.no_communication
        res = AsyncRunner(sim, ctrl, communicate=communicate, rng=rng).run(cfg.horizon_s)
    return res.metrics, res.events, res.messages


def _episode_worker(args):
    cfg_dict, seed = args
    m, events, messages = run_episode(ExperimentConfig.from_dict(cfg_dict), seed)
    return m.to_dict(), events, messages


def run_seeds(cfg: ExperimentConfig) -> list[tuple[int, MetricsReport, list, list]]:
    """All seeds, in seed-list order, optionally across worker processes."""
    jobs = [(cfg.to_dict(), s) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_episode_worker, jobs))
    else:
        results = [_episode_worker(j) for j in jobs]
    return [(s, MetricsReport.from_dict(m), ev, msg) for s, (m, ev, msg) in zip(cfg.seeds, results)]


def aggregate(reports: list[MetricsReport]) -> dict:
    out = {}
    for col in METRIC_COLUMNS + ("vehicles_entered", "vehicles_exited"):
        vals = np.array([getattr(r, col) for r in reports], dtype=float)
        out[col] = {"mean": float(vals.mean()), "std": float(vals.std())}
    out["episodes"] = len(reports)
    return out


# -- commands -----------------------------------------------------------------

def cmd_net_gen(args) -> int:
    net = build_grid(args.rows, args.cols, args.link_length, args.segments)
    text = net.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_flow_gen(args) -> int:
    net = GridNetwork.from_json(Path(args.network).read_text()) if args.network else build_grid(4, 4, 300.0)
    spec = FlowSpec(args.rate, args.seed, tuple(args.turns), args.emergency_fraction)
    arrivals = spawn_flow(spec, net, args.horizon)
    rows = [
        {
            "time": a.time,
            "vehicle_id": a.vehicle_id,
            "entry": [list(a.route[0][0]), a.entry_approach.value],
            "route": [[list(i), m.value] for i, m in a.route],
            "emergency": a.is_emergency,
        }
        for a in arrivals
    ]
    write_jsonl(Path(args.out), rows)
    if args.spec_out:
        Path(args.spec_out).write_text(spec.to_json() + "\n")
    print(f"{len(rows)} arrivals -> {args.out}")
    return 0


def cmd_sim_run(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.output_dir)
    results = run_seeds(cfg)
    reports = [m for _, m, _, _ in results]
    write_jsonl(out / "reports.jsonl", [{"seed": s, **m.to_dict()} for s, m, _, _ in results])
    write_jsonl(out / "events.jsonl", [{"seed": s, **e} for s, _, ev, _ in results for e in ev])
    write_jsonl(out / "messages.jsonl", [{"seed": s, **m} for s, _, _, msg in results for m in msg])
    agg = aggregate(reports)
    write_json(out / "aggregate.json", {"name": cfg.name, "controller": cfg.controller.label, "seeds": cfg.seeds, **agg})
    write_csv(
        out / "metrics.csv",
        ["seed"] + list(METRIC_COLUMNS),
        [[s] + [getattr(m, c) for c in METRIC_COLUMNS] for s, m, _, _ in results],
    )
    return agg


def _ensure_dataset(cfg: ExperimentConfig, out: Path, generate: bool):
    ds = cfg.dataset
    if ds.path:
        return load_dataset(ds.path)
    if not generate:
        raise FileNotFoundError("offline training needs dataset.path (see 'dataset gen')")
    samples = generate_expert_dataset(cfg.network.build(), ds.flow_seeds, size=ds.size, seed=ds.seed)
    save_dataset(samples, out / "dataset.jsonl")
    return samples


def _env_factory(cfg: ExperimentConfig, horizon: int):
    net = cfg.network.build()

    def make(seed: int) -> Simulator:
        return Simulator(net, spawn_flow(cfg.flow.spec(seed), net, horizon), SimConfig(record_events=False))

    return make


def train_offline(cfg: ExperimentConfig, out: Path, init: ParametricPolicy | None = None, generate: bool = False):
    dataset = _ensure_dataset(cfg, out, generate)
    policy, hist = grpo_train(dataset, init or ParametricPolicy.zeros(), cfg.train_config("offline"))
    policy.save(out / "policy_offline.json")
    write_history(hist, out / "history_offline.jsonl")
    return policy, hist


def train_online(cfg: ExperimentConfig, out: Path, init: ParametricPolicy | None = None):
    policy, hist = online_train(
        _env_factory(cfg, cfg.online_horizon_s),
        init or ParametricPolicy.zeros(),
        cfg.train_config("online"),
        horizon_s=cfg.online_horizon_s,
        communicate=not cfg.ablation.no_communication,
    )
    policy.save(out / "policy_online.json")
    write_history(hist, out / "history_online.jsonl")
    return policy, hist


def cmd_train(stage: str, cfg: ExperimentConfig, init_path: str | None = None) -> dict:
    """Run one stage, or the full pipeline honoring the ablation flags."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    init = ParametricPolicy.load(init_path) if init_path else None
    summary: dict = {"stage": stage}
    if stage == "offline":
        _, hist = train_offline(cfg, out, init)
        summary["offline_iterations"] = len(hist)
        return summary
    if stage == "online":
        _, hist = train_online(cfg, out, init)
        summary["online_iterations"] = len(hist)
        return summary
    # pipeline
    policy = init
    for stale in ("history_offline.jsonl", "history_online.jsonl", "policy_offline.json", "policy_online.json"):
        (out / stale).unlink(missing_ok=True)
    if not cfg.ablation.no_expert_stage:
        policy, hist = train_offline(cfg, out, policy, generate=True)
        summary["offline_iterations"] = len(hist)
    if not cfg.ablation.no_openworld_stage:
        policy, hist = train_online(cfg, out, policy)
        summary["online_iterations"] = len(hist)
    policy = policy or ParametricPolicy.zeros()
    policy.save(out / "policy_final.json")
    # Closing evaluation of the final policy on the configured seeds.
    eval_rows, messages = [], []
    for s in cfg.seeds:
        m, _, msg = run_episode(cfg, s, controller=policy.copy())
        eval_rows.append({"seed": s, **m.to_dict()})
        messages.extend({"seed": s, **x} for x in msg)
    write_jsonl(out / "eval.jsonl", eval_rows)
    write_jsonl(out / "messages.jsonl", messages)
    summary["messages"] = len(messages)
    write_json(out / "pipeline.json", {"ablation": dataclasses.asdict(cfg.ablation), **summary})
    return summary


def cmd_eval_incidents(cfg: ExperimentConfig, controllers: list[ControllerSpec]) -> list[list]:
    out = Path(cfg.output_dir)
    inc = cfg.incidents
    incidents = load_fixtures(inc.fixtures)
    if inc.synthetic:
        incidents = incidents + synthetic_incidents(inc.synthetic, inc.synthetic_seed)
    if not incidents:
        log.warning("no incidents to evaluate; EAA column left empty")
    net = cfg.network.build()
    rows = []
    for spec in controllers:
        ctrl = build_controller(spec, cfg.seeds[0])
        eaa = eval_eaa(ctrl, incidents, network=net, seed=cfg.seeds[0]) if incidents else None
        aett = aewt = None
        if inc.network_wide and inc.emergency_fraction > 0:
            flow = emergency_flow(cfg.flow.spec(0), inc.emergency_fraction)
            aett, aewt = eval_network_wide(
                build_controller(spec, cfg.seeds[0]), net, flow, cfg.seeds, cfg.horizon_s,
                communicate=not cfg.ablation.no_communication,
            )
        rows.append([spec.label, format_eaa(eaa), aett, aewt])
    write_csv(out / "incidents.csv", ["method", "eaa", "aett", "aewt"], rows)
    return rows


def cmd_bench_compare(configs: list[ExperimentConfig], out_path: Path) -> list[list]:
    if len(configs) < 2:
        raise UsageError("bench compare needs at least two configs")
    seeds = configs[0].seeds
    for c in configs[1:]:
        if c.seeds != seeds:
            raise UsageError(f"seed lists differ: {c.name} has {c.seeds}, {configs[0].name} has {seeds}")
    per_method = []
    for c in configs:
        reports = [m for _, m, _, _ in run_seeds(c)]
        per_method.append((c.name, reports))
    with_emergency = any(r.emergency_entered for _, reps in per_method for r in reps)
    cols = ["att", "awt"] + (["aett", "aewt"] if with_emergency else [])
    table = [[name] + [float(np.mean([getattr(r, col) for r in reps])) for col in cols] for name, reps in per_method]
    # Mark the best (lowest) value per metric with a trailing '*'.
    rows = []
    for row in table:
        cells = [row[0]]
        for j, col in enumerate(cols, 1):
            best = min(r[j] for r in table)
            cells.append(f"{row[j]:.4f}" + ("*" if row[j] == best else ""))
        rows.append(cells)
    write_csv(out_path, ["method"] + cols, rows)
    return rows


def cmd_dataset_gen(args) -> int:
    net = GridNetwork.from_json(Path(args.network).read_text()) if args.network else build_grid(4, 4, 300.0)
    samples = generate_expert_dataset(net, range(args.flow_seed_start, args.flow_seed_start + args.flow_seeds), size=args.size, seed=args.seed)
    save_dataset(samples, args.out)
    print(f"{len(samples)} samples -> {args.out}")
    return 0


# -- argument parsing ---------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seeds", type=int, nargs="+", help="override seed list")
    p.add_argument("--horizon", type=int, help="override episode horizon (s)")
    p.add_argument("--rate", type=float, help="override total demand (veh/h)")
    p.add_argument("--controller", choices=CONTROLLER_KINDS, help="override controller kind")
    p.add_argument("--policy", help="policy file for --controller parametric")
    p.add_argument("--runner", choices=("async", "independent"))
    p.add_argument("--output-dir", help="override output directory")
    p.add_argument("--workers", type=int, help="worker processes for seeds")
    p.add_argument("--no-expert-stage", action="store_true")
    p.add_argument("--no-openworld-stage", action="store_true")
    p.add_argument("--no-communication", action="store_true")


def config_from_args(args) -> ExperimentConfig:
    data = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    if args.config and not isinstance(data, dict):
        raise UsageError("config: top level must be an object")
    cfg = ExperimentConfig.from_dict(data) if data else ExperimentConfig()
    d = cfg.to_dict()
    if args.seeds:
        d["seeds"] = args.seeds
    if args.horizon is not None:
        d["horizon_s"] = args.horizon
    if args.rate is not None:
        d["flow"]["total_rate_vph"] = args.rate
    if args.controller:
        d["controller"] = {"kind": args.controller, "params": {}, "name": None}
    if args.policy:
        d["controller"]["params"]["policy_path"] = args.policy
    if args.runner:
        d["runner"] = args.runner
    if args.output_dir:
        d["output_dir"] = args.output_dir
    if args.workers:
        d["workers"] = args.workers
    for flag in ("no_expert_stage", "no_openworld_stage", "no_communication"):
        if getattr(args, flag, False):
            d["ablation"][flag] = True
    return ExperimentConfig.from_dict(d)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="signalrl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="group", required=True)

    net = sub.add_parser("net", help="network files").add_subparsers(dest="action", required=True)
    p = net.add_parser("gen", help="write a grid network as JSON")
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--link-length", type=float, default=300.0)
    p.add_argument("--segments", type=int, default=3)
    p.add_argument("--out")

    flow = sub.add_parser("flow", help="demand files").add_subparsers(dest="action", required=True)
    p = flow.add_parser("gen", help="sample an arrival schedule as JSONL")
    p.add_argument("--network", help="network JSON (default 4x4, 300 m)")
    p.add_argument("--rate", type=float, default=4000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=3600.0)
    p.add_argument("--turns", type=float, nargs=3, default=(0.7, 0.15, 0.15), metavar=("THROUGH", "LEFT", "RIGHT"))
    p.add_argument("--emergency-fraction", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--spec-out", help="also write the flow spec JSON")

    sim = sub.add_parser("sim", help="simulation").add_subparsers(dest="action", required=True)
    _add_config_flags(sim.add_parser("run", help="run a controller over the seed list"))

    train = sub.add_parser("train", help="policy training").add_subparsers(dest="action", required=True)
    for stage in ("offline", "online", "pipeline"):
        p = train.add_parser(stage, help=f"{stage} training")
        _add_config_flags(p)
        p.add_argument("--dataset", help="expert dataset JSONL")
        p.add_argument("--init", help="initial policy file")
        p.add_argument("--iterations", type=int, help="override iterations for the stage(s)")

    ev = sub.add_parser("eval", help="evaluation").add_subparsers(dest="action", required=True)
    p = ev.add_parser("incidents", help="EAA / AETT / AEWT table")
    _add_config_flags(p)
    p.add_argument("--fixtures", help="incident JSONL (default: bundled)")
    p.add_argument("--synthetic", type=int, help="add this many synthetic single-answer incidents")
    p.add_argument("--methods", nargs="+", choices=CONTROLLER_KINDS, help="controllers to score")
    p.add_argument("--no-network-wide", action="store_true", help="skip emergency-flow episodes")

    bench = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="action", required=True)
    p = bench.add_parser("compare", help="paired-seed comparison table")
    p.add_argument("configs", nargs="+")
    p.add_argument("--seeds", type=int, nargs="+", help="override seeds in every config")
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", required=True)

    ds = sub.add_parser("dataset", help="expert datasets").add_subparsers(dest="action", required=True)
    p = ds.add_parser("gen", help="MaxPressure-labeled scenarios as JSONL")
    p.add_argument("--network")
    p.add_argument("--size", type=int, default=3000)
    p.add_argument("--flow-seeds", type=int, default=10, help="number of flow seeds")
    p.add_argument("--flow-seed-start", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return ap


def _dispatch(args) -> int:
    g, a = args.group, args.action
    if g == "net":
        return cmd_net_gen(args)
    if g == "flow":
        return cmd_flow_gen(args)
    if g == "dataset":
        return cmd_dataset_gen(args)
    if g == "sim":
        agg = cmd_sim_run(config_from_args(args))
        print(json.dumps(_round({"att": agg["att"], "awt": agg["awt"]}), sort_keys=True))
        return 0
    if g == "train":
        cfg = config_from_args(args)
        d = cfg.to_dict()
        if args.dataset:
            d["dataset"]["path"] = args.dataset
        if args.iterations is not None:
            d["offline"]["iterations"] = args.iterations
            d["online"]["iterations"] = args.iterations
        cfg = ExperimentConfig.from_dict(d)
        print(json.dumps(cmd_train(a, cfg, args.init), sort_keys=True))
        return 0
    if g == "eval":
        cfg = config_from_args(args)
        d = cfg.to_dict()
        if args.fixtures:
            d["incidents"]["fixtures"] = args.fixtures
        if args.synthetic is not None:
            d["incidents"]["synthetic"] = args.synthetic
        if args.no_network_wide:
            d["incidents"]["network_wide"] = False
        cfg = ExperimentConfig.from_dict(d)
        specs = [ControllerSpec(k) for k in args.methods] if args.methods else [cfg.controller]
        for row in cmd_eval_incidents(cfg, specs):
            print(",".join(_fmt(v) for v in row))
        return 0
    if g == "bench":
        cfgs = []
        for path in args.configs:
            c = ExperimentConfig.load(path)
            d = c.to_dict()
            if args.seeds:
                d["seeds"] = args.seeds
            if args.horizon is not None:
                d["horizon_s"] = args.horizon
            cfgs.append(ExperimentConfig.from_dict(d))
        for row in cmd_bench_compare(cfgs, Path(args.out)):
            print(",".join(row))
        return 0
    raise UsageError(f"unknown command {g} {a}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
