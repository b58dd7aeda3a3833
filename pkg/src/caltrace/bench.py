"""Experiment harness: depth, branching and conflict-size sweeps.

Trials are interleaved round-robin across every (point, mode) pair, so slow
drift of the machine spreads evenly over the sweep instead of landing on
whichever point happened to run at that moment.
"""

from __future__ import annotations

import csv
import gc
import io
import json
import os
import platform
import sys
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import timedelta
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .conflicts import (
    EPOCH,
    PRNG,
    ChainTopology,
    chain_subject,
    extract_conflict_sets,
    gen_chain,
    gen_conflict_sized_universe,
    gen_er_graph,
)
from .labels import IntegrityLadder
from .policy import AccessRequest, Action, Decision, Engine, EngineMode, timed_evaluate

CSV_HEADER = ["model", "experiment", "levels", "branches", "conflict_size", "trial", "eval_time_ns"]

EXPERIMENTS = ("depth", "branching", "conflict")
DEFAULT_LEVELS = (5, 10, 15, 20, 25, 30, 35, 40, 45, 50)


class TrialDenied(AssertionError):
    """A benchmark fixture produced a Deny; fixtures must always be permitted."""


class MalformedRow(ValueError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line


@dataclass
class ExperimentSpec:
    experiment: str = "depth"
    levels: tuple[int, ...] = DEFAULT_LEVELS
    branches: tuple[int, ...] = (1,)
    conflict_sizes: tuple[int, ...] = tuple(range(1, 51))
    iterations: int = 100
    warmup: int = 100
    seed: int = 0
    modes: tuple[str, ...] = ("unified", "baseline")
    transport: str = "inproc"
    graph_n: int = 20
    graph_p: float = 0.2
    conflict_depth: int = 20
    max_width: int = 16

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        for name in ("levels", "branches", "conflict_sizes"):
            values = tuple(getattr(self, name))
            if not values or any(v < 1 for v in values):
                raise ValueError(f"every entry of {name} must be >= 1")
            setattr(self, name, values)
        self.modes = tuple(EngineMode(m).value for m in self.modes)
        if self.transport not in ("inproc", "service"):
            raise ValueError(f"unknown transport {self.transport!r}")


@dataclass(frozen=True)
class ResultRow:
    model: str
    experiment: str
    levels: int
    branches: int
    conflict_size: int
    trial: int
    eval_time_ns: int

    def __post_init__(self) -> None:
        if self.eval_time_ns <= 0:
            raise ValueError("eval_time_ns must be positive")


@dataclass
class _Point:
    model: str
    levels: int
    branches: int
    conflict_size: int
    engine: Engine
    request: AccessRequest
    store: Any
    client: Any = None

    def run(self) -> Decision | Any:
        if self.client is not None:
            return self.client.request(self.request)
        return timed_evaluate(self.engine, self.request, self.store)


AS_OF = EPOCH + timedelta(days=1)


def _fixture_point(spec: ExperimentSpec, depth: int, branches: int, universe, seed: int):
    ladder = IntegrityLadder(depth)
    fixture = gen_chain(ChainTopology(depth, branches, spec.max_width), universe, ladder, seed)
    store = fixture.build_store()
    subject = chain_subject(fixture, store)
    request = AccessRequest(
        "bench-verifier", subject, Action.VERIFY_CHAIN, fixture.leaf,
        request_id=f"{spec.experiment}-{depth}-{branches}", as_of=AS_OF,
    )
    return store, request


def _default_universe(spec: ExperimentSpec):
    return extract_conflict_sets(gen_er_graph(spec.graph_n, spec.graph_p, spec.seed))


def build_points(spec: ExperimentSpec) -> list[_Point]:
    points: list[_Point] = []
    if spec.experiment == "conflict":
        sweep = []
        for size in spec.conflict_sizes:
            universe = gen_conflict_sized_universe(size, spec.seed)
            sweep.append((spec.conflict_depth, 1, size, universe))
        modes: Sequence[str] = ("unified",)
    else:
        universe = _default_universe(spec)
        biggest = max((len(s) for s in universe.sets), default=1)
        branch_list = (1,) if spec.experiment == "depth" else spec.branches
        sweep = [(d, b, biggest, universe) for b in branch_list for d in spec.levels]
        modes = spec.modes
    for depth, branches, size, universe in sweep:
        store, request = _fixture_point(spec, depth, branches, universe, spec.seed + depth)
        for mode in modes:
            points.append(_Point(mode, depth, branches, size, Engine(mode), request, store))
    return points


def _eval_ns(result) -> tuple[bool, int]:
    if isinstance(result, Decision):
        return result.permitted, result.evaluation_time_ns
    return result.decision == "Permit", result.eval_time_ns


def run_points(spec: ExperimentSpec, points: list[_Point]) -> list[ResultRow]:
    for _ in range(spec.warmup):
        for point in points:
            point.run()
    samples: dict[int, list[int]] = defaultdict(list)
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(spec.iterations):
            for k, point in enumerate(points):
                permitted, ns = _eval_ns(point.run())
                if not permitted:
                    raise TrialDenied(
                        f"{point.model} denied {spec.experiment} point "
                        f"levels={point.levels} branches={point.branches}"
                    )
                samples[k].append(ns)
    finally:
        if gc_was_enabled:
            gc.enable()
    rows = []
    for k, point in enumerate(points):
        for trial, ns in enumerate(samples[k]):
            rows.append(ResultRow(point.model, spec.experiment, point.levels,
                                  point.branches, point.conflict_size, trial, max(ns, 1)))
    return rows


def run_experiment(spec: ExperimentSpec) -> list[ResultRow]:
    points = build_points(spec)
    if spec.transport == "inproc":
        return run_points(spec, points)
    from .service import BackgroundService, PepClient

    services = {}
    try:
        for point in points:
            key = (id(point.store), point.model)
            if key not in services:
                services[key] = BackgroundService(point.store, point.model).__enter__()
            point.client = PepClient(services[key].url)
        return run_points(spec, points)
    finally:
        for point in points:
            if point.client is not None:
                point.client.close()
        for svc in services.values():
            svc.__exit__(None, None, None)


def run_depth_experiment(spec: ExperimentSpec) -> list[ResultRow]:
    spec.experiment = "depth"
    return run_experiment(spec)


def run_branching_experiment(spec: ExperimentSpec) -> list[ResultRow]:
    spec.experiment = "branching"
    return run_experiment(spec)


def run_conflict_experiment(spec: ExperimentSpec) -> list[ResultRow]:
    spec.experiment = "conflict"
    return run_experiment(spec)


def measure_throughput(spec: ExperimentSpec, workers: int, seconds: float = 2.0) -> dict[str, Any]:
    """Decisions per second with ``workers`` threads; a different metric from latency."""
    points = build_points(spec)
    out = {}
    for point in points:
        deadline = time.perf_counter() + seconds

        def worker(p=point) -> int:
            n = 0
            while time.perf_counter() < deadline:
                p.run()
                n += 1
            return n

        start = time.perf_counter()
        with ThreadPoolExecutor(workers) as pool:
            total = sum(pool.map(lambda _: worker(), range(workers)))
        out[f"{point.model}/levels={point.levels}/branches={point.branches}"
            f"/conflict_size={point.conflict_size}"] = total / (time.perf_counter() - start)
    return {"metric": "throughput_decisions_per_s", "workers": workers, "points": out}


# -- CSV --------------------------------------------------------------------


def emit_csv(rows: Iterable[ResultRow], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.model, r.experiment, r.levels, r.branches,
                         r.conflict_size, r.trial, r.eval_time_ns])


def rows_to_csv(rows: Iterable[ResultRow]) -> str:
    buf = io.StringIO()
    emit_csv(rows, buf)
    return buf.getvalue()


def parse_csv(text: str) -> list[ResultRow]:
    lines = text.splitlines()
    if not lines or lines[0] != ",".join(CSV_HEADER):
        raise MalformedRow(1, "missing or wrong header")
    rows = []
    for lineno, fields in enumerate(csv.reader(lines[1:]), start=2):
        if not fields:
            continue
        if len(fields) != len(CSV_HEADER):
            raise MalformedRow(lineno, f"expected {len(CSV_HEADER)} fields, got {len(fields)}")
        try:
            rows.append(ResultRow(fields[0], fields[1], *(int(v) for v in fields[2:])))
        except ValueError as exc:
            raise MalformedRow(lineno, str(exc)) from None
    return rows


# -- summaries --------------------------------------------------------------


@dataclass(frozen=True)
class PointStats:
    count: int
    min: int
    median: float
    mean: float
    p95: float
    max: int


def point_stats(values: Sequence[int]) -> PointStats:
    arr = np.asarray(values, dtype=float)
    return PointStats(
        count=len(values),
        min=int(arr.min()),
        median=float(np.median(arr)),
        mean=float(arr.mean()),
        p95=float(np.percentile(arr, 95)),
        max=int(arr.max()),
    )


def summarize(rows: Iterable[ResultRow]) -> dict[str, Any]:
    """Per-point statistics plus unified/baseline median ratios where both exist."""
    groups: dict[tuple, list[int]] = defaultdict(list)
    for r in rows:
        groups[(r.model, r.experiment, r.levels, r.branches, r.conflict_size)].append(r.eval_time_ns)
    points = {key: point_stats(v) for key, v in sorted(groups.items())}
    ratios = {}
    for (model, *rest), stats in points.items():
        if model != "unified":
            continue
        other = points.get(("baseline", *rest))
        if other is not None:
            ratios[tuple(rest)] = stats.median / other.median
    return {"points": points, "ratios": ratios}


def format_summary(summary: dict[str, Any]) -> str:
    lines = ["model      experiment levels branches conflict   n   median_ns     p95_ns"]
    for (model, exp, lv, br, cs), s in summary["points"].items():
        lines.append(f"{model:<10} {exp:<10} {lv:>6} {br:>8} {cs:>8} {s.count:>4} "
                     f"{s.median:>11.0f} {s.p95:>10.0f}")
    if summary["ratios"]:
        lines.append("")
        lines.append("experiment levels branches conflict  unified/baseline")
        for (exp, lv, br, cs), ratio in summary["ratios"].items():
            lines.append(f"{exp:<10} {lv:>6} {br:>8} {cs:>8}  {ratio:.3f}")
    return "\n".join(lines)


def medians_by(summary: dict[str, Any], model: str, experiment: str) -> dict[tuple, float]:
    return {
        (lv, br, cs): s.median
        for (m, exp, lv, br, cs), s in summary["points"].items()
        if m == model and exp == experiment
    }


def nondecreasing_with_tolerance(values: Sequence[float], tol: float = 0.05,
                                 max_inversions: int = 1) -> bool:
    inversions = 0
    for a, b in zip(values, values[1:]):
        if b < a:
            inversions += 1
            if b < a * (1 - tol):
                return False
    return inversions <= max_inversions


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(spearmanr(xs, ys).statistic)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def shape_checks(spec: ExperimentSpec, summary: dict[str, Any],
                 ratio_target: float = 1.0) -> list[Check]:
    """Relative assertions the CLI enforces with ``--check``."""
    checks: list[Check] = []
    exp = spec.experiment
    uni = medians_by(summary, "unified", exp)
    if exp in ("depth", "branching") and "baseline" in spec.modes and "unified" in spec.modes:
        for key, ratio in summary["ratios"].items():
            checks.append(Check(f"{exp} ratio levels={key[1]} branches={key[2]}",
                                ratio < 1.0, f"{ratio:.3f}"))
        top = max(spec.levels)
        for (e, lv, br, _), ratio in summary["ratios"].items():
            if lv == top and br == 1:
                checks.append(Check(f"ratio at {top} levels <= {ratio_target}",
                                    ratio <= ratio_target, f"{ratio:.3f}"))
    if exp == "depth":
        series = [uni[k] for k in sorted(uni)]
        checks.append(Check("unified nondecreasing in depth",
                            nondecreasing_with_tolerance(series), str([round(v) for v in series])))
    if exp == "branching":
        for lv in spec.levels:
            series = [uni[k] for k in sorted(uni) if k[0] == lv]
            checks.append(Check(f"unified nondecreasing in branches at {lv} levels",
                                nondecreasing_with_tolerance(series),
                                str([round(v) for v in series])))
    if exp == "conflict":
        keys = sorted(uni, key=lambda k: k[2])
        if len(keys) >= 2:
            rho = spearman([k[2] for k in keys], [uni[k] for k in keys])
            checks.append(Check("spearman(size, median) >= 0.8", rho >= 0.8, f"{rho:.3f}"))
    return checks


def hardware_manifest() -> dict[str, Any]:
    cpu = platform.processor() or ""
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    try:
        memory = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        memory = None
    return {
        "os": platform.platform(),
        "python": sys.version.split()[0],
        "cpu_model": cpu,
        "cpu_count": os.cpu_count(),
        "memory_bytes": memory,
    }


def run_manifest(spec: ExperimentSpec) -> dict[str, Any]:
    return {
        "spec": asdict(spec),
        "prng": PRNG,
        "csv_header": CSV_HEADER,
        "hardware": hardware_manifest(),
        "timer": "time.perf_counter_ns",
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }


def write_results(rows: list[ResultRow], out: str, manifest: dict[str, Any]) -> str:
    with open(out, "w", newline="") as fh:
        emit_csv(rows, fh)
    manifest_path = os.path.splitext(out)[0] + ".manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    return manifest_path
