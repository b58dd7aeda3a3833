"""Benchmark inputs: random conflict graphs, COI universes and traceability chains.

All randomness comes from ``random.Random`` (MT19937) seeded with an int, so
every generator is a pure function of its parameters and seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from itertools import combinations
from typing import Any

from .labels import (
    CoiUniverse,
    IntegrityLadder,
    SecurityLabel,
    facility_label,
    format_label,
    parse_label,
)
from .store import CalibrationReport, CalibrationStore, Technician

PRNG = "python-random-mt19937"

# Fixed clock for generated fixtures.
EPOCH = datetime(2020, 1, 1, tzinfo=timezone.utc)
DEFAULT_VALIDITY = timedelta(days=365 * 10)


class InvalidProbability(ValueError):
    pass


class InvalidTopology(ValueError):
    pass


@dataclass(frozen=True)
class ConflictGraph:
    n: int
    edges: frozenset[tuple[int, int]]
    p: float
    seed: int | None

    def neighbors(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.n)]
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges


def facility_name(node: int) -> str:
    return f"F{node:03d}"


def gen_er_graph(n: int, p: float, seed: int) -> ConflictGraph:
    """G(n, p): every unordered pair, in lexicographic order, is kept with probability p."""
    if not 0.0 <= p <= 1.0:
        raise InvalidProbability(p)
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = random.Random(seed)
    edges = frozenset(
        (a, b) for a, b in combinations(range(n), 2) if rng.random() < p
    )
    return ConflictGraph(n, edges, p, seed)


def maximal_cliques(graph: ConflictGraph) -> list[tuple[int, ...]]:
    """Bron-Kerbosch with pivoting; every maximal clique, sorted."""
    adj = graph.neighbors()
    found: list[tuple[int, ...]] = []

    def expand(r: list[int], p: set[int], x: set[int]) -> None:
        if not p and not x:
            found.append(tuple(sorted(r)))
            return
        pivot = max(p | x, key=lambda u: len(adj[u] & p))
        for v in sorted(p - adj[pivot]):
            expand(r + [v], p & adj[v], x & adj[v])
            p.discard(v)
            x.add(v)

    expand([], set(range(graph.n)), set())
    return sorted(found)


def extract_conflict_sets(graph: ConflictGraph) -> CoiUniverse:
    """Maximal cliques of size >= 2 become COI sets, ordered by sorted membership."""
    cliques = [c for c in maximal_cliques(graph) if len(c) >= 2]
    sets = sorted(tuple(facility_name(v) for v in c) for c in cliques)
    return CoiUniverse(
        sets=tuple(sets),
        facilities=tuple(facility_name(v) for v in range(graph.n)),
    )


def gen_conflict_sized_universe(
    target_size: int, seed: int, *, max_attempts: int = 64
) -> CoiUniverse:
    """A universe holding one COI set of exactly ``target_size`` facilities.

    Competitors ``n`` and conflict probability ``p`` grow with the target.  A
    random G(n, p) graph has clique number around 2 log2(n), far short of 50,
    so a clique of the target size is planted on random nodes; the universe
    keeps only the maximal clique of that size (one conflict set per
    experiment point).  Target 1 yields an isolated facility and no set.
    """
    if target_size < 1:
        raise ValueError("target_size must be >= 1")
    if target_size == 1:
        return CoiUniverse(sets=(), facilities=(facility_name(0),))
    for attempt in range(max_attempts):
        n = min(200, 2 * target_size + 4 + attempt)
        p = min(0.5, 0.5 / target_size + 0.01 * attempt)
        sub_seed = seed * 1_000_003 + target_size * 101 + attempt
        g = gen_er_graph(n, p, sub_seed)
        rng = random.Random(sub_seed)
        planted = sorted(rng.sample(range(n), target_size))
        edges = set(g.edges) | set(combinations(planted, 2))
        # the planted clique stays maximal only if no outside node touches it
        members_set = set(planted)
        edges = {(a, b) for a, b in edges if (a in members_set) == (b in members_set)}
        g = ConflictGraph(n, frozenset(edges), p, sub_seed)
        if tuple(planted) in maximal_cliques(g):
            members = tuple(facility_name(v) for v in planted)
            return CoiUniverse(sets=(members,), facilities=members)
    raise RuntimeError(f"no isolated clique of size {target_size} after {max_attempts} attempts")


# -- chain topologies -------------------------------------------------------


@dataclass(frozen=True)
class ChainTopology:
    """``depth`` levels, each non-root device calibrated against ``branches`` parents.

    Level widths grow as ``branches**level`` until ``max_width``; past that,
    devices share parents, so deep branching chains stay finite.
    """

    depth: int
    branches: int = 1
    max_width: int = 16

    def __post_init__(self) -> None:
        if self.depth < 1 or self.branches < 1 or self.max_width < 1:
            raise InvalidTopology(self)

    def widths(self) -> list[int]:
        return [min(self.branches ** d, max(self.max_width, 1)) for d in range(self.depth)]

    def node_count(self) -> int:
        return sum(self.widths())


def device_name(level: int, index: int) -> str:
    return f"L{level:03d}-{index:03d}"


@dataclass
class Fixture:
    """Generated devices, technicians and reports, replayable into a fresh store."""

    params: dict[str, Any]
    seed: int
    universe: CoiUniverse
    ladder: IntegrityLadder
    devices: list[tuple[str, str]] = field(default_factory=list)
    technicians: dict[str, Technician] = field(default_factory=dict)
    reports: list[CalibrationReport] = field(default_factory=list)
    leaf: str = ""

    def build_store(self, path=None, *, checked: bool = True) -> CalibrationStore:
        """Replay into a new store; ``checked`` routes every report through the lifecycle rules."""
        store = CalibrationStore(self.universe, self.ladder, path)
        for device_id, kind in self.devices:
            store.register_device(device_id, kind)
        for r in self.reports:
            tech = self.technicians[r.technician_id]
            if checked:
                store.initial_calibration(
                    r.device_id, tech, r.parents, r.expires_at, r.payload,
                    issued_at=r.issued_at,
                )
            else:
                store._issue(
                    "initial_calibration", store.devices[r.device_id], tech,
                    r.parents, r.issued_at, r.expires_at, r.payload,
                )
        return store

    def to_manifest(self) -> dict[str, Any]:
        return {
            "params": self.params,
            "seed": self.seed,
            "prng": PRNG,
            "universe": self.universe.to_dict(),
            "q": self.ladder.q,
            "leaf": self.leaf,
            "devices": [{"device_id": d, "kind": k} for d, k in self.devices],
            "technicians": [
                {"technician_id": t.technician_id, "facility_id": t.facility_id,
                 "label": format_label(t.label)}
                for t in self.technicians.values()
            ],
            "reports": [r.to_dict() for r in self.reports],
        }

    @classmethod
    def from_manifest(cls, m: dict[str, Any]) -> Fixture:
        techs = {
            t["technician_id"]: Technician(t["technician_id"], t["facility_id"], parse_label(t["label"]))
            for t in m["technicians"]
        }
        return cls(
            params=m["params"],
            seed=m["seed"],
            universe=CoiUniverse.from_dict(m["universe"]),
            ladder=IntegrityLadder(m["q"]),
            devices=[(d["device_id"], d["kind"]) for d in m["devices"]],
            technicians=techs,
            reports=[CalibrationReport.from_dict(r) for r in m["reports"]],
            leaf=m["leaf"],
        )


def level_rank(level: int, depth: int, q: int) -> int:
    """Field level 0 is rank 1; the root level is rank q; clamped in between."""
    if level == depth - 1:
        return q
    return max(1, min(level + 1, q))


def gen_chain(
    topology: ChainTopology,
    universe: CoiUniverse,
    ladder: IntegrityLadder,
    seed: int,
    *,
    validity: timedelta = DEFAULT_VALIDITY,
) -> Fixture:
    """Devices wired level by level from the leaf (level 0) up to root level ``depth-1``.

    Each report is issued by a technician drawn from the universe's
    facilities; reports are listed root first so they can be replayed in
    order.
    """
    if not isinstance(topology, ChainTopology):
        raise InvalidTopology(topology)
    rng = random.Random(seed)
    widths = topology.widths()
    facilities = list(universe.facilities) or ["F-solo"]
    fixture = Fixture(
        params={"depth": topology.depth, "branches": topology.branches,
                "max_width": topology.max_width, "q": ladder.q},
        seed=seed,
        universe=universe,
        ladder=ladder,
    )
    techs: dict[tuple[str, int], Technician] = {}

    def technician(facility: str, rank: int) -> Technician:
        key = (facility, rank)
        if key not in techs:
            tech = Technician(
                f"T-{facility}-r{rank}", facility, facility_label(universe, facility, rank)
            )
            techs[key] = tech
            fixture.technicians[tech.technician_id] = tech
        return techs[key]

    # draw labels leaf-first so the sequence does not depend on replay order
    assignments: dict[tuple[int, int], Technician] = {}
    for level, width in enumerate(widths):
        rank = level_rank(level, topology.depth, ladder.q)
        for i in range(width):
            assignments[(level, i)] = technician(rng.choice(facilities), rank)

    for level in range(topology.depth - 1, -1, -1):
        for i in range(widths[level]):
            device_id = device_name(level, i)
            fixture.devices.append((device_id, "root standard" if level == topology.depth - 1
                                    else "transfer standard" if level else "field sensor"))
            if level == topology.depth - 1:
                parents: tuple[str, ...] = ()
            else:
                up = widths[level + 1]
                parents = tuple(dict.fromkeys(
                    device_name(level + 1, (i * topology.branches + k) % up)
                    for k in range(topology.branches)
                ))
            tech = assignments[(level, i)]
            fixture.reports.append(CalibrationReport(
                report_id=f"{device_id}#1",
                device_id=device_id,
                technician_id=tech.technician_id,
                facility_id=tech.facility_id,
                label=tech.label,
                parents=parents,
                issued_at=EPOCH,
                expires_at=EPOCH + validity,
                payload={"offset": round(rng.uniform(-0.5, 0.5), 4), "range": [-20, 120]},
            ))
    fixture.leaf = device_name(0, 0)
    return fixture


def chain_subject(fixture: Fixture, store: CalibrationStore | None = None) -> SecurityLabel:
    """The least label, at field rank 1, that may verify the fixture's leaf chain."""
    from .labels import join, make_bottom

    store = store or fixture.build_store()
    acc = make_bottom(fixture.universe, fixture.ladder)
    for label in store.get_chain(fixture.leaf).labels:
        acc = join(acc, label)
    return SecurityLabel(acc.coi, 1)
