"""Security labels over the unified confidentiality/integrity/conflict lattice.

A label is a vector of conflict-of-interest entries (one per COI set of the
governing universe) plus a single integrity rank.  Rank 1 is system high,
rank ``q`` is the public NMI root.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union


class LabelError(ValueError):
    """Base class for label construction and comparison errors."""


class LengthMismatch(LabelError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"label has {got} COI entries, universe has {expected}")
        self.expected = expected
        self.got = got


class UnknownFacility(LabelError):
    def __init__(self, position: int, facility: str):
        super().__init__(f"facility {facility!r} is not a member of COI set {position}")
        self.position = position
        self.facility = facility


class RankOutOfRange(LabelError):
    def __init__(self, rank: int, q: int):
        super().__init__(f"rank {rank} outside 1..{q}")
        self.rank = rank
        self.q = q


class UniverseMismatch(LabelError):
    pass


class LabelParseError(LabelError):
    pass


class Mark(enum.Enum):
    BOTTOM = "_"
    TAINT = "*"

    def __repr__(self) -> str:
        return "BOTTOM" if self is Mark.BOTTOM else "TAINT"


BOTTOM = Mark.BOTTOM
TAINT = Mark.TAINT

# An entry is a marker or a facility id.
Entry = Union[Mark, str]

_RESERVED_IDS = frozenset(m.value for m in Mark)


@dataclass(frozen=True)
class CoiUniverse:
    """Ordered conflict-of-interest sets; position ``j`` (1-based) is ``sets[j-1]``.

    ``facilities`` lists every known facility, including those that sit in no
    set (isolated competitors).
    """

    sets: tuple[tuple[str, ...], ...]
    facilities: tuple[str, ...] = ()
    facility_index: dict[str, tuple[int, ...]] = field(
        init=False, repr=False, compare=False, hash=False
    )

    def __post_init__(self) -> None:
        sets = tuple(tuple(sorted(s)) for s in self.sets)
        index: dict[str, list[int]] = {}
        for pos, members in enumerate(sets, start=1):
            if not members:
                raise ValueError(f"COI set {pos} is empty")
            if len(set(members)) != len(members):
                raise ValueError(f"COI set {pos} has duplicate members")
            for f in members:
                if f in _RESERVED_IDS:
                    raise ValueError(f"facility id {f!r} is reserved")
                index.setdefault(f, []).append(pos)
        facilities = set(self.facilities) | set(index)
        if facilities & _RESERVED_IDS:
            raise ValueError("facility ids '_' and '*' are reserved")
        object.__setattr__(self, "sets", sets)
        object.__setattr__(self, "facilities", tuple(sorted(facilities)))
        object.__setattr__(
            self, "facility_index", {f: tuple(p) for f, p in index.items()}
        )

    @property
    def n(self) -> int:
        return len(self.sets)

    def contains(self, position: int, facility: str) -> bool:
        return facility in self.sets[position - 1]

    def positions_of(self, facility: str) -> tuple[int, ...]:
        return self.facility_index.get(facility, ())

    def to_dict(self) -> dict:
        return {"sets": [list(s) for s in self.sets], "facilities": list(self.facilities)}

    @classmethod
    def from_dict(cls, data: dict) -> CoiUniverse:
        return cls(
            sets=tuple(tuple(s) for s in data["sets"]),
            facilities=tuple(data.get("facilities", ())),
        )


@dataclass(frozen=True)
class IntegrityLadder:
    q: int

    def __post_init__(self) -> None:
        if self.q < 1:
            raise ValueError("an integrity ladder needs at least one level")

    @property
    def ranks(self) -> range:
        return range(1, self.q + 1)


@dataclass(frozen=True)
class SecurityLabel:
    coi: tuple[Entry, ...]
    rank: int

    def __post_init__(self) -> None:
        if not isinstance(self.coi, tuple):
            object.__setattr__(self, "coi", tuple(self.coi))

    def __str__(self) -> str:
        return format_label(self)


def make_label(entries: Iterable[Entry | None], rank: int) -> SecurityLabel:
    """Build a label; ``None`` is accepted as shorthand for bottom."""
    return SecurityLabel(tuple(BOTTOM if e is None else e for e in entries), rank)


def make_bottom(universe: CoiUniverse, ladder: IntegrityLadder) -> SecurityLabel:
    return SecurityLabel((BOTTOM,) * universe.n, ladder.q)


def make_system_high(universe: CoiUniverse, ladder: IntegrityLadder) -> SecurityLabel:
    return SecurityLabel((TAINT,) * universe.n, 1)


def facility_label(
    universe: CoiUniverse, facility: str, rank: int
) -> SecurityLabel:
    """Label of a technician at ``facility``: Member entries wherever it has competitors."""
    entries: list[Entry] = [BOTTOM] * universe.n
    for pos in universe.positions_of(facility):
        entries[pos - 1] = facility
    return SecurityLabel(tuple(entries), rank)


def check_label(
    label: SecurityLabel, universe: CoiUniverse, ladder: IntegrityLadder
) -> None:
    """Raise the first violation found, or return None when well formed."""
    if len(label.coi) != universe.n:
        raise LengthMismatch(universe.n, len(label.coi))
    for pos, entry in enumerate(label.coi, start=1):
        if entry is BOTTOM or entry is TAINT:
            continue
        if not isinstance(entry, str) or entry not in universe.sets[pos - 1]:
            raise UnknownFacility(pos, str(entry))
    if not 1 <= label.rank <= ladder.q:
        raise RankOutOfRange(label.rank, ladder.q)


def validate_label(
    label: SecurityLabel, universe: CoiUniverse, ladder: IntegrityLadder
) -> LabelError | None:
    """Return the first violation, or None for a valid label."""
    try:
        check_label(label, universe, ladder)
    except LabelError as exc:
        return exc
    return None


def entry_admits(high: Entry, low: Entry) -> bool:
    """Per-position clause of dominance: equal, low is bottom, or high is tainted."""
    return high == low or low is BOTTOM or high is TAINT


def first_conflict(l1: SecurityLabel, l2: SecurityLabel) -> int | None:
    """1-based position where ``l1`` fails to cover ``l2``'s COI entry, if any."""
    a, b = l1.coi, l2.coi
    if len(a) != len(b):
        raise UniverseMismatch(f"labels of length {len(a)} and {len(b)}")
    for pos in range(len(a)):
        x, y = a[pos], b[pos]
        if x is TAINT or y is BOTTOM or x == y:
            continue
        return pos + 1
    return None


def dominates(l1: SecurityLabel, l2: SecurityLabel) -> bool:
    return first_conflict(l1, l2) is None and l1.rank <= l2.rank


def _join_entry(x: Entry, y: Entry) -> Entry:
    if x is BOTTOM:
        return y
    if y is BOTTOM or x == y:
        return x
    return TAINT


def join(l1: SecurityLabel, l2: SecurityLabel) -> SecurityLabel:
    """Least upper bound of two labels."""
    if len(l1.coi) != len(l2.coi):
        raise UniverseMismatch(f"labels of length {len(l1.coi)} and {len(l2.coi)}")
    return SecurityLabel(
        tuple(_join_entry(x, y) for x, y in zip(l1.coi, l2.coi)),
        min(l1.rank, l2.rank),
    )


def join_all(labels: Sequence[SecurityLabel], start: SecurityLabel) -> SecurityLabel:
    acc = start
    for label in labels:
        acc = join(acc, label)
    return acc


def enumerate_labels(universe: CoiUniverse, ladder: IntegrityLadder) -> list[SecurityLabel]:
    """Every well-formed label of a (small) universe."""
    per_position: list[list[Entry]] = [
        [BOTTOM, TAINT, *members] for members in universe.sets
    ]
    vectors: list[tuple[Entry, ...]] = [()]
    for choices in per_position:
        vectors = [v + (c,) for v in vectors for c in choices]
    return [SecurityLabel(v, r) for v in vectors for r in ladder.ranks]


# Canonical text encoding: {coi:["_","O2","*"], rank:2}

_TEXT_RE = re.compile(r"\{coi:(\[.*\]), rank:([1-9][0-9]*)\}", re.DOTALL)


def _dump_entries(coi: Sequence[Entry]) -> str:
    raw = [e.value if isinstance(e, Mark) else e for e in coi]
    return json.dumps(raw, separators=(",", ":"), ensure_ascii=False)


def format_label(label: SecurityLabel) -> str:
    return "{coi:%s, rank:%d}" % (_dump_entries(label.coi), label.rank)


def parse_label(text: str) -> SecurityLabel:
    """Inverse of :func:`format_label`; only the canonical form is accepted."""
    if not isinstance(text, str):
        raise LabelParseError("label text must be a string")
    m = _TEXT_RE.fullmatch(text)
    if m is None:
        raise LabelParseError(f"not a canonical label: {text!r}")
    try:
        raw = json.loads(m.group(1))
    except json.JSONDecodeError as exc:
        raise LabelParseError(f"bad COI vector: {exc}") from None
    if not isinstance(raw, list) or not all(isinstance(e, str) and e for e in raw):
        raise LabelParseError("COI vector must be a list of non-empty strings")
    if _dump_entries(raw) != m.group(1):
        raise LabelParseError(f"non-canonical COI vector: {m.group(1)!r}")
    coi = tuple(Mark(e) if e in _RESERVED_IDS else e for e in raw)
    return SecurityLabel(coi, int(m.group(2)))
