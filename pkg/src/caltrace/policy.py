"""Decision evaluation: the unified engine and the three-policy baseline.

Both engines answer the same requests with the same outcomes.  The unified
engine checks one dominance relation per label.  The baseline is a policy set
of three independent policies (BLP, reverse Biba, Chinese Wall) combined with
permit-unless-deny; each policy resolves its own attributes, as a separate
policy in an XACML policy set would.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any, Protocol, Sequence

from .labels import (
    LabelError,
    SecurityLabel,
    UniverseMismatch,
    check_label,
    first_conflict,
)


class Outcome(str, enum.Enum):
    PERMIT = "Permit"
    DENY = "Deny"


class Action(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    VERIFY_CHAIN = "verify_chain"


class EngineMode(str, enum.Enum):
    UNIFIED = "unified"
    BASELINE = "baseline"


class PolicyError(Exception):
    pass


class EmptyChain(PolicyError):
    pass


class UnknownResource(PolicyError):
    def __init__(self, kind: str, ident: str):
        super().__init__(f"unknown {kind} {ident!r}")
        self.kind = kind
        self.ident = ident


# -- deny reasons -----------------------------------------------------------


@dataclass(frozen=True)
class Reason:
    code = "Reason"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"code": self.code}
        for k, v in self.__dict__.items():
            out[k] = v.to_dict() if isinstance(v, Reason) else v
        return out


@dataclass(frozen=True)
class Permitted(Reason):
    code = "Permitted"


@dataclass(frozen=True)
class DominanceFailed(Reason):
    position: int
    code = "DominanceFailed"


@dataclass(frozen=True)
class RankFailed(Reason):
    subject_rank: int
    object_rank: int
    code = "RankFailed"


@dataclass(frozen=True)
class ConflictTaint(Reason):
    coi_position: int
    code = "ConflictTaint"


@dataclass(frozen=True)
class ReportExpired(Reason):
    device: str
    code = "ReportExpired"


@dataclass(frozen=True)
class BrokenChain(Reason):
    device: str
    code = "BrokenChain"


@dataclass(frozen=True)
class InvalidLabel(Reason):
    detail: str
    code = "InvalidLabel"


@dataclass(frozen=True)
class ChainElementDenied(Reason):
    index: int
    device: str | None
    cause: Reason
    code = "ChainElementDenied"


@dataclass(frozen=True)
class PolicyDenied(Reason):
    """Baseline outcome: every sub-policy that denied, with its own reason."""

    denials: tuple[tuple[str, Reason], ...]
    code = "PolicyDenied"

    @property
    def policies(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.denials)

    def to_dict(self) -> dict[str, Any]:
        return {
            "code": self.code,
            "denials": [{"policy": n, "reason": r.to_dict()} for n, r in self.denials],
        }


PERMITTED = Permitted()


@dataclass(frozen=True)
class Decision:
    outcome: Outcome
    reason: Reason = PERMITTED
    evaluation_time_ns: int = 0

    @property
    def permitted(self) -> bool:
        return self.outcome is Outcome.PERMIT

    @classmethod
    def permit(cls) -> Decision:
        return _PERMIT

    @classmethod
    def deny(cls, reason: Reason) -> Decision:
        return cls(Outcome.DENY, reason)


_PERMIT = Decision(Outcome.PERMIT)


@dataclass(frozen=True)
class AccessRequest:
    subject_id: str
    subject_label: SecurityLabel
    action: Action
    resource: str
    request_id: str = ""
    as_of: datetime | None = None


# -- unified model ----------------------------------------------------------


def _dominance_reason(high: SecurityLabel, low: SecurityLabel) -> Reason | None:
    pos = first_conflict(high, low)
    if pos is not None:
        return DominanceFailed(pos)
    if high.rank > low.rank:
        return RankFailed(high.rank, low.rank)
    return None


def evaluate_read(subject_label: SecurityLabel, report_label: SecurityLabel) -> Decision:
    """Simple property: the subject must dominate the report."""
    reason = _dominance_reason(subject_label, report_label)
    return _PERMIT if reason is None else Decision.deny(reason)


def evaluate_write(subject_label: SecurityLabel, object_label: SecurityLabel) -> Decision:
    """Star property: the object must dominate the subject."""
    reason = _dominance_reason(object_label, subject_label)
    if isinstance(reason, RankFailed):
        # report in subject/object terms for the write direction
        reason = RankFailed(subject_label.rank, object_label.rank)
    return _PERMIT if reason is None else Decision.deny(reason)


def evaluate_chain(
    subject_label: SecurityLabel,
    chain_labels: Sequence[SecurityLabel],
    devices: Sequence[str] | None = None,
) -> Decision:
    """Permit iff the subject dominates every label in the chain."""
    if not chain_labels:
        raise EmptyChain("a chain needs at least one label")
    for i, label in enumerate(chain_labels):
        reason = _dominance_reason(subject_label, label)
        if reason is not None:
            device = devices[i] if devices is not None else None
            return Decision.deny(ChainElementDenied(i, device, reason))
    return _PERMIT


# -- baseline policy set ----------------------------------------------------


class SubPolicy:
    name = "policy"

    def check(self, high: SecurityLabel, low: SecurityLabel) -> Reason | None:
        raise NotImplementedError

    def read(self, subject: SecurityLabel, obj: SecurityLabel) -> Reason | None:
        return self.check(subject, obj)

    def write(self, subject: SecurityLabel, obj: SecurityLabel) -> Reason | None:
        return self.check(obj, subject)

    def chain(
        self, subject: SecurityLabel, labels: Sequence[SecurityLabel],
        devices: Sequence[str] | None = None,
    ) -> Reason | None:
        for i, label in enumerate(labels):
            reason = self.check(subject, label)
            if reason is not None:
                return ChainElementDenied(i, devices[i] if devices else None, reason)
        return None


class BlpPolicy(SubPolicy):
    """Confidentiality: no read up, no write down, on the rank component."""

    name = "BLP"

    def check(self, high, low):
        if len(high.coi) != len(low.coi):
            raise UniverseMismatch(f"labels of length {len(high.coi)} and {len(low.coi)}")
        if high.rank > low.rank:
            return RankFailed(high.rank, low.rank)
        return None


class ReverseBibaPolicy(SubPolicy):
    """Integrity with Biba reversed to follow BLP's flow; a separate pass over ranks."""

    name = "RBIBA"

    def check(self, high, low):
        if len(high.coi) != len(low.coi):
            raise UniverseMismatch(f"labels of length {len(high.coi)} and {len(low.coi)}")
        if not low.rank >= high.rank:
            return RankFailed(high.rank, low.rank)
        return None


class ChineseWallPolicy(SubPolicy):
    """Conflict-of-interest compatibility, position by position."""

    name = "ChineseWall"

    def check(self, high, low):
        pos = first_conflict(high, low)
        return None if pos is None else ConflictTaint(pos)


BASELINE_POLICIES: tuple[SubPolicy, ...] = (
    BlpPolicy(),
    ReverseBibaPolicy(),
    ChineseWallPolicy(),
)


def permit_unless_deny(results: Sequence[tuple[str, Reason | None]]) -> Decision:
    denials = tuple((name, r) for name, r in results if r is not None)
    if denials:
        return Decision.deny(PolicyDenied(denials))
    return _PERMIT


def evaluate_baseline(
    action: Action,
    subject_label: SecurityLabel,
    target: SecurityLabel | Sequence[SecurityLabel],
    devices: Sequence[str] | None = None,
    policies: Sequence[SubPolicy] = BASELINE_POLICIES,
) -> Decision:
    """Run every sub-policy over the same inputs and combine with permit-unless-deny."""
    action = Action(action)
    if action is Action.VERIFY_CHAIN:
        labels = list(target)  # type: ignore[arg-type]
        if not labels:
            raise EmptyChain("a chain needs at least one label")
        return permit_unless_deny(
            [(p.name, p.chain(subject_label, labels, devices)) for p in policies]
        )
    if action is Action.READ:
        return permit_unless_deny([(p.name, p.read(subject_label, target)) for p in policies])
    return permit_unless_deny([(p.name, p.write(subject_label, target)) for p in policies])


def evaluate_unified(
    action: Action,
    subject_label: SecurityLabel,
    target: SecurityLabel | Sequence[SecurityLabel],
    devices: Sequence[str] | None = None,
) -> Decision:
    action = Action(action)
    if action is Action.VERIFY_CHAIN:
        return evaluate_chain(subject_label, list(target), devices)  # type: ignore[arg-type]
    if action is Action.READ:
        return evaluate_read(subject_label, target)  # type: ignore[arg-type]
    return evaluate_write(subject_label, target)  # type: ignore[arg-type]


# -- attribute resolution and timed evaluation ------------------------------


class LabelSource(Protocol):
    """What the engines need from a store (the policy information point)."""

    universe: Any
    ladder: Any

    def report_label(self, report_id: str) -> SecurityLabel: ...

    def device_label(self, device_id: str) -> SecurityLabel: ...

    def chain_records(
        self, device_id: str, memoize: bool = True
    ) -> list[tuple[str, Any]]: ...


@dataclass
class Resolved:
    labels: list[SecurityLabel] = field(default_factory=list)
    devices: list[str] | None = None
    deny: Reason | None = None


def resolve(store: LabelSource, request: AccessRequest, memoize: bool = True) -> Resolved:
    """Fetch and re-validate the resource labels a request refers to.

    Labels coming out of the store are checked against the active universe
    again, since the store may have been written under a different one.
    """
    universe, ladder = store.universe, store.ladder
    if request.action is Action.READ:
        label = store.report_label(request.resource)
        return _validated(Resolved([label]), universe, ladder)
    if request.action is Action.WRITE:
        label = store.device_label(request.resource)
        return _validated(Resolved([label]), universe, ladder)

    records = store.chain_records(request.resource, memoize=memoize)
    out = Resolved(devices=[])
    as_of = request.as_of
    for device_id, report in records:
        if report is None:
            out.deny = BrokenChain(device_id)
            return out
        if as_of is not None and report.expires_at <= as_of:
            out.deny = ReportExpired(device_id)
            return out
        out.labels.append(report.label)
        out.devices.append(device_id)
    return _validated(out, universe, ladder)


def _validated(res: Resolved, universe, ladder) -> Resolved:
    try:
        for label in res.labels:
            check_label(label, universe, ladder)
    except LabelError as exc:
        res.deny = InvalidLabel(str(exc))
    return res


def _decide_resolved(
    mode: EngineMode, request: AccessRequest, res: Resolved
) -> Decision:
    if res.deny is not None:
        return Decision.deny(res.deny)
    target = res.labels if request.action is Action.VERIFY_CHAIN else res.labels[0]
    if mode is EngineMode.UNIFIED:
        return evaluate_unified(request.action, request.subject_label, target, res.devices)
    return evaluate_baseline(request.action, request.subject_label, target, res.devices)


class Engine:
    """A decision point bound to one mode for its lifetime."""

    def __init__(self, mode: EngineMode | str = EngineMode.UNIFIED, memoize: bool = True):
        self.mode = EngineMode(mode)
        self.memoize = memoize

    def __repr__(self) -> str:
        return f"Engine({self.mode.value!r})"

    def decide(self, request: AccessRequest, store: LabelSource) -> Decision:
        check_label(request.subject_label, store.universe, store.ladder)
        if self.mode is EngineMode.UNIFIED:
            res = resolve(store, request, self.memoize)
            return _decide_resolved(self.mode, request, res)
        # Each sub-policy resolves its own attributes.
        results: list[tuple[str, Reason | None]] = []
        for policy in BASELINE_POLICIES:
            res = resolve(store, request, self.memoize)
            if res.deny is not None:
                results.append((policy.name, res.deny))
                continue
            d = evaluate_baseline(
                request.action,
                request.subject_label,
                res.labels if request.action is Action.VERIFY_CHAIN else res.labels[0],
                res.devices,
                policies=(policy,),
            )
            results.append((policy.name, None if d.permitted else d.reason.denials[0][1]))
        combined = permit_unless_deny(results)
        if not combined.permitted:
            # resolution failures are shared by all policies; report them directly
            causes = {r for _, r in combined.reason.denials}
            if len(causes) == 1 and isinstance(next(iter(causes)), (BrokenChain, ReportExpired, InvalidLabel)):
                return Decision.deny(next(iter(causes)))
        return combined


def timed_evaluate(engine: Engine, request: AccessRequest, store: LabelSource) -> Decision:
    """Decide ``request`` and attach the wall-clock evaluation time."""
    start = time.perf_counter_ns()
    decision = engine.decide(request, store)
    elapsed = time.perf_counter_ns() - start
    return replace(decision, evaluation_time_ns=max(elapsed, 1))
