"""Devices, technicians and calibration reports, persisted as an append-only event log.

The log is a sequence of length-prefixed JSON records::

    <u32 big-endian length><{"seq": .., "op": .., "payload": {..}, "checksum": ".."}>

``checksum`` is the CRC-32 of the canonical JSON of ``[seq, op, payload]``.
The in-memory index is rebuilt by replaying the log at open; a record with a
bad checksum stops replay with :class:`CorruptLog`.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator, Sequence

from .labels import (
    BOTTOM,
    TAINT,
    CoiUniverse,
    IntegrityLadder,
    SecurityLabel,
    check_label,
    format_label,
    join,
    parse_label,
)
from .policy import Decision, UnknownResource, evaluate_chain, evaluate_write

_HEADER = struct.Struct(">I")


class StoreError(Exception):
    pass


class DuplicateDevice(StoreError):
    pass


class UnknownDevice(StoreError, UnknownResource):
    def __init__(self, device_id: str):
        UnknownResource.__init__(self, "device", device_id)
        self.device_id = device_id


class UnknownReport(StoreError, UnknownResource):
    def __init__(self, report_id: str):
        UnknownResource.__init__(self, "report", report_id)
        self.report_id = report_id


class AlreadyCalibrated(StoreError):
    pass


class NoPriorReport(StoreError):
    pass


class ParentMissingOrExpired(StoreError):
    def __init__(self, device_id: str):
        super().__init__(f"parent {device_id!r} has no currently valid report")
        self.device_id = device_id


class CycleDetected(StoreError):
    pass


class TechnicianMismatch(StoreError):
    pass


class InvalidRoot(StoreError):
    pass


class DecisionError(StoreError):
    def __init__(self, decision: Decision):
        super().__init__(f"{type(self).__name__}: {decision.reason.to_dict()}")
        self.decision = decision


class WriteDenied(DecisionError):
    pass


class ChainDenied(DecisionError):
    pass


class ConflictOfInterest(StoreError):
    def __init__(self, coi_position: int, members: Sequence[str]):
        super().__init__(
            f"recalibration would mix competitors of COI set {coi_position} {sorted(members)}"
        )
        self.coi_position = coi_position
        self.members = tuple(members)


class CorruptLog(StoreError):
    def __init__(self, seq: int, detail: str = "checksum mismatch"):
        super().__init__(f"event log corrupt at seq {seq}: {detail}")
        self.seq = seq


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def _ts(value: datetime) -> str:
    return value.isoformat()


def _parse_ts(text: str) -> datetime:
    return datetime.fromisoformat(text)


@dataclass(frozen=True)
class Technician:
    technician_id: str
    facility_id: str
    label: SecurityLabel


@dataclass
class Device:
    device_id: str
    kind: str
    current_report: str | None = None
    history: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class CalibrationReport:
    report_id: str
    device_id: str
    technician_id: str
    facility_id: str
    label: SecurityLabel
    parents: tuple[str, ...]
    issued_at: datetime
    expires_at: datetime
    payload: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def is_root(self) -> bool:
        return not self.parents

    def valid_at(self, when: datetime) -> bool:
        return self.issued_at <= when < self.expires_at

    def to_dict(self) -> dict[str, Any]:
        return {
            "report_id": self.report_id,
            "device_id": self.device_id,
            "technician_id": self.technician_id,
            "facility_id": self.facility_id,
            "label": format_label(self.label),
            "parents": list(self.parents),
            "issued_at": _ts(self.issued_at),
            "expires_at": _ts(self.expires_at),
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CalibrationReport:
        return cls(
            report_id=d["report_id"],
            device_id=d["device_id"],
            technician_id=d["technician_id"],
            facility_id=d["facility_id"],
            label=parse_label(d["label"]),
            parents=tuple(d["parents"]),
            issued_at=_parse_ts(d["issued_at"]),
            expires_at=_parse_ts(d["expires_at"]),
            payload=d.get("payload") or {},
        )


@dataclass(frozen=True)
class ChainNode:
    device_id: str
    report_id: str | None
    label: SecurityLabel | None
    parents: tuple[str, ...] = ()


@dataclass(frozen=True)
class ChainView:
    """Depth-first traversal from the queried device towards the roots."""

    nodes: tuple[ChainNode, ...]

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def labels(self) -> list[SecurityLabel]:
        return [n.label for n in self.nodes if n.label is not None]

    @property
    def devices(self) -> list[str]:
        return [n.device_id for n in self.nodes]


@dataclass(frozen=True)
class Failure:
    kind: str  # "missing" or "expired"
    device_id: str


@dataclass(frozen=True)
class VerificationResult:
    complete: bool
    visited: ChainView
    failure: Failure | None = None


# -- event log --------------------------------------------------------------


def _checksum(seq: int, op: str, payload: dict) -> str:
    body = json.dumps([seq, op, payload], sort_keys=True, separators=(",", ":"))
    return format(zlib.crc32(body.encode("utf-8")), "08x")


def encode_record(seq: int, op: str, payload: dict) -> bytes:
    record = {"seq": seq, "op": op, "payload": payload, "checksum": _checksum(seq, op, payload)}
    body = json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(len(body)) + body


def read_records(path: str | os.PathLike) -> Iterator[tuple[int, str, dict]]:
    """Yield ``(seq, op, payload)`` from a log file, verifying every checksum."""
    with open(path, "rb") as fh:
        data = fh.read()
    offset = 0
    expected = 1
    while offset < len(data):
        if offset + _HEADER.size > len(data):
            raise CorruptLog(expected, "truncated header")
        (length,) = _HEADER.unpack_from(data, offset)
        offset += _HEADER.size
        raw = data[offset:offset + length]
        offset += length
        if len(raw) != length:
            raise CorruptLog(expected, "truncated record")
        try:
            record = json.loads(raw)
            seq, op, payload = record["seq"], record["op"], record["payload"]
        except (ValueError, KeyError, TypeError):
            raise CorruptLog(expected, "undecodable record") from None
        if record.get("checksum") != _checksum(seq, op, payload):
            raise CorruptLog(seq)
        if seq != expected:
            raise CorruptLog(seq, f"expected seq {expected}")
        expected += 1
        yield seq, op, payload


class EventLog:
    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[tuple[int, str, dict]] = []

    @property
    def seq(self) -> int:
        return len(self.records)

    def append(self, op: str, payload: dict) -> int:
        seq = self.seq + 1
        if self.path is not None:
            with open(self.path, "ab") as fh:
                fh.write(encode_record(seq, op, payload))
                fh.flush()
                os.fsync(fh.fileno())
        self.records.append((seq, op, payload))
        return seq


# -- store ------------------------------------------------------------------


class CalibrationStore:
    """Single-writer, multi-reader store of the calibration hierarchy.

    Without a path the log lives in memory only.
    """

    def __init__(
        self,
        universe: CoiUniverse,
        ladder: IntegrityLadder,
        path: str | os.PathLike | None = None,
    ):
        self.universe = universe
        self.ladder = ladder
        self.devices: dict[str, Device] = {}
        self.reports: dict[str, CalibrationReport] = {}
        self._lock = threading.RLock()
        if path is not None and Path(path).exists() and Path(path).stat().st_size > 0:
            raise StoreError(f"{path} already exists; use CalibrationStore.open")
        self.log = EventLog(path)
        self.log.append("init", {"universe": universe.to_dict(), "q": ladder.q})

    @classmethod
    def open(cls, path: str | os.PathLike) -> CalibrationStore:
        records = read_records(path)
        try:
            seq, op, payload = next(records)
        except StopIteration:
            raise StoreError(f"{path} is empty") from None
        if op != "init":
            raise CorruptLog(seq, "first record must be init")
        store = cls(CoiUniverse.from_dict(payload["universe"]), IntegrityLadder(payload["q"]))
        for seq, op, payload in records:
            store._apply(op, payload)
            store.log.records.append((seq, op, payload))
        store.log.path = Path(path)
        return store

    @property
    def seq(self) -> int:
        return self.log.seq

    # -- mutation -----------------------------------------------------------

    def _apply(self, op: str, payload: dict) -> None:
        if op == "register_device":
            self.devices[payload["device_id"]] = Device(payload["device_id"], payload["kind"])
        elif op in ("initial_calibration", "recalibrate"):
            report = CalibrationReport.from_dict(payload["report"])
            device = self.devices[report.device_id]
            self.reports[report.report_id] = report
            device.history.append(report.report_id)
            device.current_report = report.report_id
        else:
            raise StoreError(f"unknown event {op!r}")

    def _commit(self, op: str, payload: dict) -> None:
        self.log.append(op, payload)
        self._apply(op, payload)

    def register_device(self, device_id: str, kind: str) -> Device:
        with self._lock:
            if device_id in self.devices:
                raise DuplicateDevice(device_id)
            self._commit("register_device", {"device_id": device_id, "kind": kind})
            return self.devices[device_id]

    def _check_technician(self, tech: Technician) -> None:
        check_label(tech.label, self.universe, self.ladder)
        for pos in self.universe.positions_of(tech.facility_id):
            if tech.label.coi[pos - 1] not in (tech.facility_id, TAINT):
                raise TechnicianMismatch(
                    f"{tech.technician_id}: label position {pos} does not carry "
                    f"facility {tech.facility_id!r}"
                )

    def _check_parents(self, parents: Sequence[str], when: datetime) -> None:
        for parent in parents:
            device = self.devices.get(parent)
            if device is None or device.current_report is None:
                raise ParentMissingOrExpired(parent)
            if not self.reports[device.current_report].valid_at(when):
                raise ParentMissingOrExpired(parent)

    def _reaches(self, start: Sequence[str], target: str) -> bool:
        seen: set[str] = set()
        stack = list(start)
        while stack:
            dev = stack.pop()
            if dev == target:
                return True
            if dev in seen:
                continue
            seen.add(dev)
            rid = self.devices[dev].current_report if dev in self.devices else None
            if rid is not None:
                stack.extend(self.reports[rid].parents)
        return False

    def _issue(
        self,
        op: str,
        device: Device,
        tech: Technician,
        parents: Sequence[str],
        issued_at: datetime,
        expires_at: datetime,
        payload: dict | None,
    ) -> CalibrationReport:
        if not issued_at < expires_at:
            raise ValueError("issued_at must precede expires_at")
        if not parents and tech.label.rank != self.ladder.q:
            raise InvalidRoot(
                f"a report without parents must carry rank {self.ladder.q}, got {tech.label.rank}"
            )
        if self._reaches(parents, device.device_id):
            raise CycleDetected(f"{device.device_id} would become its own ancestor")
        report = CalibrationReport(
            report_id=f"{device.device_id}#{len(device.history) + 1}",
            device_id=device.device_id,
            technician_id=tech.technician_id,
            facility_id=tech.facility_id,
            label=tech.label,
            parents=tuple(parents),
            issued_at=issued_at,
            expires_at=expires_at,
            payload=dict(payload or {}),
        )
        self._commit(op, {
            "report": report.to_dict(),
            "technician": {
                "technician_id": tech.technician_id,
                "facility_id": tech.facility_id,
                "label": format_label(tech.label),
            },
        })
        return report

    def initial_calibration(
        self,
        device_id: str,
        technician: Technician,
        parents: Sequence[str],
        expires_at: datetime,
        payload: dict | None = None,
        *,
        issued_at: datetime | None = None,
        target_label: SecurityLabel | None = None,
    ) -> CalibrationReport:
        """Birth of a device: its first report, labelled with the technician's label.

        ``target_label`` is the label the device is being calibrated into; it
        defaults to the technician's own label.
        """
        issued_at = issued_at or utcnow()
        with self._lock:
            device = self.get_device(device_id)
            if device.current_report is not None:
                raise AlreadyCalibrated(device_id)
            self._check_technician(technician)
            target = technician.label if target_label is None else target_label
            decision = evaluate_write(technician.label, target)
            if not decision.permitted:
                raise WriteDenied(decision)
            self._check_parents(parents, issued_at)
            return self._issue(
                "initial_calibration", device, technician, parents, issued_at, expires_at, payload
            )

    def recalibrate(
        self,
        device_id: str,
        technician: Technician,
        parents: Sequence[str] | None,
        expires_at: datetime,
        payload: dict | None = None,
        *,
        issued_at: datetime | None = None,
    ) -> CalibrationReport:
        """Issue a new report for an already calibrated device.

        Checks, in order: conflict freshness against the current chain and the
        device's own history, chain verification rights, then the write rule.
        ``parents=None`` keeps the previous report's parents.
        """
        issued_at = issued_at or utcnow()
        with self._lock:
            device = self.get_device(device_id)
            if device.current_report is None:
                raise NoPriorReport(device_id)
            self._check_technician(technician)
            current = self.reports[device.current_report]
            chain = self.get_chain(device_id)

            seen = chain.labels + [self.reports[r].label for r in device.history]
            before = SecurityLabel((BOTTOM,) * self.universe.n, self.ladder.q)
            for label in seen:
                before = join(before, label)
            after = join(before, technician.label)
            for pos, (old, new) in enumerate(zip(before.coi, after.coi), start=1):
                if new is TAINT and old is not TAINT:
                    raise ConflictOfInterest(pos, self.universe.sets[pos - 1])

            decision = evaluate_chain(technician.label, chain.labels, chain.devices)
            if not decision.permitted:
                raise ChainDenied(decision)
            decision = evaluate_write(technician.label, current.label)
            if not decision.permitted:
                raise WriteDenied(decision)

            parents = current.parents if parents is None else tuple(parents)
            self._check_parents(parents, issued_at)
            return self._issue(
                "recalibrate", device, technician, parents, issued_at, expires_at, payload
            )

    # -- reads --------------------------------------------------------------

    def get_device(self, device_id: str) -> Device:
        try:
            return self.devices[device_id]
        except KeyError:
            raise UnknownDevice(device_id) from None

    def get_report(self, report_id: str) -> CalibrationReport:
        try:
            return self.reports[report_id]
        except KeyError:
            raise UnknownReport(report_id) from None

    def current_report(self, device_id: str) -> CalibrationReport | None:
        rid = self.get_device(device_id).current_report
        return None if rid is None else self.reports[rid]

    def history(self, device_id: str) -> list[CalibrationReport]:
        return [self.reports[r] for r in self.get_device(device_id).history]

    def report_label(self, report_id: str) -> SecurityLabel:
        return self.get_report(report_id).label

    def device_label(self, device_id: str) -> SecurityLabel:
        report = self.current_report(device_id)
        if report is None:
            raise UnknownReport(f"{device_id} (uncalibrated)")
        return report.label

    def chain_records(
        self, device_id: str, memoize: bool = True
    ) -> list[tuple[str, CalibrationReport | None]]:
        """``(device, current report)`` pairs in depth-first order, parents in listed order."""
        devices, reports = self.devices, self.reports
        if device_id not in devices:
            raise UnknownDevice(device_id)
        out: list[tuple[str, CalibrationReport | None]] = []
        seen: set[str] = set()
        stack = [device_id]
        while stack:
            dev = stack.pop()
            if memoize:
                if dev in seen:
                    continue
                seen.add(dev)
            device = devices.get(dev)
            rid = device.current_report if device is not None else None
            report = reports[rid] if rid is not None else None
            out.append((dev, report))
            if report is not None and report.parents:
                stack.extend(reversed(report.parents))
        return out

    def get_chain(self, device_id: str, memoize: bool = True) -> ChainView:
        with self._lock:
            nodes = []
            for dev, report in self.chain_records(device_id, memoize):
                if report is None:
                    nodes.append(ChainNode(dev, None, None))
                else:
                    nodes.append(ChainNode(dev, report.report_id, report.label, report.parents))
            return ChainView(tuple(nodes))

    def trace_verify(self, device_id: str, as_of: datetime) -> VerificationResult:
        """Recursively resolve reports from ``device_id`` up to the roots.

        Stops at the first report that is missing or expired at ``as_of``.
        Ancestors shared between branches are verified once.
        """
        with self._lock:
            self.get_device(device_id)
            visited: list[ChainNode] = []
            seen: set[str] = set()

            def verify(dev: str) -> Failure | None:
                seen.add(dev)
                device = self.devices.get(dev)
                if device is None or device.current_report is None:
                    visited.append(ChainNode(dev, None, None))
                    return Failure("missing", dev)
                report = self.reports[device.current_report]
                visited.append(ChainNode(dev, report.report_id, report.label, report.parents))
                if not report.valid_at(as_of):
                    return Failure("expired", dev)
                # no parents means we have reached a root
                for parent in report.parents:
                    if parent in seen:
                        continue
                    failure = verify(parent)
                    if failure is not None:
                        return failure
                return None

            failure = verify(device_id)
            return VerificationResult(failure is None, ChainView(tuple(visited)), failure)

    # -- export ---------------------------------------------------------------

    def events(self) -> list[tuple[int, str, dict]]:
        return list(self.log.records)

    def export(self) -> dict[str, Any]:
        """One JSON-ready document per device, with its full report history."""
        with self._lock:
            return {
                "seq": self.seq,
                "universe": self.universe.to_dict(),
                "q": self.ladder.q,
                "devices": {
                    d.device_id: {
                        "device_id": d.device_id,
                        "kind": d.kind,
                        "current_report": d.current_report,
                        "reports": [self.reports[r].to_dict() for r in d.history],
                    }
                    for d in self.devices.values()
                },
            }
