from __future__ import annotations

from datetime import datetime, timedelta, timezone
from itertools import product

import pytest

from caltrace.labels import CoiUniverse, IntegrityLadder, make_label
from caltrace.store import CalibrationStore, Technician

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)
YEAR = timedelta(days=365)


def case_universe() -> CoiUniverse:
    # {O2, O3} sits at label position 2, matching the T2 label [_, O2, _].
    return CoiUniverse(
        sets=(("O4", "O5"), ("O2", "O3"), ("O6", "O7")),
        facilities=("O1", "NMI"),
    )


CASE_LADDER = IntegrityLadder(3)
T1 = Technician("T1", "O1", make_label([None, None, None], 1))
T2 = Technician("T2", "O2", make_label([None, "O2", None], 2))
T3 = Technician("T3", "O3", make_label([None, "O3", None], 2))
TN = Technician("TN", "NMI", make_label([None, None, None], 3))


def build_case_store(path=None) -> CalibrationStore:
    store = CalibrationStore(case_universe(), CASE_LADDER, path)
    store.register_device("nmi-standard", "primary reference thermometer")
    store.register_device("transfer-standard", "transfer standard")
    store.register_device("ir-thermometer", "infrared thermometer")
    store.initial_calibration("nmi-standard", TN, [], T0 + 5 * YEAR, issued_at=T0)
    store.initial_calibration(
        "transfer-standard", T2, ["nmi-standard"], T0 + 2 * YEAR,
        {"offset": 0.02}, issued_at=T0 + timedelta(days=1),
    )
    store.initial_calibration(
        "ir-thermometer", T1, ["transfer-standard"], T0 + YEAR,
        {"offset": -0.3, "range": [-20, 120]}, issued_at=T0 + timedelta(days=2),
    )
    return store


@pytest.fixture
def case_store() -> CalibrationStore:
    return build_case_store()


def small_universes():
    """Every universe shape with n <= 2 sets of size <= 3, paired with q <= 3."""
    names = ("a", "b", "c")
    shapes = [()]
    shapes += [(k,) for k in (1, 2, 3)]
    shapes += [(k1, k2) for k1, k2 in product((1, 2, 3), repeat=2) if k1 <= k2]
    out = []
    for shape in shapes:
        sets = tuple(tuple(f"{names[j]}{i}" for i in range(k)) for j, k in enumerate(shape))
        for q in (1, 2, 3):
            out.append((CoiUniverse(sets=sets), IntegrityLadder(q)))
    return out


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
