from __future__ import annotations

import socket
from concurrent.futures import ThreadPoolExecutor
from datetime import timedelta

import httpx
import pytest

from caltrace.labels import TAINT, format_label, make_label
from caltrace.policy import AccessRequest, Action, Engine, timed_evaluate
from caltrace.service import (
    BackgroundService,
    PepClient,
    PepTimeout,
    ProtocolError,
    WireRequest,
    build_server,
    load_config,
    pep_request,
)

from conftest import T0, build_case_store

AS_OF = T0 + timedelta(days=10)
SUBJECT = make_label([None, "O2", None], 1)


@pytest.fixture(scope="module")
def service():
    store = build_case_store()
    with BackgroundService(store, "unified") as svc:
        yield svc, store


def wire(action="read", resource="transfer-standard#1", label=None, rid="r-1", as_of=AS_OF):
    return WireRequest(rid, "alice", format_label(label or SUBJECT), action, resource,
                       as_of.isoformat().replace("+00:00", "Z") if as_of else None)


def test_health(service):
    svc, store = service
    body = httpx.get(svc.url + "/v1/health").json()
    assert body == {"status": "ok", "mode": "unified", "store_seq": store.seq}


def test_permitted_read(service):
    svc, _ = service
    resp = pep_request(svc.url, wire())
    assert resp.decision == "Permit"
    assert resp.request_id == "r-1"
    assert 0 < resp.eval_time_ns <= resp.total_time_ns
    assert resp.engine_mode == "unified"


def test_denied_read_reason(service):
    svc, _ = service
    resp = pep_request(svc.url, wire(label=make_label([None] * 3, 1)))
    assert resp.decision == "Deny"
    assert resp.reason == {"code": "DominanceFailed", "position": 2}


def test_verify_chain(service):
    svc, _ = service
    resp = pep_request(svc.url, wire("verify_chain", "ir-thermometer"))
    assert resp.decision == "Permit"
    late = pep_request(svc.url, wire("verify_chain", "ir-thermometer", as_of=T0 + timedelta(days=400)))
    assert late.decision == "Deny" and late.reason["code"] == "ReportExpired"


@pytest.mark.parametrize("body,status", [
    ({"request_id": "x", "subject": {"id": "a", "label": "{coi:[_], rank:1}"},
      "action": "read", "resource": "transfer-standard#1"}, 400),
    ({"request_id": "x", "subject": {"id": "a"}, "action": "read", "resource": "r"}, 400),
    ({"request_id": "x", "subject": {"id": "a", "label": format_label(SUBJECT)},
      "action": "fly", "resource": "r"}, 400),
    ({"request_id": "x", "subject": {"id": "a", "label": format_label(SUBJECT)},
      "action": "verify_chain", "resource": "ir-thermometer"}, 400),
    ({"request_id": "x", "subject": {"id": "a", "label": '{coi:["_"], rank:1}'},
      "action": "read", "resource": "transfer-standard#1"}, 400),
    ({"request_id": "x", "subject": {"id": "a", "label": format_label(SUBJECT)},
      "action": "read", "resource": "missing#1"}, 404),
])
def test_protocol_errors(service, body, status):
    svc, _ = service
    before = httpx.get(svc.url + "/v1/metrics").json()["decisions"]
    resp = httpx.post(svc.url + "/v1/decide", json=body)
    assert resp.status_code == status
    assert "decision" not in resp.json()
    assert httpx.get(svc.url + "/v1/metrics").json()["decisions"] == before


def test_non_json_body(service):
    svc, _ = service
    resp = httpx.post(svc.url + "/v1/decide", content=b"not json")
    assert resp.status_code == 400


def test_metrics_count_decisions(service):
    svc, _ = service
    with PepClient(svc.url) as client:
        before = client.metrics()["decisions"]["Permit"]
        client.request(wire())
        after = client.metrics()
    assert after["decisions"]["Permit"] == before + 1
    assert sum(after["eval_time_histogram"]["counts"]) >= 1


def test_repeated_verify_chain_identical(service):
    svc, _ = service
    with PepClient(svc.url) as client:
        responses = [client.request(wire("verify_chain", "ir-thermometer", rid=f"q{i}"))
                     for i in range(200)]
    assert {r.decision for r in responses} == {"Permit"}
    assert len({str(r.reason) for r in responses}) == 1
    assert [r.request_id for r in responses] == [f"q{i}" for i in range(200)]


def test_concurrent_identical_requests(service):
    svc, _ = service

    def one(i):
        with PepClient(svc.url) as client:
            return client.request(wire(label=make_label([None] * 3, 1), rid=f"c{i}"))

    with ThreadPoolExecutor(8) as pool:
        out = list(pool.map(one, range(32)))
    assert {(r.decision, str(r.reason)) for r in out} == {("Deny", str(out[0].reason))}


def test_matches_in_process(service):
    svc, store = service
    engine = Engine("unified")
    with PepClient(svc.url) as client:
        for label in (SUBJECT, make_label([None] * 3, 1), make_label([TAINT] * 3, 1)):
            for action, resource in [("read", "transfer-standard#1"), ("write", "ir-thermometer"),
                                     ("verify_chain", "ir-thermometer")]:
                local = timed_evaluate(engine, AccessRequest(
                    "a", label, Action(action), resource, as_of=AS_OF), store)
                remote = client.request(wire(action, resource, label=label))
                assert remote.decision == local.outcome.value
                assert remote.reason == local.reason.to_dict()


def test_baseline_mode_service():
    store = build_case_store()
    with BackgroundService(store, "baseline") as svc:
        resp = pep_request(svc.url, wire(label=make_label([None] * 3, 1)))
        assert resp.engine_mode == "baseline"
        assert resp.decision == "Deny" and resp.reason["code"] == "PolicyDenied"


def test_timeout_when_server_down():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(PepTimeout):
        pep_request(f"http://127.0.0.1:{port}", wire(), timeout_ms=300)


def test_timeout_when_server_silent():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen(1)
        port = s.getsockname()[1]
        with pytest.raises(PepTimeout):
            pep_request(f"http://127.0.0.1:{port}", wire(), timeout_ms=300)


def test_request_id_mismatch_is_protocol_error(service):
    svc, _ = service
    with PepClient(svc.url) as client:
        body = wire().to_json()
        client.send("/v1/decide", body)
        body_bad = dict(body)
        with pytest.raises(ProtocolError):
            client.send("/v1/nope", body_bad)


class TestConfig:
    def test_file_and_env(self, tmp_path):
        cfg_path = tmp_path / "pdp.conf"
        cfg_path.write_text("listen_addr = 0.0.0.0:9000\nstore_path = /tmp/x.log\n"
                            "engine_mode = baseline\ntimeout_ms = 250\n")
        cfg = load_config(cfg_path, env={"CALTRACE_ENGINE_MODE": "unified"})
        assert (cfg.host, cfg.port, cfg.store_path, cfg.timeout_ms) == ("0.0.0.0", 9000, "/tmp/x.log", 250)
        assert cfg.engine_mode == "unified"

    def test_bad_mode(self, tmp_path):
        with pytest.raises(ValueError):
            load_config(None, env={"CALTRACE_ENGINE_MODE": "fast"})

    def test_unknown_key(self, tmp_path):
        cfg_path = tmp_path / "pdp.conf"
        cfg_path.write_text("[caltrace]\ncolour = blue\n")
        with pytest.raises(ValueError):
            load_config(cfg_path, env={})

    def test_unreadable_store_fails_startup(self, tmp_path):
        cfg = load_config(None, env={"CALTRACE_STORE_PATH": str(tmp_path / "missing.log")})
        with pytest.raises(OSError):
            build_server(cfg)

    def test_store_file_served(self, tmp_path):
        build_case_store(tmp_path / "s.log")
        cfg = load_config(None, env={"CALTRACE_STORE_PATH": str(tmp_path / "s.log"),
                                     "CALTRACE_LISTEN_ADDR": "127.0.0.1:0"})
        server = build_server(cfg)
        assert server.config.app.state.store.seq == 7
