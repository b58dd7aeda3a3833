"""HTTP policy decision point and the reference enforcement-point client.

Endpoints::

    POST /v1/decide         read / write decisions
    POST /v1/verify-chain   traceability verification decisions
    GET  /v1/health         {"status": "ok", "mode": .., "store_seq": ..}
    GET  /v1/metrics        decision counts and an eval-time histogram

Requests and responses are JSON; timestamps are RFC 3339 strings.
"""

from __future__ import annotations

import configparser
import logging
import os
import socket
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import httpx
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .labels import LabelError, format_label, parse_label
from .policy import (
    AccessRequest,
    Action,
    Engine,
    EngineMode,
    UnknownResource,
    timed_evaluate,
)
from .store import CalibrationStore

log = logging.getLogger(__name__)

ENV_PREFIX = "CALTRACE_"


class ProtocolError(Exception):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class PepTimeout(Exception):
    pass


def parse_rfc3339(text: str) -> datetime:
    value = datetime.fromisoformat(text.replace("Z", "+00:00").replace("z", "+00:00"))
    if value.tzinfo is None:
        raise ValueError(f"timestamp without offset: {text!r}")
    return value


def format_rfc3339(value: datetime) -> str:
    return value.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass
class WireRequest:
    request_id: str
    subject_id: str
    label: str
    action: str
    resource: str
    as_of: str | None = None

    def to_json(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "request_id": self.request_id,
            "subject": {"id": self.subject_id, "label": self.label},
            "action": self.action,
            "resource": self.resource,
        }
        if self.as_of is not None:
            body["as_of"] = self.as_of
        return body

    @classmethod
    def from_json(cls, body: Any) -> WireRequest:
        if not isinstance(body, dict):
            raise ProtocolError("request body must be a JSON object")
        try:
            subject = body["subject"]
            req = cls(
                request_id=body["request_id"],
                subject_id=subject["id"],
                label=subject["label"],
                action=body["action"],
                resource=body["resource"],
                as_of=body.get("as_of"),
            )
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"missing field {exc}") from None
        for name in ("request_id", "subject_id", "label", "action", "resource"):
            if not isinstance(getattr(req, name), str):
                raise ProtocolError(f"{name} must be a string")
        if req.as_of is not None and not isinstance(req.as_of, str):
            raise ProtocolError("as_of must be an RFC 3339 string")
        return req

    @classmethod
    def from_access_request(cls, req: AccessRequest) -> WireRequest:
        return cls(
            request_id=req.request_id,
            subject_id=req.subject_id,
            label=format_label(req.subject_label),
            action=req.action.value,
            resource=req.resource,
            as_of=None if req.as_of is None else format_rfc3339(req.as_of),
        )

    def to_access_request(self, now: datetime | None = None) -> AccessRequest:
        try:
            label = parse_label(self.label)
        except LabelError as exc:
            raise ProtocolError(f"bad label: {exc}") from None
        try:
            action = Action(self.action)
        except ValueError:
            raise ProtocolError(f"unknown action {self.action!r}") from None
        try:
            as_of = parse_rfc3339(self.as_of) if self.as_of is not None else now
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None
        return AccessRequest(self.subject_id, label, action, self.resource, self.request_id, as_of)


@dataclass
class WireResponse:
    request_id: str
    decision: str
    reason: dict[str, Any]
    engine_mode: str
    eval_time_ns: int
    total_time_ns: int

    @classmethod
    def from_json(cls, body: Any) -> WireResponse:
        try:
            return cls(**{k: body[k] for k in cls.__dataclass_fields__})
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed response: {exc}") from None


# -- server -----------------------------------------------------------------


@dataclass
class ServiceConfig:
    listen_addr: str = "127.0.0.1:8080"
    store_path: str = ""
    engine_mode: str = "unified"
    timeout_ms: int = 5000

    @property
    def host(self) -> str:
        return self.listen_addr.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen_addr.rsplit(":", 1)[1])


def load_config(path: str | os.PathLike | None = None, env: dict | None = None) -> ServiceConfig:
    """Read ``key = value`` lines (an optional ``[caltrace]`` header is allowed),
    then apply ``CALTRACE_*`` environment overrides."""
    env = os.environ if env is None else env
    values: dict[str, str] = {}
    if path is not None:
        text = Path(path).read_text()
        parser = configparser.ConfigParser()
        if not text.lstrip().startswith("["):
            text = "[caltrace]\n" + text
        parser.read_string(text)
        for section in parser.sections():
            values.update(parser[section])
    for key in ServiceConfig.__dataclass_fields__:
        if ENV_PREFIX + key.upper() in env:
            values[key] = env[ENV_PREFIX + key.upper()]
    unknown = set(values) - set(ServiceConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = ServiceConfig(**{k: v for k, v in values.items() if k != "timeout_ms"})
    if "timeout_ms" in values:
        cfg.timeout_ms = int(values["timeout_ms"])
    EngineMode(cfg.engine_mode)
    cfg.port  # noqa: B018 - validates listen_addr
    return cfg


# eval-time histogram bucket upper bounds, in ns
_BUCKETS = [1_000 * 2 ** k for k in range(16)]


@dataclass
class Metrics:
    counts: dict[str, int] = field(default_factory=lambda: {"Permit": 0, "Deny": 0})
    errors: int = 0
    histogram: list[int] = field(default_factory=lambda: [0] * (len(_BUCKETS) + 1))
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, outcome: str, eval_ns: int) -> None:
        with self._lock:
            self.counts[outcome] += 1
            for i, bound in enumerate(_BUCKETS):
                if eval_ns <= bound:
                    self.histogram[i] += 1
                    break
            else:
                self.histogram[-1] += 1

    def error(self) -> None:
        with self._lock:
            self.errors += 1

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            return {
                "decisions": dict(self.counts),
                "errors": self.errors,
                "eval_time_histogram": {
                    "le_ns": _BUCKETS + ["+Inf"],
                    "counts": list(self.histogram),
                },
            }


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse({"error": {"code": code, "message": message}}, status_code=status)


def create_app(store: CalibrationStore, mode: EngineMode | str = EngineMode.UNIFIED) -> FastAPI:
    engine = Engine(mode)
    metrics = Metrics()
    app = FastAPI(title="caltrace PDP")
    app.state.store = store
    app.state.engine = engine
    app.state.metrics = metrics

    async def handle(request: Request, allowed: tuple[Action, ...]) -> JSONResponse:
        start = time.perf_counter_ns()
        try:
            try:
                body = await request.json()
            except ValueError:
                raise ProtocolError("body is not valid JSON") from None
            wire = WireRequest.from_json(body)
            access = wire.to_access_request(now=datetime.now(timezone.utc))
            if access.action not in allowed:
                raise ProtocolError(f"action {wire.action!r} not served by {request.url.path}")
            decision = timed_evaluate(engine, access, store)
        except ProtocolError as exc:
            metrics.error()
            return _error(400, "ProtocolError", str(exc))
        except LabelError as exc:
            metrics.error()
            return _error(400, "InvalidLabel", str(exc))
        except UnknownResource as exc:
            metrics.error()
            return _error(404, "UnknownResource", str(exc))
        metrics.record(decision.outcome.value, decision.evaluation_time_ns)
        out = {
            "request_id": wire.request_id,
            "decision": decision.outcome.value,
            "reason": decision.reason.to_dict(),
            "engine_mode": engine.mode.value,
            "eval_time_ns": decision.evaluation_time_ns,
        }
        out["total_time_ns"] = max(time.perf_counter_ns() - start, decision.evaluation_time_ns)
        return JSONResponse(out)

    @app.post("/v1/decide")
    async def decide(request: Request):
        return await handle(request, (Action.READ, Action.WRITE))

    @app.post("/v1/verify-chain")
    async def verify_chain(request: Request):
        return await handle(request, (Action.VERIFY_CHAIN,))

    @app.get("/v1/health")
    async def health():
        return {"status": "ok", "mode": engine.mode.value, "store_seq": store.seq}

    @app.get("/v1/metrics")
    async def get_metrics():
        return metrics.snapshot()

    return app


def build_server(config: ServiceConfig):
    import uvicorn

    store = CalibrationStore.open(config.store_path)
    app = create_app(store, config.engine_mode)
    ucfg = uvicorn.Config(app, host=config.host, port=config.port, log_level="warning")
    return uvicorn.Server(ucfg)


def serve(config: ServiceConfig) -> None:
    """Run the decision point in the foreground until interrupted."""
    server = build_server(config)
    log.info("PDP listening on %s (%s)", config.listen_addr, config.engine_mode)
    server.run()


class BackgroundService:
    """Run a PDP for ``store`` on an ephemeral local port in a daemon thread."""

    def __init__(self, store: CalibrationStore, mode: EngineMode | str = EngineMode.UNIFIED):
        import uvicorn

        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(("127.0.0.1", 0))
        self.port = self._sock.getsockname()[1]
        app = create_app(store, mode)
        self.app = app
        self.server = uvicorn.Server(uvicorn.Config(app, log_level="warning", lifespan="off"))
        self._thread = threading.Thread(
            target=self.server.run, kwargs={"sockets": [self._sock]}, daemon=True
        )

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def __enter__(self) -> BackgroundService:
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline or not self._thread.is_alive():
                raise RuntimeError("PDP failed to start")
            time.sleep(0.01)
        return self

    def __exit__(self, *exc) -> None:
        self.server.should_exit = True
        self._thread.join(timeout=10)
        self._sock.close()


# -- enforcement point ------------------------------------------------------


_ENDPOINTS = {
    Action.READ: "/v1/decide",
    Action.WRITE: "/v1/decide",
    Action.VERIFY_CHAIN: "/v1/verify-chain",
}


class PepClient:
    """Sends access requests to a PDP and returns its answer; never decides locally."""

    def __init__(self, base_url: str, timeout_ms: int = 5000):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout_ms / 1000
        self._client = httpx.Client(base_url=self.base_url, timeout=self.timeout)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> PepClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def send(self, endpoint: str, body: dict[str, Any]) -> WireResponse:
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                resp = self._client.post(endpoint, json=body)
                break
            except httpx.TimeoutException as exc:
                raise PepTimeout(f"{self.base_url}{endpoint}: {exc}") from None
            except httpx.TransportError as exc:
                if time.monotonic() >= deadline:
                    raise PepTimeout(f"{self.base_url}{endpoint} unreachable: {exc}") from None
                time.sleep(min(0.05, max(deadline - time.monotonic(), 0)))
        if resp.status_code != 200:
            raise ProtocolError(f"HTTP {resp.status_code}: {resp.text}", resp.status_code)
        try:
            data = resp.json()
        except ValueError:
            raise ProtocolError("response is not JSON", resp.status_code) from None
        out = WireResponse.from_json(data)
        if out.request_id != body.get("request_id"):
            raise ProtocolError("response request_id does not match")
        return out

    def request(self, req: AccessRequest | WireRequest) -> WireResponse:
        if isinstance(req, AccessRequest):
            req = WireRequest.from_access_request(req)
        return self.send(_ENDPOINTS[Action(req.action)], req.to_json())

    def health(self) -> dict[str, Any]:
        return self._client.get("/v1/health").json()

    def metrics(self) -> dict[str, Any]:
        return self._client.get("/v1/metrics").json()


def pep_request(endpoint: str, request: AccessRequest | WireRequest, timeout_ms: int = 5000) -> WireResponse:
    """One round trip against the PDP at ``endpoint`` (its base URL)."""
    with PepClient(endpoint, timeout_ms) as client:
        return client.request(request)
