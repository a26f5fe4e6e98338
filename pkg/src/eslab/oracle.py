"""The prediction-API boundary between victim and adversary.

An :class:`OracleSession` wraps a victim network, applies the configured
output defenses (top-K first, then rounding), counts queries, and refuses
any batch the remaining budget cannot cover.  The same session can be
exposed over TCP with :func:`serve`; the wire protocol is newline-delimited
JSON with floats printed at 17 significant digits, so a remote answer is
bit-identical to the in-process one.

Requests and responses::

    {"x": [[...], ...]}            ->  {"queries_used": n, "y": [[...], ...]}
    {"info": true}                 ->  {"class_count": K, "input_shape": [...], "queries_used": n}
    malformed                      ->  {"error": "bad_request"}
    over budget                    ->  {"error": "budget_exhausted"}
    wrong input width              ->  {"error": "bad_shape"}
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import BadRequestError, BudgetExhaustedError, DimensionError, DomainError, OracleError
from .models import Network

log = logging.getLogger(__name__)

DEFAULT_PRICE_PER_1K = 0.25


@dataclass
class DefenseConfig:
    rounding_decimals: int | None = None
    topk: int | None = None
    detection_enabled: bool = False
    detection_threshold: float = 0.9

    def __post_init__(self):
        if self.rounding_decimals is not None and self.rounding_decimals < 0:
            raise DomainError("rounding_decimals must be >= 0")
        if self.topk is not None and self.topk < 1:
            raise DomainError("topk must be >= 1")


def round_prediction(y: np.ndarray, r: int) -> np.ndarray:
    """Round every entry half-away-from-zero to ``r`` decimals; no renormalisation."""
    if r < 0:
        raise DomainError("r must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    quantum = Decimal(1).scaleb(-r)

    def one(v: float) -> float:
        # repr gives the shortest decimal that round-trips, so 0.285 rounds as written
        return float(Decimal(repr(float(v))).quantize(quantum, rounding=ROUND_HALF_UP))

    return np.vectorize(one, otypes=[np.float64])(y) if y.size else y.copy()


def _topk_indices(y: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -y keeps the lower class index first among ties
    return np.argsort(-y, axis=-1, kind="stable")[..., :k]


def topk_prediction(y: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries of each row and zero the rest."""
    y = np.asarray(y, dtype=np.float64)
    if not 1 <= k <= y.shape[-1]:
        raise DomainError(f"k must lie in [1, {y.shape[-1]}]")
    out = np.zeros_like(y)
    idx = _topk_indices(y, k)
    np.put_along_axis(out, idx, np.take_along_axis(y, idx, axis=-1), axis=-1)
    return out


def fillup_topk(y_defended: np.ndarray, k: int) -> np.ndarray:
    """Adversary-side repair of a top-``k`` answer: spread the missing mass evenly over hidden classes."""
    y = np.asarray(y_defended, dtype=np.float64)
    n_classes = y.shape[-1]
    if not 1 <= k <= n_classes:
        raise DomainError(f"k must lie in [1, {n_classes}]")
    if k == n_classes:
        return y.copy()
    idx = _topk_indices(y, k)
    kept = np.take_along_axis(y, idx, axis=-1)
    mass = kept.sum(axis=-1, keepdims=True)
    if (mass > 1.0 + 1e-6).any():
        raise DomainError("kept probability mass exceeds 1")
    fill = np.clip(1.0 - mass, 0.0, None) / (n_classes - k)
    out = np.broadcast_to(fill, y.shape).copy()
    np.put_along_axis(out, idx, kept, axis=-1)
    return out


def apply_defenses(probs: np.ndarray, defense: DefenseConfig) -> np.ndarray:
    out = probs
    if defense.topk is not None and defense.topk < probs.shape[-1]:
        out = topk_prediction(out, defense.topk)
    if defense.rounding_decimals is not None:
        out = round_prediction(out, defense.rounding_decimals)
    return out


def estimate_cost_for(query_count: int, price_per_1k: float = DEFAULT_PRICE_PER_1K) -> float:
    return query_count / 1000.0 * price_per_1k


@dataclass
class OracleSession:
    """Victim model behind a defended, metered query interface."""

    victim: Network
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    budget: int | None = None
    price_per_1k: float = DEFAULT_PRICE_PER_1K
    record: bool = False
    query_count: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()
        self.detector = None
        if self.defense.detection_enabled:
            from .detect import DetectorState

            self.detector = DetectorState(threshold=self.defense.detection_threshold)
        self.log_inputs: list[np.ndarray] = []
        self.log_outputs: list[np.ndarray] = []

    @property
    def class_count(self) -> int:
        return self.victim.class_count

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.victim.input_shape

    @property
    def remaining(self) -> int | None:
        return None if self.budget is None else self.budget - self.query_count

    def query(self, x) -> np.ndarray:
        """Answer a batch with defended probability rows; raises before counting if over budget."""
        return self.query_counted(x)[0]

    def query_counted(self, x) -> tuple[np.ndarray, int]:
        """Like :meth:`query`, also returning the counter value right after this batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2 or int(np.prod(x.shape[1:])) != self.victim.input_size:
            raise DimensionError(f"query batch shape {x.shape} does not fit victim input {self.input_shape}")
        n = x.shape[0]
        with self._lock:
            if self.budget is not None and self.query_count + n > self.budget:
                raise BudgetExhaustedError(
                    f"batch of {n} exceeds remaining budget {self.budget - self.query_count}"
                )
            raw = self.victim.predict_proba(x)
            self.query_count += n
            if self.detector is not None:
                flat = x.reshape(n, -1)
                for row, cls in zip(flat, np.argmax(raw, axis=1)):
                    self.detector.ingest(row, int(cls))
            out = apply_defenses(raw, self.defense)
            if self.record:
                self.log_inputs.append(x.reshape(n, -1).copy())
                self.log_outputs.append(out.copy())
            used = self.query_count
        return out, used

    def estimate_cost(self) -> float:
        return estimate_cost_for(self.query_count, self.price_per_1k)

    def info(self) -> dict:
        return {
            "class_count": self.class_count,
            "input_shape": list(self.input_shape),
            "queries_used": self.query_count,
        }


def estimate_cost(session) -> float:
    return estimate_cost_for(session.query_count, session.price_per_1k)


# -- wire format -----------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def encode_matrix(a: np.ndarray) -> str:
    a = np.asarray(a, dtype=np.float64)
    a = a.reshape(a.shape[0], -1) if a.ndim != 2 else a
    return "[" + ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in a) + "]"


def canonical_response(y: np.ndarray, queries_used: int) -> str:
    """Serialise an answer exactly as it travels on the wire (sorted keys, 17 significant digits)."""
    return '{"queries_used": %d, "y": %s}' % (queries_used, encode_matrix(y))


def encode_request(x: np.ndarray) -> str:
    return '{"x": %s}' % encode_matrix(np.asarray(x, dtype=np.float64).reshape(len(x), -1))


def _error(code: str) -> str:
    return json.dumps({"error": code})


def handle_line(session: OracleSession, line: str) -> str:
    """Process one request line against ``session``; never raises."""
    try:
        req = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return _error("bad_request")
    if not isinstance(req, dict):
        return _error("bad_request")
    if req.get("info") is True and "x" not in req:
        return json.dumps(session.info(), sort_keys=True)
    rows = req.get("x")
    if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
        return _error("bad_request")
    try:
        x = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError):
        return _error("bad_request")
    if x.ndim != 2 or not np.isfinite(x).all():
        return _error("bad_request")
    try:
        y, used = session.query_counted(x)
    except BudgetExhaustedError:
        return _error("budget_exhausted")
    except DimensionError:
        return _error("bad_shape")
    return canonical_response(y, used)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            reply = handle_line(self.server.session, line)
            self.wfile.write(reply.encode() + b"\n")
            self.wfile.flush()


class OracleServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, session: OracleSession, address: tuple[str, int]):
        super().__init__(address, _Handler)
        self.session = session
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> OracleServer:
        if self._thread is not None:
            return self
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(session: OracleSession, endpoint: str = "127.0.0.1:0") -> OracleServer:
    """Start serving ``session`` in a background thread; port 0 picks a free port."""
    host, port = parse_endpoint(endpoint)
    server = OracleServer(session, (host, port))
    log.info("oracle listening on %s", server.endpoint)
    return server.start()


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


_ERRORS = {
    "budget_exhausted": BudgetExhaustedError,
    "bad_request": BadRequestError,
    "bad_shape": DimensionError,
}


def _raise_for(reply: dict) -> None:
    code = reply.get("error")
    if code is not None:
        raise _ERRORS.get(code, OracleError)(f"oracle replied with error {code!r}")


class RemoteOracle:
    """Client for a served oracle; mirrors the :class:`OracleSession` query interface."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self._sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        self._file = self._sock.makefile("rwb")
        info = self.request_raw('{"info": true}')
        self.class_count = int(info["class_count"])
        self.input_shape = tuple(info["input_shape"])
        self.query_count = int(info["queries_used"])

    def request_line(self, line: str) -> str:
        self._file.write(line.encode() + b"\n")
        self._file.flush()
        reply = self._file.readline()
        if not reply:
            raise OracleError("oracle closed the connection")
        return reply.decode().rstrip("\n")

    def request_raw(self, line: str) -> dict:
        reply = json.loads(self.request_line(line))
        _raise_for(reply)
        return reply

    def query(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        reply = self.request_raw(encode_request(x))
        self.query_count = int(reply["queries_used"])
        return np.array(reply["y"], dtype=np.float64)

    def close(self) -> None:
        self._file.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def remote_query(endpoint: str, x) -> np.ndarray:
    """One-shot query against a served oracle."""
    with RemoteOracle(endpoint) as client:
        return client.query(x)


def remote_query_raw(endpoint: str, x) -> str:
    """One-shot query returning the response line exactly as received."""
    with RemoteOracle(endpoint) as client:
        return client.request_line(encode_request(np.asarray(x, dtype=np.float64)))
