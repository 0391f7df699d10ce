"""Continuous monitoring: inference-log windows, drift statistics, and
the events that close the loop back to training.

Each endpoint keeps a ring of the last 500 logs; every 100th ingest an
evaluation compares the ring against the frozen reference using PSI over
equal-frequency bins and a two-sample KS check.  A drift verdict emits
at most one event per window, with a one-window cooldown before the next
event may fire.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from .errors import Conflict, InvalidInput, NotFound, NotReady
from .ids import stable_hash
from .storage import Database

RING_CAPACITY = 500
EVAL_CADENCE = 100
MIN_REFERENCE = 100
BINS = 10
PSI_EPSILON = 1e-6
PSI_MODERATE = 0.1
PSI_DRIFT = 0.2
KS_ALPHA_COEFF = 1.358
LATE_TOLERANCE = 1.0  # seconds of out-of-order slack


@dataclass
class InferenceLog:
    endpoint_id: str
    feature_vector: list[float]
    prediction: float
    latency_ms: float
    timestamp: float

    def to_dict(self) -> dict:
        return {
            "endpoint_id": self.endpoint_id,
            "feature_vector": list(self.feature_vector),
            "prediction": self.prediction,
            "latency_ms": self.latency_ms,
            "timestamp": self.timestamp,
        }


def compute_psi(ref_probs, live_probs) -> float:
    """Population stability index with epsilon smoothing.

    Both inputs are probability vectors over the same bins; each is
    floored at 1e-6 and renormalized before the sum, so empty bins do
    not blow up the logarithm.
    """
    p = np.asarray(ref_probs, dtype=np.float64)
    q = np.asarray(live_probs, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidInput("histograms must share one shape")
    if np.any(p < 0) or np.any(q < 0):
        raise InvalidInput("probabilities must be nonnegative")
    p = np.maximum(p, PSI_EPSILON)
    q = np.maximum(q, PSI_EPSILON)
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum((p - q) * np.log(p / q)))


def compute_ks(ref_sample, live_sample) -> tuple[float, float]:
    """Two-sample KS statistic and the alpha=0.05 critical value."""
    a = np.asarray(ref_sample, dtype=np.float64)
    b = np.asarray(live_sample, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInput("KS needs nonempty samples")
    stat = float(ks_2samp(a, b, method="asymp").statistic)
    n, m = len(a), len(b)
    critical = KS_ALPHA_COEFF * float(np.sqrt((n + m) / (n * m)))
    return stat, critical


def equal_frequency_edges(sample: np.ndarray, bins: int = BINS) -> np.ndarray:
    """Interior bin edges at the j/bins quantiles (bins-1 edges)."""
    qs = [j / bins for j in range(1, bins)]
    return np.quantile(sample, qs)


def bin_counts(sample: np.ndarray, edges: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, sample, side="right")
    return np.bincount(idx, minlength=len(edges) + 1).astype(np.int64)


@dataclass
class ReferenceSnapshot:
    endpoint_id: str
    edges: list[list[float]]        # per feature, BINS-1 interior edges
    counts: list[list[int]]         # per feature, BINS counts
    sample_count: int
    frozen_at: float
    samples: list[list[float]] = field(repr=False, default_factory=list)

    def probs(self, feature: int) -> np.ndarray:
        c = np.asarray(self.counts[feature], dtype=np.float64)
        return c / c.sum()

    def to_dict(self) -> dict:
        return {
            "endpoint_id": self.endpoint_id,
            "edges": self.edges,
            "counts": self.counts,
            "sample_count": self.sample_count,
            "frozen_at": self.frozen_at,
        }


class _EndpointState:
    def __init__(self, endpoint_id: str):
        self.endpoint_id = endpoint_id
        self.ring: deque[InferenceLog] = deque(maxlen=RING_CAPACITY)
        self.ingest_count = 0
        self.max_ts = float("-inf")
        self.reference: ReferenceSnapshot | None = None
        self.auto_freeze = False
        self.last_event_ingest: int | None = None
        self.lock = threading.RLock()


class Monitor:
    """Per-endpoint ingest rings and drift evaluation."""

    def __init__(self, db: Database, webhook_url: str | None = None, poster=None):
        self.db = db
        self.webhook_url = webhook_url
        self.poster = poster
        self.event_sinks: list = []
        self._endpoints: dict[str, _EndpointState] = {}
        self._lock = threading.RLock()

    def register_endpoint(self, endpoint_id: str) -> None:
        with self._lock:
            self._endpoints.setdefault(endpoint_id, _EndpointState(endpoint_id))

    def arm_auto_freeze(self, endpoint_id: str) -> None:
        """Freeze the reference automatically once enough logs arrive."""
        state = self._state(endpoint_id)
        with state.lock:
            state.auto_freeze = True

    def has_reference(self, endpoint_id: str) -> bool:
        return self._state(endpoint_id).reference is not None

    def _state(self, endpoint_id: str) -> _EndpointState:
        state = self._endpoints.get(endpoint_id)
        if state is None:
            raise NotFound(f"no monitored endpoint {endpoint_id!r}")
        return state

    def ingest(self, log: InferenceLog) -> dict:
        state = self._state(log.endpoint_id)
        features = np.asarray(log.feature_vector, dtype=np.float64)
        if features.ndim != 1 or len(features) == 0:
            raise InvalidInput("feature_vector must be a nonempty list")
        if not np.all(np.isfinite(features)) or not np.isfinite(log.prediction):
            raise InvalidInput("log carries non-finite values")
        if log.latency_ms < 0:
            raise InvalidInput("latency_ms must be >= 0")
        report = None
        with state.lock:
            if log.timestamp < state.max_ts - LATE_TOLERANCE:
                raise InvalidInput(
                    f"log older than the {LATE_TOLERANCE:.0f}s reorder tolerance"
                )
            state.ring.append(log)
            state.max_ts = max(state.max_ts, log.timestamp)
            state.ingest_count += 1
            if (
                state.auto_freeze
                and state.reference is None
                and len(state.ring) >= MIN_REFERENCE
            ):
                self._freeze_locked(state)
            if state.ingest_count % EVAL_CADENCE == 0 and state.reference is not None:
                report = self._evaluate_locked(state)
        return {"accepted": True, "ingest_count": state.ingest_count,
                "report": report}

    def freeze_reference(self, endpoint_id: str, force: bool = False) -> ReferenceSnapshot:
        state = self._state(endpoint_id)
        with state.lock:
            if state.reference is not None and not force:
                raise Conflict(
                    f"endpoint {endpoint_id!r} already has a frozen reference"
                )
            if len(state.ring) < MIN_REFERENCE:
                raise NotReady(
                    f"need {MIN_REFERENCE} logs to freeze, have {len(state.ring)}"
                )
            return self._freeze_locked(state)

    def _freeze_locked(self, state: _EndpointState) -> ReferenceSnapshot:
        logs = sorted(state.ring, key=lambda l: l.timestamp)
        matrix = np.array([l.feature_vector for l in logs], dtype=np.float64)
        edges, counts, samples = [], [], []
        for f in range(matrix.shape[1]):
            col = matrix[:, f]
            e = equal_frequency_edges(col)
            edges.append([float(x) for x in e])
            counts.append([int(c) for c in bin_counts(col, e)])
            samples.append([float(x) for x in col])
        snapshot = ReferenceSnapshot(
            endpoint_id=state.endpoint_id,
            edges=edges,
            counts=counts,
            sample_count=len(logs),
            frozen_at=time.time(),
            samples=samples,
        )
        state.reference = snapshot
        self.db.put(
            "monitor.references", state.endpoint_id, snapshot.to_dict()
        )
        return snapshot

    def evaluate_drift(self, endpoint_id: str) -> dict:
        state = self._state(endpoint_id)
        with state.lock:
            return self._evaluate_locked(state)

    def _evaluate_locked(self, state: _EndpointState) -> dict:
        ref = state.reference
        if ref is None:
            raise NotReady(f"endpoint {state.endpoint_id!r} has no frozen reference")
        if len(state.ring) < MIN_REFERENCE:
            raise NotReady("live window smaller than 100 samples")
        logs = sorted(state.ring, key=lambda l: l.timestamp)
        matrix = np.array([l.feature_vector for l in logs], dtype=np.float64)
        n_features = len(ref.edges)
        if matrix.shape[1] != n_features:
            raise InvalidInput("live feature width differs from reference")
        per_feature = []
        max_psi = 0.0
        for f in range(n_features):
            col = matrix[:, f]
            live_counts = bin_counts(col, np.asarray(ref.edges[f]))
            q = live_counts.astype(np.float64) / live_counts.sum()
            psi = compute_psi(ref.probs(f), q)
            ks_stat, ks_crit = compute_ks(ref.samples[f], col)
            per_feature.append({
                "feature": f,
                "psi": psi,
                "ks_stat": ks_stat,
                "ks_critical": ks_crit,
            })
            max_psi = max(max_psi, psi)
        if max_psi > PSI_DRIFT:
            verdict = "drift"
        elif max_psi > PSI_MODERATE:
            verdict = "moderate"
        else:
            verdict = "none"
        window = {
            "first": logs[0].timestamp,
            "last": logs[-1].timestamp,
            "count": len(logs),
        }
        report = {
            "endpoint_id": state.endpoint_id,
            "window": window,
            "per_feature": per_feature,
            "verdict": verdict,
            "max_psi": max_psi,
            "threshold_psi": PSI_DRIFT,
            "evaluated_at": time.time(),
        }
        seq = self.db.append(f"monitor.reports.{state.endpoint_id}", report)
        report["report_id"] = seq
        if verdict == "drift":
            self._maybe_emit_event(state, report)
        return report

    def _maybe_emit_event(self, state: _EndpointState, report: dict) -> None:
        window = report["window"]
        event_id = stable_hash(
            state.endpoint_id, window["first"], window["last"]
        )[:16]
        if state.last_event_ingest is not None:
            if state.ingest_count - state.last_event_ingest < RING_CAPACITY:
                return  # inside the one-window cooldown
        event = {
            "event_id": event_id,
            "endpoint_id": state.endpoint_id,
            "report_id": report["report_id"],
            "verdict": report["verdict"],
            "max_psi": report["max_psi"],
            "window": window,
            "emitted_at": time.time(),
        }
        if not self.db.insert("monitor.events", event_id, event):
            return  # duplicate window
        state.last_event_ingest = state.ingest_count
        for sink in self.event_sinks:
            sink(event)
        self._mirror_webhook(event)

    def _mirror_webhook(self, event: dict) -> None:
        if not self.webhook_url:
            return
        body = {
            "event_id": event["event_id"],
            "endpoint_id": event["endpoint_id"],
            "verdict": event["verdict"],
            "max_psi": event["max_psi"],
        }
        try:
            if self.poster is not None:
                self.poster(self.webhook_url, body)
            else:
                import httpx

                httpx.post(self.webhook_url, json=body, timeout=2.0)
        except Exception:
            pass  # the mirror is best-effort; the queue delivery is the contract

    def reports(self, endpoint_id: str) -> list[dict]:
        self._state(endpoint_id)
        # the stored doc predates the id assignment, so rebuild it from the seq
        return [{**doc, "report_id": seq}
                for seq, doc in self.db.read_log(f"monitor.reports.{endpoint_id}")]

    def events(self, endpoint_id: str | None = None) -> list[dict]:
        out = [doc for _, doc in self.db.scan("monitor.events")]
        if endpoint_id is not None:
            out = [e for e in out if e["endpoint_id"] == endpoint_id]
        return sorted(out, key=lambda e: e["emitted_at"])

    def live_window(self, endpoint_id: str) -> list[InferenceLog]:
        state = self._state(endpoint_id)
        with state.lock:
            return sorted(state.ring, key=lambda l: l.timestamp)

    def ingest_count(self, endpoint_id: str) -> int:
        return self._state(endpoint_id).ingest_count
