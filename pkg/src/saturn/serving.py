"""Serving layer: released model versions bound to callable endpoints.

Bindings are published as immutable snapshots so a request reads one
consistent (version, digest) pair for its whole lifetime; rebinds swap
the snapshot atomically.  Loaded artifacts sit in a small LRU cache
keyed by content digest, and every served request is logged to the
monitor before the response returns.
"""

from __future__ import annotations

import json
import re
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

from . import modelkit
from .errors import (
    Conflict,
    GateFailed,
    InvalidInput,
    InvalidTransition,
    NotFound,
    NotReady,
    Unauthorized,
    Unavailable,
)
from .governance import AccessControl
from .ids import make_id
from .monitor import InferenceLog, Monitor
from .registry import S4, S5, Registry

CACHE_CAPACITY = 8
ROUTE_PATTERN = re.compile(r"^[a-z0-9][a-z0-9-]*$")

LIVE = "live"
PAUSED = "paused"
RETIRED = "retired"


@dataclass
class Endpoint:
    endpoint_id: str
    route: str
    bound_version: str
    status: str
    created_at: float

    def to_dict(self) -> dict:
        return {
            "endpoint_id": self.endpoint_id,
            "route": self.route,
            "bound_version": self.bound_version,
            "status": self.status,
            "created_at": self.created_at,
        }


class _Binding(NamedTuple):
    endpoint_id: str
    route: str
    version_id: str
    digest: str
    status: str


class ArtifactCache:
    """Digest-keyed LRU over parsed artifacts, capacity 8."""

    def __init__(self, fetch, capacity: int = CACHE_CAPACITY):
        self.fetch = fetch
        self.capacity = capacity
        self.lookups = 0
        self.misses = 0
        self._entries: OrderedDict[str, object] = OrderedDict()
        self._lock = threading.Lock()

    def load(self, digest: str):
        with self._lock:
            self.lookups += 1
            if digest in self._entries:
                self._entries.move_to_end(digest)
                return self._entries[digest]
            self.misses += 1
            artifact = self._parse(self.fetch(digest))
            self._entries[digest] = artifact
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
            return artifact

    @staticmethod
    def _parse(raw: bytes):
        try:
            kind = json.loads(raw).get("kind")
        except (ValueError, AttributeError):
            raise InvalidInput("artifact blob is not a JSON document")
        if kind == "classifier":
            return modelkit.ClassifierArtifact.from_bytes(raw)
        if kind == "embedder":
            return modelkit.EmbedderArtifact.from_bytes(raw)
        raise InvalidInput(f"unknown artifact kind {kind!r}")


class ServingLayer:
    NS_ENDPOINTS = "serving.endpoints"
    NS_ROUTES = "serving.routes"
    NS_AUDIT = "serving.audit"

    def __init__(self, db, registry: Registry, monitor: Monitor,
                 acl: AccessControl | None = None,
                 tokens: dict[str, str] | None = None,
                 refreeze_on_rebind: bool = True):
        self.db = db
        self.registry = registry
        self.monitor = monitor
        self.acl = acl
        self.refreeze_on_rebind = refreeze_on_rebind
        self.cache = ArtifactCache(registry.blobs.get)
        self._principal_by_token = {
            token: principal for principal, token in (tokens or {}).items()
        }
        self._bindings: dict[str, _Binding] = {}
        self._lock = threading.RLock()
        for endpoint_id, doc in db.scan(self.NS_ENDPOINTS):
            self._publish(Endpoint(**doc))
            monitor.register_endpoint(endpoint_id)

    def _require(self, actor: str | None, action: str, resource: str) -> None:
        if self.acl is None or actor is None:
            return
        self.acl.require(actor, action, resource)

    def _publish(self, endpoint: Endpoint) -> None:
        version = self.registry.get_version(endpoint.bound_version)
        self._bindings[endpoint.route] = _Binding(
            endpoint.endpoint_id,
            endpoint.route,
            endpoint.bound_version,
            version["artifact_digest"],
            endpoint.status,
        )

    def _check_released(self, version_id: str) -> dict:
        version = self.registry.get_version(version_id)
        if version["stage"] not in (S4, S5):
            raise GateFailed(
                f"version {version_id} is in {version['stage']},"
                " only released versions can serve"
            )
        return version

    def create_endpoint(self, version_id: str, route: str,
                        actor: str | None = None) -> Endpoint:
        if not ROUTE_PATTERN.match(route or ""):
            raise InvalidInput(f"route {route!r} is not a URL path segment")
        self._require(actor, "write", f"endpoint:{route}")
        version = self._check_released(version_id)
        endpoint = Endpoint(
            endpoint_id=make_id("ep", route),
            route=route,
            bound_version=version_id,
            status=LIVE,
            created_at=time.time(),
        )
        with self._lock:
            if not self.db.insert(self.NS_ROUTES, route,
                                  {"endpoint_id": endpoint.endpoint_id}):
                raise Conflict(f"route {route!r} is already bound")
            self.db.put(self.NS_ENDPOINTS, endpoint.endpoint_id,
                        endpoint.to_dict())
            self._bindings[route] = _Binding(
                endpoint.endpoint_id, route, version_id,
                version["artifact_digest"], LIVE,
            )
        self.monitor.register_endpoint(endpoint.endpoint_id)
        self.db.append(self.NS_AUDIT, {
            "endpoint_id": endpoint.endpoint_id,
            "action": "create",
            "version_id": version_id,
            "actor": actor,
            "at": endpoint.created_at,
        })
        return endpoint

    def get_endpoint(self, endpoint_id: str) -> Endpoint:
        doc = self.db.get(self.NS_ENDPOINTS, endpoint_id)
        if doc is None:
            raise NotFound(f"no endpoint {endpoint_id!r}")
        return Endpoint(**doc)

    def list_endpoints(self) -> list[Endpoint]:
        return [Endpoint(**doc) for _, doc in self.db.scan(self.NS_ENDPOINTS)]

    def endpoint_for_route(self, route: str) -> Endpoint | None:
        claim = self.db.get(self.NS_ROUTES, route)
        if claim is None:
            return None
        return self.get_endpoint(claim["endpoint_id"])

    def authenticate(self, token: str | None) -> str:
        principal = self._principal_by_token.get(token or "")
        if principal is None:
            raise Unauthorized("unknown bearer token")
        return principal

    def infer(self, route: str, payload: dict, token: str | None = None,
              actor: str | None = None) -> dict:
        if token is not None:
            actor = self.authenticate(token)
        elif actor is None and self._principal_by_token:
            raise Unauthorized("missing bearer token")
        self._require(actor, "read", f"endpoint:{route}")
        binding = self._bindings.get(route)
        if binding is None:
            raise NotFound(f"no endpoint on route {route!r}")
        if binding.status != LIVE:
            raise Unavailable(f"endpoint {binding.endpoint_id} is {binding.status}")
        started = time.perf_counter()
        if not isinstance(payload, dict) or \
                ("tokens" in payload) == ("features" in payload):
            raise InvalidInput('payload must carry exactly one of "tokens", "features"')
        classifier = self.cache.load(binding.digest)
        if not isinstance(classifier, modelkit.ClassifierArtifact):
            raise InvalidInput(
                f"version {binding.version_id} does not hold a classifier"
            )
        if "tokens" in payload:
            toks = payload["tokens"]
            if not isinstance(toks, list) or not all(isinstance(t, str) for t in toks):
                raise InvalidInput("tokens must be a list of strings")
            embedder = self.cache.load(classifier.parent)
            features = modelkit.embed_document(embedder, toks)
            prediction = modelkit.predict(classifier, embedder, toks)
        else:
            features = payload["features"]
            prediction = modelkit.predict_features(classifier, features)
        latency_ms = (time.perf_counter() - started) * 1000.0
        self.monitor.ingest(InferenceLog(
            endpoint_id=binding.endpoint_id,
            feature_vector=[float(x) for x in features],
            prediction=prediction,
            latency_ms=latency_ms,
            timestamp=time.time(),
        ))
        return {
            "prediction": prediction,
            "model_version": binding.version_id,
            "latency_ms": latency_ms,
        }

    def rebind(self, endpoint_id: str, version_id: str,
               actor: str | None = None) -> Endpoint:
        endpoint = self.get_endpoint(endpoint_id)
        self._require(actor, "write", f"endpoint:{endpoint.route}")
        if endpoint.status == RETIRED:
            raise InvalidTransition(f"endpoint {endpoint_id} is retired")
        version = self._check_released(version_id)
        with self._lock:
            endpoint.bound_version = version_id
            endpoint.status = LIVE  # a redeploy revives a paused endpoint
            self.db.put(self.NS_ENDPOINTS, endpoint_id, endpoint.to_dict())
            self._bindings[endpoint.route] = _Binding(
                endpoint_id, endpoint.route, version_id,
                version["artifact_digest"], LIVE,
            )
        self.db.append(self.NS_AUDIT, {
            "endpoint_id": endpoint_id,
            "action": "rebind",
            "version_id": version_id,
            "actor": actor,
            "at": time.time(),
        })
        if self.refreeze_on_rebind:
            try:
                self.monitor.freeze_reference(endpoint_id, force=True)
            except NotReady:
                pass  # not enough logs yet; the next freeze will catch up
        return endpoint

    def _set_status(self, endpoint_id: str, status: str,
                    actor: str | None) -> Endpoint:
        endpoint = self.get_endpoint(endpoint_id)
        self._require(actor, "write", f"endpoint:{endpoint.route}")
        if endpoint.status == RETIRED:
            raise InvalidTransition(f"endpoint {endpoint_id} is retired")
        with self._lock:
            endpoint.status = status
            self.db.put(self.NS_ENDPOINTS, endpoint_id, endpoint.to_dict())
            old = self._bindings[endpoint.route]
            self._bindings[endpoint.route] = old._replace(status=status)
        self.db.append(self.NS_AUDIT, {
            "endpoint_id": endpoint_id,
            "action": status,
            "version_id": endpoint.bound_version,
            "actor": actor,
            "at": time.time(),
        })
        return endpoint

    def pause(self, endpoint_id: str, actor: str | None = None) -> Endpoint:
        return self._set_status(endpoint_id, PAUSED, actor)

    def retire(self, endpoint_id: str, actor: str | None = None) -> Endpoint:
        return self._set_status(endpoint_id, RETIRED, actor)

    def audit_log(self, endpoint_id: str | None = None) -> list[dict]:
        entries = [doc for _, doc in self.db.read_log(self.NS_AUDIT)]
        if endpoint_id is not None:
            entries = [e for e in entries if e["endpoint_id"] == endpoint_id]
        return entries
