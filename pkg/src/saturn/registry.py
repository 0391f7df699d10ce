"""Model Zoo: content-addressed blobs, the version catalog, and the
lifecycle state machine.

Blobs live as files under a two-level hex fan-out; every read recomputes
the digest so a corrupt file can never be served.  Versions move through
stages only via ``transition_stage``, which enforces the legal relation
and appends to an audit log inside one transaction.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import (
    Conflict,
    GateFailed,
    IntegrityError,
    InvalidInput,
    InvalidTransition,
    IoError,
    NotFound,
)
from .governance import AccessControl, FairnessReport
from .ids import digest_of, make_id
from .modelkit import EvalMetrics
from .storage import Database

S1 = "S1_PRETRAINING"
S2 = "S2_FINE_TUNING"
S3 = "S3_TESTING"
S4 = "S4_RELEASED"
S5 = "S5_MONITORED"
REJECTED = "REJECTED"
DEPRECATED = "DEPRECATED"

STAGES = (S1, S2, S3, S4, S5, REJECTED, DEPRECATED)

LEGAL_TRANSITIONS = frozenset(
    {
        (S1, S2),
        (S1, S3),
        (S2, S3),
        (S3, S4),
        (S3, REJECTED),
        (S4, S5),
        (S4, DEPRECATED),
        (S5, DEPRECATED),
    }
)

MODALITIES = ("text", "image", "speech", "tabular", "timeseries", "multimodal")

EMPTY_DIGEST = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


@dataclass
class ArtifactBlob:
    digest: str
    size_bytes: int
    media_type: str

    def to_dict(self) -> dict:
        return {
            "digest": self.digest,
            "size_bytes": self.size_bytes,
            "media_type": self.media_type,
        }


class BlobStore:
    """Files named by SHA-256 under root/aa/bb/<digest>."""

    def __init__(self, root: str | Path, db: Database):
        self.root = Path(root)
        self.db = db
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest[2:4] / digest

    def put(self, data: bytes, media_type: str = "application/octet-stream") -> ArtifactBlob:
        digest = digest_of(data)
        path = self._path(digest)
        if not path.exists():
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(data)
                os.replace(tmp, path)
            except OSError as exc:
                raise IoError(f"blob write failed: {exc}") from exc
        blob = ArtifactBlob(digest, len(data), media_type)
        self.db.insert("blobs", digest, blob.to_dict())
        return blob

    def get(self, digest: str) -> bytes:
        path = self._path(digest)
        if not path.exists():
            raise NotFound(f"no blob {digest}")
        data = path.read_bytes()
        if digest_of(data) != digest:
            raise IntegrityError(f"blob {digest} failed digest verification")
        return data

    def stat(self, digest: str) -> ArtifactBlob:
        doc = self.db.get("blobs", digest)
        if doc is None:
            raise NotFound(f"no blob {digest}")
        return ArtifactBlob(doc["digest"], doc["size_bytes"], doc["media_type"])

    def exists(self, digest: str) -> bool:
        return self._path(digest).exists()

    def count(self) -> int:
        return self.db.count("blobs")


@dataclass
class ValidationReport:
    metrics: EvalMetrics
    fairness: FairnessReport | None
    passed: bool
    gate_config_digest: str
    evaluated_at: float

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics.to_dict(),
            "fairness": self.fairness.to_dict() if self.fairness else None,
            "passed": self.passed,
            "gate_config_digest": self.gate_config_digest,
            "evaluated_at": self.evaluated_at,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ValidationReport":
        return cls(
            metrics=EvalMetrics(**doc["metrics"]),
            fairness=FairnessReport.from_dict(doc["fairness"]) if doc["fairness"] else None,
            passed=doc["passed"],
            gate_config_digest=doc["gate_config_digest"],
            evaluated_at=doc["evaluated_at"],
        )


class Registry:
    """Catalog of models and versions with audited stage transitions.

    When an :class:`AccessControl` and an actor are supplied the usual
    role checks apply; internal callers (the pipeline) pass actor=None
    and are trusted.
    """

    AUDIT = "registry.audit"

    def __init__(self, db: Database, blobs: BlobStore, acl: AccessControl | None = None):
        self.db = db
        self.blobs = blobs
        self.acl = acl

    def _require(self, actor: str | None, action: str, resource: str) -> None:
        if self.acl is not None and actor is not None:
            self.acl.require(actor, action, resource)

    # -- models ---------------------------------------------------------

    def register_model(
        self, name: str, modality: str, owner: str, actor: str | None = None
    ) -> dict:
        if not name:
            raise InvalidInput("model name must be nonempty")
        if modality not in MODALITIES:
            raise InvalidInput(f"unknown modality {modality!r}")
        self._require(actor, "write", "model:*")
        model_id = make_id("m", owner, name)
        doc = {
            "model_id": model_id,
            "name": name,
            "modality": modality,
            "owner": owner,
            "created_at": time.time(),
        }
        if not self.db.insert("models", model_id, doc):
            raise Conflict(f"model {name!r} already registered for {owner}")
        if self.acl is not None:
            self.acl.grant(owner, "writer", f"model:{model_id}")
        return doc

    def get_model(self, model_id: str, actor: str | None = None) -> dict:
        doc = self.db.get("models", model_id)
        if doc is None:
            raise NotFound(f"no model {model_id}")
        self._require(actor, "read", f"model:{model_id}")
        return doc

    def list_models(self, actor: str | None = None) -> list[dict]:
        models = [doc for _, doc in self.db.scan("models")]
        if self.acl is not None and actor is not None:
            models = [
                m for m in models
                if self.acl.check(actor, "read", f"model:{m['model_id']}", log=False)
            ]
        return sorted(models, key=lambda m: m["created_at"])

    # -- versions -------------------------------------------------------

    def create_version(
        self,
        model_id: str,
        artifact_digest: str,
        parent_version: str | None = None,
        initial_stage: str = S1,
        actor: str | None = None,
    ) -> dict:
        if initial_stage not in (S1, S2):
            raise InvalidInput("versions enter at S1_PRETRAINING or S2_FINE_TUNING")
        if initial_stage == S2 and not parent_version:
            raise InvalidInput("fine-tune versions need a parent_version")
        if self.db.get("models", model_id) is None:
            raise NotFound(f"no model {model_id}")
        self._require(actor, "write", f"model:{model_id}")
        if not self.blobs.exists(artifact_digest):
            raise NotFound(f"artifact digest {artifact_digest} not in blob store")
        if parent_version is not None and self.db.get("versions", parent_version) is None:
            raise NotFound(f"parent version {parent_version} unknown")
        with self.db.transaction() as cur:
            row = cur.execute(
                "SELECT COUNT(*) FROM kv WHERE ns = 'versions.by_model' AND k LIKE ?",
                (f"{model_id}|%",),
            ).fetchone()
            seq = int(row[0]) + 1
            version_id = make_id("v", model_id, seq)
            doc = {
                "version_id": version_id,
                "model_id": model_id,
                "parent_version": parent_version,
                "stage": initial_stage,
                "artifact_digest": artifact_digest,
                "validation": None,
                "created_at": time.time(),
                "seq": seq,
            }
            payload = _dumps(doc)
            cur.execute(
                "INSERT INTO kv (ns, k, v) VALUES ('versions', ?, ?)",
                (version_id, payload),
            )
            cur.execute(
                "INSERT INTO kv (ns, k, v) VALUES ('versions.by_model', ?, ?)",
                (f"{model_id}|{seq:06d}", _dumps({"version_id": version_id})),
            )
            _append_audit(cur, self.AUDIT, {
                "version_id": version_id,
                "from": None,
                "to": initial_stage,
                "actor": actor,
                "at": time.time(),
            })
        return doc

    def get_version(self, version_id: str, actor: str | None = None) -> dict:
        doc = self.db.get("versions", version_id)
        if doc is None:
            raise NotFound(f"no version {version_id}")
        self._require(actor, "read", f"model:{doc['model_id']}")
        return doc

    def list_versions(self, model_id: str, actor: str | None = None) -> list[dict]:
        self.get_model(model_id, actor=actor)
        out = []
        for _, ref in self.db.scan("versions.by_model"):
            doc = self.db.get("versions", ref["version_id"])
            if doc is not None and doc["model_id"] == model_id:
                out.append(doc)
        return sorted(out, key=lambda d: d["seq"])

    def transition_stage(
        self,
        version_id: str,
        to: str,
        report: ValidationReport | None = None,
        actor: str | None = None,
    ) -> dict:
        if to not in STAGES:
            raise InvalidInput(f"unknown stage {to!r}")
        probe = self.db.get("versions", version_id)
        if probe is None:
            raise NotFound(f"no version {version_id}")
        self._require(actor, "write", f"model:{probe['model_id']}")
        with self.db.transaction() as cur:
            row = cur.execute(
                "SELECT v FROM kv WHERE ns = 'versions' AND k = ?", (version_id,)
            ).fetchone()
            doc = _loads(row[0])
            current = doc["stage"]
            if (current, to) not in LEGAL_TRANSITIONS:
                raise InvalidTransition(f"{current} -> {to} is not a legal transition")
            if report is not None:
                if doc["validation"] is not None and doc["validation"] != report.to_dict():
                    raise Conflict("version already carries a validation report")
                doc["validation"] = report.to_dict()
            if to == S4:
                validation = doc["validation"]
                if validation is None or not validation["passed"]:
                    raise GateFailed("release requires a passing validation report")
            doc["stage"] = to
            cur.execute(
                "UPDATE kv SET v = ? WHERE ns = 'versions' AND k = ?",
                (_dumps(doc), version_id),
            )
            _append_audit(cur, self.AUDIT, {
                "version_id": version_id,
                "from": current,
                "to": to,
                "actor": actor,
                "at": time.time(),
            })
        return doc

    def lineage(self, version_id: str, actor: str | None = None) -> list[dict]:
        """Ancestor chain, root first, ending at the requested version."""
        chain = []
        cursor: str | None = version_id
        first = True
        while cursor is not None:
            doc = self.db.get("versions", cursor)
            if doc is None:
                if first:
                    raise NotFound(f"no version {cursor}")
                break  # dangling parent reference; chain ends here
            if first:
                self._require(actor, "read", f"model:{doc['model_id']}")
                first = False
            chain.append(doc)
            cursor = doc["parent_version"]
        chain.reverse()
        return chain

    def audit_log(self, version_id: str | None = None) -> list[dict]:
        entries = [doc for _, doc in self.db.read_log(self.AUDIT)]
        if version_id is not None:
            entries = [e for e in entries if e["version_id"] == version_id]
        return entries


def _dumps(doc: dict[str, Any]) -> str:
    return json.dumps(doc, sort_keys=True)


def _loads(payload: str) -> dict[str, Any]:
    return json.loads(payload)


def _append_audit(cur, ns: str, doc: dict[str, Any]) -> None:
    cur.execute("INSERT INTO log (ns, v) VALUES (?, ?)", (ns, _dumps(doc)))
