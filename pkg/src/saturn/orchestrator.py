"""Training pipeline: triggers in, versioned models out.

A trigger (commit, drift event, or manual request) creates exactly one
pipeline run.  Runs walk TRAIN -> VALIDATE -> REGISTER -> DEPLOY as a
persisted state machine: every stage flip is written to the database
before work continues, so a crashed run resumes from its first
non-succeeded stage.  A version that fails its gate still counts as a
successful run; the version lands in REJECTED and DEPLOY is skipped.
"""

from __future__ import annotations

import json
import time
import uuid
from pathlib import Path

import numpy as np

from . import modelkit
from .config import load_flat_config
from .errors import Conflict, InvalidInput, NotFound
from .governance import compute_fairness
from .ids import digest_of, make_id
from .monitor import Monitor
from .registry import REJECTED, S1, S2, S3, S4, S5, Registry, ValidationReport
from .serving import ServingLayer
from .storage import Database

TRAIN, VALIDATE, REGISTER, DEPLOY = "TRAIN", "VALIDATE", "REGISTER", "DEPLOY"
STAGES = (TRAIN, VALIDATE, REGISTER, DEPLOY)
TRIGGER_KINDS = ("commit", "drift", "manual")

GATE_DEFAULTS = {"min_accuracy": 0.8, "min_auc": 0.8, "max_fairness_dpd": 0.1}

SPEC_KEYS = {
    "task", "model_id", "parent_version", "dataset", "eval_dataset",
    "deploy_route",
    "gate.min_accuracy", "gate.min_auc", "gate.max_fairness_dpd",
    "hp.k", "hp.w", "hp.seed",
}
HELD_OUT_EVERY = 5  # rows with index % 5 == 4 form the held-out split


def load_labeled_dataset(path: str | Path) -> list[tuple[int, str | None, str]]:
    """Rows of (label, group, payload) from tab-separated text.

    Two columns are label and payload; three columns put a group id in
    the middle.  The group column must be used on all rows or none.
    """
    p = Path(path)
    if not p.is_file():
        raise InvalidInput(f"dataset file not found: {p}")
    rows: list[tuple[int, str | None, str]] = []
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) == 2:
            label, group, payload = parts[0], None, parts[1]
        elif len(parts) == 3:
            label, group, payload = parts
        else:
            raise InvalidInput(f"{p}:{lineno}: expected 2 or 3 tab-separated columns")
        if label not in ("0", "1"):
            raise InvalidInput(f"{p}:{lineno}: label must be 0 or 1")
        rows.append((int(label), group, payload))
    if not rows:
        raise InvalidInput(f"dataset {p} is empty")
    grouped = [g is not None for _, g, _ in rows]
    if any(grouped) and not all(grouped):
        raise InvalidInput(f"dataset {p} mixes grouped and ungrouped rows")
    return rows


def parse_feature_row(payload: str) -> list[float]:
    try:
        values = [float(tok) for tok in payload.split(",")]
    except ValueError:
        raise InvalidInput(f"not a comma-separated feature row: {payload!r}")
    if not values or not all(np.isfinite(values)):
        raise InvalidInput("feature rows must be nonempty and finite")
    return values


def split_rows(rows: list) -> tuple[list, list]:
    train = [r for i, r in enumerate(rows) if i % HELD_OUT_EVERY != HELD_OUT_EVERY - 1]
    held = [r for i, r in enumerate(rows) if i % HELD_OUT_EVERY == HELD_OUT_EVERY - 1]
    return train, held


class Orchestrator:
    NS_TRIGGERS = "pipeline.triggers"
    NS_RUNS = "pipeline.runs"

    def __init__(self, db: Database, registry: Registry, serving: ServingLayer,
                 monitor: Monitor, root: str | Path,
                 gate_defaults: dict | None = None, acl=None):
        self.db = db
        self.registry = registry
        self.serving = serving
        self.monitor = monitor
        self.root = Path(root)
        self.gate_defaults = dict(gate_defaults or GATE_DEFAULTS)
        self.acl = acl
        self._handlers = {
            TRAIN: self._stage_train,
            VALIDATE: self._stage_validate,
            REGISTER: self._stage_register,
            DEPLOY: self._stage_deploy,
        }

    def _require(self, actor: str | None, action: str) -> None:
        if self.acl is None or actor is None:
            return
        self.acl.require(actor, action, "pipeline:runs")

    # -- triggers -------------------------------------------------------

    def submit_trigger(self, kind: str, payload: dict,
                       actor: str | None = None) -> dict:
        self._require(actor, "write")
        if kind not in TRIGGER_KINDS:
            raise InvalidInput(f"unknown trigger kind {kind!r}")
        if kind == "commit":
            commit = payload.get("commit", "")
            if not commit:
                raise InvalidInput("commit trigger needs a commit hash")
            spec = self._load_spec(payload.get("spec_path", ""))
            key = commit
        elif kind == "manual":
            spec = self._load_spec(payload.get("spec_path", ""))
            key = payload.get("key") or uuid.uuid4().hex
        else:
            spec = self._continuous_training_spec(payload)
            key = payload["event_id"]
        trigger_id = f"{kind}:{key}"
        run_id = make_id("run", trigger_id)
        received_at = time.time()
        if not self.db.insert(self.NS_TRIGGERS, trigger_id, {
            "trigger_id": trigger_id,
            "kind": kind,
            "run_id": run_id,
            "received_at": received_at,
        }):
            existing = self.db.get(self.NS_TRIGGERS, trigger_id)
            return {"run_id": existing["run_id"], "duplicate": True}
        run = {
            "run_id": run_id,
            "trigger_id": trigger_id,
            "kind": kind,
            "spec": spec,
            "received_at": received_at,
            "status": "pending",
            "stages": [
                {"name": name, "status": "pending", "started_at": None,
                 "finished_at": None, "error": None, "note": None}
                for name in STAGES
            ],
            "produced_version": None,
            "rejected": False,
            "context": {},
            "logs": [],
        }
        self.db.put(self.NS_RUNS, run_id, run)
        return {"run_id": run_id, "duplicate": False}

    def handle_drift_event(self, event: dict) -> dict:
        """Monitor sink: a drift event becomes a continuous-training run."""
        return self.submit_trigger("drift", event)

    def _load_spec(self, path: str) -> dict:
        spec = load_flat_config(path)
        unknown = set(spec) - SPEC_KEYS
        if unknown:
            raise InvalidInput(f"unknown training spec keys: {sorted(unknown)}")
        return self._check_spec(spec)

    def _check_spec(self, spec: dict) -> dict:
        task = spec.get("task")
        if task not in ("pretrain", "finetune"):
            raise InvalidInput('task must be "pretrain" or "finetune"')
        model_id = spec.get("model_id", "")
        try:
            self.registry.get_model(model_id)
        except NotFound:
            raise InvalidInput(f"training spec names unknown model {model_id!r}")
        if task == "finetune":
            parent = spec.get("parent_version", "")
            try:
                parent_doc = self.registry.get_version(parent)
            except NotFound:
                raise InvalidInput(f"parent version {parent!r} not found")
            if parent_doc["model_id"] != model_id:
                raise InvalidInput(
                    f"parent version {parent} belongs to {parent_doc['model_id']},"
                    f" not {model_id}"
                )
        dataset = spec.get("dataset", "")
        if not Path(dataset).is_file():
            raise InvalidInput(f"dataset not resolvable: {dataset!r}")
        if "eval_dataset" in spec and not Path(spec["eval_dataset"]).is_file():
            raise InvalidInput(f"eval_dataset not resolvable: {spec['eval_dataset']!r}")
        for key in ("gate.min_accuracy", "gate.min_auc", "gate.max_fairness_dpd"):
            if key in spec:
                value = float(spec[key])
                if not 0.0 <= value <= 1.0:
                    raise InvalidInput(f"{key} must lie in [0, 1]")
        for key in ("hp.k", "hp.w", "hp.seed"):
            if key in spec and int(spec[key]) < 0:
                raise InvalidInput(f"{key} must be nonnegative")
        return spec

    def _continuous_training_spec(self, event: dict) -> dict:
        endpoint_id = event.get("endpoint_id", "")
        event_id = event.get("event_id", "")
        if not endpoint_id or not event_id:
            raise InvalidInput("drift payload needs endpoint_id and event_id")
        try:
            endpoint = self.serving.get_endpoint(endpoint_id)
        except NotFound:
            raise InvalidInput(f"drift event names unknown endpoint {endpoint_id!r}")
        version = self.registry.get_version(endpoint.bound_version)
        spec: dict = {}
        for _, run in self.db.scan(self.NS_RUNS):
            if run["produced_version"] == endpoint.bound_version:
                # carry the producing run's gates and hyperparameters over
                spec = {k: v for k, v in run["spec"].items()
                        if k.startswith(("gate.", "hp."))}
                break
        spec.update({
            "task": "finetune",
            "model_id": version["model_id"],
            "parent_version": endpoint.bound_version,
            "dataset": self._export_live_window(endpoint_id, event_id),
            "deploy_route": endpoint.route,
        })
        return spec

    def _export_live_window(self, endpoint_id: str, event_id: str) -> str:
        """Snapshot the monitor window as a labeled feature dataset.

        No ground truth exists for live traffic, so rows are pseudo-
        labeled by a rank split on the logged predictions: the upper
        half counts as positive.
        """
        window = self.monitor.live_window(endpoint_id)
        if len(window) < 2:
            raise InvalidInput("live window too small to export")
        order = sorted(range(len(window)),
                       key=lambda i: (window[i].prediction, i))
        labels = [0] * len(window)
        for rank, idx in enumerate(order):
            if rank >= len(window) // 2:
                labels[idx] = 1
        path = self.root / "exports" / f"{event_id}.tsv"
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            f"{labels[i]}\t{','.join(repr(float(x)) for x in log.feature_vector)}"
            for i, log in enumerate(window)
        ]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return str(path)

    # -- run records ----------------------------------------------------

    def get_run(self, run_id: str, actor: str | None = None) -> dict:
        self._require(actor, "read")
        run = self.db.get(self.NS_RUNS, run_id)
        if run is None:
            raise NotFound(f"no pipeline run {run_id!r}")
        return run

    def list_runs(self, kind: str | None = None, status: str | None = None,
                  actor: str | None = None) -> list[dict]:
        self._require(actor, "read")
        runs = [doc for _, doc in self.db.scan(self.NS_RUNS)]
        if kind is not None:
            runs = [r for r in runs if r["kind"] == kind]
        if status is not None:
            runs = [r for r in runs if r["status"] == status]
        return sorted(runs, key=lambda r: (r["received_at"], r["run_id"]))

    def _log(self, run: dict, message: str) -> None:
        run["logs"].append(message)

    def _persist(self, run: dict) -> None:
        self.db.put(self.NS_RUNS, run["run_id"], run)

    def gate_config(self, spec: dict) -> dict:
        gate = dict(self.gate_defaults)
        for short in gate:
            key = f"gate.{short}"
            if key in spec:
                gate[short] = float(spec[key])
        return gate

    # -- execution ------------------------------------------------------

    def execute_run(self, run_id: str) -> dict:
        run = self.get_run(run_id)
        while run["status"] in ("pending", "running"):
            run = self.run_next_stage(run_id)
        return run

    def run_next_stage(self, run_id: str) -> dict:
        run = self.get_run(run_id)
        if run["status"] in ("succeeded", "failed"):
            raise Conflict(f"run {run_id} is terminal")
        stage = next(s for s in run["stages"]
                     if s["status"] not in ("succeeded", "skipped"))
        note = self._skip_reason(run, stage["name"])
        if note is not None:
            stage["status"] = "skipped"
            stage["note"] = note
            self._log(run, f"{stage['name']}: skipped ({note})")
            self._finalize_if_done(run)
            self._persist(run)
            return run
        stage["status"] = "running"
        stage["started_at"] = time.time()
        run["status"] = "running"
        self._persist(run)
        try:
            self._handlers[stage["name"]](run)
        except Exception as exc:
            stage["status"] = "failed"
            stage["error"] = f"{type(exc).__name__}: {exc}"
            stage["finished_at"] = time.time()
            for later in run["stages"]:
                if later["status"] == "pending":
                    later["status"] = "skipped"
                    later["note"] = f"{stage['name']} failed"
            run["status"] = "failed"
            self._log(run, f"{stage['name']}: failed: {stage['error']}")
            self._persist(run)
            return run
        stage["status"] = "succeeded"
        stage["finished_at"] = time.time()
        self._finalize_if_done(run)
        self._persist(run)
        return run

    def _skip_reason(self, run: dict, stage_name: str) -> str | None:
        if stage_name != DEPLOY:
            return None
        if run["rejected"]:
            return "version rejected by gate"
        if run["context"].get("report") is None:
            return "no validation report"
        if not run["spec"].get("deploy_route"):
            return "no deploy target"
        return None

    def _finalize_if_done(self, run: dict) -> None:
        if all(s["status"] in ("succeeded", "skipped") for s in run["stages"]):
            run["status"] = "succeeded"

    def process_queue(self) -> list[str]:
        """Execute pending runs oldest-first until none remain."""
        executed = []
        while True:
            pending = self.list_runs(status="pending")
            if not pending:
                return executed
            for run in pending:
                self.execute_run(run["run_id"])
                executed.append(run["run_id"])

    def recover(self) -> list[str]:
        """Resume runs a crashed worker left mid-flight."""
        resumed = []
        for run in self.list_runs(status="running"):
            self.execute_run(run["run_id"])
            resumed.append(run["run_id"])
        return resumed

    # -- stages ---------------------------------------------------------

    def _parent_artifact(self, spec: dict) -> tuple[dict, bytes, str]:
        parent = self.registry.get_version(spec["parent_version"])
        raw = self.registry.blobs.get(parent["artifact_digest"])
        kind = json.loads(raw).get("kind")
        return parent, raw, kind

    def _stage_train(self, run: dict) -> None:
        spec = run["spec"]
        if spec["task"] == "pretrain":
            corpus = modelkit.load_corpus(spec["dataset"])
            artifact = modelkit.pretrain_embedder(
                corpus,
                k=int(spec.get("hp.k", 8)),
                w=int(spec.get("hp.w", 2)),
                seed=int(spec.get("hp.seed", 7)),
            )
        else:
            _, raw, kind = self._parent_artifact(spec)
            rows, _ = split_rows(load_labeled_dataset(spec["dataset"]))
            labels = [label for label, _, _ in rows]
            if kind == "embedder":
                embedder = modelkit.EmbedderArtifact.from_bytes(raw)
                artifact = modelkit.finetune_classifier(
                    embedder,
                    [(modelkit.tokenize(payload), label)
                     for label, _, payload in rows],
                )
            elif kind == "classifier":
                parent_clf = modelkit.ClassifierArtifact.from_bytes(raw)
                features = [parse_feature_row(payload) for _, _, payload in rows]
                artifact = modelkit.finetune_on_features(
                    features, labels, parent_clf.parent
                )
            else:
                raise InvalidInput(f"cannot fine-tune from artifact kind {kind!r}")
        digest = self.registry.blobs.put(artifact.to_bytes()).digest
        run["context"]["train_digest"] = digest
        self._log(run, f"TRAIN: artifact {digest[:12]} ({spec['task']})")

    def _scored_held_out(self, run: dict):
        """Held-out scores, labels, and groups for the trained artifact."""
        spec = run["spec"]
        raw = self.registry.blobs.get(run["context"]["train_digest"])
        if spec["task"] == "pretrain":
            embedder = modelkit.EmbedderArtifact.from_bytes(raw)
            rows = load_labeled_dataset(spec["eval_dataset"])
            train_rows, held = split_rows(rows)
            probe = modelkit.finetune_classifier(
                embedder,
                [(modelkit.tokenize(payload), label)
                 for label, _, payload in train_rows],
            )
            scores = [modelkit.predict(probe, embedder, modelkit.tokenize(payload))
                      for _, _, payload in held]
        else:
            classifier = modelkit.ClassifierArtifact.from_bytes(raw)
            _, parent_raw, kind = self._parent_artifact(spec)
            _, held = split_rows(load_labeled_dataset(spec["dataset"]))
            if kind == "embedder":
                embedder = modelkit.EmbedderArtifact.from_bytes(parent_raw)
                scores = [
                    modelkit.predict(classifier, embedder, modelkit.tokenize(payload))
                    for _, _, payload in held
                ]
            else:
                scores = [
                    modelkit.predict_features(classifier, parse_feature_row(payload))
                    for _, _, payload in held
                ]
        labels = [label for label, _, _ in held]
        groups = [group for _, group, _ in held]
        return scores, labels, groups

    def _stage_validate(self, run: dict) -> None:
        spec = run["spec"]
        if spec["task"] == "pretrain" and "eval_dataset" not in spec:
            run["context"]["report"] = None
            self._log(run, "VALIDATE: no probe dataset, version will rest at S3")
            return
        gate = self.gate_config(spec)
        gate_digest = digest_of(
            json.dumps(gate, sort_keys=True, separators=(",", ":")).encode()
        )
        scores, labels, groups = self._scored_held_out(run)
        if not scores:
            raise InvalidInput("held-out split is empty")
        score_arr = np.asarray(scores)
        y = np.asarray(labels, dtype=np.float64)
        predictions = [int(s >= 0.5) for s in scores]
        metrics = modelkit.EvalMetrics(
            accuracy=float(np.mean(np.asarray(predictions) == y.astype(int))),
            auc=modelkit.auc_score(score_arr, y),
            sample_count=len(labels),
        )
        fairness = None
        if groups[0] is not None:
            fairness = compute_fairness(predictions, labels, groups)
        passed = (
            metrics.accuracy >= gate["min_accuracy"]
            and metrics.auc >= gate["min_auc"]
            and (fairness is None or fairness.dpd <= gate["max_fairness_dpd"])
        )
        report = ValidationReport(metrics, fairness, passed, gate_digest, time.time())
        run["context"]["report"] = report.to_dict()
        run["context"]["gate"] = gate
        self._log(
            run,
            f"VALIDATE: accuracy={metrics.accuracy:.4f} auc={metrics.auc:.4f}"
            + (f" dpd={fairness.dpd:.4f}" if fairness else "")
            + f" passed={passed}",
        )

    def _stage_register(self, run: dict) -> None:
        spec = run["spec"]
        if run["produced_version"] is None:
            version = self.registry.create_version(
                spec["model_id"],
                run["context"]["train_digest"],
                parent_version=spec.get("parent_version"),
                initial_stage=S1 if spec["task"] == "pretrain" else S2,
            )
            run["produced_version"] = version["version_id"]
            self._persist(run)
            self.registry.transition_stage(version["version_id"], S3)
        version_id = run["produced_version"]
        report_doc = run["context"].get("report")
        if report_doc is None:
            self._log(run, f"REGISTER: {version_id} resting at S3 (no report)")
            return
        if self.registry.get_version(version_id)["stage"] != S3:
            return  # a resumed run already moved it past the gate
        report = ValidationReport.from_dict(report_doc)
        if report.passed:
            self.registry.transition_stage(version_id, S4, report=report)
            self._log(run, f"REGISTER: {version_id} released")
        else:
            self.registry.transition_stage(version_id, REJECTED, report=report)
            run["rejected"] = True
            self._log(run, f"REGISTER: {version_id} rejected by gate")

    def _stage_deploy(self, run: dict) -> None:
        route = run["spec"]["deploy_route"]
        version_id = run["produced_version"]
        existing = self.serving.endpoint_for_route(route)
        if existing is None:
            endpoint = self.serving.create_endpoint(version_id, route)
            self._log(run, f"DEPLOY: endpoint {endpoint.endpoint_id} on /{route}")
        else:
            endpoint = self.serving.rebind(existing.endpoint_id, version_id)
            self._log(run, f"DEPLOY: rebound {endpoint.endpoint_id} to {version_id}")
        if self.registry.get_version(version_id)["stage"] == S4:
            self.registry.transition_stage(version_id, S5)
        if not self.monitor.has_reference(endpoint.endpoint_id):
            # reference freezes on its own once traffic accumulates
            self.monitor.arm_auto_freeze(endpoint.endpoint_id)
