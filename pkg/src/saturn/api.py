"""HTTP surface for the control plane.

Thin JSON-over-HTTP bindings: every route validates the request shape,
resolves the caller, and delegates to the subsystem, so behavior stays
identical between in-process and remote use.  A single background
worker drains the pipeline queue; POSTing a trigger wakes it.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import tempfile
import threading
import time
from pathlib import Path

from fastapi import Depends, FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .errors import InvalidInput, SaturnError, Unauthorized
from .governance import compute_fairness
from .monitor import InferenceLog
from .platform import Platform
from .registry import ValidationReport

log = logging.getLogger("saturn.api")


class ModelIn(BaseModel):
    name: str
    modality: str
    owner: str


class VersionIn(BaseModel):
    artifact_digest: str
    parent_version: str | None = None
    initial_stage: str | None = None


class TransitionIn(BaseModel):
    to: str
    report: dict | None = None


class CollectionIn(BaseModel):
    name: str
    dim: int
    metric: str


class EmbeddingIn(BaseModel):
    vector: list[float]
    tags: list[str] = []


class SearchIn(BaseModel):
    vector: list[float]
    k: int = 10
    tags: list[str] = []
    mode: str = "exact"


class IndexIn(BaseModel):
    seed: int = 0


class LogIn(BaseModel):
    endpoint_id: str
    feature_vector: list[float]
    prediction: float
    latency_ms: float = 0.0
    timestamp: float | None = None


class LogBatchIn(BaseModel):
    logs: list[LogIn]


class FreezeIn(BaseModel):
    force: bool = False


class TriggerIn(BaseModel):
    kind: str
    commit: str | None = None
    spec_path: str | None = None
    key: str | None = None
    endpoint_id: str | None = None
    event_id: str | None = None


class RankingIn(BaseModel):
    prompt_id: str
    candidates: list[dict]
    ranking: list[int]
    labeler_id: str


class RewardFitIn(BaseModel):
    prompt_prefix: str = ""
    l2: float | None = None
    lr: float | None = None
    max_iters: int | None = None


class GrantIn(BaseModel):
    principal: str
    role: str
    resource: str


class FairnessIn(BaseModel):
    predictions: list[int]
    labels: list[int]
    groups: list[str]
    scores: list[float] | None = None


class EndpointIn(BaseModel):
    version_id: str
    route: str


class RebindIn(BaseModel):
    version_id: str


def create_app(platform: Platform, run_worker: bool = True) -> FastAPI:
    wake = threading.Event()
    stop = threading.Event()

    def worker() -> None:
        while not stop.is_set():
            wake.wait(timeout=0.2)
            wake.clear()
            if stop.is_set():
                return
            try:
                platform.orchestrator.process_queue()
            except Exception:
                log.exception("pipeline worker iteration failed")

    thread = threading.Thread(target=worker, name="pipeline-worker", daemon=True)

    async def lifespan_start() -> None:
        if run_worker:
            thread.start()

    async def lifespan_stop() -> None:
        if run_worker:
            stop.set()
            wake.set()
            thread.join(timeout=5)
        platform.close()

    @contextlib.asynccontextmanager
    async def lifespan(_: FastAPI):
        await lifespan_start()
        try:
            yield
        finally:
            await lifespan_stop()

    app = FastAPI(title="saturn", lifespan=lifespan)

    @app.exception_handler(SaturnError)
    async def saturn_error(_: Request, exc: SaturnError):
        return JSONResponse(
            status_code=exc.http_status,
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    @app.exception_handler(RequestValidationError)
    async def shape_error(_: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"error": {"code": "invalid-input", "message": str(exc)}},
        )

    async def actor_of(request: Request) -> str | None:
        header = request.headers.get("authorization", "")
        token = header[7:] if header.lower().startswith("bearer ") else None
        if platform.auth_enabled and token is None:
            raise Unauthorized("missing bearer token")
        return platform.principal_for(token)

    def require(actor: str | None, action: str, resource: str) -> None:
        if actor is not None:
            platform.acl.require(actor, action, resource)

    # -- registry -------------------------------------------------------

    @app.post("/v1/models")
    def register_model(body: ModelIn, actor: str | None = Depends(actor_of)):
        return platform.registry.register_model(
            body.name, body.modality, body.owner, actor=actor)

    @app.get("/v1/models")
    def list_models(actor: str | None = Depends(actor_of)):
        return platform.registry.list_models(actor=actor)

    @app.post("/v1/models/{model_id}/versions")
    def create_version(model_id: str, body: VersionIn,
                       actor: str | None = Depends(actor_of)):
        kwargs = {}
        if body.initial_stage is not None:
            kwargs["initial_stage"] = body.initial_stage
        return platform.registry.create_version(
            model_id, body.artifact_digest,
            parent_version=body.parent_version, actor=actor, **kwargs)

    @app.post("/v1/versions/{version_id}/transition")
    def transition(version_id: str, body: TransitionIn,
                   actor: str | None = Depends(actor_of)):
        report = None
        if body.report is not None:
            try:
                report = ValidationReport.from_dict(body.report)
            except (KeyError, TypeError) as exc:
                raise InvalidInput(f"malformed validation report: {exc}")
        return platform.registry.transition_stage(
            version_id, body.to, report=report, actor=actor)

    @app.get("/v1/versions/{version_id}")
    def get_version(version_id: str, actor: str | None = Depends(actor_of)):
        return platform.registry.get_version(version_id, actor=actor)

    @app.get("/v1/versions/{version_id}/lineage")
    def lineage(version_id: str, actor: str | None = Depends(actor_of)):
        return platform.registry.lineage(version_id, actor=actor)

    @app.put("/v1/blobs")
    async def put_blob(request: Request, actor: str | None = Depends(actor_of)):
        require(actor, "write", "model:*")
        blob = platform.blobs.put(await request.body())
        return {"digest": blob.digest}

    @app.get("/v1/blobs/{digest}")
    def get_blob(digest: str, actor: str | None = Depends(actor_of)):
        require(actor, "read", "model:*")
        data = platform.blobs.get(digest)
        return Response(content=data, media_type="application/octet-stream")

    # -- embedding store ------------------------------------------------

    @app.get("/v1/collections")
    def list_collections(actor: str | None = Depends(actor_of)):
        return platform.farm.list_collections()

    @app.post("/v1/collections")
    def create_collection(body: CollectionIn,
                          actor: str | None = Depends(actor_of)):
        require(actor, "write", f"collection:{body.name}")
        return platform.farm.create_collection(body.name, body.dim, body.metric)

    @app.put("/v1/collections/{name}/embeddings/{key}")
    def upsert_embedding(name: str, key: str, body: EmbeddingIn,
                         actor: str | None = Depends(actor_of)):
        require(actor, "write", f"collection:{name}")
        return platform.farm.upsert(name, key, body.vector, tags=body.tags)

    @app.get("/v1/collections/{name}/embeddings/{key}")
    def get_embedding(name: str, key: str,
                      actor: str | None = Depends(actor_of)):
        require(actor, "read", f"collection:{name}")
        return platform.farm.get(name, key)

    @app.post("/v1/collections/{name}/search")
    def search(name: str, body: SearchIn,
               actor: str | None = Depends(actor_of)):
        require(actor, "read", f"collection:{name}")
        if body.mode == "exact":
            results = platform.farm.search_exact(
                name, body.vector, body.k, tag_filter=body.tags or None)
        elif body.mode == "ann":
            if body.tags:
                raise InvalidInput("tag filters apply to exact search only")
            results = platform.farm.search_ann(name, body.vector, body.k)
        else:
            raise InvalidInput(f'mode must be "exact" or "ann", not {body.mode!r}')
        return {"results": [r.to_dict() for r in results]}

    @app.post("/v1/collections/{name}/index")
    def build_index(name: str, body: IndexIn | None = None,
                    actor: str | None = Depends(actor_of)):
        require(actor, "write", f"collection:{name}")
        return platform.farm.build_index(name, seed=body.seed if body else 0)

    @app.get("/v1/collections/{name}/export")
    def export_collection(name: str, actor: str | None = Depends(actor_of)):
        require(actor, "read", f"collection:{name}")
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "collection.sef1"
            platform.farm.export_collection(name, path)
            data = path.read_bytes()
        return Response(content=data, media_type="application/octet-stream")

    @app.post("/v1/collections/import")
    async def import_collection(request: Request, name: str,
                                actor: str | None = Depends(actor_of)):
        require(actor, "write", f"collection:{name}")
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "collection.sef1"
            path.write_bytes(await request.body())
            return platform.farm.import_collection(path, name)

    # -- monitor --------------------------------------------------------

    def _ingest(entry: LogIn) -> None:
        platform.monitor.ingest(InferenceLog(
            endpoint_id=entry.endpoint_id,
            feature_vector=entry.feature_vector,
            prediction=entry.prediction,
            latency_ms=entry.latency_ms,
            timestamp=entry.timestamp if entry.timestamp is not None
            else time.time(),
        ))

    @app.post("/v1/monitor/logs")
    def ingest_logs(body: LogBatchIn | LogIn,
                    actor: str | None = Depends(actor_of)):
        entries = body.logs if isinstance(body, LogBatchIn) else [body]
        for entry in entries:
            require(actor, "write", f"endpoint:{entry.endpoint_id}")
            _ingest(entry)
        wake.set()  # an ingest may have queued a drift run
        return {"accepted": len(entries)}

    @app.post("/v1/monitor/{endpoint_id}/freeze")
    def freeze(endpoint_id: str, body: FreezeIn | None = None,
               actor: str | None = Depends(actor_of)):
        require(actor, "write", f"endpoint:{endpoint_id}")
        snapshot = platform.monitor.freeze_reference(
            endpoint_id, force=body.force if body else False)
        return snapshot.to_dict()

    @app.get("/v1/monitor/{endpoint_id}/reports")
    def reports(endpoint_id: str, actor: str | None = Depends(actor_of)):
        require(actor, "read", f"endpoint:{endpoint_id}")
        return platform.monitor.reports(endpoint_id)

    # -- pipeline -------------------------------------------------------

    @app.post("/v1/pipeline/triggers")
    def submit_trigger(body: TriggerIn, actor: str | None = Depends(actor_of)):
        payload = body.model_dump(exclude={"kind"}, exclude_none=True)
        out = platform.orchestrator.submit_trigger(body.kind, payload,
                                                   actor=actor)
        wake.set()
        return out

    @app.get("/v1/pipeline/runs")
    def list_runs(kind: str | None = None, status: str | None = None,
                  actor: str | None = Depends(actor_of)):
        return platform.orchestrator.list_runs(kind=kind, status=status,
                                               actor=actor)

    @app.get("/v1/pipeline/runs/{run_id}")
    def get_run(run_id: str, actor: str | None = Depends(actor_of)):
        return platform.orchestrator.get_run(run_id, actor=actor)

    # -- feedback -------------------------------------------------------

    @app.post("/v1/feedback/rankings")
    def submit_ranking(body: RankingIn, actor: str | None = Depends(actor_of)):
        require(actor, "write", "feedback:rankings")
        record = platform.feedback.submit_ranking(
            body.prompt_id, body.candidates, body.ranking, body.labeler_id)
        return record.to_dict()

    @app.post("/v1/feedback/reward-models")
    def fit_reward_model(body: RewardFitIn,
                         actor: str | None = Depends(actor_of)):
        require(actor, "write", "feedback:models")
        kwargs = {}
        if body.l2 is not None:
            kwargs["l2"] = body.l2
        if body.lr is not None:
            kwargs["lr"] = body.lr
        if body.max_iters is not None:
            kwargs["max_iters"] = body.max_iters
        model_id, model = platform.feedback.fit_from_records(
            body.prompt_prefix, **kwargs)
        entry = platform.db.get(platform.feedback.NS_MODELS, model_id)
        return {**entry, "weights": list(model.weights)}

    @app.get("/v1/feedback/reward-models/{model_id}")
    def get_reward_model(model_id: str, actor: str | None = Depends(actor_of)):
        require(actor, "read", "feedback:models")
        entry, model = platform.feedback.get_model(model_id)
        return {**entry, "weights": list(model.weights)}

    # -- governance -----------------------------------------------------

    @app.post("/v1/grants")
    def create_grant(body: GrantIn, actor: str | None = Depends(actor_of)):
        if actor is not None:
            platform.acl.require(actor, "admin", body.resource)
        return platform.acl.grant(body.principal, body.role, body.resource)

    @app.get("/v1/grants")
    def list_grants(actor: str | None = Depends(actor_of)):
        return platform.acl.list_grants()

    @app.post("/v1/fairness/evaluate")
    def fairness(body: FairnessIn, actor: str | None = Depends(actor_of)):
        report = compute_fairness(body.predictions, body.labels, body.groups,
                                  scores=body.scores)
        return report.to_dict()

    # -- serving --------------------------------------------------------

    @app.post("/v1/endpoints")
    def create_endpoint(body: EndpointIn,
                        actor: str | None = Depends(actor_of)):
        endpoint = platform.serving.create_endpoint(
            body.version_id, body.route, actor=actor)
        return endpoint.to_dict()

    @app.post("/v1/endpoints/{endpoint_id}/rebind")
    def rebind(endpoint_id: str, body: RebindIn,
               actor: str | None = Depends(actor_of)):
        endpoint = platform.serving.rebind(endpoint_id, body.version_id,
                                           actor=actor)
        return endpoint.to_dict()

    @app.post("/v1/endpoints/{endpoint_id}/pause")
    def pause(endpoint_id: str, actor: str | None = Depends(actor_of)):
        return platform.serving.pause(endpoint_id, actor=actor).to_dict()

    @app.post("/v1/endpoints/{endpoint_id}/retire")
    def retire(endpoint_id: str, actor: str | None = Depends(actor_of)):
        return platform.serving.retire(endpoint_id, actor=actor).to_dict()

    @app.post("/v1/infer/{route}")
    async def infer(route: str, request: Request,
                    actor: str | None = Depends(actor_of)):
        try:
            payload = await request.json()
        except Exception:
            raise InvalidInput("request body must be JSON")
        out = platform.serving.infer(route, payload, actor=actor)
        wake.set()  # the logged request may have tripped the drift monitor
        return out

    return app


def main(argv: list[str] | None = None) -> None:
    """Run the API server over a platform root directory."""
    import uvicorn

    from .config import PlatformConfig

    parser = argparse.ArgumentParser(prog="saturn-server")
    parser.add_argument("root", help="platform data directory")
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=None)
    args = parser.parse_args(argv)

    config = PlatformConfig.from_file(args.config) if args.config \
        else PlatformConfig()
    platform = Platform(args.root, config)
    port = args.port if args.port is not None else config.serve_port
    uvicorn.run(create_app(platform), host=args.host, port=port,
                log_level="warning")


if __name__ == "__main__":
    main()
