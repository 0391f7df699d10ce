"""Command-line client for the HTTP API.

Every subcommand is a thin request wrapper: flags are validated
locally, the request goes to the server named by --url / SATURN_URL /
the user config file, and the response is rendered either as a small
table or, with --output json, byte-for-byte as the API returned it.
Exit codes: 0 success, 1 API or transport error, 2 usage error.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import httpx

from .config import load_flat_config
from .errors import InvalidInput

DEFAULT_URL = "http://127.0.0.1:8314"


def user_config() -> dict[str, str]:
    base = os.environ.get("XDG_CONFIG_HOME") or str(Path.home() / ".config")
    path = Path(base) / "saturn" / "cli.conf"
    if not path.is_file():
        return {}
    try:
        return load_flat_config(path)
    except InvalidInput as exc:
        raise click.ClickException(f"bad config file {path}: {exc.message}")


class Session:
    def __init__(self, url: str | None, token: str | None, output: str):
        file_cfg = user_config()
        self.url = url or file_cfg.get("url") or DEFAULT_URL
        self.token = token or file_cfg.get("token")
        self.output = output

    def _client(self) -> httpx.Client:
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return httpx.Client(base_url=self.url, headers=headers, timeout=60.0)

    def call(self, method: str, path: str, json_body=None,
             content: bytes | None = None, params=None) -> httpx.Response:
        try:
            with self._client() as client:
                resp = client.request(method, path, json=json_body,
                                      content=content, params=params)
        except httpx.HTTPError as exc:
            # never include headers in the message, the token lives there
            click.echo(f"error: cannot reach {self.url}: "
                       f"{exc.__class__.__name__}", err=True)
            sys.exit(1)
        if resp.status_code >= 400:
            if self.output == "json":
                click.echo(resp.text)
            else:
                try:
                    err = resp.json()["error"]
                    click.echo(f"error [{err['code']}]: {err['message']}",
                               err=True)
                except (ValueError, KeyError):
                    click.echo(f"error: HTTP {resp.status_code}", err=True)
            sys.exit(1)
        return resp

    def emit(self, resp: httpx.Response, render=None) -> None:
        if self.output == "json":
            click.echo(resp.text)
            return
        body = resp.json()
        if render is not None:
            render(body)
        else:
            click.echo(json.dumps(body, indent=2, sort_keys=True))


pass_session = click.make_pass_decorator(Session)


def show_table(rows: list[dict], columns: list[str]) -> None:
    if not rows:
        click.echo("(none)")
        return
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells))
              for i, c in enumerate(columns)]
    click.echo("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for row in cells:
        click.echo("  ".join(v.ljust(w) for v, w in zip(row, widths)))


def show_doc(doc: dict) -> None:
    for key, value in doc.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        click.echo(f"{key}: {value}")


def parse_floats(text: str, option: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise click.UsageError(f"{option} must be comma-separated numbers")


def parse_ints(text: str, option: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise click.UsageError(f"{option} must be comma-separated integers")


@click.group()
@click.option("--url", envvar="SATURN_URL", default=None,
              help="API base URL (default from config file, then localhost).")
@click.option("--token", envvar="SATURN_TOKEN", default=None,
              help="Bearer token; never printed.")
@click.option("--output", type=click.Choice(["table", "json"]),
              default="table", show_default=True)
@click.pass_context
def main(ctx, url, token, output):
    """Client for a running control-plane server."""
    ctx.obj = Session(url, token, output)


# -- model ------------------------------------------------------------

@main.group()
def model():
    """Registry operations."""


@model.command("register")
@click.option("--name", required=True)
@click.option("--modality", required=True)
@click.option("--owner", required=True)
@pass_session
def model_register(session, name, modality, owner):
    resp = session.call("POST", "/v1/models",
                        {"name": name, "modality": modality, "owner": owner})
    session.emit(resp, show_doc)


@model.command("list")
@pass_session
def model_list(session):
    resp = session.call("GET", "/v1/models")
    session.emit(resp, lambda body: show_table(
        body, ["model_id", "name", "modality", "owner"]))


@model.command("promote")
@click.argument("version_id")
@click.option("--to", "stage", required=True, help="Target stage.")
@click.option("--report", "report_path", type=click.Path(exists=True),
              help="JSON validation report to attach.")
@pass_session
def model_promote(session, version_id, stage, report_path):
    body = {"to": stage}
    if report_path:
        try:
            body["report"] = json.loads(Path(report_path).read_text())
        except ValueError:
            raise click.UsageError(f"{report_path} is not valid JSON")
    resp = session.call("POST", f"/v1/versions/{version_id}/transition", body)
    session.emit(resp, lambda doc: click.echo(
        f"{doc['version_id']} -> {doc['stage']}"))


@model.command("lineage")
@click.argument("version_id")
@pass_session
def model_lineage(session, version_id):
    resp = session.call("GET", f"/v1/versions/{version_id}/lineage")
    session.emit(resp, lambda body: show_table(
        body, ["version_id", "stage", "parent_version", "artifact_digest"]))


# -- emb --------------------------------------------------------------

@main.group()
def emb():
    """Embedding collection operations."""


@emb.command("create")
@click.argument("collection")
@click.option("--dim", type=int, required=True)
@click.option("--metric", type=click.Choice(["cosine", "euclidean", "dot"]),
              default="cosine", show_default=True)
@pass_session
def emb_create(session, collection, dim, metric):
    resp = session.call("POST", "/v1/collections",
                        {"name": collection, "dim": dim, "metric": metric})
    session.emit(resp, show_doc)


@emb.command("put")
@click.argument("collection")
@click.argument("key")
@click.argument("vector")
@click.option("--tags", default="", help="Comma-separated tags.")
@pass_session
def emb_put(session, collection, key, vector, tags):
    body = {
        "vector": parse_floats(vector, "vector"),
        "tags": [t for t in tags.split(",") if t],
    }
    resp = session.call(
        "PUT", f"/v1/collections/{collection}/embeddings/{key}", body)
    session.emit(resp, show_doc)


@emb.command("get")
@click.argument("collection")
@click.argument("key")
@pass_session
def emb_get(session, collection, key):
    resp = session.call(
        "GET", f"/v1/collections/{collection}/embeddings/{key}")
    session.emit(resp, show_doc)


@emb.command("search")
@click.argument("collection")
@click.option("--vector", required=True)
@click.option("-k", "top_k", default=10, show_default=True)
@click.option("--mode", type=click.Choice(["exact", "ann"]), default="exact",
              show_default=True)
@click.option("--tags", default="", help="Comma-separated tag filter.")
@pass_session
def emb_search(session, collection, vector, top_k, mode, tags):
    body = {
        "vector": parse_floats(vector, "--vector"),
        "k": top_k,
        "mode": mode,
        "tags": [t for t in tags.split(",") if t],
    }
    resp = session.call("POST", f"/v1/collections/{collection}/search", body)
    session.emit(resp, lambda out: show_table(
        out["results"], ["rank", "key", "score"]))


@emb.command("export")
@click.argument("collection")
@click.argument("path", type=click.Path(dir_okay=False, writable=True))
@pass_session
def emb_export(session, collection, path):
    resp = session.call("GET", f"/v1/collections/{collection}/export")
    Path(path).write_bytes(resp.content)
    click.echo(f"wrote {path} ({len(resp.content)} bytes)")


@emb.command("import")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--name", required=True, help="Target collection name.")
@pass_session
def emb_import(session, path, name):
    resp = session.call("POST", "/v1/collections/import",
                        content=Path(path).read_bytes(),
                        params={"name": name})
    session.emit(resp, show_doc)


@emb.command("index")
@click.argument("collection")
@click.option("--seed", default=0, show_default=True)
@pass_session
def emb_index(session, collection, seed):
    resp = session.call("POST", f"/v1/collections/{collection}/index",
                        {"seed": seed})
    session.emit(resp, show_doc)


# -- pipeline ---------------------------------------------------------

@main.group()
def pipeline():
    """Training pipeline operations."""


@pipeline.command("trigger")
@click.option("--kind", type=click.Choice(["commit", "manual"]),
              required=True)
@click.option("--ref", help="Commit hash (kind=commit).")
@click.option("--spec", "spec_path", required=True,
              help="TrainingSpec path on the server host.")
@click.option("--key", help="Idempotency key (kind=manual).")
@pass_session
def pipeline_trigger(session, kind, ref, spec_path, key):
    body = {"kind": kind, "spec_path": spec_path}
    if kind == "commit":
        if not ref:
            raise click.UsageError("--ref is required for kind=commit")
        body["commit"] = ref
    elif key:
        body["key"] = key
    resp = session.call("POST", "/v1/pipeline/triggers", body)

    def render(out):
        note = "  (duplicate trigger, run already exists)" \
            if out["duplicate"] else ""
        click.echo(f"{out['run_id']}{note}")

    session.emit(resp, render)


@pipeline.command("runs")
@click.option("--kind")
@click.option("--status")
@pass_session
def pipeline_runs(session, kind, status):
    params = {}
    if kind:
        params["kind"] = kind
    if status:
        params["status"] = status
    resp = session.call("GET", "/v1/pipeline/runs", params=params)
    session.emit(resp, lambda body: show_table(
        body, ["run_id", "kind", "status", "produced_version"]))


@pipeline.command("show")
@click.argument("run_id")
@pass_session
def pipeline_show(session, run_id):
    resp = session.call("GET", f"/v1/pipeline/runs/{run_id}")

    def render(run):
        click.echo(f"run: {run['run_id']}  kind: {run['kind']}  "
                   f"status: {run['status']}")
        show_table(run["stages"], ["name", "status", "error", "note"])
        for line in run["logs"]:
            click.echo(f"  {line}")

    session.emit(resp, render)


# -- monitor ----------------------------------------------------------

@main.group()
def monitor():
    """Drift monitor operations."""


@monitor.command("freeze")
@click.argument("endpoint_id")
@click.option("--force", is_flag=True, default=False)
@pass_session
def monitor_freeze(session, endpoint_id, force):
    resp = session.call("POST", f"/v1/monitor/{endpoint_id}/freeze",
                        {"force": force})
    session.emit(resp, lambda doc: click.echo(
        f"frozen {doc['endpoint_id']}: {doc['sample_count']} samples"))


@monitor.command("reports")
@click.argument("endpoint_id")
@pass_session
def monitor_reports(session, endpoint_id):
    resp = session.call("GET", f"/v1/monitor/{endpoint_id}/reports")

    def render(body):
        rows = [
            {
                "report_id": r["report_id"],
                "verdict": r["verdict"],
                "max_psi": f"{r['max_psi']:.4f}",
                "samples": r["window"]["count"],
            }
            for r in body
        ]
        show_table(rows, ["report_id", "verdict", "max_psi", "samples"])

    session.emit(resp, render)


# -- feedback ---------------------------------------------------------

@main.group()
def feedback():
    """Preference feedback operations."""


@feedback.command("rank")
@click.option("--prompt", "prompt_id", required=True)
@click.option("--labeler", "labeler_id", required=True)
@click.option("--candidates", "candidates_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON file with the candidate list.")
@click.option("--ranking", required=True,
              help="Comma-separated candidate indexes, best first.")
@pass_session
def feedback_rank(session, prompt_id, labeler_id, candidates_path, ranking):
    try:
        candidates = json.loads(Path(candidates_path).read_text())
    except ValueError:
        raise click.UsageError(f"{candidates_path} is not valid JSON")
    body = {
        "prompt_id": prompt_id,
        "labeler_id": labeler_id,
        "candidates": candidates,
        "ranking": parse_ints(ranking, "--ranking"),
    }
    resp = session.call("POST", "/v1/feedback/rankings", body)
    session.emit(resp, lambda doc: click.echo(doc["record_id"]))


@feedback.command("fit")
@click.option("--prefix", default="", help="Prompt id prefix filter.")
@click.option("--l2", type=float)
@click.option("--lr", type=float)
@click.option("--iters", "max_iters", type=int)
@pass_session
def feedback_fit(session, prefix, l2, lr, max_iters):
    body = {"prompt_prefix": prefix}
    if l2 is not None:
        body["l2"] = l2
    if lr is not None:
        body["lr"] = lr
    if max_iters is not None:
        body["max_iters"] = max_iters
    resp = session.call("POST", "/v1/feedback/reward-models", body)
    session.emit(resp, lambda doc: click.echo(
        f"{doc['model_id']}  comparisons: {doc['comparisons_count']}"))


# -- serve ------------------------------------------------------------

@main.group()
def serve():
    """Serving endpoint operations."""


@serve.command("create")
@click.option("--version", "version_id", required=True)
@click.option("--route", required=True)
@pass_session
def serve_create(session, version_id, route):
    resp = session.call("POST", "/v1/endpoints",
                        {"version_id": version_id, "route": route})
    session.emit(resp, show_doc)


@serve.command("infer")
@click.argument("route")
@click.option("--tokens", help="Whitespace-separated token string.")
@click.option("--features", help="Comma-separated feature values.")
@pass_session
def serve_infer(session, route, tokens, features):
    if (tokens is None) == (features is None):
        raise click.UsageError("pass exactly one of --tokens / --features")
    if tokens is not None:
        body = {"tokens": tokens.split()}
    else:
        body = {"features": parse_floats(features, "--features")}
    resp = session.call("POST", f"/v1/infer/{route}", body)
    session.emit(resp, lambda out: click.echo(
        f"prediction: {out['prediction']:.6f}  "
        f"version: {out['model_version']}"))


@serve.command("rebind")
@click.argument("endpoint_id")
@click.option("--version", "version_id", required=True)
@pass_session
def serve_rebind(session, endpoint_id, version_id):
    resp = session.call("POST", f"/v1/endpoints/{endpoint_id}/rebind",
                        {"version_id": version_id})
    session.emit(resp, show_doc)


if __name__ == "__main__":
    main()
