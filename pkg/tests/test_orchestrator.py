import numpy as np
import pytest

from saturn import modelkit
from saturn.errors import Conflict, InvalidInput
from saturn.monitor import Monitor
from saturn.orchestrator import (
    Orchestrator,
    load_labeled_dataset,
    parse_feature_row,
    split_rows,
)
from saturn.registry import REJECTED, S3, S4, S5, BlobStore, Registry
from saturn.serving import ServingLayer
from saturn.storage import Database

# two disjoint vocabularies, so a tiny embedder separates the classes
POS_DOCS = [
    "good great fine lovely good",
    "great lovely good fine",
    "fine good great lovely great",
    "lovely fine great good",
    "superb good lovely fine superb",
    "great superb fine lovely",
    "good superb great fine good",
    "lovely superb good great",
]
NEG_DOCS = [
    "bad awful poor dreadful bad",
    "awful poor bad dreadful",
    "poor bad awful dreadful awful",
    "dreadful poor bad awful",
    "dire bad poor awful dire",
    "awful dire poor bad",
    "bad dire awful poor bad",
    "dreadful dire bad awful",
]


class Stand:
    """A full pipeline stand on temporary storage."""

    def __init__(self, tmp_path):
        self.root = tmp_path
        self.db = Database(tmp_path / "kv.sqlite3")
        self.blobs = BlobStore(tmp_path / "blobs", self.db)
        self.registry = Registry(self.db, self.blobs)
        self.monitor = Monitor(self.db)
        self.serving = ServingLayer(self.db, self.registry, self.monitor)
        self.orch = Orchestrator(
            self.db, self.registry, self.serving, self.monitor,
            root=tmp_path,
        )
        self.model = self.registry.register_model("router", "text", "ops")

    def write(self, name: str, text: str) -> str:
        path = self.root / name
        path.write_text(text, encoding="utf-8")
        return str(path)

    def spec_file(self, name: str, entries: dict) -> str:
        lines = [f"{k}={v}" for k, v in entries.items()]
        return self.write(name, "\n".join(lines) + "\n")

    def corpus_file(self) -> str:
        return self.write("corpus.txt", "\n".join(POS_DOCS + NEG_DOCS) + "\n")

    def text_dataset(self, name="labeled.tsv") -> str:
        rows = []
        for pos, neg in zip(POS_DOCS, NEG_DOCS):
            rows.append(f"1\t{pos}")
            rows.append(f"0\t{neg}")
        return self.write(name, "\n".join(rows) + "\n")

    def feature_dataset(self, name, rng, n=60, dim=3, flip_first_held=False,
                        group_by_label=False) -> str:
        rows = []
        for i in range(n):
            label = i % 2
            center = 2.0 if label else -2.0
            feats = rng.normal(center, 0.5, size=dim)
            if flip_first_held and i == 4:
                label = 1 - label
            cells = [str(label)]
            if group_by_label:
                cells.append("a" if i % 2 else "b")
            cells.append(",".join(repr(float(f)) for f in feats))
            rows.append("\t".join(cells))
        return self.write(name, "\n".join(rows) + "\n")

    def pretrained_version(self, k=3) -> str:
        """An embedder version resting at S3, parent for fine-tunes."""
        corpus = modelkit.load_corpus(self.corpus_file())
        artifact = modelkit.pretrain_embedder(corpus, k=k, w=2, seed=5)
        digest = self.blobs.put(artifact.to_bytes()).digest
        version = self.registry.create_version(self.model["model_id"], digest)
        self.registry.transition_stage(version["version_id"], S3)
        return version["version_id"]

    def classifier_version(self) -> str:
        """A released classifier; feature fine-tunes hang off this."""
        parent = self.pretrained_version()
        spec = self.spec_file("seed.cfg", {
            "task": "finetune",
            "model_id": self.model["model_id"],
            "parent_version": parent,
            "dataset": self.text_dataset("seed-labeled.tsv"),
        })
        run_id = self.submit("commit", {"commit": "seed0001", "spec_path": spec})
        run = self.orch.execute_run(run_id)
        assert run["status"] == "succeeded" and not run["rejected"]
        return run["produced_version"]

    def submit(self, kind, payload) -> str:
        return self.orch.submit_trigger(kind, payload)["run_id"]


@pytest.fixture
def stand(tmp_path):
    return Stand(tmp_path)


# -- dataset plumbing ---------------------------------------------------

def test_labeled_dataset_rows(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("1\thello world\n\n0\t3.0,4.0\n", encoding="utf-8")
    rows = load_labeled_dataset(path)
    assert rows == [(1, None, "hello world"), (0, None, "3.0,4.0")]


def test_labeled_dataset_with_groups(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("1\tg1\tsome text\n0\tg2\tother text\n", encoding="utf-8")
    assert load_labeled_dataset(path) == [
        (1, "g1", "some text"), (0, "g2", "other text"),
    ]


@pytest.mark.parametrize("body", [
    "",
    "2\ttext\n",
    "1\ta\tb\tc\td\n",
    "1\tg1\tgrouped\n0\tplain\n",
])
def test_malformed_datasets_rejected(tmp_path, body):
    path = tmp_path / "bad.tsv"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(InvalidInput):
        load_labeled_dataset(path)


def test_feature_row_parsing():
    assert parse_feature_row("1.5,-2.0,0.25") == [1.5, -2.0, 0.25]
    with pytest.raises(InvalidInput):
        parse_feature_row("not,numbers")
    with pytest.raises(InvalidInput):
        parse_feature_row("1.0,inf")


def test_split_keeps_every_fifth_row_out():
    train, held = split_rows(list(range(23)))
    assert held == [4, 9, 14, 19]
    assert len(train) + len(held) == 23
    assert set(train).isdisjoint(held)


# -- trigger intake -----------------------------------------------------

def test_commit_trigger_creates_pending_run(stand):
    parent = stand.pretrained_version()
    rng = np.random.default_rng(1)
    spec = stand.spec_file("t.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.feature_dataset("f.tsv", rng),
    })
    out = stand.orch.submit_trigger(
        "commit", {"commit": "abc123", "spec_path": spec})
    assert out["duplicate"] is False
    run = stand.orch.get_run(out["run_id"])
    assert run["trigger_id"] == "commit:abc123"
    assert run["status"] == "pending"
    assert [s["name"] for s in run["stages"]] == [
        "TRAIN", "VALIDATE", "REGISTER", "DEPLOY"]
    assert all(s["status"] == "pending" for s in run["stages"])


def test_duplicate_commit_trigger_returns_first_run(stand):
    parent = stand.pretrained_version()
    rng = np.random.default_rng(1)
    spec = stand.spec_file("t.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.feature_dataset("f.tsv", rng),
    })
    first = stand.orch.submit_trigger(
        "commit", {"commit": "abc123", "spec_path": spec})
    second = stand.orch.submit_trigger(
        "commit", {"commit": "abc123", "spec_path": spec})
    assert second == {"run_id": first["run_id"], "duplicate": True}
    assert len(stand.orch.list_runs()) == 1


def test_manual_triggers_without_key_are_distinct(stand):
    parent = stand.pretrained_version()
    rng = np.random.default_rng(1)
    spec = stand.spec_file("t.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.feature_dataset("f.tsv", rng),
    })
    a = stand.orch.submit_trigger("manual", {"spec_path": spec})
    b = stand.orch.submit_trigger("manual", {"spec_path": spec})
    assert a["run_id"] != b["run_id"]
    c = stand.orch.submit_trigger("manual", {"spec_path": spec, "key": "k1"})
    d = stand.orch.submit_trigger("manual", {"spec_path": spec, "key": "k1"})
    assert d == {"run_id": c["run_id"], "duplicate": True}


def test_retrigger_storm_yields_one_run_per_key(stand):
    # each key submitted twice, interleaved; exactly one run may exist per key
    parent = stand.pretrained_version()
    rng = np.random.default_rng(1)
    spec = stand.spec_file("t.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.feature_dataset("f.tsv", rng),
    })
    first_runs = {}
    for wave in range(2):
        for i in range(200):
            out = stand.orch.submit_trigger(
                "manual", {"spec_path": spec, "key": f"case-{i:03d}"})
            if wave == 0:
                assert out["duplicate"] is False
                first_runs[i] = out["run_id"]
            else:
                assert out == {"run_id": first_runs[i], "duplicate": True}
    assert len(stand.orch.list_runs()) == 200


def test_trigger_validation_failures(stand):
    parent = stand.pretrained_version()
    rng = np.random.default_rng(1)
    dataset = stand.feature_dataset("f.tsv", rng)
    good = {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": dataset,
    }
    cases = [
        {**good, "task": "transmogrify"},
        {**good, "model_id": "m-nope"},
        {**good, "parent_version": "v-nope"},
        {**good, "dataset": str(stand.root / "missing.tsv")},
        {**good, "gate.min_accuracy": "1.5"},
        {**good, "hp.k": "-2"},
        {**good, "frobnicate": "yes"},
    ]
    for i, entries in enumerate(cases):
        spec = stand.spec_file(f"bad{i}.cfg", entries)
        with pytest.raises(InvalidInput):
            stand.orch.submit_trigger("manual", {"spec_path": spec})
    with pytest.raises(InvalidInput):
        stand.orch.submit_trigger("cron", {"spec_path": "x"})
    with pytest.raises(InvalidInput):
        stand.orch.submit_trigger("commit", {"spec_path": "x"})
    assert stand.orch.list_runs() == []


def test_parent_version_must_match_model(stand):
    parent = stand.pretrained_version()
    other = stand.registry.register_model("other", "text", "ops")
    rng = np.random.default_rng(1)
    spec = stand.spec_file("t.cfg", {
        "task": "finetune",
        "model_id": other["model_id"],
        "parent_version": parent,
        "dataset": stand.feature_dataset("f.tsv", rng),
    })
    with pytest.raises(InvalidInput, match="belongs to"):
        stand.orch.submit_trigger("manual", {"spec_path": spec})


# -- run execution ------------------------------------------------------

def test_pretrain_without_probe_rests_at_s3(stand):
    spec = stand.spec_file("pre.cfg", {
        "task": "pretrain",
        "model_id": stand.model["model_id"],
        "dataset": stand.corpus_file(),
        "hp.k": "3",
    })
    run_id = stand.submit("commit", {"commit": "c1", "spec_path": spec})
    run = stand.orch.execute_run(run_id)
    assert run["status"] == "succeeded"
    names = {s["name"]: s["status"] for s in run["stages"]}
    assert names == {"TRAIN": "succeeded", "VALIDATE": "succeeded",
                     "REGISTER": "succeeded", "DEPLOY": "skipped"}
    deploy = run["stages"][3]
    assert deploy["note"] == "no validation report"
    version = stand.registry.get_version(run["produced_version"])
    assert version["stage"] == S3
    assert version["parent_version"] is None
    assert version["artifact_digest"] == run["context"]["train_digest"]
    assert run["context"]["report"] is None


def test_pretrain_with_probe_reaches_s4(stand):
    spec = stand.spec_file("pre.cfg", {
        "task": "pretrain",
        "model_id": stand.model["model_id"],
        "dataset": stand.corpus_file(),
        "eval_dataset": stand.text_dataset(),
        "hp.k": "3",
        "gate.min_accuracy": "0.6",
        "gate.min_auc": "0.6",
    })
    run_id = stand.submit("commit", {"commit": "c1", "spec_path": spec})
    run = stand.orch.execute_run(run_id)
    assert run["status"] == "succeeded"
    report = run["context"]["report"]
    assert report["passed"] is True
    assert report["metrics"]["accuracy"] >= 0.6
    assert stand.registry.get_version(run["produced_version"])["stage"] == S4
    # no deploy_route, so the released version is not pushed anywhere
    assert run["stages"][3]["note"] == "no deploy target"


def test_finetune_deploys_to_route(stand):
    parent = stand.pretrained_version()
    spec = stand.spec_file("ft.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.text_dataset(),
        "deploy_route": "router",
        "gate.min_accuracy": "0.6",
        "gate.min_auc": "0.6",
    })
    run_id = stand.submit("commit", {"commit": "c2", "spec_path": spec})
    run = stand.orch.execute_run(run_id)
    assert run["status"] == "succeeded"
    assert all(s["status"] == "succeeded" for s in run["stages"])
    version = stand.registry.get_version(run["produced_version"])
    assert version["stage"] == S5
    assert version["parent_version"] == parent
    endpoint = stand.serving.endpoint_for_route("router")
    assert endpoint is not None
    assert endpoint.bound_version == run["produced_version"]
    out = stand.serving.infer("router", {"tokens": ["great", "food"]})
    assert out["model_version"] == run["produced_version"]
    assert out["prediction"] > 0.5


def test_stage_timestamps_are_ordered(stand):
    parent = stand.pretrained_version()
    spec = stand.spec_file("ft.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.text_dataset(),
    })
    run = stand.orch.execute_run(
        stand.submit("commit", {"commit": "c3", "spec_path": spec}))
    done = [s for s in run["stages"] if s["status"] == "succeeded"]
    for stage in done:
        assert stage["started_at"] <= stage["finished_at"]
    for earlier, later in zip(done, done[1:]):
        assert earlier["finished_at"] <= later["started_at"]


def test_gate_failure_rejects_version_and_skips_deploy(stand):
    parent = stand.classifier_version()
    rng = np.random.default_rng(7)
    dataset = stand.feature_dataset("f.tsv", rng, flip_first_held=True)
    spec = stand.spec_file("ft.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": dataset,
        "deploy_route": "router",
        "gate.min_accuracy": "1.0",
        "gate.min_auc": "0.0",
    })
    run = stand.orch.execute_run(
        stand.submit("commit", {"commit": "c4", "spec_path": spec}))
    # a gated-out version is a pipeline success, not a pipeline failure
    assert run["status"] == "succeeded"
    assert run["rejected"] is True
    report = run["context"]["report"]
    assert report["passed"] is False
    assert report["metrics"]["accuracy"] < 1.0
    assert stand.registry.get_version(run["produced_version"])["stage"] == REJECTED
    deploy = run["stages"][3]
    assert deploy["status"] == "skipped"
    assert deploy["note"] == "version rejected by gate"
    assert stand.serving.endpoint_for_route("router") is None


def test_fairness_gate_rejects_skewed_model(stand):
    parent = stand.classifier_version()
    rng = np.random.default_rng(9)
    dataset = stand.feature_dataset("f.tsv", rng, group_by_label=True)
    spec = stand.spec_file("ft.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": dataset,
        "gate.min_accuracy": "0.0",
        "gate.min_auc": "0.0",
        "gate.max_fairness_dpd": "0.1",
    })
    run = stand.orch.execute_run(
        stand.submit("commit", {"commit": "c5", "spec_path": spec}))
    report = run["context"]["report"]
    assert report["metrics"]["accuracy"] == 1.0
    assert report["fairness"]["dpd"] == 1.0
    assert report["passed"] is False
    assert run["rejected"] is True


def test_ungrouped_dataset_skips_fairness(stand):
    parent = stand.classifier_version()
    rng = np.random.default_rng(11)
    spec = stand.spec_file("ft.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.feature_dataset("f.tsv", rng),
    })
    run = stand.orch.execute_run(
        stand.submit("commit", {"commit": "c6", "spec_path": spec}))
    assert run["context"]["report"]["fairness"] is None
    assert run["context"]["report"]["passed"] is True


def test_vanished_dataset_fails_train_and_skips_rest(stand):
    parent = stand.pretrained_version()
    rng = np.random.default_rng(13)
    dataset = stand.feature_dataset("f.tsv", rng)
    spec = stand.spec_file("ft.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": dataset,
    })
    run_id = stand.submit("commit", {"commit": "c7", "spec_path": spec})
    (stand.root / "f.tsv").unlink()
    run = stand.orch.execute_run(run_id)
    assert run["status"] == "failed"
    statuses = [s["status"] for s in run["stages"]]
    assert statuses == ["failed", "skipped", "skipped", "skipped"]
    assert "InvalidInput" in run["stages"][0]["error"]
    assert all(s["note"] == "TRAIN failed" for s in run["stages"][1:])
    assert run["produced_version"] is None


def test_terminal_runs_cannot_be_stepped(stand):
    spec = stand.spec_file("pre.cfg", {
        "task": "pretrain",
        "model_id": stand.model["model_id"],
        "dataset": stand.corpus_file(),
        "hp.k": "3",
    })
    run_id = stand.submit("commit", {"commit": "c8", "spec_path": spec})
    stand.orch.execute_run(run_id)
    with pytest.raises(Conflict):
        stand.orch.run_next_stage(run_id)


def test_fresh_orchestrator_resumes_interrupted_run(stand):
    parent = stand.pretrained_version()
    spec = stand.spec_file("ft.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.text_dataset(),
        "deploy_route": "router",
        "gate.min_accuracy": "0.6",
        "gate.min_auc": "0.6",
    })
    run_id = stand.submit("commit", {"commit": "c9", "spec_path": spec})
    stand.orch.run_next_stage(run_id)
    stand.orch.run_next_stage(run_id)
    half_done = stand.orch.get_run(run_id)
    assert half_done["status"] == "running"
    digest = half_done["context"]["train_digest"]

    # the worker dies here; a new one picks the run off the database
    successor = Orchestrator(
        stand.db, stand.registry, stand.serving, stand.monitor,
        root=stand.root,
    )
    resumed = successor.recover()
    assert resumed == [run_id]
    run = successor.get_run(run_id)
    assert run["status"] == "succeeded"
    assert run["context"]["train_digest"] == digest
    version = stand.registry.get_version(run["produced_version"])
    assert version["artifact_digest"] == digest
    assert version["stage"] == S5


def test_register_does_not_double_create_on_replay(stand):
    spec = stand.spec_file("pre.cfg", {
        "task": "pretrain",
        "model_id": stand.model["model_id"],
        "dataset": stand.corpus_file(),
        "hp.k": "3",
    })
    run_id = stand.submit("commit", {"commit": "c10", "spec_path": spec})
    run = stand.orch.execute_run(run_id)
    versions_before = len(stand.registry.list_versions(stand.model["model_id"]))
    # force REGISTER back to pending, as if the worker died before the ack
    run["stages"][2]["status"] = "pending"
    run["stages"][3]["status"] = "pending"
    run["status"] = "running"
    stand.db.put(Orchestrator.NS_RUNS, run_id, run)
    replayed = stand.orch.execute_run(run_id)
    assert replayed["status"] == "succeeded"
    assert len(stand.registry.list_versions(stand.model["model_id"])) == versions_before


def test_list_runs_filters(stand):
    pre = stand.spec_file("pre.cfg", {
        "task": "pretrain",
        "model_id": stand.model["model_id"],
        "dataset": stand.corpus_file(),
        "hp.k": "3",
    })
    stand.orch.execute_run(stand.submit("commit", {"commit": "a", "spec_path": pre}))
    stand.submit("manual", {"spec_path": pre})
    assert len(stand.orch.list_runs()) == 2
    assert len(stand.orch.list_runs(kind="commit")) == 1
    assert len(stand.orch.list_runs(status="pending")) == 1
    assert stand.orch.list_runs(kind="drift") == []
    done = stand.orch.list_runs(kind="commit", status="succeeded")
    assert len(done) == 1


def test_process_queue_drains_pending_runs(stand):
    parent = stand.pretrained_version()
    spec = stand.spec_file("ft.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.text_dataset(),
    })
    ids = [stand.submit("manual", {"spec_path": spec}) for _ in range(3)]
    executed = stand.orch.process_queue()
    assert executed == ids  # oldest first
    assert all(stand.orch.get_run(r)["status"] == "succeeded" for r in ids)
    assert stand.orch.process_queue() == []


# -- the drift loop -----------------------------------------------------

def test_drift_event_retrains_and_rebinds(stand):
    parent = stand.pretrained_version(k=3)
    spec = stand.spec_file("ft.cfg", {
        "task": "finetune",
        "model_id": stand.model["model_id"],
        "parent_version": parent,
        "dataset": stand.text_dataset(),
        "deploy_route": "router",
        "gate.min_accuracy": "0.6",
        "gate.min_auc": "0.6",
    })
    first = stand.orch.execute_run(
        stand.submit("commit", {"commit": "d1", "spec_path": spec}))
    v_live = first["produced_version"]
    endpoint = stand.serving.endpoint_for_route("router")
    stand.monitor.event_sinks.append(stand.orch.handle_drift_event)

    rng = np.random.default_rng(23)
    for _ in range(100):
        stand.serving.infer(
            "router", {"features": list(rng.normal(0.0, 0.5, size=3))})
    # deploy armed the auto-freeze, so traffic alone froze the baseline
    assert stand.monitor.has_reference(endpoint.endpoint_id)
    assert stand.orch.list_runs(kind="drift") == []

    for _ in range(100):
        stand.serving.infer(
            "router", {"features": list(rng.normal(6.0, 0.5, size=3))})
    events = stand.monitor.events(endpoint.endpoint_id)
    assert len(events) == 1
    assert events[0]["verdict"] == "drift"

    queued = stand.orch.list_runs(kind="drift")
    assert len(queued) == 1
    ct = queued[0]
    assert ct["status"] == "pending"
    assert ct["spec"]["parent_version"] == v_live
    assert ct["spec"]["deploy_route"] == "router"
    assert ct["spec"]["gate.min_accuracy"] == "0.6"  # inherited from d1

    exported = load_labeled_dataset(ct["spec"]["dataset"])
    assert len(exported) == 200
    labels = [label for label, _, _ in exported]
    assert sorted(set(labels)) == [0, 1]
    assert sum(labels) == 100  # rank split halves the window
    assert all(len(parse_feature_row(p)) == 3 for _, _, p in exported)

    stand.orch.process_queue()
    ct = stand.orch.get_run(ct["run_id"])
    assert ct["status"] == "succeeded"
    v_new = ct["produced_version"]
    assert v_new != v_live
    version = stand.registry.get_version(v_new)
    assert version["parent_version"] == v_live
    assert version["stage"] == S5
    assert stand.serving.endpoint_for_route("router").bound_version == v_new
    # the retrained classifier still answers vocabulary queries
    out = stand.serving.infer("router", {"tokens": ["great", "food"]})
    assert out["model_version"] == v_new


def test_duplicate_drift_event_does_not_requeue(stand):
    rng = np.random.default_rng(29)
    v_live = stand.classifier_version()
    endpoint = stand.serving.create_endpoint(v_live, "scorer")
    stand.monitor.arm_auto_freeze(endpoint.endpoint_id)
    for _ in range(100):
        stand.serving.infer(
            "scorer", {"features": list(rng.normal(0.0, 0.5, size=3))})
    for _ in range(100):
        stand.serving.infer(
            "scorer", {"features": list(rng.normal(6.0, 0.5, size=3))})
    events = stand.monitor.events(endpoint.endpoint_id)
    assert len(events) == 1
    first = stand.orch.handle_drift_event(events[0])
    second = stand.orch.handle_drift_event(events[0])
    assert first["duplicate"] is False
    assert second == {"run_id": first["run_id"], "duplicate": True}
