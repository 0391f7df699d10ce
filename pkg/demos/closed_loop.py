"""Walk the whole platform loop in one sitting.

Trains a tiny embedder, fine-tunes a classifier through the pipeline,
deploys it, then shifts the traffic until the monitor notices and the
orchestrator retrains and rebinds. Everything runs in-process against a
throwaway data root; pass a directory to keep the artifacts around.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from saturn import modelkit
from saturn.platform import Platform


def main(argv):
    if len(argv) > 1:
        root = Path(argv[1])
    else:
        root = Path(tempfile.mkdtemp(prefix="saturn-demo-"))
    print(f"data root: {root}")
    platform = Platform(root)

    print("\n-- seed models --")
    docs = ["good great fine lovely", "great lovely good fine",
            "bad awful poor dreadful", "awful poor bad dreadful"]
    emb = modelkit.pretrain_embedder(modelkit.corpus_from_texts(docs),
                                     k=3, w=2, seed=7)
    emb_digest = platform.blobs.put(emb.to_bytes()).digest
    clf = modelkit.finetune_on_features(
        [[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]], [1, 0], emb_digest)
    clf_digest = platform.blobs.put(clf.to_bytes()).digest
    model = platform.registry.register_model("demo", "tabular", "demo")
    parent = platform.registry.create_version(model["model_id"], clf_digest)
    print(f"registered {model['model_id']}, seed version {parent['version_id']}")

    print("\n-- pipeline run from a commit trigger --")
    rng = np.random.default_rng(123)
    rows = []
    for i in range(150):
        label = i % 2
        center = 2.0 if label else -2.0
        vec = rng.normal(center, 0.5, 3)
        rows.append(f"{label}\t{','.join(repr(float(x)) for x in vec)}")
    dataset = root / "labeled.tsv"
    dataset.write_text("\n".join(rows) + "\n")
    spec = root / "train.conf"
    spec.write_text(
        f"task=finetune\nmodel_id={model['model_id']}\n"
        f"parent_version={parent['version_id']}\n"
        f"dataset={dataset}\ndeploy_route=demo\nhp.seed=11\n")
    out = platform.orchestrator.submit_trigger(
        "commit", {"commit": "c0ffee01", "spec_path": str(spec)})
    platform.orchestrator.process_queue()
    run = platform.orchestrator.get_run(out["run_id"])
    deployed = run["produced_version"]
    vdoc = platform.registry.get_version(deployed)
    print(f"run {run['run_id']}: {run['status']}")
    print(f"deployed {deployed} at stage {vdoc['stage']}, "
          f"accuracy {vdoc['validation']['metrics']['accuracy']:.3f}")

    print("\n-- serve traffic, then drift it --")
    for _ in range(500):
        platform.serving.infer(
            "demo", {"features": [float(x) for x in rng.normal(0.0, 1.0, 3)]})
    print("500 in-distribution requests served")
    for _ in range(500):
        vec = rng.normal(0.0, 1.0, 3) + 3.0
        platform.serving.infer("demo", {"features": [float(x) for x in vec]})
    print("500 shifted requests served")

    events = platform.monitor.events()
    for event in events:
        print(f"monitor event {event['event_id']}: verdict={event['verdict']} "
              f"max_psi={event['max_psi']:.3f}")

    print("\n-- continuous training picks up the event --")
    platform.orchestrator.process_queue()
    ct = platform.orchestrator.list_runs(kind="drift")[0]
    new_doc = platform.registry.get_version(ct["produced_version"])
    endpoint = platform.serving.endpoint_for_route("demo")
    print(f"retraining run {ct['run_id']}: {ct['status']}")
    print(f"new version {ct['produced_version']} "
          f"(parent {new_doc['parent_version']})")
    print(f"route 'demo' now bound to {endpoint.bound_version}")

    platform.close()
    print("\ndone")
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv))
