"""Preference feedback: human rankings over candidate outputs, their
pairwise expansion, and linear reward-model fitting.

A ranking of n candidates expands into all n(n-1)/2 ordered pairs.  The
reward model is linear in the candidate features and fit by full-batch
gradient descent on the pairwise logistic loss, which keeps the problem
convex and the result deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import json
import numpy as np
from scipy.special import expit

from .errors import InvalidInput, NotFound
from .ids import digest_of, make_id
from .registry import BlobStore
from .storage import Database

REWARD_L2 = 1e-3
REWARD_LR = 0.05
REWARD_ITERS = 2000
REWARD_TOL = 1e-8


@dataclass
class FeedbackRecord:
    record_id: str
    prompt_id: str
    candidates: list[dict]          # {candidate_id, feature_vector}
    ranking: list[int]              # candidate indices, best first
    labeler_id: str
    submitted_at: float

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "prompt_id": self.prompt_id,
            "candidates": self.candidates,
            "ranking": list(self.ranking),
            "labeler_id": self.labeler_id,
            "submitted_at": self.submitted_at,
        }


@dataclass
class PairwiseComparison:
    winner_features: list[float]
    loser_features: list[float]
    record_id: str


@dataclass
class RewardModel:
    weights: list[float]
    fit_loss: float
    iterations_used: int
    comparisons_count: int
    l2_lambda: float

    def to_bytes(self) -> bytes:
        doc = {
            "kind": "reward-model",
            "weights": self.weights,
            "fit_loss": self.fit_loss,
            "iterations_used": self.iterations_used,
            "comparisons_count": self.comparisons_count,
            "l2_lambda": self.l2_lambda,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RewardModel":
        doc = json.loads(raw)
        if doc.get("kind") != "reward-model":
            raise InvalidInput("blob is not a reward model")
        return cls(
            weights=doc["weights"],
            fit_loss=doc["fit_loss"],
            iterations_used=doc["iterations_used"],
            comparisons_count=doc["comparisons_count"],
            l2_lambda=doc["l2_lambda"],
        )

    def digest(self) -> str:
        return digest_of(self.to_bytes())


def _validate_record(record: FeedbackRecord) -> int:
    if len(record.candidates) < 2:
        raise InvalidInput("need at least 2 candidates to rank")
    if sorted(record.ranking) != list(range(len(record.candidates))):
        raise InvalidInput("ranking must be a permutation of candidate indices")
    dims = {len(c["feature_vector"]) for c in record.candidates}
    if len(dims) != 1:
        raise InvalidInput("candidate feature vectors must share one dimension")
    (dim,) = dims
    if dim == 0:
        raise InvalidInput("feature vectors must be nonempty")
    for c in record.candidates:
        if not np.all(np.isfinite(np.asarray(c["feature_vector"], dtype=np.float64))):
            raise InvalidInput("feature vectors must be finite")
    return dim


def expand_ranking(record: FeedbackRecord) -> list[PairwiseComparison]:
    """All pairs implied by the ranking: [a, b, c] -> a>b, a>c, b>c."""
    _validate_record(record)
    pairs = []
    for i in range(len(record.ranking)):
        for j in range(i + 1, len(record.ranking)):
            winner = record.candidates[record.ranking[i]]
            loser = record.candidates[record.ranking[j]]
            pairs.append(PairwiseComparison(
                winner_features=list(winner["feature_vector"]),
                loser_features=list(loser["feature_vector"]),
                record_id=record.record_id,
            ))
    return pairs


def reward_loss_grad(weights, diffs, l2: float):
    """Mean pairwise logistic loss plus l2*||w||^2, with its gradient.

    diffs holds winner minus loser feature rows.  The data term is the
    mean over comparisons so the stated learning rate stays stable at
    any comparison count.
    """
    w = np.asarray(weights, dtype=np.float64)
    margins = diffs @ w
    loss = float(np.mean(np.logaddexp(0.0, -margins)) + l2 * w @ w)
    grad = -(expit(-margins) @ diffs) / len(diffs) + 2.0 * l2 * w
    return loss, grad


def fit_reward(comparisons, l2: float = REWARD_L2, lr: float = REWARD_LR,
               max_iters: int = REWARD_ITERS, tol: float = REWARD_TOL) -> RewardModel:
    if not comparisons:
        raise InvalidInput("need at least one comparison to fit")
    dims = {len(c.winner_features) for c in comparisons}
    dims |= {len(c.loser_features) for c in comparisons}
    if len(dims) != 1:
        raise InvalidInput("comparisons must share one feature dimension")
    diffs = np.array(
        [np.subtract(c.winner_features, c.loser_features) for c in comparisons],
        dtype=np.float64,
    )
    if not np.all(np.isfinite(diffs)):
        raise InvalidInput("comparison features must be finite")
    w = np.zeros(diffs.shape[1])
    used = 0
    loss, grad = reward_loss_grad(w, diffs, l2)
    for it in range(max_iters):
        if np.linalg.norm(grad) < tol:
            break
        w = w - lr * grad
        loss, grad = reward_loss_grad(w, diffs, l2)
        used = it + 1
    return RewardModel(
        weights=[float(x) for x in w],
        fit_loss=loss,
        iterations_used=used,
        comparisons_count=len(comparisons),
        l2_lambda=l2,
    )


def score(model: RewardModel, features) -> float:
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (len(model.weights),):
        raise InvalidInput(
            f"expected {len(model.weights)} features, got {x.shape}"
        )
    return float(np.asarray(model.weights) @ x)


class FeedbackStore:
    """Append-only ranking store with reward models kept as blobs."""

    NS_RECORDS = "feedback.records"
    NS_MODELS = "feedback.models"

    def __init__(self, db: Database, blobs: BlobStore):
        self.db = db
        self.blobs = blobs

    def submit_ranking(self, prompt_id: str, candidates: list[dict],
                       ranking: list[int], labeler_id: str) -> FeedbackRecord:
        if not prompt_id:
            raise InvalidInput("prompt_id must be nonempty")
        record = FeedbackRecord(
            record_id="",
            prompt_id=prompt_id,
            candidates=candidates,
            ranking=list(ranking),
            labeler_id=labeler_id,
            submitted_at=time.time(),
        )
        _validate_record(record)
        with self.db.transaction() as cur:
            row = cur.execute(
                "SELECT COUNT(*) FROM kv WHERE ns = ?", (self.NS_RECORDS,)
            ).fetchone()
            record.record_id = make_id("fb", prompt_id, labeler_id, row[0])
            cur.execute(
                "INSERT OR REPLACE INTO kv (ns, k, v) VALUES (?, ?, ?)",
                (self.NS_RECORDS, record.record_id,
                 json.dumps(record.to_dict(), sort_keys=True)),
            )
        return record

    def get_record(self, record_id: str) -> FeedbackRecord:
        doc = self.db.get(self.NS_RECORDS, record_id)
        if doc is None:
            raise NotFound(f"no feedback record {record_id!r}")
        return FeedbackRecord(**doc)

    def comparisons(self, prompt_prefix: str = "") -> list[PairwiseComparison]:
        out = []
        for _, doc in self.db.scan(self.NS_RECORDS):
            if not doc["prompt_id"].startswith(prompt_prefix):
                continue
            out.append(FeedbackRecord(**doc))
        out.sort(key=lambda r: (r.submitted_at, r.record_id))
        pairs = []
        for record in out:
            pairs.extend(expand_ranking(record))
        return pairs

    def fit_from_records(self, prompt_prefix: str = "", l2: float = REWARD_L2,
                         lr: float = REWARD_LR, max_iters: int = REWARD_ITERS,
                         tol: float = REWARD_TOL) -> tuple[str, RewardModel]:
        pairs = self.comparisons(prompt_prefix)
        if not pairs:
            raise InvalidInput(
                f"no comparisons match prompt prefix {prompt_prefix!r}"
            )
        model = fit_reward(pairs, l2=l2, lr=lr, max_iters=max_iters, tol=tol)
        digest = self.blobs.put(model.to_bytes()).digest
        model_id = make_id("rw", digest)
        self.db.put(self.NS_MODELS, model_id, {
            "model_id": model_id,
            "digest": digest,
            "prompt_prefix": prompt_prefix,
            "l2_lambda": l2,
            "learning_rate": lr,
            "comparisons_count": model.comparisons_count,
            "created_at": time.time(),
        })
        return model_id, model

    def get_model(self, model_id: str) -> tuple[dict, RewardModel]:
        entry = self.db.get(self.NS_MODELS, model_id)
        if entry is None:
            raise NotFound(f"no reward model {model_id!r}")
        model = RewardModel.from_bytes(self.blobs.get(entry["digest"]))
        return entry, model
