"""Toy trainers that stand in for foundation models.

Pre-training is windowed PPMI over a text corpus followed by a rank-k
factorization via seeded orthogonal iteration; fine-tuning is zero-init
logistic regression over mean-pooled document embeddings.  Everything here
is a pure deterministic function of its inputs, which is what lets the
lifecycle machinery above it be tested end to end with exact expectations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .ids import digest_of

PRETRAIN_ITERS = 50
PRETRAIN_TOL = 1e-6
FINETUNE_LR = 0.1
FINETUNE_ITERS = 500
FINETUNE_L2 = 1e-4


def tokenize(text: str) -> list[str]:
    return text.casefold().split()


@dataclass
class Corpus:
    documents: list[list[str]]

    @property
    def total_tokens(self) -> int:
        return sum(len(d) for d in self.documents)


def corpus_from_texts(texts: list[str]) -> Corpus:
    return Corpus([tokenize(t) for t in texts])


def load_corpus(path: str) -> Corpus:
    """Read a corpus file: one document per line, whitespace-tokenized."""
    with open(path, "r", encoding="utf-8") as fh:
        return corpus_from_texts(fh.read().splitlines())


@dataclass
class EmbedderArtifact:
    vocabulary: dict[str, int]
    matrix: np.ndarray
    k: int
    w: int
    seed: int

    def to_bytes(self) -> bytes:
        vocab = sorted(self.vocabulary, key=self.vocabulary.get)
        doc = {
            "kind": "embedder",
            "k": self.k,
            "w": self.w,
            "seed": self.seed,
            "vocab": vocab,
            "matrix": [[float(x) for x in row] for row in self.matrix],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbedderArtifact":
        doc = json.loads(data)
        if doc.get("kind") != "embedder":
            raise InvalidInput("not an embedder artifact")
        matrix = np.asarray(doc["matrix"], dtype=np.float64)
        return cls(
            vocabulary={t: i for i, t in enumerate(doc["vocab"])},
            matrix=matrix,
            k=int(doc["k"]),
            w=int(doc["w"]),
            seed=int(doc["seed"]),
        )

    def digest(self) -> str:
        return digest_of(self.to_bytes())


@dataclass
class ClassifierArtifact:
    weights: np.ndarray
    bias: float
    parent: str

    def to_bytes(self) -> bytes:
        doc = {
            "kind": "classifier",
            "weights": [float(x) for x in self.weights],
            "bias": float(self.bias),
            "parent": self.parent,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClassifierArtifact":
        doc = json.loads(data)
        if doc.get("kind") != "classifier":
            raise InvalidInput("not a classifier artifact")
        return cls(
            weights=np.asarray(doc["weights"], dtype=np.float64),
            bias=float(doc["bias"]),
            parent=doc["parent"],
        )

    def digest(self) -> str:
        return digest_of(self.to_bytes())


@dataclass
class EvalMetrics:
    accuracy: float
    auc: float
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "sample_count": self.sample_count,
        }


def build_vocabulary(corpus: Corpus) -> dict[str, int]:
    tokens = sorted({t for doc in corpus.documents for t in doc})
    return {t: i for i, t in enumerate(tokens)}


def ppmi_matrix(corpus: Corpus, vocabulary: dict[str, int], w: int) -> np.ndarray:
    """Positive PMI over symmetric window-w co-occurrence.

    The directed count matrix (rows = left token) is averaged with its
    transpose so that independent tokens at w=1 land at PMI ~ 0 rather
    than ln 2; see the module tests for the counting oracle.
    """
    size = len(vocabulary)
    directed = np.zeros((size, size))
    unigram = np.zeros(size)
    for doc in corpus.documents:
        idx = np.array([vocabulary[t] for t in doc], dtype=np.intp)
        np.add.at(unigram, idx, 1.0)
        for s in range(1, w + 1):
            if len(idx) > s:
                np.add.at(directed, (idx[:-s], idx[s:]), 1.0)
    pair = (directed + directed.T) / 2.0
    total = float(corpus.total_tokens)
    expected = np.outer(unigram, unigram)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(expected > 0, pair * total / expected, 0.0)
        m = np.where(ratio > 0, np.log(ratio), 0.0)
    return np.maximum(m, 0.0)


def factorize(m: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-k symmetric factorization by seeded orthogonal iteration.

    Returns (q, b) with q an orthonormal |V|×k basis of the dominant
    invariant subspace and b = qᵀ m q, so q b qᵀ is the rank-k
    reconstruction.  Runs 50 iterations or until the Ritz values move
    by relative < 1e-6.
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((m.shape[0], k)))
    prev = None
    for _ in range(PRETRAIN_ITERS):
        z = m @ q
        q, r = np.linalg.qr(z)
        ritz = np.sort(np.abs(np.diag(r)))
        if prev is not None:
            denom = max(float(np.linalg.norm(ritz)), 1e-30)
            if float(np.linalg.norm(ritz - prev)) / denom < PRETRAIN_TOL:
                break
        prev = ritz
    b = q.T @ m @ q
    return q, b


def pretrain_embedder(corpus: Corpus, k: int, w: int, seed: int) -> EmbedderArtifact:
    """Pre-train a token embedder on an unannotated corpus.

    Embedding rows are the dominant eigendirections of the PPMI matrix
    scaled by sqrt of |eigenvalue|, the usual spectral recipe.
    """
    if w < 1 or k < 1:
        raise InvalidInput("k and w must be >= 1")
    if corpus.total_tokens < 1:
        raise InvalidInput("corpus is empty")
    vocabulary = build_vocabulary(corpus)
    if k > len(vocabulary):
        raise InvalidInput(f"k={k} exceeds vocabulary size {len(vocabulary)}")
    m = ppmi_matrix(corpus, vocabulary, w)
    q, b = factorize(m, k, seed)
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(-np.abs(evals))
    evals, evecs = evals[order], evecs[:, order]
    directions = q @ evecs
    # Canonical sign: largest-magnitude entry of each direction is positive.
    for j in range(directions.shape[1]):
        pivot = np.argmax(np.abs(directions[:, j]))
        if directions[pivot, j] < 0:
            directions[:, j] = -directions[:, j]
    matrix = directions * np.sqrt(np.abs(evals))
    if not np.all(np.isfinite(matrix)):
        raise InvalidInput("factorization produced non-finite embeddings")
    return EmbedderArtifact(vocabulary, matrix, k, w, seed)


def embed_document(artifact: EmbedderArtifact, tokens: list[str]) -> np.ndarray:
    """Mean of in-vocabulary token rows; OOV-only or empty input → zeros.

    Pooling weights are count/total per unique token, which keeps the
    result bit-identical under whole-document repetition.
    """
    counts: dict[int, int] = {}
    for tok in tokens:
        i = artifact.vocabulary.get(tok)
        if i is not None:
            counts[i] = counts.get(i, 0) + 1
    out = np.zeros(artifact.k)
    if not counts:
        return out
    total = sum(counts.values())
    for i in sorted(counts):
        out += (counts[i] / total) * artifact.matrix[i]
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss_grad(
    weights: np.ndarray,
    bias: float,
    x: np.ndarray,
    y: np.ndarray,
    l2: float = FINETUNE_L2,
) -> tuple[float, np.ndarray, float]:
    """Mean logistic loss with L2 weight penalty, plus its gradient."""
    z = x @ weights + bias
    # log(1+exp(-m)) for m = z on positives, -z on negatives; stable form.
    margins = np.where(y > 0.5, z, -z)
    loss = float(np.mean(np.logaddexp(0.0, -margins))) + l2 * float(weights @ weights)
    resid = _sigmoid(z) - y
    grad_w = x.T @ resid / len(y) + 2.0 * l2 * weights
    grad_b = float(np.mean(resid))
    return loss, grad_w, grad_b


def finetune_classifier(
    artifact: EmbedderArtifact,
    examples: list[tuple[list[str], int]],
) -> ClassifierArtifact:
    """Logistic fine-tune on mean-pooled embeddings.

    Full-batch gradient descent from zero init: lr 0.1, 500 iterations,
    L2 1e-4 on the weights.  Requires at least one example per class.
    """
    if not examples:
        raise InvalidInput("need at least one example of each label")
    x = np.stack([embed_document(artifact, toks) for toks, _ in examples])
    return finetune_on_features(x, [label for _, label in examples],
                                artifact.digest())


def finetune_on_features(features, labels, parent: str) -> ClassifierArtifact:
    """Same fine-tune loop over caller-supplied feature rows."""
    y = np.array([float(label) for label in labels])
    if set(np.unique(y)) != {0.0, 1.0}:
        raise InvalidInput("need at least one example of each label")
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(y):
        raise InvalidInput("features must be one row per label")
    weights = np.zeros(x.shape[1])
    bias = 0.0
    for _ in range(FINETUNE_ITERS):
        _, grad_w, grad_b = logistic_loss_grad(weights, bias, x, y)
        weights = weights - FINETUNE_LR * grad_w
        bias = bias - FINETUNE_LR * grad_b
    return ClassifierArtifact(weights, bias, parent)


def predict(
    classifier: ClassifierArtifact,
    embedder: EmbedderArtifact,
    tokens: list[str],
) -> float:
    z = embed_document(embedder, tokens) @ classifier.weights + classifier.bias
    return float(_sigmoid(np.array([z]))[0])


def predict_features(classifier: ClassifierArtifact, features) -> float:
    """Probability for a caller-supplied feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != classifier.weights.shape:
        raise InvalidInput(
            f"expected {classifier.weights.shape[0]} features, got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise InvalidInput("features must be finite")
    z = x @ classifier.weights + classifier.bias
    return float(_sigmoid(np.array([z]))[0])


def auc_score(scores: np.ndarray, y: np.ndarray) -> float:
    """Rank-statistic AUC; tied scores count 0.5.  Degenerate sets → 0.5."""
    from scipy.stats import rankdata

    n_pos = int(np.sum(y > 0.5))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(scores)
    pos_rank_sum = float(np.sum(ranks[y > 0.5]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(
    classifier: ClassifierArtifact,
    embedder: EmbedderArtifact,
    examples: list[tuple[list[str], int]],
) -> EvalMetrics:
    if not examples:
        raise InvalidInput("evaluation set is empty")
    scores = np.array([predict(classifier, embedder, toks) for toks, _ in examples])
    y = np.array([float(label) for _, label in examples])
    accuracy = float(np.mean((scores >= 0.5) == (y > 0.5)))
    return EvalMetrics(accuracy, auc_score(scores, y), len(examples))
