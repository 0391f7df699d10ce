"""Access control and bias tooling.

Grants are explicit and everything else is denied; the three roles form a
lattice (admin ⊃ writer ⊃ reader).  Fairness metrics are computed from
integer contingency counts with one final division each, so equal rates
compare exactly equal and the reports are reproducible bit for bit.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import Forbidden, InvalidInput
from .storage import Database

ROLE_LEVEL = {"reader": 1, "writer": 2, "admin": 3}
ACTION_LEVEL = {"read": 1, "write": 2, "admin": 3}

THRESHOLD_GRID = [round(i / 100.0, 2) for i in range(101)]


def _covers(grant_resource: str, resource: str) -> bool:
    if grant_resource == "*" or grant_resource == resource:
        return True
    if grant_resource.endswith(":*"):
        return resource.startswith(grant_resource[:-1])
    return False


class AccessControl:
    """Role checks over grants held in the shared document store.

    ``admins`` are bootstrap principals treated as holding an admin grant
    on everything; without at least one, nobody could create the first
    grant.
    """

    NS = "grants"
    DENY_LOG = "governance.denials"

    def __init__(self, db: Database, admins: set[str] | None = None):
        self.db = db
        self.admins = set(admins or ())

    def grant(self, principal: str, role: str, resource: str) -> dict:
        if role not in ROLE_LEVEL:
            raise InvalidInput(f"unknown role {role!r}")
        if not principal or not resource:
            raise InvalidInput("principal and resource are required")
        doc = {
            "principal": principal,
            "role": role,
            "resource": resource,
            "granted_at": time.time(),
        }
        self.db.put(self.NS, f"{principal}|{resource}", doc)
        return doc

    def list_grants(self) -> list[dict]:
        return [doc for _, doc in self.db.scan(self.NS)]

    def check(self, principal: str, action: str, resource: str, log: bool = True) -> bool:
        if action not in ACTION_LEVEL:
            raise InvalidInput(f"unknown action {action!r}")
        needed = ACTION_LEVEL[action]
        allowed = principal in self.admins or any(
            doc["principal"] == principal
            and ROLE_LEVEL[doc["role"]] >= needed
            and _covers(doc["resource"], resource)
            for _, doc in self.db.scan(self.NS)
        )
        if not allowed and log:
            self.db.append(
                self.DENY_LOG,
                {
                    "principal": principal,
                    "action": action,
                    "resource": resource,
                    "at": time.time(),
                },
            )
        return allowed

    def require(self, principal: str, action: str, resource: str) -> None:
        if not self.check(principal, action, resource):
            raise Forbidden(f"{principal} may not {action} {resource}")

    def denials(self) -> list[dict]:
        return [doc for _, doc in self.db.read_log(self.DENY_LOG)]


@dataclass
class FairnessReport:
    group_rates: dict[str, float]
    dpd: float
    eod: float
    dir: float
    group_counts: dict[str, int]
    thresholds_used: dict[str, float]
    degenerate_groups: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "group_rates": self.group_rates,
            "dpd": self.dpd,
            "eod": self.eod,
            "dir": self.dir,
            "group_counts": self.group_counts,
            "thresholds_used": self.thresholds_used,
            "degenerate_groups": self.degenerate_groups,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FairnessReport":
        return cls(
            group_rates=doc["group_rates"],
            dpd=doc["dpd"],
            eod=doc["eod"],
            dir=doc["dir"],
            group_counts={k: int(v) for k, v in doc["group_counts"].items()},
            thresholds_used=doc["thresholds_used"],
            degenerate_groups=list(doc.get("degenerate_groups", [])),
        )


def _group_tables(predictions, labels, groups):
    """Per-group counts: (size, predicted-positive, tp, fp, pos, neg)."""
    tables: dict[str, list[int]] = {}
    for p, y, g in zip(predictions, labels, groups):
        t = tables.setdefault(g, [0, 0, 0, 0, 0, 0])
        t[0] += 1
        if p:
            t[1] += 1
            if y:
                t[2] += 1
            else:
                t[3] += 1
        if y:
            t[4] += 1
        else:
            t[5] += 1
    return tables


def _pair_gap(num_a: int, den_a: int, num_b: int, den_b: int) -> float:
    """|num_a/den_a - num_b/den_b| with one rounding; zero denominators
    contribute a rate of 0."""
    if den_a == 0 and den_b == 0:
        return 0.0
    if den_a == 0:
        return num_b / den_b
    if den_b == 0:
        return num_a / den_a
    return abs(num_a * den_b - num_b * den_a) / (den_a * den_b)


def compute_fairness(
    predictions: list[int],
    labels: list[int],
    groups: list[str],
    scores: list[float] | None = None,
    thresholds_used: dict[str, float] | None = None,
) -> FairnessReport:
    """Demographic parity difference, disparate impact ratio, and
    equalized-odds difference over binary predictions.

    Groups without positives (or negatives) contribute a TPR (FPR) of 0
    and are listed in ``degenerate_groups``.
    """
    if not (len(predictions) == len(labels) == len(groups)):
        raise InvalidInput("predictions, labels, and groups must align")
    if scores is not None and len(scores) != len(labels):
        raise InvalidInput("scores length must match labels")
    if not predictions:
        raise InvalidInput("empty evaluation set")
    tables = _group_tables(predictions, labels, groups)
    if len(tables) < 2:
        raise InvalidInput("need at least two distinct groups")

    names = sorted(tables)
    rates = {g: tables[g][1] / tables[g][0] for g in names}
    counts = {g: tables[g][0] for g in names}
    degenerate = sorted(g for g in names if tables[g][4] == 0 or tables[g][5] == 0)

    dpd = 0.0
    eod = 0.0
    for a, b in itertools.combinations(names, 2):
        ta, tb = tables[a], tables[b]
        dpd = max(dpd, _pair_gap(ta[1], ta[0], tb[1], tb[0]))
        tpr_gap = _pair_gap(ta[2], ta[4], tb[2], tb[4])
        fpr_gap = _pair_gap(ta[3], ta[5], tb[3], tb[5])
        eod = max(eod, tpr_gap, fpr_gap)

    pos_counts = [(tables[g][1], tables[g][0]) for g in names]
    if all(p == 0 for p, _ in pos_counts):
        dir_ratio = 1.0
    else:
        # Exact rational ordering, then a single rounding division.
        lo = min(pos_counts, key=lambda t: Fraction(t[0], t[1]))
        hi = max(pos_counts, key=lambda t: Fraction(t[0], t[1]))
        dir_ratio = (lo[0] * hi[1]) / (hi[0] * lo[1])

    return FairnessReport(
        group_rates=rates,
        dpd=dpd,
        eod=eod,
        dir=dir_ratio,
        group_counts=counts,
        thresholds_used=thresholds_used or {g: 0.5 for g in names},
        degenerate_groups=degenerate,
    )


@dataclass
class MitigationResult:
    thresholds: dict[str, float]
    report: FairnessReport
    infeasible: bool
    baseline_accuracy: float
    mitigated_accuracy: float

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "report": self.report.to_dict(),
            "infeasible": self.infeasible,
            "baseline_accuracy": self.baseline_accuracy,
            "mitigated_accuracy": self.mitigated_accuracy,
        }


def _per_group_curves(scores, labels, grid):
    """For each threshold: predicted-positive count and correct count."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    pred = s[:, None] >= grid[None, :]
    pos = pred.sum(axis=0).astype(np.float64)
    correct = (pred == (y[:, None] > 0.5)).sum(axis=0).astype(np.float64)
    return pos, correct


def mitigate_by_threshold(
    scores: list[float],
    labels: list[int],
    groups: list[str],
    max_accuracy_drop: float = 0.05,
) -> MitigationResult:
    """Search per-group decision thresholds on the 0.01 grid for minimum
    demographic parity difference, keeping overall accuracy within
    ``max_accuracy_drop`` of the all-0.5 baseline.

    The search is an exhaustive product over the grid, which bounds this
    to three groups; ties go to the vector nearest 0.5 (sum of absolute
    offsets, then lexicographic order).  When no vector improves on the
    baseline's dpd the baseline is returned flagged infeasible.
    """
    if not (len(scores) == len(labels) == len(groups)):
        raise InvalidInput("scores, labels, and groups must align")
    if any(not (0.0 <= s <= 1.0) for s in scores):
        raise InvalidInput("scores must lie in [0, 1]")
    names = sorted(set(groups))
    if len(names) < 2:
        raise InvalidInput("need at least two distinct groups")
    if len(names) > 3:
        raise InvalidInput("threshold mitigation supports at most 3 groups")

    grid = np.array(THRESHOLD_GRID)
    n_total = len(scores)
    by_group = {g: ([], []) for g in names}
    for s, y, g in zip(scores, labels, groups):
        by_group[g][0].append(s)
        by_group[g][1].append(y)
    sizes = {g: len(by_group[g][0]) for g in names}
    curves = {g: _per_group_curves(*by_group[g], grid) for g in names}

    half = int(np.searchsorted(grid, 0.5))  # grid index of the 0.5 baseline
    baseline_correct = sum(curves[g][1][half] for g in names)
    baseline_acc = baseline_correct / n_total
    floor = baseline_acc - max_accuracy_drop

    # Broadcast each group's curves along its own axis of the product grid.
    g_count = len(names)
    shape = [1] * g_count
    pos_nd, cor_nd, dist_nd, thr_nd = [], [], [], []
    for axis, g in enumerate(names):
        sh = list(shape)
        sh[axis] = len(grid)
        pos_nd.append(curves[g][0].reshape(sh))
        cor_nd.append(curves[g][1].reshape(sh))
        dist_nd.append(np.abs(grid - 0.5).reshape(sh))
        thr_nd.append(grid.reshape(sh))

    acc = sum(np.broadcast_to(c, (len(grid),) * g_count).copy() for c in cor_nd) / n_total
    dpd = np.zeros((len(grid),) * g_count)
    for i, j in itertools.combinations(range(g_count), 2):
        na, nb = sizes[names[i]], sizes[names[j]]
        gap = np.abs(pos_nd[i] * nb - pos_nd[j] * na) / (na * nb)
        dpd = np.maximum(dpd, gap)
    dist = sum(np.broadcast_to(d, dpd.shape).copy() for d in dist_nd)

    feasible = acc >= floor
    dpd_key = np.where(feasible, dpd, np.inf).ravel()
    dist_key = dist.ravel()
    lex_keys = [np.broadcast_to(t, dpd.shape).ravel() for t in reversed(thr_nd)]
    order = np.lexsort((*lex_keys, dist_key, dpd_key))
    best = order[0]

    idx = np.unravel_index(best, dpd.shape)
    chosen = {g: float(grid[idx[axis]]) for axis, g in enumerate(names)}
    best_dpd = float(dpd.ravel()[best])
    baseline_idx = tuple([half] * g_count)
    baseline_dpd = float(dpd[baseline_idx])

    infeasible = baseline_dpd > 0 and best_dpd >= baseline_dpd
    if infeasible:
        chosen = {g: 0.5 for g in names}

    preds = [1 if s >= chosen[g] else 0 for s, g in zip(scores, groups)]
    report = compute_fairness(preds, labels, groups, thresholds_used=chosen)
    mitigated_acc = sum(int(p == y) for p, y in zip(preds, labels)) / n_total
    return MitigationResult(
        thresholds=chosen,
        report=report,
        infeasible=infeasible,
        baseline_accuracy=float(baseline_acc),
        mitigated_accuracy=float(mitigated_acc),
    )
