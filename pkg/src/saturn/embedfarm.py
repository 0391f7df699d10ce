"""The Embedding Farm: named vector collections with exact and
approximate search and a checksummed binary interchange format.

Vectors are stored as 32-bit floats and all scoring happens in 64-bit.
The ANN side is a layered small-world graph (M=16, doubled fan-out on
the base layer, ef_search=64) built in bulk from exact neighbor
candidates; staleness after a mutation is an error rather than a silent
fallback to exact scan.
"""

from __future__ import annotations

import hashlib
import heapq
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import Conflict, IntegrityError, InvalidInput, NotFound, RebuildRequired
from .storage import Database

METRICS = ("cosine", "euclidean", "dot")
METRIC_CODES = {"cosine": 0, "euclidean": 1, "dot": 2}
CODE_METRICS = {v: k for k, v in METRIC_CODES.items()}

GRAPH_DEGREE = 16
EF_SEARCH = 64
MAGIC = b"SEF1"
FORMAT_VERSION = 1


@dataclass
class SearchResult:
    key: str
    score: float
    rank: int

    def to_dict(self) -> dict:
        return {"key": self.key, "score": self.score, "rank": self.rank}


def _validate_vector(values, dim: int, metric: str) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or len(vec) != dim:
        raise InvalidInput(f"vector must have exactly {dim} components")
    if not np.all(np.isfinite(vec)):
        raise InvalidInput("vector components must be finite")
    vec32 = vec.astype(np.float32)
    if not np.all(np.isfinite(vec32)):
        raise InvalidInput("vector components overflow 32-bit floats")
    if metric == "cosine" and float(np.linalg.norm(vec32.astype(np.float64))) == 0.0:
        raise InvalidInput("cosine collections reject the zero vector")
    return vec32


class _Snapshot:
    """Immutable view of a collection's entries for lock-free reads."""

    def __init__(self, keys: list[str], matrix: np.ndarray, tags: list[frozenset]):
        self.keys = keys
        self.matrix = matrix  # f32, one row per key
        self.matrix64 = matrix.astype(np.float64)
        self.tags = tags


class _Collection:
    def __init__(self, name: str, dim: int, metric: str, created_at: float):
        self.name = name
        self.dim = dim
        self.metric = metric
        self.created_at = created_at
        self.entries: dict[str, tuple[np.ndarray, frozenset, float]] = {}
        self.gen = 0
        self._snapshot: _Snapshot | None = None
        self._snapshot_gen = -1
        self.index: SmallWorldIndex | None = None
        self.index_gen = -1

    def snapshot(self) -> _Snapshot:
        if self._snapshot is None or self._snapshot_gen != self.gen:
            keys = sorted(self.entries)
            if keys:
                matrix = np.stack([self.entries[k][0] for k in keys])
            else:
                matrix = np.zeros((0, self.dim), dtype=np.float32)
            tags = [self.entries[k][1] for k in keys]
            self._snapshot = _Snapshot(keys, matrix, tags)
            self._snapshot_gen = self.gen
        return self._snapshot

    def meta(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "metric": self.metric,
            "entry_count": len(self.entries),
            "acl": f"collection:{self.name}",
            "created_at": self.created_at,
        }


def _scores(metric: str, matrix64: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Collection scores in f64: similarity, or negative distance."""
    if metric == "cosine":
        qn = float(np.linalg.norm(query))
        if qn == 0.0:
            raise InvalidInput("cosine query must be nonzero")
        norms = np.linalg.norm(matrix64, axis=1)
        return (matrix64 @ query) / (norms * qn)
    if metric == "dot":
        return matrix64 @ query
    diff = matrix64 - query
    return -np.sqrt(np.einsum("ij,ij->i", diff, diff))


class SmallWorldIndex:
    """Bulk-built layered neighbor graph searched greedy best-first.

    The base layer caps fan-out at 2*GRAPH_DEGREE and upper layers at
    GRAPH_DEGREE, the usual small-world convention.  Edges come from
    exact neighbor candidates pruned for diversity (a candidate is
    skipped when it sits closer to an already-chosen neighbor than to
    the node), with pruned survivors refilled nearest-first.
    """

    def __init__(self, metric: str, matrix64: np.ndarray, seed: int):
        self.metric = metric
        if metric == "cosine":
            norms = np.linalg.norm(matrix64, axis=1, keepdims=True)
            self.space = matrix64 / norms
            self.kind = "euclid"
        elif metric == "dot":
            self.space = matrix64
            self.kind = "dot"
        else:
            self.space = matrix64
            self.kind = "euclid"
        self.seed = seed
        self.base: np.ndarray | None = None
        self.layers: list[tuple[np.ndarray, dict[int, np.ndarray]]] = []

    # -- internal distances (smaller is better) -------------------------

    def _dist_block(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.kind == "dot":
            return -(a @ b.T)
        sa = np.einsum("ij,ij->i", a, a)
        sb = np.einsum("ij,ij->i", b, b)
        return sa[:, None] + sb[None, :] - 2.0 * (a @ b.T)

    def _dist_to(self, query: np.ndarray, ids: np.ndarray) -> np.ndarray:
        rows = self.space[ids]
        if self.kind == "dot":
            return -(rows @ query)
        diff = rows - query
        return np.einsum("ij,ij->i", diff, diff)

    def _neighbor_candidates(self, ids: np.ndarray, breadth: int):
        n = len(ids)
        m = min(breadth, n - 1)
        sub = self.space[ids]
        cand = np.empty((n, m), dtype=np.int64)
        cd = np.empty((n, m))
        block = 2048
        for s in range(0, n, block):
            e = min(s + block, n)
            d = self._dist_block(sub[s:e], sub)
            d[np.arange(e - s), np.arange(s, e)] = np.inf
            idx = np.argpartition(d, m - 1, axis=1)[:, :m]
            rows = np.arange(e - s)[:, None]
            sel = d[rows, idx]
            order = np.argsort(sel, axis=1, kind="stable")
            cand[s:e] = idx[rows, order]
            cd[s:e] = sel[rows, order]
        return cand, cd

    def _prune(self, pool: list[tuple[float, int]], cap: int) -> list[int]:
        chosen: list[int] = []
        rejected: list[int] = []
        for dv, v in pool:
            diverse = True
            for w in chosen:
                dw = self._dist_to(self.space[v], np.array([w]))[0]
                if dw < dv:
                    diverse = False
                    break
            if diverse:
                chosen.append(v)
                if len(chosen) >= cap:
                    return chosen
            else:
                rejected.append(v)
        for v in rejected:
            if len(chosen) >= cap:
                break
            chosen.append(v)
        return chosen

    def _build_graph(self, ids: np.ndarray, cap: int) -> np.ndarray:
        n = len(ids)
        edges: list[list[int]] = [[] for _ in range(n)]
        if n > 1:
            cand, cd = self._neighbor_candidates(ids, 2 * cap)
            for u in range(n):
                pool = [(float(cd[u, j]), int(cand[u, j])) for j in range(cand.shape[1])]
                edges[u] = self._prune(pool, cap)
            for u in range(n):
                for v in list(edges[u]):
                    if len(edges[v]) < cap and u not in edges[v]:
                        edges[v].append(u)
        packed = np.full((n, cap), -1, dtype=np.int64)
        for u in range(n):
            packed[u, : len(edges[u])] = edges[u][:cap]
        return packed

    def build(self) -> None:
        n = self.space.shape[0]
        self.base = self._build_graph(np.arange(n), 2 * GRAPH_DEGREE)
        self.layers = []
        rng = np.random.default_rng(self.seed)
        current = np.arange(n)
        while len(current) > 64:
            size = max(32, len(current) // GRAPH_DEGREE)
            current = np.sort(rng.permutation(current)[:size])
            local = self._build_graph(current, GRAPH_DEGREE)
            mapped = {
                int(current[i]): np.where(local[i] >= 0, current[np.clip(local[i], 0, None)], -1)
                for i in range(len(current))
            }
            self.layers.append((current, mapped))

    def search(self, query: np.ndarray, ef: int = EF_SEARCH) -> list[int]:
        """Beam search; returns candidate row ids, best first."""
        n = self.space.shape[0]
        if n == 0:
            return []
        if self.metric == "cosine":
            qn = float(np.linalg.norm(query))
            if qn == 0.0:
                raise InvalidInput("cosine query must be nonzero")
            query = query / qn
        entry = int(self.layers[-1][0][0]) if self.layers else 0
        for _, edge_map in reversed(self.layers):
            cur = entry
            cur_d = float(self._dist_to(query, np.array([cur]))[0])
            improved = True
            while improved:
                improved = False
                nbrs = edge_map[cur]
                nbrs = nbrs[nbrs >= 0]
                if len(nbrs) == 0:
                    break
                ds = self._dist_to(query, nbrs)
                j = int(np.argmin(ds))
                if float(ds[j]) < cur_d:
                    cur, cur_d, improved = int(nbrs[j]), float(ds[j]), True
            entry = cur

        d0 = float(self._dist_to(query, np.array([entry]))[0])
        visited = {entry}
        frontier = [(d0, entry)]
        beam = [(-d0, entry)]
        while frontier:
            d, u = heapq.heappop(frontier)
            if d > -beam[0][0] and len(beam) >= ef:
                break
            nbrs = [int(v) for v in self.base[u] if v >= 0 and int(v) not in visited]
            if not nbrs:
                continue
            visited.update(nbrs)
            ds = self._dist_to(query, np.array(nbrs))
            for dv, v in zip(ds, nbrs):
                dv = float(dv)
                if len(beam) < ef or dv < -beam[0][0]:
                    heapq.heappush(frontier, (dv, v))
                    heapq.heappush(beam, (-dv, v))
                    if len(beam) > ef:
                        heapq.heappop(beam)
        return [v for _, v in sorted((-bd, v) for bd, v in beam)]


class EmbedFarm:
    """Collection manager; mutations serialized, reads on snapshots."""

    def __init__(self, db: Database):
        self.db = db
        self._lock = threading.RLock()
        self._collections: dict[str, _Collection] = {}
        for name, meta in self.db.scan("collections"):
            col = _Collection(meta["name"], meta["dim"], meta["metric"], meta["created_at"])
            for key, doc in self.db.scan(f"emb.{name}"):
                vec = np.asarray(doc["vector"], dtype=np.float32)
                col.entries[key] = (vec, frozenset(doc["tags"]), doc["updated_at"])
            self._collections[name] = col

    def _col(self, name: str) -> _Collection:
        col = self._collections.get(name)
        if col is None:
            raise NotFound(f"no collection {name!r}")
        return col

    def create_collection(self, name: str, dim: int, metric: str) -> dict:
        if not name:
            raise InvalidInput("collection name must be nonempty")
        if dim < 1:
            raise InvalidInput("dim must be >= 1")
        if metric not in METRICS:
            raise InvalidInput(f"metric must be one of {METRICS}")
        with self._lock:
            if name in self._collections:
                raise Conflict(f"collection {name!r} exists")
            col = _Collection(name, dim, metric, time.time())
            self._collections[name] = col
            self.db.put("collections", name, {
                "name": name, "dim": dim, "metric": metric, "created_at": col.created_at,
            })
        return col.meta()

    def get_collection(self, name: str) -> dict:
        return self._col(name).meta()

    def list_collections(self) -> list[dict]:
        with self._lock:
            return [c.meta() for _, c in sorted(self._collections.items())]

    def upsert(self, name: str, key: str, vector, tags=()) -> dict:
        col = self._col(name)
        if not key:
            raise InvalidInput("entry key must be nonempty")
        vec = _validate_vector(vector, col.dim, col.metric)
        tagset = frozenset(str(t) for t in tags)
        now = time.time()
        with self._lock:
            col.entries[key] = (vec, tagset, now)
            col.gen += 1
            self.db.put(f"emb.{name}", key, {
                "vector": [float(x) for x in vec],
                "tags": sorted(tagset),
                "updated_at": now,
            })
        return self._entry_dict(key, vec, tagset, now)

    @staticmethod
    def _entry_dict(key, vec, tagset, updated_at) -> dict:
        return {
            "key": key,
            "vector": [float(x) for x in vec],
            "tags": sorted(tagset),
            "updated_at": updated_at,
        }

    def get(self, name: str, key: str) -> dict:
        col = self._col(name)
        entry = col.entries.get(key)
        if entry is None:
            raise NotFound(f"no key {key!r} in collection {name!r}")
        return self._entry_dict(key, *entry)

    def batch_get(self, name: str, keys: list[str]) -> list[dict | None]:
        col = self._col(name)
        out = []
        for key in keys:
            entry = col.entries.get(key)
            out.append(None if entry is None else self._entry_dict(key, *entry))
        return out

    def delete(self, name: str, key: str) -> None:
        col = self._col(name)
        with self._lock:
            if key not in col.entries:
                raise NotFound(f"no key {key!r} in collection {name!r}")
            del col.entries[key]
            col.gen += 1
            self.db.delete(f"emb.{name}", key)

    # -- search ---------------------------------------------------------

    def search_exact(self, name, query, k, tag_filter=None) -> list[SearchResult]:
        col = self._col(name)
        if k < 1:
            raise InvalidInput("k must be >= 1")
        q = _validate_vector(query, col.dim, col.metric).astype(np.float64)
        snap = col.snapshot()
        keys, matrix64, tags = snap.keys, snap.matrix64, snap.tags
        if tag_filter:
            wanted = frozenset(tag_filter)
            mask = [wanted <= t for t in tags]
            keys = [key for key, ok in zip(keys, mask) if ok]
            matrix64 = matrix64[np.array(mask, dtype=bool)] if keys else matrix64[:0]
        if not keys:
            return []
        scores = _scores(col.metric, matrix64, q)
        order = sorted(range(len(keys)), key=lambda i: (-scores[i], keys[i]))[:k]
        return [
            SearchResult(keys[i], float(scores[i]), rank)
            for rank, i in enumerate(order, start=1)
        ]

    def build_index(self, name: str, seed: int = 0) -> dict:
        col = self._col(name)
        with self._lock:
            snap = col.snapshot()
            gen = col.gen
        index = SmallWorldIndex(col.metric, snap.matrix64, seed)
        index.build()
        with self._lock:
            col.index = index
            col.index_gen = gen
            col._index_snap = snap
        return {"name": name, "indexed_entries": len(snap.keys)}

    def search_ann(self, name: str, query, k: int) -> list[SearchResult]:
        col = self._col(name)
        if k < 1:
            raise InvalidInput("k must be >= 1")
        with self._lock:
            if col.index is None or col.index_gen != col.gen:
                raise RebuildRequired(
                    f"collection {name!r} mutated since last build_index"
                )
            index, snap = col.index, col._index_snap
        q = _validate_vector(query, col.dim, col.metric).astype(np.float64)
        rows = index.search(q)
        if not rows:
            return []
        scores = _scores(col.metric, snap.matrix64[rows], q)
        ranked = sorted(zip(rows, scores), key=lambda t: (-t[1], snap.keys[t[0]]))[:k]
        return [
            SearchResult(snap.keys[i], float(s), rank)
            for rank, (i, s) in enumerate(ranked, start=1)
        ]

    # -- binary interchange --------------------------------------------

    def export_collection(self, name: str, path: str | Path) -> dict:
        col = self._col(name)
        snap = col.snapshot()
        buf = bytearray()
        buf += MAGIC
        buf += struct.pack("<H", FORMAT_VERSION)
        buf += struct.pack("<B", METRIC_CODES[col.metric])
        buf += struct.pack("<I", col.dim)
        buf += struct.pack("<Q", len(snap.keys))
        for i, key in enumerate(snap.keys):
            kb = key.encode("utf-8")
            buf += struct.pack("<H", len(kb))
            buf += kb
            tags = sorted(snap.tags[i])
            buf += struct.pack("<H", len(tags))
            for tag in tags:
                tb = tag.encode("utf-8")
                buf += struct.pack("<H", len(tb))
                buf += tb
            buf += snap.matrix[i].astype("<f4").tobytes()
        buf += hashlib.sha256(bytes(buf)).digest()
        Path(path).write_bytes(bytes(buf))
        return {"name": name, "entries": len(snap.keys), "bytes": len(buf)}

    def import_collection(self, path: str | Path, name: str) -> dict:
        data = Path(path).read_bytes()
        if len(data) < 4 + 2 + 1 + 4 + 8 + 32:
            raise IntegrityError("file too short to be a collection export")
        body, trailer = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != trailer:
            raise IntegrityError("collection file failed digest verification")
        if body[:4] != MAGIC:
            raise InvalidInput("not a collection export (bad magic)")
        off = 4
        (version,) = struct.unpack_from("<H", body, off)
        off += 2
        if version != FORMAT_VERSION:
            raise InvalidInput(f"unsupported format version {version}")
        (metric_code,) = struct.unpack_from("<B", body, off)
        off += 1
        if metric_code not in CODE_METRICS:
            raise InvalidInput(f"unknown metric code {metric_code}")
        (dim,) = struct.unpack_from("<I", body, off)
        off += 4
        (count,) = struct.unpack_from("<Q", body, off)
        off += 8
        metric = CODE_METRICS[metric_code]
        entries = []
        try:
            for _ in range(count):
                (key_len,) = struct.unpack_from("<H", body, off)
                off += 2
                key = body[off : off + key_len].decode("utf-8")
                off += key_len
                (tag_count,) = struct.unpack_from("<H", body, off)
                off += 2
                tags = []
                for _ in range(tag_count):
                    (tag_len,) = struct.unpack_from("<H", body, off)
                    off += 2
                    tags.append(body[off : off + tag_len].decode("utf-8"))
                    off += tag_len
                vec = np.frombuffer(body, dtype="<f4", count=dim, offset=off).copy()
                off += 4 * dim
                entries.append((key, vec, tags))
        except (struct.error, ValueError) as exc:
            raise IntegrityError(f"malformed collection payload: {exc}") from exc
        if off != len(body):
            raise IntegrityError("trailing bytes after final entry")
        meta = self.create_collection(name, int(dim), metric)
        for key, vec, tags in entries:
            self.upsert(name, key, vec, tags)
        return self.get_collection(name)
