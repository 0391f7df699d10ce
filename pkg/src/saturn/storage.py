"""Embedded transactional document store on top of sqlite3.

All control-plane records (catalog entries, runs, grants, reports, ...) live
in one sqlite file as JSON documents keyed by (namespace, key), plus an
append-only log table for audit trails.  A single shared connection guarded
by a re-entrant lock keeps writers serialized; that is plenty at desk scale
and keeps crash semantics simple.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator


class Database:
    """Namespaced JSON document store with an append-only log."""

    def __init__(self, path: str | Path = ":memory:"):
        self.path = str(path)
        if self.path != ":memory:":
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(
            self.path, check_same_thread=False, isolation_level=None
        )
        with self._lock:
            cur = self._conn.cursor()
            if self.path != ":memory:":
                cur.execute("PRAGMA journal_mode=WAL")
            # Desk-scale durability: the OS page cache is trusted between runs.
            cur.execute("PRAGMA synchronous=OFF")
            cur.execute(
                "CREATE TABLE IF NOT EXISTS kv ("
                " ns TEXT NOT NULL, k TEXT NOT NULL, v TEXT NOT NULL,"
                " PRIMARY KEY (ns, k))"
            )
            cur.execute(
                "CREATE TABLE IF NOT EXISTS log ("
                " seq INTEGER PRIMARY KEY AUTOINCREMENT,"
                " ns TEXT NOT NULL, v TEXT NOT NULL)"
            )
            cur.execute("CREATE INDEX IF NOT EXISTS log_ns ON log (ns, seq)")

    @contextmanager
    def transaction(self) -> Iterator[sqlite3.Cursor]:
        """Serialized read-modify-write scope; rolls back on error."""
        with self._lock:
            cur = self._conn.cursor()
            cur.execute("BEGIN IMMEDIATE")
            try:
                yield cur
            except BaseException:
                self._conn.rollback()
                raise
            else:
                self._conn.commit()

    def put(self, ns: str, key: str, doc: dict[str, Any]) -> None:
        with self._lock:
            self._conn.execute(
                "INSERT INTO kv (ns, k, v) VALUES (?, ?, ?)"
                " ON CONFLICT (ns, k) DO UPDATE SET v = excluded.v",
                (ns, key, json.dumps(doc, sort_keys=True)),
            )

    def insert(self, ns: str, key: str, doc: dict[str, Any]) -> bool:
        """Insert only if absent; returns False when the key already exists."""
        with self._lock:
            try:
                self._conn.execute(
                    "INSERT INTO kv (ns, k, v) VALUES (?, ?, ?)",
                    (ns, key, json.dumps(doc, sort_keys=True)),
                )
            except sqlite3.IntegrityError:
                return False
            return True

    def get(self, ns: str, key: str) -> dict[str, Any] | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT v FROM kv WHERE ns = ? AND k = ?", (ns, key)
            ).fetchone()
        return None if row is None else json.loads(row[0])

    def delete(self, ns: str, key: str) -> bool:
        with self._lock:
            cur = self._conn.execute(
                "DELETE FROM kv WHERE ns = ? AND k = ?", (ns, key)
            )
            return cur.rowcount > 0

    def scan(self, ns: str) -> list[tuple[str, dict[str, Any]]]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT k, v FROM kv WHERE ns = ? ORDER BY k", (ns,)
            ).fetchall()
        return [(k, json.loads(v)) for k, v in rows]

    def count(self, ns: str) -> int:
        with self._lock:
            row = self._conn.execute(
                "SELECT COUNT(*) FROM kv WHERE ns = ?", (ns,)
            ).fetchone()
        return int(row[0])

    def append(self, ns: str, doc: dict[str, Any]) -> int:
        with self._lock:
            cur = self._conn.execute(
                "INSERT INTO log (ns, v) VALUES (?, ?)",
                (ns, json.dumps(doc, sort_keys=True)),
            )
            return int(cur.lastrowid)

    def read_log(self, ns: str) -> list[tuple[int, dict[str, Any]]]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT seq, v FROM log WHERE ns = ? ORDER BY seq", (ns,)
            ).fetchall()
        return [(seq, json.loads(v)) for seq, v in rows]

    def close(self) -> None:
        with self._lock:
            self._conn.close()
