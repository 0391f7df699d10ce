"""Vector store behavior against a naive full-scan oracle, plus the
binary interchange format's round-trip and corruption guarantees."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saturn import embedfarm
from saturn.errors import (
    Conflict,
    IntegrityError,
    InvalidInput,
    NotFound,
    RebuildRequired,
)
from saturn.storage import Database


@pytest.fixture
def farm():
    return embedfarm.EmbedFarm(Database())


def naive_search(entries, metric, query, k, tag_filter=None):
    """Plain-Python scan: the independent ordering oracle."""
    scored = []
    for key, (vec, tags) in entries.items():
        if tag_filter and not set(tag_filter) <= set(tags):
            continue
        if metric == "cosine":
            dot = sum(float(a) * float(b) for a, b in zip(vec, query))
            na = math.sqrt(sum(float(a) ** 2 for a in vec))
            nb = math.sqrt(sum(float(b) ** 2 for b in query))
            score = dot / (na * nb)
        elif metric == "dot":
            score = sum(float(a) * float(b) for a, b in zip(vec, query))
        else:
            score = -math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(vec, query)))
        scored.append((key, score))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return [key for key, _ in scored[:k]]


class TestCollections:
    def test_create_and_meta(self, farm):
        meta = farm.create_collection("cust-personas", 32, "cosine")
        assert meta["entry_count"] == 0
        assert meta["metric"] == "cosine"
        assert farm.get_collection("cust-personas")["dim"] == 32

    def test_duplicate_name(self, farm):
        farm.create_collection("c", 4, "dot")
        with pytest.raises(Conflict):
            farm.create_collection("c", 8, "cosine")

    def test_bad_params(self, farm):
        with pytest.raises(InvalidInput):
            farm.create_collection("c", 0, "cosine")
        with pytest.raises(InvalidInput):
            farm.create_collection("c", 4, "manhattan")
        with pytest.raises(NotFound):
            farm.get_collection("missing")


class TestEntries:
    def test_round_trip_bits(self, farm):
        farm.create_collection("c", 3, "euclidean")
        vec = [0.1, -2.5, 3.25]
        farm.upsert("c", "k1", vec, tags={"b", "a"})
        got = farm.get("c", "k1")
        assert got["vector"] == [float(np.float32(x)) for x in vec]
        assert got["tags"] == ["a", "b"]

    def test_overwrite_keeps_count(self, farm):
        farm.create_collection("c", 2, "dot")
        farm.upsert("c", "k", [1, 2])
        farm.upsert("c", "k", [3, 4])
        assert farm.get_collection("c")["entry_count"] == 1
        assert farm.get("c", "k")["vector"] == [3.0, 4.0]

    def test_validation(self, farm):
        farm.create_collection("c", 2, "cosine")
        with pytest.raises(InvalidInput):
            farm.upsert("c", "k", [1.0])
        with pytest.raises(InvalidInput):
            farm.upsert("c", "k", [float("nan"), 1.0])
        with pytest.raises(InvalidInput):
            farm.upsert("c", "k", [float("inf"), 1.0])
        with pytest.raises(InvalidInput):
            farm.upsert("c", "k", [0.0, 0.0])
        with pytest.raises(InvalidInput):
            farm.upsert("c", "", [1.0, 0.0])
        # Euclidean collections accept the zero vector.
        farm.create_collection("e", 2, "euclidean")
        farm.upsert("e", "z", [0.0, 0.0])

    def test_batch_get_order_and_missing(self, farm):
        farm.create_collection("c", 1, "dot")
        farm.upsert("c", "k1", [1.0])
        farm.upsert("c", "k2", [2.0])
        got = farm.batch_get("c", ["k2", "nope", "k1"])
        assert got[0]["key"] == "k2"
        assert got[1] is None
        assert got[2]["key"] == "k1"

    def test_missing_key(self, farm):
        farm.create_collection("c", 1, "dot")
        with pytest.raises(NotFound):
            farm.get("c", "ghost")


class TestExactSearch:
    def test_self_similarity_cosine(self, farm):
        farm.create_collection("c", 3, "cosine")
        farm.upsert("c", "v", [0.3, -0.4, 0.5])
        res = farm.search_exact("c", [0.3, -0.4, 0.5], k=1)
        assert res[0].key == "v"
        assert res[0].score == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_cosine(self, farm):
        farm.create_collection("c", 2, "cosine")
        farm.upsert("c", "v", [1.0, 0.0])
        res = farm.search_exact("c", [0.0, 1.0], k=1)
        assert res[0].score == pytest.approx(0.0, abs=1e-6)

    def test_tie_broken_by_key(self, farm):
        farm.create_collection("c", 2, "dot")
        for key in ("zeta", "alpha", "mid"):
            farm.upsert("c", key, [1.0, 1.0])
        res = farm.search_exact("c", [1.0, 1.0], k=3)
        assert [r.key for r in res] == ["alpha", "mid", "zeta"]
        assert [r.rank for r in res] == [1, 2, 3]

    @pytest.mark.parametrize("metric", ["cosine", "euclidean", "dot"])
    def test_matches_naive_oracle(self, farm, metric):
        rng = np.random.default_rng(31)
        farm.create_collection("c", 16, metric)
        entries = {}
        for i in range(300):
            vec = rng.standard_normal(16).astype(np.float32)
            key = f"e{i:04d}"
            tags = ["even"] if i % 2 == 0 else ["odd"]
            farm.upsert("c", key, vec, tags)
            entries[key] = ([float(x) for x in vec], tags)
        for _ in range(20):
            q = rng.standard_normal(16).astype(np.float32)
            q64 = [float(x) for x in q]
            got = [r.key for r in farm.search_exact("c", q, k=10)]
            assert got == naive_search(entries, metric, q64, 10)
            got_f = farm.search_exact("c", q, k=5, tag_filter=["even"])
            assert [r.key for r in got_f] == naive_search(
                entries, metric, q64, 5, tag_filter=["even"]
            )
            assert all("even" in entries[r.key][1] for r in got_f)

    def test_cosine_symmetry(self, farm):
        rng = np.random.default_rng(5)
        farm.create_collection("c", 8, "cosine")
        vecs = {}
        for i in range(10):
            v = rng.standard_normal(8).astype(np.float32)
            farm.upsert("c", f"k{i}", v)
            vecs[f"k{i}"] = v
        for a in ("k0", "k3"):
            for b in ("k7", "k9"):
                sa = next(
                    r.score for r in farm.search_exact("c", vecs[a], k=10) if r.key == b
                )
                sb = next(
                    r.score for r in farm.search_exact("c", vecs[b], k=10) if r.key == a
                )
                assert sa == pytest.approx(sb, abs=1e-6)

    def test_query_validation(self, farm):
        farm.create_collection("c", 2, "cosine")
        farm.upsert("c", "k", [1.0, 0.0])
        with pytest.raises(InvalidInput):
            farm.search_exact("c", [1.0], k=1)
        with pytest.raises(InvalidInput):
            farm.search_exact("c", [1.0, 0.0], k=0)
        with pytest.raises(InvalidInput):
            farm.search_exact("c", [0.0, 0.0], k=1)


class TestAnnSearch:
    def test_single_entry_matches_exact(self, farm):
        farm.create_collection("c", 4, "euclidean")
        farm.upsert("c", "only", [1.0, 2.0, 3.0, 4.0])
        farm.build_index("c")
        ann = farm.search_ann("c", [1.0, 2.0, 3.0, 4.0], k=1)
        exact = farm.search_exact("c", [1.0, 2.0, 3.0, 4.0], k=1)
        assert [(r.key, r.score) for r in ann] == [(r.key, r.score) for r in exact]

    def test_stale_index_rejected(self, farm):
        farm.create_collection("c", 2, "dot")
        farm.upsert("c", "a", [1.0, 0.0])
        farm.build_index("c")
        farm.search_ann("c", [1.0, 0.0], k=1)
        farm.upsert("c", "b", [0.0, 1.0])
        with pytest.raises(RebuildRequired):
            farm.search_ann("c", [1.0, 0.0], k=1)
        farm.build_index("c")
        assert len(farm.search_ann("c", [1.0, 0.0], k=2)) == 2

    def test_unbuilt_index_rejected(self, farm):
        farm.create_collection("c", 2, "dot")
        farm.upsert("c", "a", [1.0, 0.0])
        with pytest.raises(RebuildRequired):
            farm.search_ann("c", [1.0, 0.0], k=1)

    @pytest.mark.parametrize("metric", ["euclidean", "cosine"])
    def test_recall_on_random_vectors(self, farm, metric):
        rng = np.random.default_rng(77)
        n, dim = 2000, 24
        farm.create_collection("c", dim, metric)
        data = rng.standard_normal((n, dim)).astype(np.float32)
        for i in range(n):
            farm.upsert("c", f"p{i:05d}", data[i])
        farm.build_index("c", seed=1)
        hits = 0
        trials = 30
        for t in range(trials):
            q = rng.standard_normal(dim).astype(np.float32)
            exact = {r.key for r in farm.search_exact("c", q, k=10)}
            ann = {r.key for r in farm.search_ann("c", q, k=10)}
            hits += len(exact & ann)
        assert hits / (10 * trials) >= 0.9

    def test_deterministic_given_seed(self, farm):
        rng = np.random.default_rng(3)
        farm.create_collection("c", 8, "euclidean")
        for i in range(200):
            farm.upsert("c", f"k{i:03d}", rng.standard_normal(8).astype(np.float32))
        q = rng.standard_normal(8).astype(np.float32)
        farm.build_index("c", seed=9)
        first = [(r.key, r.score) for r in farm.search_ann("c", q, k=5)]
        farm.build_index("c", seed=9)
        second = [(r.key, r.score) for r in farm.search_ann("c", q, k=5)]
        assert first == second


class TestInterchangeFormat:
    def fill(self, farm, name="c", metric="cosine", n=25, dim=6, seed=11):
        rng = np.random.default_rng(seed)
        farm.create_collection(name, dim, metric)
        for i in range(n):
            vec = rng.standard_normal(dim).astype(np.float32)
            farm.upsert(name, f"key-{i:03d}", vec, ["t%d" % (i % 3), "all"])

    def test_round_trip_bit_exact(self, farm, tmp_path):
        self.fill(farm)
        path = tmp_path / "c.sef"
        farm.export_collection("c", path)
        farm.import_collection(path, "c2")
        a = farm.get_collection("c")
        b = farm.get_collection("c2")
        assert (a["dim"], a["metric"], a["entry_count"]) == (
            b["dim"], b["metric"], b["entry_count"],
        )
        for i in range(25):
            key = f"key-{i:03d}"
            ea, eb = farm.get("c", key), farm.get("c2", key)
            assert ea["vector"] == eb["vector"]
            assert ea["tags"] == eb["tags"]

    def test_reexport_is_byte_identical(self, farm, tmp_path):
        self.fill(farm)
        p1, p2 = tmp_path / "a.sef", tmp_path / "b.sef"
        farm.export_collection("c", p1)
        farm.import_collection(p1, "c2")
        farm.export_collection("c2", p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_collection_round_trip(self, farm, tmp_path):
        farm.create_collection("empty", 5, "dot")
        path = tmp_path / "e.sef"
        farm.export_collection("empty", path)
        meta = farm.import_collection(path, "empty2")
        assert meta["entry_count"] == 0
        assert meta["dim"] == 5
        assert meta["metric"] == "dot"

    def test_single_byte_corruption_detected(self, farm, tmp_path):
        self.fill(farm, n=8)
        path = tmp_path / "c.sef"
        farm.export_collection("c", path)
        raw = path.read_bytes()
        for pos in [0, 4, 7, 11, 20, len(raw) // 2, len(raw) - 40, len(raw) - 1]:
            mutated = bytearray(raw)
            mutated[pos] ^= 0x01
            bad = tmp_path / "bad.sef"
            bad.write_bytes(bytes(mutated))
            with pytest.raises((IntegrityError, InvalidInput)):
                farm.import_collection(bad, f"x{pos}")

    def test_truncation_detected(self, farm, tmp_path):
        self.fill(farm, n=4)
        path = tmp_path / "c.sef"
        farm.export_collection("c", path)
        raw = path.read_bytes()
        (tmp_path / "t.sef").write_bytes(raw[: len(raw) - 5])
        with pytest.raises(IntegrityError):
            farm.import_collection(tmp_path / "t.sef", "t")

    @given(
        st.lists(
            st.tuples(
                st.text(
                    alphabet=st.characters(min_codepoint=33, max_codepoint=0x2FA0),
                    min_size=1,
                    max_size=12,
                ),
                st.lists(st.floats(-50, 50, width=32), min_size=3, max_size=3),
                st.lists(st.sampled_from(["red", "green", "blü"]), max_size=2),
            ),
            max_size=12,
            unique_by=lambda t: t[0],
        ),
        st.sampled_from(["euclidean", "dot"]),
    )
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, rows, metric):
        farm = embedfarm.EmbedFarm(Database())
        import tempfile, os

        farm.create_collection("c", 3, metric)
        for key, vec, tags in rows:
            farm.upsert("c", key, vec, tags)
        fd, path = tempfile.mkstemp(suffix=".sef")
        os.close(fd)
        try:
            farm.export_collection("c", path)
            farm.import_collection(path, "c2")
            for key, _, _ in rows:
                assert farm.get("c", key) == {
                    **farm.get("c2", key),
                    "updated_at": farm.get("c", key)["updated_at"],
                }
        finally:
            os.unlink(path)
