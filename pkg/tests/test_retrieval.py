"""Tests for the instance retrieval index and its merge criterion."""

import numpy as np
import pytest

from o2v.perception import stub_embed
from o2v.retrieval import EPS_DIST, InstanceEntry, RetrievalMap, merge_score


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def entry(emb, center, weight=1.0, eid=0):
    return InstanceEntry(id=eid, embedding=unit(emb),
                         center=np.asarray(center, np.float64),
                         weight=weight, voxel_count=1)


class TestMergeScore:
    def test_eq_arithmetic(self):
        # cos 0.9 at 0.3 m must score exactly 3.0
        a = np.array([1.0, 0.0])
        theta = np.arccos(0.9)
        b = np.array([np.cos(theta), np.sin(theta)])
        e = entry(a, [0.0, 0.0, 0.0])
        score = merge_score(e, b, np.array([0.3, 0.0, 0.0]))
        assert abs(score - 3.0) < 1e-9

    def test_identical_centers_hit_distance_floor(self):
        e = entry([1.0, 0.0], [1.0, 2.0, 3.0])
        score = merge_score(e, unit([1.0, 0.0]), np.array([1.0, 2.0, 3.0]))
        assert abs(score - 1.0 / EPS_DIST) < 1e-9

    def test_zero_cosine_scores_zero(self):
        e = entry([1.0, 0.0], [0.0, 0.0, 0.0])
        assert merge_score(e, unit([0.0, 1.0]), np.zeros(3)) == 0.0

    def test_negative_cosine_clamped(self):
        e = entry([1.0, 0.0], [0.0, 0.0, 0.0])
        assert merge_score(e, unit([-1.0, 0.0]), np.array([9.0, 0, 0])) == 0.0


class TestRegister:
    def test_empty_map_creates_entry(self):
        m = RetrievalMap()
        f = unit([1.0, 2.0, 2.0])
        c = np.array([0.5, 0.5, 1.0])
        eid = m.register_instance(f, c, 1.0)
        assert len(m) == 1
        e = m.get(eid)
        assert np.allclose(e.center, c)
        assert np.allclose(e.embedding, f)
        assert e.weight == 1.0

    def test_identical_observation_merges(self):
        m = RetrievalMap()
        f = unit([0.0, 1.0, 0.0])
        c = np.array([1.0, 0.0, 0.5])
        a = m.register_instance(f, c, 2.0)
        b = m.register_instance(f, c, 1.0)
        assert a == b
        assert len(m) == 1
        e = m.get(a)
        assert e.weight == 3.0
        assert np.allclose(e.embedding, f, atol=1e-12)
        assert np.allclose(e.center, c, atol=1e-12)

    def test_orthogonal_far_apart_stay_distinct(self):
        for alpha in (0.1, 2.0):
            m = RetrievalMap(alpha=alpha)
            m.register_instance(unit([1.0, 0.0]), np.zeros(3), 1.0)
            m.register_instance(unit([0.0, 1.0]), np.array([5.0, 0, 0]), 1.0)
            assert len(m) == 2

    def test_same_label_half_meter_apart_stays_distinct(self):
        # at cos <= 0.99 a 0.5 m gap caps the score at 1.98, under alpha=2
        m = RetrievalMap()
        f = stub_embed("chair").astype(np.float64)
        f = f / np.linalg.norm(f)
        g = f.copy()
        g[0] += 0.25
        g = g / np.linalg.norm(g)
        assert float(np.dot(f, g)) <= 0.99
        m.register_instance(f, np.zeros(3), 1.0)
        m.register_instance(g, np.array([0.5, 0.0, 0.0]), 1.0)
        assert len(m) == 2

    def test_consistent_stream_forms_single_entry(self):
        rng = np.random.default_rng(0)
        base = unit(rng.standard_normal(32))
        center = np.array([1.0, -0.5, 0.8])
        m = RetrievalMap()
        for _ in range(25):
            jitter = center + rng.uniform(-0.02, 0.02, 3)
            m.register_instance(base, jitter, float(rng.uniform(0.2, 1.0)))
        assert len(m) == 1

    def test_merge_symmetric_for_equal_weights(self):
        a = unit([1.0, 0.2, 0.0])
        b = unit([1.0, -0.2, 0.0])
        ca = np.array([0.0, 0.0, 0.0])
        cb = np.array([0.02, 0.0, 0.0])
        m1 = RetrievalMap()
        m1.register_instance(a, ca, 1.0)
        m1.register_instance(b, cb, 1.0)
        m2 = RetrievalMap()
        m2.register_instance(b, cb, 1.0)
        m2.register_instance(a, ca, 1.0)
        assert len(m1) == len(m2) == 1
        assert np.allclose(m1.entries[0].embedding, m2.entries[0].embedding,
                           atol=1e-6)
        assert np.allclose(m1.entries[0].center, m2.entries[0].center,
                           atol=1e-6)

    def test_merged_embedding_stays_unit(self):
        m = RetrievalMap()
        m.register_instance(unit([1.0, 0.1]), np.zeros(3), 1.0)
        m.register_instance(unit([1.0, -0.1]), np.zeros(3), 3.0)
        assert abs(np.linalg.norm(m.entries[0].embedding) - 1.0) < 1e-12

    def test_voxel_count_accumulates(self):
        m = RetrievalMap()
        f = unit([1.0, 0.0])
        m.register_instance(f, np.zeros(3), 1.0, voxel_count=4)
        m.register_instance(f, np.zeros(3), 1.0, voxel_count=3)
        assert m.entries[0].voxel_count == 7

    def test_nonpositive_weight_rejected(self):
        m = RetrievalMap()
        with pytest.raises(ValueError):
            m.register_instance(unit([1.0, 0.0]), np.zeros(3), 0.0)

    def test_non_unit_embedding_rejected(self):
        m = RetrievalMap()
        with pytest.raises(ValueError):
            m.register_instance(np.array([1.0, 1.0]), np.zeros(3), 1.0)

    def test_greedy_merge_matches_independent_oracle(self):
        # an independently coded greedy pass must produce the same entries
        def oracle(stream, alpha):
            entries = []  # (id, emb, center, weight)
            next_id = 0
            for f, c, k in stream:
                best_i = -1
                best_s = -1.0
                for i, (eid, e, ec, w) in enumerate(entries):
                    cos = float(np.dot(e, f))
                    s = 0.0 if cos <= 0 else cos / max(
                        float(np.linalg.norm(ec - c)), EPS_DIST)
                    if s > best_s:
                        best_s = s
                        best_i = i
                if best_i >= 0 and best_s > alpha:
                    eid, e, ec, w = entries[best_i]
                    t = w + k
                    merged = (w * e + k * f) / t
                    merged = merged / np.linalg.norm(merged)
                    entries[best_i] = (eid, merged, (w * ec + k * c) / t, t)
                else:
                    entries.append((next_id, f.copy(), c.copy(), k))
                    next_id += 1
            return entries

        rng = np.random.default_rng(42)
        for trial in range(30):
            protos = [unit(rng.standard_normal(16)) for _ in range(4)]
            centers = rng.uniform(-2, 2, (4, 3))
            stream = []
            for _ in range(40):
                j = int(rng.integers(4))
                f = unit(protos[j] + 0.01 * rng.standard_normal(16))
                c = centers[j] + rng.uniform(-0.03, 0.03, 3)
                stream.append((f, c, float(rng.uniform(0.2, 1.5))))
            m = RetrievalMap()
            for f, c, k in stream:
                m.register_instance(f, c, k)
            ref = oracle(stream, m.alpha)
            assert len(m) == len(ref)
            for got, (eid, e, ec, w) in zip(m.entries, ref):
                assert got.id == eid
                assert np.allclose(got.embedding, e, atol=1e-12)
                assert np.allclose(got.center, ec, atol=1e-12)
                assert abs(got.weight - w) < 1e-12


class TestQuery:
    def test_exact_embedding_ranks_first(self):
        m = RetrievalMap()
        chair = stub_embed("chair").astype(np.float64)
        chair /= np.linalg.norm(chair)
        door = stub_embed("door").astype(np.float64)
        door /= np.linalg.norm(door)
        cid = m.register_instance(chair, np.array([1.0, 0, 0]), 1.0)
        m.register_instance(door, np.array([0.0, 1, 0]), 1.0)
        out = m.query(chair, top_n=5)
        assert out[0][0] == cid
        assert abs(out[0][1] - 1.0) < 1e-9

    def test_top_n_truncates(self):
        m = RetrievalMap()
        rng = np.random.default_rng(1)
        for i in range(5):
            m.register_instance(unit(rng.standard_normal(8)),
                                rng.uniform(-3, 3, 3) * 10, 1.0)
        assert len(m.query(unit(rng.standard_normal(8)), top_n=1)) == 1

    def test_empty_map_returns_empty(self):
        m = RetrievalMap()
        assert m.query(unit([1.0, 0.0])) == []

    def test_tie_breaks_weight_then_id(self):
        m = RetrievalMap(alpha=1e9)  # never merge
        f = unit([1.0, 0.0])
        m.register_instance(f, np.zeros(3), 1.0)  # id 0
        m.register_instance(f, np.array([3.0, 0, 0]), 5.0)  # id 1, heavier
        m.register_instance(f, np.array([6.0, 0, 0]), 5.0)  # id 2, same weight
        out = m.query(f, top_n=3)
        assert [o[0] for o in out] == [1, 2, 0]

    def test_ranking_matches_sort_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            m = RetrievalMap(alpha=1e9)
            n = int(rng.integers(1, 12))
            for _ in range(n):
                m.register_instance(unit(rng.standard_normal(8)),
                                    rng.uniform(-5, 5, 3) * 4,
                                    float(rng.choice([1.0, 2.0])))
            q = unit(rng.standard_normal(8))
            got = m.query(q, top_n=n)
            ref = sorted(
                ((float(np.dot(e.embedding, q)), e) for e in m.entries),
                key=lambda t: (-t[0], -t[1].weight, t[1].id))
            assert [g[0] for g in got] == [e.id for _, e in ref]
            for g, (cos, _) in zip(got, ref):
                assert abs(g[1] - cos) < 1e-12

    def test_clone_is_independent(self):
        m = RetrievalMap()
        m.register_instance(unit([1.0, 0.0]), np.zeros(3), 1.0)
        c = m.clone()
        c.register_instance(unit([0.0, 1.0]), np.array([4.0, 0, 0]), 1.0)
        assert len(m) == 1
        assert len(c) == 2
