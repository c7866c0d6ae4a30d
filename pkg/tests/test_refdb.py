import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecd import refdb
from ecd.refdb import (
    MatchCriteria,
    Pose,
    ReferenceEntry,
    build_database,
    classify_match,
    compute_descriptor,
    retrieve_topk,
    strided_indices,
)


def make_sequences(lengths, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    seqs = []
    for m, length in enumerate(lengths):
        frames = [
            (Pose(x=float(j), y=0.0), rng.normal(size=(dim, 2, 2)).astype(np.float32))
            for j in range(length)
        ]
        seqs.append((f"seq{m}", frames))
    return seqs


class TestBuildDatabase:
    def test_stride_three(self):
        db = build_database(make_sequences([7, 5]), stride=3)
        kept = [(e.sequence, e.index) for e in db.entries]
        assert kept == [("seq0", 1), ("seq0", 4), ("seq0", 7), ("seq1", 1), ("seq1", 4)]

    def test_stride_one_keeps_all(self):
        db = build_database(make_sequences([4, 6]), stride=1)
        assert len(db) == 10

    def test_single_survivor(self):
        db = build_database(make_sequences([10]), stride=10)
        assert [(e.sequence, e.index) for e in db.entries] == [("seq0", 1)]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_database([], stride=1)

    @settings(max_examples=60, deadline=None)
    @given(
        lengths=st.lists(st.integers(1, 40), min_size=1, max_size=5),
        stride=st.integers(1, 10),
    )
    def test_size_formula(self, lengths, stride):
        db = build_database(make_sequences(lengths), stride=stride)
        assert len(db) == sum(math.ceil(l / stride) for l in lengths)

    @settings(max_examples=20, deadline=None)
    @given(
        lengths=st.lists(st.integers(1, 20), min_size=1, max_size=3),
        stride=st.integers(2, 8),
    )
    def test_strided_subset_of_full(self, lengths, stride):
        full = {(e.sequence, e.index) for e in build_database(make_sequences(lengths), 1).entries}
        sub = {(e.sequence, e.index) for e in build_database(make_sequences(lengths), stride).entries}
        assert sub <= full


class TestDescriptor:
    def test_identical_vectors(self):
        v = np.array([0.6, 0.8], dtype=np.float32)
        f = np.tile(v[:, None, None], (1, 3, 3))
        np.testing.assert_allclose(compute_descriptor(f), v, atol=1e-6)

    def test_two_basis_vectors(self):
        f = np.zeros((2, 1, 2), dtype=np.float32)
        f[0, 0, 0] = 1.0
        f[1, 0, 1] = 1.0
        np.testing.assert_allclose(compute_descriptor(f), [1 / np.sqrt(2)] * 2, atol=1e-6)

    def test_unit_norm(self):
        f = np.random.default_rng(0).normal(size=(8, 4, 4))
        assert abs(np.linalg.norm(compute_descriptor(f)) - 1.0) < 1e-6

    def test_zero_map_gives_zero(self):
        np.testing.assert_array_equal(compute_descriptor(np.zeros((3, 2, 2))), np.zeros(3))


def entry_with_descriptor(desc, seq="s", j=1, pose=None):
    return ReferenceEntry(
        sequence=seq,
        index=j,
        pose=pose or Pose(0.0, 0.0),
        descriptor=np.asarray(desc, dtype=np.float64),
        features=np.zeros((2, 1, 1), dtype=np.float32),
    )


class TestRetrieve:
    def test_cosine_ordering(self):
        db = refdb.ReferenceDatabase(
            entries=[
                entry_with_descriptor([0.8, 0.6], j=1),
                entry_with_descriptor([1.0, 0.0], j=2),
                entry_with_descriptor([0.0, 1.0], j=3),
            ],
            stride=1,
        )
        top, sims = retrieve_topk(np.array([1.0, 0.0]), db, 2)
        assert [e.index for e in top] == [2, 1]
        assert sims == pytest.approx([1.0, 0.8])

    def test_k_equals_db_size(self):
        db = refdb.ReferenceDatabase(
            entries=[entry_with_descriptor([1.0, 0.0], j=i) for i in range(1, 4)], stride=1
        )
        top, _ = retrieve_topk(np.array([1.0, 0.0]), db, 3)
        assert len(top) == 3

    def test_k_too_large_names_both_values(self):
        db = refdb.ReferenceDatabase(entries=[entry_with_descriptor([1.0, 0.0])], stride=1)
        with pytest.raises(ValueError, match="2.*1"):
            retrieve_topk(np.array([1.0, 0.0]), db, 2)

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(1)
        descs = rng.normal(size=(64, 8))
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
        db = refdb.ReferenceDatabase(
            entries=[entry_with_descriptor(d, j=i + 1) for i, d in enumerate(descs)], stride=1
        )
        q = rng.normal(size=8)
        q /= np.linalg.norm(q)
        top, _ = retrieve_topk(q, db, 5)
        oracle = np.argsort(-(descs @ q), kind="stable")[:5]
        assert [e.index for e in top] == [int(i) + 1 for i in oracle]

    def test_topk_prefix_consistency(self):
        rng = np.random.default_rng(2)
        descs = rng.normal(size=(20, 4))
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
        db = refdb.ReferenceDatabase(
            entries=[entry_with_descriptor(d, j=i + 1) for i, d in enumerate(descs)], stride=1
        )
        q = descs[0]
        top5, _ = retrieve_topk(q, db, 5)
        top6, _ = retrieve_topk(q, db, 6)
        assert [e.index for e in top5] == [e.index for e in top6[:5]]


class TestClassifyMatch:
    CRIT = MatchCriteria()

    def test_strict(self):
        e = entry_with_descriptor([1, 0], pose=Pose(0.5, 0.0, rotation=5.0))
        assert classify_match(Pose(0.0, 0.0, 0.0), e, self.CRIT) == "strict"

    def test_coarse_threshold_mode(self):
        e = entry_with_descriptor([1, 0], pose=Pose(10.0, 0.0, rotation=30.0))
        assert classify_match(Pose(0.0, 0.0, 0.0), e, self.CRIT) == "coarse"

    def test_miss(self):
        e = entry_with_descriptor([1, 0], seq="other", pose=Pose(100.0, 0.0))
        assert classify_match(Pose(0.0, 0.0), e, self.CRIT, query_sequence="q") == "miss"

    def test_rotation_wraps(self):
        e = entry_with_descriptor([1, 0], pose=Pose(0.0, 0.0, rotation=-175.0))
        assert classify_match(Pose(0.0, 0.0, rotation=179.0), e, self.CRIT) == "strict"

    def test_same_sequence_mode(self):
        crit = MatchCriteria(mode="same_sequence")
        e = entry_with_descriptor([1, 0], seq="a", pose=Pose(500.0, 0.0))
        assert classify_match(Pose(0.0, 0.0), e, crit, query_sequence="a") == "coarse"
        assert classify_match(Pose(0.0, 0.0), e, crit, query_sequence="b") == "miss"

    @settings(max_examples=100, deadline=None)
    @given(
        qx=st.floats(-50, 50), qy=st.floats(-50, 50), qr=st.floats(-180, 179),
        ex=st.floats(-50, 50), ey=st.floats(-50, 50), er=st.floats(-180, 179),
    )
    def test_strict_implies_coarse(self, qx, qy, qr, ex, ey, er):
        e = entry_with_descriptor([1, 0], pose=Pose(ex, ey, rotation=er))
        grade = classify_match(Pose(qx, qy, rotation=qr), e, self.CRIT)
        if grade == "strict":
            assert refdb.pose_distance(Pose(qx, qy), e.pose) <= self.CRIT.coarse_distance
            assert refdb.rotation_difference(qr, er) <= self.CRIT.coarse_rotation

    def test_invalid_criteria(self):
        with pytest.raises(ValueError):
            MatchCriteria(strict_distance=30.0)


def test_strided_indices():
    assert strided_indices(7, 3) == [1, 4, 7]
    assert strided_indices(5, 1) == [1, 2, 3, 4, 5]


def test_persistence_roundtrip(tmp_path):
    db = build_database(make_sequences([5, 3]), stride=2)
    refdb.save_database(db, tmp_path / "db")
    back = refdb.load_database(tmp_path / "db")
    assert back.stride == db.stride
    assert back.sequence_lengths == db.sequence_lengths
    assert len(back) == len(db)
    for a, b in zip(db.entries, back.entries):
        assert (a.sequence, a.index) == (b.sequence, b.index)
        assert a.pose == b.pose
        np.testing.assert_allclose(a.descriptor, b.descriptor, atol=1e-7)
        np.testing.assert_allclose(a.load_features(), b.load_features(), atol=1e-7)
