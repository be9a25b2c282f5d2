from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occlift.errors import ConfigError, ShapeError
from occlift.graph import Skeleton, build_graph, load_skeleton, normalize
from occlift.masks import (MaskParams, MaskSet, all_ones, apply_mask, dropped_runs,
                           generate_masks, mask_stats, write_stats_csv)
from occlift.numkit import Tape, tsum

H36M = load_skeleton("h36m17")
SC13 = load_skeleton("sc13")


def enumerate_edges(skel, T, strides):
    """Directed edge counts by brute force over all node pairs."""
    nj = skel.n_joints
    bones = {frozenset(e) for e in skel.edges}
    counts = [0] * (len(strides) + 1)
    for a, b in itertools.product(range(T * nj), repeat=2):
        ta, ja = divmod(a, nj)
        tb, jb = divmod(b, nj)
        if ta == tb and frozenset((ja, jb)) in bones:
            counts[0] += 1
        for k, d in enumerate(sorted(strides)):
            if ja == jb and abs(ta - tb) == d:
                counts[k + 1] += 1
    return counts


class TestSkeleton:
    def test_builtins(self):
        assert H36M.n_joints == 17 and SC13.n_joints == 13
        assert len(H36M.edges) == 16 and H36M.root_index == 0

    def test_not_a_tree(self):
        with pytest.raises(ConfigError):
            Skeleton(3, [(0, 1), (1, 2), (2, 0)], ["a", "b", "c"])
        with pytest.raises(ConfigError):
            Skeleton(4, [(0, 1), (1, 0), (2, 3)], ["a", "b", "c", "d"])

    def test_dict_round_trip(self):
        back = Skeleton.from_dict(H36M.to_dict())
        assert back == H36M and np.array_equal(back.offsets, H36M.offsets)


class TestBuildGraph:
    def test_published_counts(self):
        g = build_graph(H36M, 31, {1, 3, 5, 7})
        assert g.N == 527
        assert g.edge_counts() == [992, 1020, 952, 884, 816]

    def test_counts_match_enumeration(self):
        g = build_graph(SC13, 9, (1, 4))
        assert g.edge_counts() == enumerate_edges(SC13, 9, (1, 4))

    @given(st.integers(1, 61), st.sampled_from([13, 17]), st.sets(st.integers(1, 11)))
    @settings(max_examples=150, deadline=None)
    def test_closed_form_counts(self, T, nj, strides):
        skel = SC13 if nj == 13 else H36M
        strides = {d for d in strides if d < T}
        g = build_graph(skel, T, strides)
        expect = [2 * T * (nj - 1)] + [2 * (T - d) * nj for d in sorted(strides)]
        assert g.edge_counts() == expect

    def test_single_frame(self):
        g = build_graph(H36M, 1, ())
        assert g.n_relations == 1 and g.N == 17

    def test_stride_too_large(self):
        with pytest.raises(ConfigError, match="stride 31"):
            build_graph(H36M, 31, (1, 31))

    def test_node_index_bijection(self):
        g = build_graph(SC13, 7, (1,))
        idx = {g.node_index(t, j) for t in range(7) for j in range(13)}
        assert idx == set(range(g.N))
        assert all(g.node_of(g.node_index(t, j)) == (t, j) for t in range(7) for j in range(13))

    def test_edge_kinds(self):
        g = build_graph(H36M, 11, (1, 3))
        nj = 17
        a, b = np.nonzero(g.relations[0])
        assert (a // nj == b // nj).all()
        for A in g.relations[1:]:
            a, b = np.nonzero(A)
            assert (a % nj == b % nj).all()
        for A in g.relations:
            assert np.array_equal(A, A.T) and not A.diagonal().any()


class TestNormalize:
    def test_single_node(self):
        skel = Skeleton(1, [], ["root"])
        assert normalize(build_graph(skel, 1, ()))[0].tolist() == [[1.0]]

    def test_two_nodes(self):
        skel = Skeleton(2, [(0, 1)], ["a", "b"])
        assert np.allclose(normalize(build_graph(skel, 1, ()))[0], 0.5, atol=1e-15)

    def test_regular_graph_rows(self):
        # a stride-1 temporal relation on a 2-frame window is 1-regular
        A = normalize(build_graph(H36M, 2, (1,)))[1]
        assert np.allclose(A.sum(axis=1), 1.0, atol=1e-14)

    def test_symmetric_and_bounded(self):
        for A in normalize(build_graph(H36M, 9, (1, 2, 5))):
            assert np.array_equal(A, A.T)
            assert A.min() >= 0.0 and A.max() <= 1.0


class TestMasks:
    def test_published_beta(self):
        assert MaskParams(32, 1.8, 527, 17).beta == 292
        assert MaskParams(32, 1.8, 403, 13).beta == 223

    @pytest.mark.parametrize("alpha,tau", [(1.0, 0.0), (1.2, 0.17), (2.0, 0.5), (2.5, 0.60),
                                           (3.0, 0.67)])
    def test_masked_rate_table(self, alpha, tau):
        ms = generate_masks(MaskParams(4, alpha, 527, 17, seed=1))
        assert abs(mask_stats(ms)["masked_rate"] - tau) <= 0.01

    def test_alpha_one_all_ones(self):
        ms = generate_masks(MaskParams(3, 1.0, 527, 17))
        assert ms.masks.all()

    def test_alpha_below_one(self):
        with pytest.raises(ConfigError):
            MaskParams(3, 0.9, 527, 17)

    @given(st.integers(0, 2**63 - 1), st.floats(1.0, 4.0), st.integers(2, 31),
           st.sampled_from([13, 17]))
    @settings(max_examples=60, deadline=None)
    def test_popcount_and_runs(self, seed, alpha, T, nj):
        p = MaskParams(5, alpha, T * nj, nj, seed=seed)
        ms = generate_masks(p)
        assert (ms.masks.sum(axis=1) == p.beta).all()
        bound = math.ceil((p.n_nodes - p.beta) / p.min_run)
        for m in ms.masks:
            runs = dropped_runs(m, nj)
            assert all(len(r) <= bound for r in runs)
            assert sum(map(sum, runs)) == p.n_nodes - p.beta

    def test_deterministic_and_serialized(self, tmp_path):
        p = MaskParams(8, 1.8, 527, 17, seed=12345)
        a, b = generate_masks(p), generate_masks(p)
        assert np.array_equal(a.masks, b.masks)
        a.save(tmp_path / "m.json")
        back = MaskSet.load(tmp_path / "m.json")
        assert np.array_equal(back.masks, a.masks) and back.params == p

    def test_overlap_absent_for_single_mask(self):
        assert mask_stats(generate_masks(MaskParams(1, 1.8, 527, 17)))["mean_pairwise_overlap"] is None

    def test_stats_csv(self, tmp_path):
        ms = generate_masks(MaskParams(3, 2.0, 62, 2, seed=3))
        write_stats_csv(ms, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "mask_id,popcount,max_run,mean_run" and len(lines) == 4
        assert all(int(line.split(",")[1]) == 31 for line in lines[1:])


class TestApplyMask:
    def test_identity_and_zero(self):
        h = np.random.default_rng(0).normal(size=(10, 3))
        assert np.array_equal(apply_mask(h, all_ones(10)).data, h)
        assert not apply_mask(h, np.zeros(10, bool)).data.any()

    def test_nonzero_rows_equal_popcount(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(40, 4))
        m = rng.random(40) > 0.5
        assert (np.abs(apply_mask(h, m).data).sum(axis=1) > 0).sum() == m.sum()

    def test_masked_rows_get_zero_gradient(self):
        rng = np.random.default_rng(2)
        tape = Tape()
        h = tape.param("h", rng.normal(size=(6, 2)))
        m = np.array([1, 0, 1, 0, 0, 1], bool)
        g = tape.backward(tsum(apply_mask(h, m)))["h"]
        assert not g[~m].any() and (g[m] == 1).all()

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            apply_mask(np.ones((5, 1)), np.ones(4))
