from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occlift.errors import EvaluationError
from occlift.evalmetrics import (mpjpe, nmpjpe, pck3d, pmpjpe, report, similarity_align)


def rand_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                     [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                     [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


# -- brute-force single-loop oracles --------------------------------------------

def oracle_mpjpe(pred, gt):
    total, n = 0.0, 0
    for f in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            d = [(pred[f, j, k] - pred[f, 0, k]) - (gt[f, j, k] - gt[f, 0, k]) for k in range(3)]
            total += math.sqrt(sum(v * v for v in d))
            n += 1
    return total / n


def oracle_nmpjpe(pred, gt):
    total, n = 0.0, 0
    for f in range(pred.shape[0]):
        pc = [[pred[f, j, k] - pred[f, 0, k] for k in range(3)] for j in range(pred.shape[1])]
        gc = [[gt[f, j, k] - gt[f, 0, k] for k in range(3)] for j in range(pred.shape[1])]
        num = sum(p * g for pj, gj in zip(pc, gc) for p, g in zip(pj, gj))
        den = sum(p * p for pj in pc for p in pj)
        s = num / den
        for pj, gj in zip(pc, gc):
            total += math.sqrt(sum((s * p - g) ** 2 for p, g in zip(pj, gj)))
            n += 1
    return total / n


def oracle_pmpjpe(pred, gt):
    """Umeyama via numpy's LAPACK SVD (independent of the Jacobi svd3)."""
    total, n = 0.0, 0
    for f in range(pred.shape[0]):
        X, Y = pred[f], gt[f]
        mx, my = X.mean(0), Y.mean(0)
        Xc, Yc = X - mx, Y - my
        U, S, Vt = np.linalg.svd(Yc.T @ Xc / len(X))
        E = np.diag([1, 1, np.sign(np.linalg.det(U @ Vt))])
        R = U @ E @ Vt
        s = np.trace(np.diag(S) @ E) / (Xc ** 2).sum(1).mean()
        A = s * X @ R.T + (my - s * R @ mx)
        for j in range(len(X)):
            total += math.sqrt(sum((A[j, k] - Y[j, k]) ** 2 for k in range(3)))
            n += 1
    return total / n


def pair(seed, F=4, J=17):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(F, J, 3)) * 300
    return gt + rng.normal(size=gt.shape) * 40, gt


class TestMpjpe:
    def test_identical(self):
        _, gt = pair(0)
        assert mpjpe(gt, gt) == 0.0

    def test_345(self):
        _, gt = pair(1)
        pred = gt.copy()
        pred[:, 1:] += [3.0, 4.0, 0.0]
        # root-centering maps every non-root joint to a 5 mm error; the root itself has 0
        assert mpjpe(pred, gt) == pytest.approx(5.0 * 16 / 17)
        assert mpjpe(pred, gt, valid=np.arange(17)[None].repeat(4, 0) > 0) == pytest.approx(5.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_oracle(self, seed):
        pred, gt = pair(seed)
        assert abs(mpjpe(pred, gt) - oracle_mpjpe(pred, gt)) < 1e-12

    def test_empty(self):
        with pytest.raises(EvaluationError):
            mpjpe(np.zeros((0, 17, 3)), np.zeros((0, 17, 3)))


class TestNmpjpe:
    def test_scaled(self):
        _, gt = pair(2)
        assert nmpjpe(2 * gt, gt) < 1e-10

    def test_oracle(self):
        pred, gt = pair(3)
        assert abs(nmpjpe(pred, gt) - oracle_nmpjpe(pred, gt)) < 1e-12

    def test_zero_norm(self):
        _, gt = pair(4)
        with pytest.raises(EvaluationError):
            nmpjpe(np.zeros_like(gt), gt)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_squared_error_never_worse_than_unit_scale(self, seed):
        # the least-squares scale cannot raise the summed squared error
        pred, gt = pair(seed, F=1)
        pc, gc = pred - pred[:, :1], gt - gt[:, :1]
        s = (pc * gc).sum() / (pc * pc).sum()
        assert ((s * pc - gc) ** 2).sum() <= ((pc - gc) ** 2).sum() + 1e-9


class TestPmpjpe:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_similarity_removed(self, seed):
        rng = np.random.default_rng(seed)
        _, gt = pair(seed)
        R = rand_rotation(rng)
        pred = rng.uniform(0.3, 3.0) * gt @ R.T + rng.normal(size=3) * 1000
        assert pmpjpe(pred, gt) < 1e-6

    def test_reflection_gives_proper_rotation(self):
        _, gt = pair(5, F=1)
        pred = gt * np.array([1.0, 1.0, -1.0])
        al = similarity_align(pred, gt)
        assert np.linalg.det(al.rotation[0]) == pytest.approx(1.0)
        assert pmpjpe(pred, gt) > 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_oracle(self, seed):
        pred, gt = pair(seed)
        assert abs(pmpjpe(pred, gt) - oracle_pmpjpe(pred, gt)) < 1e-12

    def test_degenerate_frame_skipped(self):
        pred, gt = pair(6, F=3)
        pred[1] = np.outer(np.arange(17), [1.0, 2.0, 3.0])  # collinear
        value, skipped = pmpjpe(pred, gt, return_skipped=True)
        assert skipped == 1
        keep = [0, 2]
        assert value == pytest.approx(pmpjpe(pred[keep], gt[keep]))

    def test_all_degenerate(self):
        pred = np.zeros((2, 17, 3))
        with pytest.raises(EvaluationError):
            pmpjpe(pred, pair(7, F=2)[1])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_alignment_classes_nest_in_squared_error(self, seed):
        pred, gt = pair(seed, F=1)
        pc, gc = pred - pred[:, :1], gt - gt[:, :1]
        s = (pc * gc).sum() / (pc * pc).sum()
        sq_m = ((pc - gc) ** 2).sum()
        sq_n = ((s * pc - gc) ** 2).sum()
        sq_p = ((similarity_align(pred, gt).aligned - gt) ** 2).sum()
        assert sq_p <= sq_n + 1e-9 <= sq_m + 2e-9


class TestPck:
    def test_perfect(self):
        _, gt = pair(8)
        assert pck3d(gt, gt) == 1.0

    def test_all_far(self):
        _, gt = pair(9)
        pred = gt + [200.0, 0, 0]
        pred[:, 0] = gt[:, 0]  # keep the root so centering leaves the offset
        assert pck3d(pred, gt, valid=np.arange(17)[None].repeat(4, 0) > 0) == 0.0

    def test_half(self):
        gt = np.zeros((1, 5, 3))
        pred = gt.copy()
        pred[0, 1:3, 0] = 100.0
        pred[0, 3:5, 0] = 200.0
        valid = np.array([[False, True, True, True, True]])
        assert pck3d(pred, gt, valid=valid) == 0.5


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_translation_invariance(seed):
    pred, gt = pair(seed)
    t = np.random.default_rng(seed).normal(size=3) * 1e3
    for fn in (mpjpe, nmpjpe, pmpjpe, pck3d):
        assert abs(fn(pred + t, gt + t) - fn(pred, gt)) < 1e-9


def test_report_fields():
    pred, gt = pair(10)
    r = report(pred, gt, "lnet")
    d = r.to_dict()
    assert d["eval_head"] == "lnet" and d["n_frames"] == 4 and len(d["per_joint"]) == 17
    assert 0 <= r.pck3d <= 1 and min(r.mpjpe, r.nmpjpe, r.pmpjpe) >= 0
