from __future__ import annotations

import numpy as np
import pytest

from occlift.errors import ShapeError
from occlift.geometry import project
from occlift.graph import Skeleton, build_graph, load_skeleton, normalize, sparse_operators
from occlift.nets import (DEPTH_UNIT_MM, LNetConfig, ModelState, RNetConfig, init_model,
                          lnet_forward, refine_pose, rnet_forward)
from occlift.numkit import Tape, Tensor, add, mse, reshape, take
from occlift.synthdata import default_rig, generate_motion

TOY = Skeleton(4, [(0, 1), (1, 2), (0, 3)], ["root", "a", "b", "c"])


def toy_model(seed=0, fusion="flatten"):
    lc = LNetConfig(n_joints=4, hidden_size=8)
    rc = RNetConfig(T=5, n_joints=4, strides=(1, 2), t_p=2, gcn_hidden=(4, 4), gcn_out=8,
                    fusion=fusion)
    ops = sparse_operators(normalize(build_graph(TOY, 5, (1, 2))))
    return init_model(lc, rc, seed), ops


def scale_vec(n):
    s = np.full(n, DEPTH_UNIT_MM)
    s[0] = 0.0
    return s


class TestLNet:
    def test_zero_weights_zero_output(self):
        st, _ = toy_model()
        zero = {k: np.zeros_like(v) for k, v in st.params.items()}
        out = lnet_forward(ModelState(st.lnet, st.rnet, zero).tensors(),
                           np.random.default_rng(0).uniform(-1, 1, (3, 8)), st.lnet)
        assert not out.data.any()

    def test_eval_deterministic(self):
        st, _ = toy_model()
        x = np.random.default_rng(1).uniform(-1, 1, (6, 8))
        a = lnet_forward(st.tensors(), x, st.lnet).data
        b = lnet_forward(st.tensors(), x, st.lnet).data
        assert np.array_equal(a, b) and (a[:, 0] == 0).all()

    def test_nan_input(self):
        st, _ = toy_model()
        x = np.zeros((1, 8))
        x[0, 3] = np.nan
        with pytest.raises(ShapeError):
            lnet_forward(st.tensors(), x, st.lnet)

    def test_wrong_width(self):
        st, _ = toy_model()
        with pytest.raises(ShapeError):
            lnet_forward(st.tensors(), np.zeros((1, 6)), st.lnet)

    def test_train_gradient_frozen_dropout(self):
        st, _ = toy_model(3)
        x = np.random.default_rng(2).uniform(-1, 1, (4, 8))
        y = np.random.default_rng(3).normal(size=(4, 4)) * 100
        names = st.lnet_names

        def loss(params, tape=None):
            P = ModelState(st.lnet, st.rnet, params).tensors(tape, names)
            out = lnet_forward(P, x, st.lnet, training=True, rng=np.random.default_rng(7))
            return mse(out, y)

        tape = Tape()
        g = tape.backward(loss(st.params, tape))
        for k in names:
            for idx in list(np.ndindex(st.params[k].shape))[:12]:
                p = {kk: vv.copy() for kk, vv in st.params.items()}
                p[k][idx] += 1e-5
                up = float(loss(p).data)
                p[k][idx] -= 2e-5
                fd = (up - float(loss(p).data)) / 2e-5
                assert abs(fd - g[k][idx]) <= 1e-4 * max(abs(fd), abs(g[k][idx]), 1e-3)


class TestRNet:
    def test_zero_relation_weights_give_bias(self):
        st, ops = toy_model()
        params = {k: (np.zeros_like(v) if k.startswith("rnet.rel") else v)
                  for k, v in st.params.items()}
        d = np.random.default_rng(4).normal(size=(2, 5, 4)) * 100
        out = rnet_forward(ModelState(st.lnet, st.rnet, params).tensors(), ops, d,
                           np.ones(20, bool), st.rnet).data
        expect = params["rnet.fusion.bias"] * scale_vec(4)
        assert np.allclose(out, expect[None], atol=1e-12)

    @pytest.mark.parametrize("fusion", ["flatten", "target_rows"])
    def test_relation_order_invariant(self, fusion):
        st, ops = toy_model(5, fusion)
        perm = [2, 0, 1]
        params = dict(st.params)
        for new, old in enumerate(perm):
            for k, v in st.params.items():
                if k.startswith(f"rnet.rel{old}."):
                    params[k.replace(f"rel{old}.", f"rel{new}.")] = v
        d = np.random.default_rng(6).normal(size=(3, 5, 4)) * 100
        m = np.random.default_rng(7).random(20) > 0.3
        a = rnet_forward(st.tensors(), ops, d, m, st.rnet).data
        b = rnet_forward(ModelState(st.lnet, st.rnet, params).tensors(), [ops[i] for i in perm],
                         d, m, st.rnet).data
        assert np.array_equal(a, b)

    def test_hand_evaluated_two_nodes(self):
        skel = Skeleton(2, [(0, 1)], ["root", "tip"])
        rc = RNetConfig(T=1, n_joints=2, strides=(), t_p=0, gcn_hidden=(1, 1), gcn_out=1)
        lc = LNetConfig(n_joints=2, hidden_size=1)
        ops = normalize(build_graph(skel, 1, ()))  # [[.5,.5],[.5,.5]]
        st = init_model(lc, rc, 0)
        p = dict(st.params)
        p["rnet.rel0.0.weight"] = np.array([[2.0]])
        p["rnet.rel0.0.bias"] = np.array([0.5])
        p["rnet.rel0.1.weight"] = np.array([[3.0]])
        p["rnet.rel0.1.bias"] = np.array([-1.0])
        p["rnet.rel0.2.weight"] = np.array([[1.0]])
        p["rnet.rel0.2.bias"] = np.array([0.0])
        p["rnet.fusion.weight"] = np.array([[1.0, 2.0], [0.0, 1.0]])
        p["rnet.fusion.bias"] = np.array([0.0, 0.25])
        d = np.array([[[0.0, 400.0]]])  # mm; becomes 0.4 m
        # layer 1: mean 0.2 -> 2*0.2+0.5 = 0.9 ; layer 2: 3*0.9-1 = 1.7 ; layer 3: 1.7
        # fusion: [1.7, 1.7] @ W + b = [1.7, 3.4+1.7+0.25] ; scaled -> [0, 5350]
        out = rnet_forward(ModelState(lc, rc, p).tensors(), ops, d, np.ones(2, bool), rc).data
        assert np.allclose(out, [[0.0, 5350.0]], atol=1e-9)

    def test_mask_length_mismatch(self):
        st, ops = toy_model()
        with pytest.raises(ShapeError):
            rnet_forward(st.tensors(), ops, np.zeros((1, 5, 4)), np.ones(19, bool), st.rnet)


def test_end_to_end_gradient():
    st, ops = toy_model(11)
    rng = np.random.default_rng(12)
    x = rng.uniform(-1, 1, (2, 5, 8))
    tgt = rng.normal(size=(2, 4)) * 50
    mask = rng.random((2, 20)) > 0.3
    lc, rc = st.lnet, st.rnet

    def loss(params, tape=None):
        P = ModelState(lc, rc, params).tensors(tape)
        d = reshape(lnet_forward(P, x.reshape(10, 8), lc, training=True,
                                 rng=np.random.default_rng(9)), (2, 5, 4))
        out = add(take(d, rc.t_p, axis=1), rnet_forward(P, ops, d, mask, rc))
        return mse(out, tgt)

    tape = Tape()
    g = tape.backward(loss(st.params, tape))
    for k, v in st.params.items():
        for idx in np.ndindex(v.shape):
            p = {kk: vv.copy() for kk, vv in st.params.items()}
            p[k][idx] += 1e-5
            up = float(loss(p).data)
            p[k][idx] -= 2e-5
            fd = (up - float(loss(p).data)) / 2e-5
            assert abs(fd - g[k][idx]) <= 1e-4 * max(abs(fd), abs(g[k][idx]), 1e-2), k


class TestRefinePose:
    def setup_method(self):
        self.skel = load_skeleton("h36m17")
        self.cam = default_rig(1)[0]
        self.motion = generate_motion(self.skel, 40, 0, "walk").frames
        lc = LNetConfig(n_joints=17, hidden_size=4)
        rc = RNetConfig(T=31, n_joints=17, t_p=15)
        self.state = init_model(lc, rc, 0)
        self.ops = sparse_operators(normalize(build_graph(self.skel, 31, rc.strides)))

    def window(self):
        from occlift.geometry import normalize2d
        xy, dec = project(self.cam, self.motion[:31])
        return normalize2d(xy, 1000, 1000), xy, dec

    def test_zero_rnet_equals_lnet_pose(self):
        p = {k: (np.zeros_like(v) if k.startswith("rnet") else v)
             for k, v in self.state.params.items()}
        st = ModelState(self.state.lnet, self.state.rnet, p)
        x2d, xy, dec = self.window()
        _, world, refined = refine_pose(st, self.ops, x2d, xy[15], dec.d_root[15], self.cam)
        lifted = lnet_forward(st.tensors(), x2d.reshape(31, -1), st.lnet).data[15]
        assert np.array_equal(refined, lifted)

    def test_perfect_depths_recover_pose(self):
        x2d, xy, dec = self.window()
        p = {k: np.zeros_like(v) for k, v in self.state.params.items()}
        p["lnet.2.bias"] = dec.d_rel[15] / DEPTH_UNIT_MM  # a constant, exact lifter for frame 15
        st = ModelState(self.state.lnet, self.state.rnet, p)
        _, world, _ = refine_pose(st, self.ops, x2d, xy[15], dec.d_root[15], self.cam)
        err = np.linalg.norm((world - world[0]) - (self.motion[15] - self.motion[15, 0]), axis=1)
        assert err.mean() < 1e-6

    def test_target_frame_fully_masked_is_finite(self):
        x2d, xy, dec = self.window()
        mask = np.ones(31 * 17, bool)
        mask[15 * 17:16 * 17] = False
        _, world, _ = refine_pose(self.state, self.ops, x2d, xy[15], dec.d_root[15], self.cam,
                                  mask=mask)
        assert np.isfinite(world).all()

    def test_window_length_checked(self):
        x2d, xy, dec = self.window()
        with pytest.raises(ShapeError):
            refine_pose(self.state, self.ops, x2d[:30], xy[15], dec.d_root[15], self.cam)


def test_init_bounds():
    st, _ = toy_model(21)
    for k, v in st.params.items():
        fan_in = st.shapes()[k.rsplit(".", 1)[0] + ".weight"][0]
        assert np.abs(v).max() <= 1 / np.sqrt(fan_in)
    assert isinstance(st.tensors()["rnet.fusion.bias"], Tensor)
