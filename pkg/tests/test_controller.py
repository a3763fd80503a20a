import numpy as np
import pytest

from sparsemem.controller import (
    ControllerConfig,
    init_params,
    interface_backward,
    interface_project,
    lstm_backward,
    lstm_step,
    output_backward,
    output_combine,
    zeros_like_params,
)
from sparsemem.sparse import ContractViolation


def tiny_cfg(read_modes=False):
    return ControllerConfig(input_width=5, output_width=4, hidden=8,
                            heads=2, word=3, read_modes=read_modes)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_lstm(params, x_cat, h, c):
    """Independent rewrite of the cell, gate order i|f|g|o."""
    H = h.shape[1]
    pre = x_cat @ params["wx"] + h @ params["wh"] + params["b"]
    i = sigmoid(pre[:, :H])
    f = sigmoid(pre[:, H:2 * H])
    g = np.tanh(pre[:, 2 * H:3 * H])
    o = sigmoid(pre[:, 3 * H:])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


class TestInit:
    def test_shapes_and_ranges(self):
        cfg = tiny_cfg()
        p = init_params(cfg, seed=3)
        X = cfg.input_width + cfg.read_width
        assert p["wx"].shape == (X, 4 * cfg.hidden)
        assert p["wh"].shape == (cfg.hidden, 4 * cfg.hidden)
        assert p["wp"].shape == (cfg.hidden, cfg.iface_width)
        assert p["wy"].shape == (cfg.hidden + cfg.read_width, cfg.output_width)
        for k in ("wx", "wh", "wp", "wy"):
            assert np.abs(p[k]).max() < 0.1
        H = cfg.hidden
        assert np.all(p["b"][H:2 * H] == 1.0)      # forget gate open
        assert np.all(p["b"][:H] == 0.0)
        assert np.all(p["bp"] == 0.0) and np.all(p["by"] == 0.0)

    def test_seed_determinism(self):
        cfg = tiny_cfg()
        a, b = init_params(cfg, 7), init_params(cfg, 7)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = init_params(cfg, 8)
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_widths(self):
        cfg = tiny_cfg()
        assert cfg.read_width == 6
        assert cfg.per_head == 9
        assert tiny_cfg(read_modes=True).per_head == 12


class TestLstm:
    def test_matches_reference(self, rng):
        cfg = tiny_cfg()
        p = init_params(cfg, 1)
        X = cfg.input_width + cfg.read_width
        x = rng.standard_normal((3, X))
        h = rng.standard_normal((3, cfg.hidden)) * 0.1
        c = rng.standard_normal((3, cfg.hidden)) * 0.1
        h2, c2, _ = lstm_step(p, x, h, c)
        rh, rc = reference_lstm(p, x, h, c)
        np.testing.assert_allclose(h2, rh, atol=1e-15)
        np.testing.assert_allclose(c2, rc, atol=1e-15)

    def test_backward_finite_differences(self, rng):
        cfg = tiny_cfg()
        p = init_params(cfg, 2)
        X = cfg.input_width + cfg.read_width
        x = rng.standard_normal((2, X))
        h = rng.standard_normal((2, cfg.hidden)) * 0.2
        c = rng.standard_normal((2, cfg.hidden)) * 0.2
        gh = rng.standard_normal((2, cfg.hidden))
        gc = rng.standard_normal((2, cfg.hidden))

        def loss(pp, xx, hh, cc):
            h2, c2, _ = lstm_step(pp, xx, hh, cc)
            return float((gh * h2).sum() + (gc * c2).sum())

        _, _, cache = lstm_step(p, x, h, c)
        grads = zeros_like_params(p)
        d_x, d_h, d_c = lstm_backward(p, cache, gh, gc, grads)
        eps = 1e-6
        for arr, an in ((x, d_x), (h, d_h), (c, d_c)):
            flat, gflat = arr.ravel(), an.ravel()
            for i in rng.choice(flat.size, 12, replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss(p, x, h, c)
                flat[i] = orig - eps
                dn = loss(p, x, h, c)
                flat[i] = orig
                assert gflat[i] == pytest.approx((up - dn) / (2 * eps),
                                                 rel=1e-6, abs=1e-9)
        for key in ("wx", "wh", "b"):
            flat, gflat = p[key].ravel(), grads[key].ravel()
            for i in rng.choice(flat.size, 8, replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss(p, x, h, c)
                flat[i] = orig - eps
                dn = loss(p, x, h, c)
                flat[i] = orig
                assert gflat[i] == pytest.approx((up - dn) / (2 * eps),
                                                 rel=1e-6, abs=1e-9)
        assert np.all(grads["wp"] == 0.0) and np.all(grads["wy"] == 0.0)


class TestInterface:
    def test_slicing_and_squashing(self, rng):
        cfg = tiny_cfg(read_modes=True)
        p = init_params(cfg, 4)
        h = rng.standard_normal((3, cfg.hidden))
        ifc = interface_project(cfg, p, h)
        raw = (h @ p["wp"] + p["bp"]).reshape(3, 2, cfg.per_head)
        M = cfg.word
        np.testing.assert_array_equal(ifc.q, raw[:, :, :M])
        np.testing.assert_array_equal(ifc.a, raw[:, :, M:2 * M])
        np.testing.assert_allclose(ifc.alpha, sigmoid(raw[:, :, 2 * M]), atol=1e-15)
        np.testing.assert_allclose(ifc.gamma, sigmoid(raw[:, :, 2 * M + 1]), atol=1e-15)
        np.testing.assert_allclose(
            ifc.beta, np.logaddexp(0.0, raw[:, :, 2 * M + 2]) + 1e-6, atol=1e-15)
        assert np.all(ifc.beta > 0.0)
        assert np.all((0 < ifc.alpha) & (ifc.alpha < 1))
        np.testing.assert_allclose(ifc.modes.sum(axis=2), 1.0, atol=1e-12)
        assert np.all(ifc.modes > 0.0)

    def test_no_modes_by_default(self, rng):
        cfg = tiny_cfg()
        ifc = interface_project(cfg, init_params(cfg), rng.standard_normal((2, 8)))
        assert ifc.modes is None

    def test_backward_finite_differences(self, rng):
        cfg = tiny_cfg(read_modes=True)
        p = init_params(cfg, 5)
        h = rng.standard_normal((2, cfg.hidden))
        gq = rng.standard_normal((2, 2, 3))
        ga = rng.standard_normal((2, 2, 3))
        gal = rng.standard_normal((2, 2))
        gga = rng.standard_normal((2, 2))
        gbe = rng.standard_normal((2, 2))
        gmo = rng.standard_normal((2, 2, 3))

        def loss(hh):
            f = interface_project(cfg, p, hh)
            return float((gq * f.q).sum() + (ga * f.a).sum()
                         + (gal * f.alpha).sum() + (gga * f.gamma).sum()
                         + (gbe * f.beta).sum() + (gmo * f.modes).sum())

        ifc = interface_project(cfg, p, h)
        grads = zeros_like_params(p)
        d_h = interface_backward(cfg, p, h, ifc, gq, ga, gal, gga, gbe, gmo, grads)
        eps = 1e-6
        flat, gflat = h.ravel(), d_h.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(h)
            flat[i] = orig - eps
            dn = loss(h)
            flat[i] = orig
            assert gflat[i] == pytest.approx((up - dn) / (2 * eps),
                                             rel=1e-6, abs=1e-9)
        for key in ("wp", "bp"):
            flat, gflat = p[key].ravel(), grads[key].ravel()
            for i in rng.choice(flat.size, 10, replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss(h)
                flat[i] = orig - eps
                dn = loss(h)
                flat[i] = orig
                assert gflat[i] == pytest.approx((up - dn) / (2 * eps),
                                                 rel=1e-6, abs=1e-9)


class TestOutput:
    def test_affine_formula(self, rng):
        cfg = tiny_cfg()
        p = init_params(cfg, 6)
        h = rng.standard_normal((3, cfg.hidden))
        reads = rng.standard_normal((3, cfg.read_width))
        y = output_combine(cfg, p, h, reads)
        ref = np.concatenate([h, reads], axis=1) @ p["wy"] + p["by"]
        np.testing.assert_array_equal(y, ref)

    def test_read_width_checked(self, rng):
        cfg = tiny_cfg()
        p = init_params(cfg)
        with pytest.raises(ContractViolation):
            output_combine(cfg, p, rng.standard_normal((2, 8)),
                           rng.standard_normal((2, 5)))

    def test_backward_finite_differences(self, rng):
        cfg = tiny_cfg()
        p = init_params(cfg, 7)
        h = rng.standard_normal((2, cfg.hidden))
        reads = rng.standard_normal((2, cfg.read_width))
        gy = rng.standard_normal((2, cfg.output_width))

        def loss():
            return float((gy * output_combine(cfg, p, h, reads)).sum())

        grads = zeros_like_params(p)
        d_h, d_r = output_backward(cfg, p, h, reads, gy, grads)
        eps = 1e-6
        for arr, an in ((h, d_h), (reads, d_r), (p["wy"], grads["wy"]),
                        (p["by"], grads["by"])):
            flat, gflat = arr.ravel(), an.ravel()
            for i in rng.choice(flat.size, min(10, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss()
                flat[i] = orig - eps
                dn = loss()
                flat[i] = orig
                assert gflat[i] == pytest.approx((up - dn) / (2 * eps),
                                                 rel=1e-6, abs=1e-9)
