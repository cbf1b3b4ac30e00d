import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surfdist.errors import NonFiniteGradient, ShapeMismatch, TapeReuse
from surfdist.siren import (AdamState, SirenMlp, adam_step, load_siren, save_siren, siren_backward,
                            siren_forward, siren_init)


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def _fd_param_grads(model, x, w, h=1e-6):
    """Central differences of sum(w * f(x)) with respect to every parameter."""
    out = []
    for p in model.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = np.sum(w * siren_forward(model, x)[0])
            p[idx] = old - h
            fm = np.sum(w * siren_forward(model, x)[0])
            p[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


class TestForward:
    def test_zero_weights_give_final_bias(self):
        m = siren_init(3, (4, 4), 2, rng_seed=0)
        for W in m.weights:
            W[:] = 0.0
        for b in m.biases[:-1]:
            b[:] = 0.0
        m.biases[-1][:] = [1.5, -2.0]
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(m(x), np.tile([1.5, -2.0], (5, 1)))

    def test_one_hidden_unit_closed_form(self):
        m = SirenMlp([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)], 30.0)
        out = m(np.array([[0.0], [np.pi / 60]]))
        np.testing.assert_allclose(out[:, 0], [0.0, 1.0], atol=1e-15)

    def test_deterministic(self):
        m = siren_init(3, (16,), 4, rng_seed=1)
        x = np.random.default_rng(1).normal(size=(7, 3))
        np.testing.assert_array_equal(m(x), m(x))

    def test_shape_mismatch(self):
        m = siren_init(3, (4,), 2)
        with pytest.raises(ShapeMismatch):
            m(np.zeros((2, 4)))

    def test_bad_layer_chain(self):
        with pytest.raises(ShapeMismatch):
            SirenMlp([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])

    def test_input_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        m = siren_init(3, (8, 8), 2, omega0=30.0, rng_seed=3)
        x = rng.uniform(-1, 1, size=(1, 3))
        J = np.zeros((2, 3))
        for j in range(2):
            g = np.zeros((1, 2))
            g[0, j] = 1.0
            _, tape = siren_forward(m, x)
            _, gx = siren_backward(m, tape, g)
            J[j] = gx[0]
        h = 1e-4
        J_fd = np.zeros((2, 3))
        for i in range(3):
            e = np.zeros((1, 3))
            e[0, i] = h
            J_fd[:, i] = (m(x + e)[0] - m(x - e)[0]) / (2 * h)
        assert _rel_err(J, J_fd) < 1e-4


class TestBackward:
    def test_zero_output_grads(self):
        m = siren_init(3, (5,), 2)
        _, tape = siren_forward(m, np.ones((4, 3)))
        grads, gx = siren_backward(m, tape, np.zeros((4, 2)))
        for g in grads:
            assert not g.any()
        assert not gx.any()

    def test_linear_layer_weight_grad(self):
        rng = np.random.default_rng(0)
        m = SirenMlp([rng.normal(size=(2, 3))], [rng.normal(size=2)])
        x = rng.normal(size=(4, 3))
        g = rng.normal(size=(4, 2))
        _, tape = siren_forward(m, x)
        grads, _ = siren_backward(m, tape, g)
        np.testing.assert_allclose(grads[0], g.T @ x)
        np.testing.assert_allclose(grads[1], g.sum(axis=0))

    def test_tape_reuse(self):
        m = siren_init(3, (4,), 2)
        _, tape = siren_forward(m, np.ones((1, 3)))
        siren_backward(m, tape, np.ones((1, 2)))
        with pytest.raises(TapeReuse):
            siren_backward(m, tape, np.ones((1, 2)))

    def test_grad_shape_mismatch(self):
        m = siren_init(3, (4,), 2)
        _, tape = siren_forward(m, np.ones((3, 3)))
        with pytest.raises(ShapeMismatch):
            siren_backward(m, tape, np.ones((2, 2)))

    @pytest.mark.parametrize("hidden", [(), (6,), (5, 4)])
    @pytest.mark.parametrize("seed", range(3))
    def test_parameter_grads_match_finite_differences(self, hidden, seed):
        rng = np.random.default_rng(seed)
        m = siren_init(3, hidden, 2, omega0=30.0, rng_seed=seed)
        x = rng.uniform(-1, 1, size=(4, 3))
        w = rng.normal(size=(4, 2))
        _, tape = siren_forward(m, x)
        grads, _ = siren_backward(m, tape, w)
        for g, g_fd in zip(grads, _fd_param_grads(m, x, w)):
            assert _rel_err(g, g_fd) < 1e-4


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = siren_init(3, (64, 64), 12, rng_seed=7), siren_init(3, (64, 64), 12, rng_seed=7)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_first_layer_bound(self):
        m = siren_init(5, (32,), 4, rng_seed=0)
        assert np.all(np.abs(m.weights[0]) <= 1 / 5)

    def test_hidden_layer_bound(self):
        m = siren_init(3, (64, 64), 4, omega0=30.0, rng_seed=0)
        assert np.all(np.abs(m.weights[1]) <= np.sqrt(6 / 64) / 30.0)

    def test_output_std_range(self):
        m = siren_init(3, (64, 64), 12, rng_seed=0)
        x = np.random.default_rng(0).uniform(-1, 1, size=(10_000, 3))
        assert 0.2 <= m(x).std() <= 3.0

    def test_zero_dim_rejected(self):
        with pytest.raises(ValueError):
            siren_init(0, (4,), 2)


class TestAdam:
    def test_warmup_effective_lr(self):
        assert AdamState(3e-4, 2000).effective_lr(1000) == pytest.approx(1.5e-4)
        assert AdamState(3e-4, 2000).effective_lr(5000) == pytest.approx(3e-4)

    def test_scalar_first_step(self):
        p = [np.array([1.0])]
        adam_step(AdamState(0.1), p, [np.array([1.0])])
        assert p[0][0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_gradient_is_fixed_point(self):
        rng = np.random.default_rng(0)
        p = [rng.normal(size=(3, 2)), rng.normal(size=4)]
        ref = [x.copy() for x in p]
        st_ = AdamState(1e-2)
        for _ in range(5):
            adam_step(st_, p, [np.zeros((3, 2)), np.zeros(4)])
        for a, b in zip(p, ref):
            np.testing.assert_array_equal(a, b)
        assert st_.step == 5

    def test_non_finite_gradient(self):
        with pytest.raises(NonFiniteGradient):
            adam_step(AdamState(0.1), [np.zeros(2)], [np.array([0.0, np.nan])])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step(AdamState(0.1), [np.zeros(2)], [np.zeros(3)])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-10, 10).filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1e-1))
    def test_first_step_moves_by_lr_against_gradient(self, g, lr):
        p = [np.array([0.0])]
        adam_step(AdamState(lr), p, [np.array([g])])
        assert p[0][0] == pytest.approx(-np.sign(g) * lr, rel=1e-5)


class TestPersistence:
    def test_roundtrip(self):
        m = siren_init(3, (8, 8), 5, omega0=25.0, rng_seed=2)
        buf = io.BytesIO()
        save_siren(m, buf)
        back = load_siren(io.BytesIO(buf.getvalue()))
        assert back.omega0 == 25.0
        for p, q in zip(m.parameters(), back.parameters()):
            np.testing.assert_array_equal(p, q)
        assert buf.getvalue()[:4] == b"SMLP"

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            load_siren(io.BytesIO(b"NOPE\x00\x00\x00\x00"))
