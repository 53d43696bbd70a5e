"""Engine semantics and per-primitive gradient checks.

Every differentiable primitive is compared against central finite
differences; engine rules (single-consumption tapes, detach, zero grads for
unreached leaves, tape-mixing errors) get their own checks.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condlab import autodiff as ad


def fd_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f(x)
        flat[i] = keep - step
        lo = f(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * step)
    return g


def check_op(build, x0: np.ndarray, rtol: float = 1e-6, step: float = 1e-6):
    """Compare tape gradient of sum(build(leaf)) against finite differences."""
    tape = ad.Tape()
    leaf = tape.leaf(x0)
    loss = ad.tsum(build(leaf))
    grads = ad.backward(loss)
    got = grads[leaf]

    def scalar(x):
        return float(ad.tsum(build(ad.tensor(x))).data)

    want = fd_grad(scalar, x0.copy(), step)
    scale = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-3)
    assert np.all(np.abs(got - want) / scale < rtol), (got, want)


RNG = np.random.default_rng(77)


class TestPrimitiveGradients:
    def test_add(self):
        check_op(lambda x: ad.add(x, np.array([0.3, -1.2, 4.0])), RNG.normal(size=3))

    def test_add_broadcast(self):
        c = RNG.normal(size=(4, 3))
        check_op(lambda x: ad.add(x, c), RNG.normal(size=3))

    def test_sub_both_sides(self):
        c = RNG.normal(size=(2, 3))
        check_op(lambda x: ad.sub(x, c), RNG.normal(size=(2, 3)))
        check_op(lambda x: ad.sub(c, x), RNG.normal(size=(2, 3)))

    def test_mul(self):
        check_op(lambda x: ad.mul(x, ad.mul(x, 0.5)), RNG.normal(size=5))

    def test_div(self):
        denom = 1.5 + np.abs(RNG.normal(size=4))
        check_op(lambda x: ad.div(x, denom), RNG.normal(size=4))
        num = RNG.normal(size=4)
        check_op(lambda x: ad.div(num, x), 1.0 + np.abs(RNG.normal(size=4)))

    def test_matmul_matrix_matrix(self):
        b = RNG.normal(size=(3, 2))
        check_op(lambda x: ad.matmul(x, b), RNG.normal(size=(4, 3)))

    def test_matmul_matrix_vector(self):
        b = RNG.normal(size=3)
        check_op(lambda x: ad.matmul(x, b), RNG.normal(size=(4, 3)))

    def test_matmul_vector_matrix(self):
        a = RNG.normal(size=4)
        check_op(lambda x: ad.matmul(a, x), RNG.normal(size=(4, 3)))

    def test_matmul_grad_wrt_both(self):
        a0, b0 = RNG.normal(size=(2, 3)), RNG.normal(size=(3, 2))
        tape = ad.Tape()
        a, b = tape.leaf(a0), tape.leaf(b0)
        loss = ad.tsum(ad.matmul(a, b))
        g = ad.backward(loss)
        ones = np.ones((2, 2))
        assert np.allclose(g[a], ones @ b0.T)
        assert np.allclose(g[b], a0.T @ ones)

    def test_broadcast(self):
        check_op(lambda x: ad.broadcast_to(x, (5, 3)), RNG.normal(size=3))

    def test_sum_axes(self):
        check_op(lambda x: ad.tsum(x, axis=0), RNG.normal(size=(3, 4)))
        check_op(lambda x: ad.tsum(x, axis=1, keepdims=True), RNG.normal(size=(3, 4)))

    def test_mean(self):
        check_op(lambda x: ad.tmean(x, axis=1), RNG.normal(size=(3, 4)))
        check_op(lambda x: ad.tmean(x), RNG.normal(size=(2, 2)))

    def test_square(self):
        check_op(ad.square, RNG.normal(size=6))

    def test_sqrt(self):
        check_op(ad.sqrt, 0.5 + np.abs(RNG.normal(size=6)))

    def test_exp(self):
        check_op(ad.exp, RNG.normal(size=6))

    def test_log(self):
        check_op(ad.log, 0.5 + np.abs(RNG.normal(size=6)))

    def test_tanh(self):
        check_op(ad.tanh, RNG.normal(size=6))

    def test_silu(self):
        check_op(ad.silu, 3.0 * RNG.normal(size=8))

    def test_erf(self):
        check_op(ad.erf, RNG.normal(size=8))

    def test_clip_interior_and_exterior(self):
        # Points chosen away from the clip edges so FD is valid.
        x0 = np.array([-2.0, -0.2, 0.1, 0.4, 3.0])
        check_op(lambda x: ad.clip(x, -0.5, 0.5), x0)

    def test_clip_edge_gradient_is_zero(self):
        tape = ad.Tape()
        leaf = tape.leaf(np.array([-0.5, 0.5, 1.0, -3.0]))
        g = ad.backward(ad.tsum(ad.clip(leaf, -0.5, 0.5)))
        assert np.all(g[leaf] == 0.0)

    def test_concat(self):
        c = RNG.normal(size=(2, 2))
        check_op(lambda x: ad.concat([x, c, ad.mul(x, 2.0)], axis=1),
                 RNG.normal(size=(2, 3)))

    def test_take_basic_slice(self):
        check_op(lambda x: x[1:3], RNG.normal(size=5))
        check_op(lambda x: x[:, 1], RNG.normal(size=(3, 4)))

    def test_take_integer_indices_accumulate(self):
        idx = np.array([0, 2, 2, 1])
        tape = ad.Tape()
        leaf = tape.leaf(np.array([1.0, 2.0, 3.0]))
        g = ad.backward(ad.tsum(leaf[idx]))
        assert np.allclose(g[leaf], [1.0, 1.0, 2.0])


class TestEngineSemantics:
    def test_tape_single_consumption(self):
        tape = ad.Tape()
        leaf = tape.leaf(np.ones(3))
        loss = ad.tsum(ad.square(leaf))
        ad.backward(loss)
        with pytest.raises(RuntimeError):
            ad.backward(loss)

    def test_ops_after_consumption_rejected(self):
        tape = ad.Tape()
        leaf = tape.leaf(np.ones(3))
        ad.backward(ad.tsum(leaf))
        with pytest.raises(RuntimeError):
            ad.square(leaf)

    def test_backward_requires_scalar(self):
        tape = ad.Tape()
        leaf = tape.leaf(np.ones(3))
        with pytest.raises(ValueError):
            ad.backward(ad.square(leaf))

    def test_backward_requires_taped(self):
        with pytest.raises(ValueError):
            ad.backward(ad.tensor(1.0))

    def test_unreached_leaf_gets_zeros(self):
        tape = ad.Tape()
        a = tape.leaf(np.ones(3))
        b = tape.leaf(np.ones((2, 2)))
        g = ad.backward(ad.tsum(ad.square(a)))
        assert np.allclose(g[a], 2.0)
        assert np.all(g[b] == 0.0)
        assert g[b].shape == (2, 2)

    def test_detach_blocks_gradient(self):
        tape = ad.Tape()
        leaf = tape.leaf(np.array([2.0, 3.0]))
        half = ad.detach(ad.mul(leaf, 10.0))
        loss = ad.tsum(ad.add(ad.square(leaf), half))
        g = ad.backward(loss)
        assert np.allclose(g[leaf], 2.0 * leaf.data)

    def test_detach_preserves_value(self):
        tape = ad.Tape()
        leaf = tape.leaf(np.array([2.0, 3.0]))
        y = ad.mul(leaf, 10.0)
        assert np.array_equal(ad.detach(y).data, y.data)
        assert ad.detach(y).tape is None

    def test_mixing_tapes_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        a = t1.leaf(np.ones(2))
        b = t2.leaf(np.ones(2))
        with pytest.raises(RuntimeError):
            ad.add(a, b)

    def test_constants_mix_freely(self):
        tape = ad.Tape()
        a = tape.leaf(np.ones(2))
        out = ad.add(a, ad.tensor(np.ones(2)))
        assert out.tape is tape

    def test_shape_mismatch_message_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\)"):
            ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))
        with pytest.raises(ValueError, match="conform"):
            ad.add(ad.tensor(np.ones(3)), ad.tensor(np.ones(4)))

    def test_fanout_accumulates(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([1.5]))
        y = ad.add(ad.square(x), ad.mul(x, 3.0))  # x^2 + 3x
        g = ad.backward(ad.tsum(y))
        assert np.allclose(g[x], 2 * 1.5 + 3.0)

    def test_operator_sugar(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([2.0]))
        y = (x * x + 1.0) / x - x  # x + 1/x - x = 1/x
        assert np.allclose(y.data, 0.5)
        g = ad.backward(ad.tsum(y))
        assert np.allclose(g[x], -1.0 / 4.0)

    @given(st.integers(1, 4), st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_chain_matches_fd(self, n, m):
        rng = np.random.default_rng(n * 10 + m)
        w0 = rng.normal(size=(n, m))
        x = rng.normal(size=n)

        def net(w):
            h = ad.silu(ad.matmul(x, w))
            return ad.tsum(ad.square(h))

        tape = ad.Tape()
        w = tape.leaf(w0)
        g = ad.backward(net(w))[w]

        def scalar(wv):
            return float(net(ad.tensor(wv)).data)

        want = fd_grad(scalar, w0.copy())
        scale = np.maximum(np.maximum(np.abs(g), np.abs(want)), 1e-3)
        assert np.all(np.abs(g - want) / scale < 1e-5)
