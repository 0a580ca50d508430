import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfother import autodiff as ad
from selfother.autodiff import ParamSet, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def numeric_grad(f, x, eps=1e-6):
    """Central differences on a plain numpy function (independent of the tape)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += eps
        down[idx] -= eps
        g[idx] = (f(up) - f(down)) / (2 * eps)
    return g


class TestElementwise:
    def test_elu_values(self):
        out = ad.elu(np.array([0.0, 2.0, -1.0])).data
        np.testing.assert_allclose(out, [0.0, 2.0, math.exp(-1) - 1], atol=1e-15)
        assert out[2] == pytest.approx(-0.632121, abs=1e-6)

    def test_elu_derivative_at_zero_is_one(self):
        x = leaf([0.0, -0.5, 0.5])
        g = ad.backward(ad.sum(ad.elu(x)))[x]
        np.testing.assert_allclose(g, [1.0, math.exp(-0.5), 1.0])

    def test_sigmoid_extremes_stay_finite(self):
        out = ad.sigmoid(np.array([-800.0, 0.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_log_floor_gradient_is_zero_below_floor(self):
        x = leaf([1e-30, 2.0])
        g = ad.backward(ad.sum(ad.log(x, floor=1e-20)))[x]
        np.testing.assert_allclose(g, [0.0, 0.5])

    def test_product_rule(self):
        x, y = leaf(3.0), leaf(4.0)
        grads = ad.backward(x * y)
        assert grads[x] == 4.0 and grads[y] == 3.0

    def test_broadcast_gradient_reduced_to_input_shape(self):
        a, b = leaf(np.ones((2, 3))), leaf(np.ones(3))
        grads = ad.backward(ad.sum(a * b))
        assert grads[b].shape == (3,)
        np.testing.assert_allclose(grads[b], [2.0, 2.0, 2.0])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, [1 / 3] * 3, atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(ad.softmax(np.array([math.log(2), 0.0])).data, [2 / 3, 1 / 3])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
    def test_shift_invariant_positive_normalised(self, v, c):
        v = np.array(v)
        p = ad.softmax(v).data
        assert np.all(p > 0)
        assert abs(p.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(ad.softmax(v + c).data, p, atol=1e-12)

    def test_huge_logits_do_not_overflow(self):
        p = ad.softmax(np.array([1000.0, 0.0])).data
        assert np.isfinite(p).all() and p[0] == pytest.approx(1.0)


class TestCrossEntropy:
    def test_uniform_over_five(self):
        for k in range(5):
            assert ad.cross_entropy(np.full(5, 0.2), k).item() == pytest.approx(math.log(5), abs=1e-6)

    def test_perfect_prediction(self):
        assert ad.cross_entropy(np.array([0.0, 1.0, 0.0]), 1).item() == 0.0

    def test_closed_form(self):
        assert ad.cross_entropy(np.array([0.2, 0.8]), 1).item() == pytest.approx(-math.log(0.8))

    def test_zero_probability_clamped(self):
        p = leaf([1.0, 0.0])
        loss = ad.cross_entropy(p, 1)
        assert loss.item() == pytest.approx(-math.log(ad.LOG_FLOOR))
        assert np.isfinite(ad.backward(loss)[p]).all()

    def test_logit_gradient_is_p_minus_onehot(self, rng):
        z = leaf(rng.standard_normal(6))
        g = ad.backward(ad.cross_entropy(ad.softmax(z), 2))[z]
        p = np.exp(z.data) / np.exp(z.data).sum()
        np.testing.assert_allclose(g, p - np.eye(6)[2], atol=1e-12)

    def test_fused_column_cross_entropy(self, rng):
        z = rng.standard_normal((4, 5))
        targets = [0, 3, 1, 1, 2]

        def plain(zz):
            e = np.exp(zz - zz.max(axis=0))
            p = e / e.sum(axis=0)
            return -np.mean(np.log(p[targets, np.arange(5)]))

        t = leaf(z)
        loss = ad.softmax_cross_entropy(t, targets)
        assert loss.item() == pytest.approx(plain(z), abs=1e-12)
        np.testing.assert_allclose(ad.backward(loss)[t], numeric_grad(plain, z), atol=1e-8)


class TestEntropy:
    def test_uniform_entropy(self):
        assert ad.entropy_from_logits(np.zeros(5)).item() == pytest.approx(math.log(5))

    def test_gradient_matches_numeric(self, rng):
        v = rng.standard_normal(5)

        def h(x):
            p = np.exp(x - x.max())
            p /= p.sum()
            return -(p * np.log(p)).sum()

        t = leaf(v)
        np.testing.assert_allclose(ad.backward(ad.entropy_from_logits(t))[t], numeric_grad(h, v),
                                   atol=1e-8)


class TestGumbel:
    def test_single_draw_closed_form(self):
        class Half:
            def random(self, shape):
                return np.full(shape, 0.5)

        g = ad.gumbel_noise(1, Half())
        assert g[0] == pytest.approx(-math.log(math.log(2)), abs=1e-6)
        assert g[0] == pytest.approx(0.366513, abs=1e-6)

    def test_endpoints_are_redrawn(self):
        class Stream:
            def __init__(self):
                self.calls = 0

            def random(self, shape):
                self.calls += 1
                if self.calls == 1:
                    return np.array([0.0, 1.0, 0.3])
                return np.full(shape, 0.7)

        s = Stream()
        g = ad.gumbel_noise(3, s)
        assert np.isfinite(g).all()
        assert g[0] == pytest.approx(-math.log(-math.log(0.7)))

    def test_low_temperature_limit_is_one_hot(self):
        logits = np.array([0.1, 0.5, 0.2])
        noise = np.array([0.3, -0.4, 0.05])
        y = ad.gumbel_softmax(logits, 1e-3, noise=noise).data
        np.testing.assert_allclose(y, np.eye(3)[np.argmax(logits + noise)], atol=1e-12)

    @given(st.floats(1e-3, 100.0), st.integers(0, 2 ** 32 - 1))
    def test_output_on_simplex(self, temperature, seed):
        rng = np.random.default_rng(seed)
        y = ad.gumbel_softmax(rng.standard_normal(4), temperature, rng).data
        assert np.all(y >= 0) and abs(y.sum() - 1) < 1e-12

    def test_rejects_nonpositive_temperature(self, rng):
        with pytest.raises(ValueError):
            ad.gumbel_softmax(np.zeros(3), 0.0, rng)

    def test_gradient_flows_to_logits(self, rng):
        noise = ad.gumbel_noise(4, rng)
        v = rng.standard_normal(4)
        w = rng.standard_normal(4)

        def f(x):
            z = (x + noise) / 0.7
            p = np.exp(z - z.max())
            return (p / p.sum()) @ w

        t = leaf(v)
        g = ad.backward(ad.dot(ad.gumbel_softmax(t, 0.7, noise=noise), w))[t]
        np.testing.assert_allclose(g, numeric_grad(f, v), atol=1e-8)


def _lstm_reference(x, h, c, w_ih, w_hh, b):
    n = h.shape[0]
    pre = w_ih @ x + w_hh @ h + b
    sig = lambda u: 1 / (1 + np.exp(-u))  # noqa: E731
    i, f, g, o = sig(pre[:n]), sig(pre[n:2 * n]), np.tanh(pre[2 * n:3 * n]), sig(pre[3 * n:])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


class TestLstm:
    def test_forward_matches_textbook_cell(self, rng):
        n, d = 3, 4
        args = (rng.standard_normal(d), rng.standard_normal(n), rng.standard_normal(n),
                rng.standard_normal((4 * n, d)), rng.standard_normal((4 * n, n)),
                rng.standard_normal(4 * n))
        out = ad.lstm_cell(*args).data
        h2, c2 = _lstm_reference(*args)
        np.testing.assert_allclose(out[0], h2, atol=1e-14)
        np.testing.assert_allclose(out[1], c2, atol=1e-14)

    def test_loss_gradients_match_finite_differences(self, rng):
        n, d = 3, 4
        ps = ParamSet()
        ps.add("x", rng.standard_normal(d))
        ps.add("h", rng.standard_normal(n))
        ps.add("c", rng.standard_normal(n))
        ps.add("w_ih", rng.standard_normal((4 * n, d)) * 0.5)
        ps.add("w_hh", rng.standard_normal((4 * n, n)) * 0.5)
        ps.add("b", rng.standard_normal(4 * n))
        m = rng.standard_normal((2, n))

        def f():
            out = ad.lstm_cell(*(ps[k] for k in ("x", "h", "c", "w_ih", "w_hh", "b")))
            return ad.sum(ad.mul(ad.tanh(out), m))

        assert ad.grad_check(f, ps, eps=1e-5) < 1e-4

    def test_column_batch_equals_per_column(self, rng):
        n, d, B = 3, 2, 5
        w_ih, w_hh, b = rng.standard_normal((4 * n, d)), rng.standard_normal((4 * n, n)), rng.standard_normal(4 * n)
        X, H, C = rng.standard_normal((d, B)), rng.standard_normal((n, B)), rng.standard_normal((n, B))
        out = ad.lstm_cell(X, H, C, w_ih, w_hh, b).data
        for j in range(B):
            col = ad.lstm_cell(X[:, j], H[:, j], C[:, j], w_ih, w_hh, b).data
            np.testing.assert_allclose(out[:, :, j], col, atol=1e-14)


class TestBackward:
    def test_rejects_non_scalar_loss(self):
        with pytest.raises(ValueError):
            ad.backward(leaf([1.0, 2.0]))

    def test_shared_subexpression_accumulates(self):
        x = leaf(2.0)
        y = x * x
        grads = ad.backward(y + y)
        assert grads[x] == 8.0

    def test_two_passes_identical(self, rng):
        w = leaf(rng.standard_normal((3, 4)))
        x = rng.standard_normal(4)
        loss = ad.sum(ad.square(ad.elu(ad.matmul(w, x))))
        np.testing.assert_array_equal(ad.backward(loss)[w], ad.backward(loss)[w])

    def test_constants_are_folded(self):
        a = ad.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
        assert not a.requires_grad and a.is_leaf

    def test_topological_order_inputs_first(self, rng):
        x = leaf(rng.standard_normal(3))
        y = ad.tanh(ad.mul(x, 2.0))
        z = ad.sum(ad.add(y, x))
        order = ad.topological_order(z)
        pos = {id(t): i for i, t in enumerate(order)}
        for node in order:
            for p in node.parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_detach_blocks_gradient(self):
        x = leaf(3.0)
        grads = ad.backward(ad.mul(ad.detach(x), x))
        assert grads[x] == 3.0


class TestGradCheck:
    def test_quadratic_exact(self, rng):
        ps = ParamSet()
        ps.add("x", rng.standard_normal(6))
        assert ad.grad_check(lambda: ad.mul(ad.dot(ps["x"], ps["x"]), 0.5), ps) < 1e-8

    def test_linear_elu_layer(self, rng):
        ps = ParamSet()
        ps.add("w", rng.standard_normal((4, 5)))
        ps.add("b", rng.standard_normal(4))
        x = rng.standard_normal(5)
        assert ad.grad_check(lambda: ad.sum(ad.elu(ad.linear(ps["w"], x, ps["b"]))), ps) < 1e-6

    def test_detects_wrong_gradient(self):
        x = leaf(np.array([1.5]))
        wrong = lambda: ad._node(x.data * 3.0, (x,), lambda g: (g * 2.0,))  # noqa: E731
        bad = lambda: ad.sum(wrong())  # noqa: E731
        assert ad.grad_check(bad, [x]) > 0.1

    def test_perturbs_non_contiguous_parameters(self, rng):
        x = Tensor(rng.standard_normal((3, 2)).T, requires_grad=True)
        assert not x.data.flags.c_contiguous
        assert ad.grad_check(lambda: ad.sum(ad.square(x)), [x]) < 1e-8


OPS = {
    "elu": lambda a, b: ad.elu(a),
    "tanh": lambda a, b: ad.tanh(a),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "exp": lambda a, b: ad.exp(ad.mul(a, 0.3)),
    "mul": lambda a, b: ad.mul(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)),
    "softmax": lambda a, b: ad.softmax(a),
    "log_softmax": lambda a, b: ad.log_softmax(a),
    "concat": lambda a, b: ad.concat([a, b]),
    "entropy": lambda a, b: ad.entropy_from_logits(a),
}


@given(st.sampled_from(sorted(OPS)), st.sampled_from(sorted(OPS)), st.integers(1, 5),
       st.integers(0, 2 ** 32 - 1))
def test_composed_graphs_match_finite_differences(op1, op2, n, seed):
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    ps.add("a", rng.standard_normal(n))
    ps.add("b", rng.standard_normal(n))
    w = rng.standard_normal(2 * n)

    def f():
        u = OPS[op1](ps["a"], ps["b"])
        u = ad.take(ad.concat([u, ps["b"]]), slice(0, n)) if u.shape != (n,) and u.shape != () else u
        if u.shape == ():
            u = ad.mul(ps["a"], u)
        v = OPS[op2](u, ps["b"])
        v = v if v.shape != () else ad.mul(ps["b"], v)
        return ad.dot(v, w[:v.shape[0]])

    assert ad.grad_check(f, ps, eps=1e-5) < 1e-4


class TestParamSet:
    def test_zero_grad_and_accumulate(self):
        ps = ParamSet()
        w = ps.add("w", np.ones(3))
        grads = ad.backward(ad.sum(ad.mul(w, 2.0)))
        ps.accumulate(grads)
        ps.accumulate(grads)
        np.testing.assert_array_equal(ps.grads["w"], [4.0, 4.0, 4.0])
        ps.zero_grad()
        np.testing.assert_array_equal(ps.grads["w"], 0.0)
        assert ps.grads["w"].shape == w.shape

    def test_duplicate_name_rejected(self):
        ps = ParamSet()
        ps.add("w", np.ones(1))
        with pytest.raises(KeyError):
            ps.add("w", np.ones(1))

    def test_frozen_views_share_storage_without_graph(self):
        ps = ParamSet()
        ps.add("w", np.ones(2))
        view = ps.frozen()["w"]
        ps["w"].data += 1.0
        np.testing.assert_array_equal(view.data, [2.0, 2.0])
        assert not ad.mul(view, 3.0).requires_grad

    def test_state_dict_round_trip_in_place(self):
        ps = ParamSet()
        w = ps.add("w", np.arange(4.0).reshape(2, 2))
        state = ps.state_dict()
        w.data[...] = 0.0
        ps.load_state_dict(state)
        np.testing.assert_array_equal(w.data, [[0, 1], [2, 3]])
        with pytest.raises(ValueError):
            ps.load_state_dict({"w": np.zeros(3)})


class TestRng:
    def test_split_streams_reproducible_and_distinct(self):
        a = [r.random() for r in ad.split_rng(ad.make_rng(3), 3)]
        b = [r.random() for r in ad.split_rng(ad.make_rng(3), 3)]
        assert a == b and len(set(a)) == 3
