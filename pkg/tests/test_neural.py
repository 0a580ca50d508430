import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfother import autodiff as ad
from selfother.neural import (CHECKPOINT_MAGIC, PolicyValueNet, RecurrentState, load_checkpoint,
                              orthogonal_init, save_checkpoint)


class TestOrthogonalInit:
    def test_square(self, rng):
        w = orthogonal_init(4, 4, rng)
        np.testing.assert_allclose(w.T @ w, np.eye(4), atol=1e-6)

    def test_wide(self, rng):
        w = orthogonal_init(2, 5, rng)
        assert w.shape == (2, 5)
        np.testing.assert_allclose(w @ w.T, np.eye(2), atol=1e-6)

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
    def test_singular_values_are_one(self, rows, cols, seed):
        w = orthogonal_init(rows, cols, np.random.default_rng(seed))
        np.testing.assert_allclose(np.linalg.svd(w, compute_uv=False), 1.0, atol=1e-6)

    def test_rejects_empty(self, rng):
        with pytest.raises(ValueError):
            orthogonal_init(0, 3, rng)


def small_net(seed=0, **kw):
    cfg = dict(nfeatures=5, ngoals=3, hidden=4, nactions=4)
    cfg.update(kw)
    return PolicyValueNet(rng=ad.make_rng(seed), **cfg)


def hand_forward(P, s, za, zb, h, c):
    """Scalar-loop forward pass written independently of the library."""
    x = list(s) + list(za) + list(zb)

    def lin(w, b, v):
        return [sum(w[i][j] * v[j] for j in range(len(v))) + b[i] for i in range(len(b))]

    def elu(v):
        return [u if u > 0 else math.exp(u) - 1 for u in v]

    def sig(u):
        return 1 / (1 + math.exp(-u))

    a1 = elu(lin(P["fc1.w"], P["fc1.b"], x))
    a2 = elu(lin(P["fc2.w"], P["fc2.b"], a1))
    n = len(h)
    g1 = lin(P["lstm.w_ih"], P["lstm.b"], a2)
    g2 = lin(P["lstm.w_hh"], [0.0] * (4 * n), h)
    pre = [u + v for u, v in zip(g1, g2)]
    c2 = [sig(pre[n + k]) * c[k] + sig(pre[k]) * math.tanh(pre[2 * n + k]) for k in range(n)]
    h2 = [sig(pre[3 * n + k]) * math.tanh(c2[k]) for k in range(n)]
    logits = lin(P["pi.w"], P["pi.b"], h2)
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    probs = [v / sum(e) for v in e]
    value = lin(P["v.w"], P["v.b"], h2)[0]
    return probs, value, h2, c2


class TestForward:
    def test_hand_computed_two_unit_net(self, rng):
        net = PolicyValueNet(3, 1, 2, 3, rng=ad.make_rng(1))
        P = {}
        for name, t in net.params.items():
            t.data[...] = rng.standard_normal(t.shape)
            P[name] = t.data.tolist()
        s, za, zb = [1.0, 0.0, 1.0], [1.0], [0.3]
        h, c = [0.2, -0.1], [0.5, -0.4]
        out = net.forward(np.array(s), [np.array(za), np.array(zb)],
                          RecurrentState(ad.Tensor(np.array(h)), ad.Tensor(np.array(c))))
        probs, value, h2, c2 = hand_forward(P, s, za, zb, h, c)
        np.testing.assert_allclose(out.probs.data, probs, atol=1e-10)
        assert out.value.item() == pytest.approx(value, abs=1e-10)
        np.testing.assert_allclose(out.rec.h.data, h2, atol=1e-10)
        np.testing.assert_allclose(out.rec.c.data, c2, atol=1e-10)

    @given(st.integers(0, 10 ** 6))
    def test_policy_is_distribution(self, seed):
        rng = np.random.default_rng(seed)
        net = small_net(seed % 7)
        out = net.forward(rng.integers(0, 2, 5).astype(float),
                          [rng.random(3), rng.random(3)], net.initial_state())
        p = out.probs.data
        assert np.all(p > 0) and abs(p.sum() - 1) < 1e-12
        assert np.isfinite(out.value.item())

    def test_deterministic(self, rng):
        net = small_net()
        s, z = rng.random(5), [np.eye(3)[0], np.eye(3)[2]]
        a = net.forward(s, z, net.initial_state())
        b = net.forward(s, z, net.initial_state())
        assert a.probs.data.tobytes() == b.probs.data.tobytes()
        assert a.value.data.tobytes() == b.value.data.tobytes()

    def test_goal_slots_are_distinct_inputs(self, rng):
        net = small_net()
        s = rng.random(5)
        a = net.forward(s, [np.eye(3)[0], np.eye(3)[1]], net.initial_state())
        b = net.forward(s, [np.eye(3)[1], np.eye(3)[0]], net.initial_state())
        assert not np.allclose(a.probs.data, b.probs.data)

    def test_dimension_mismatch_rejected(self):
        net = small_net()
        with pytest.raises(ValueError, match="state"):
            net.forward(np.zeros(4), [np.zeros(3), np.zeros(3)], net.initial_state())
        with pytest.raises(ValueError, match="goal"):
            net.forward(np.zeros(5), [np.zeros(2), np.zeros(3)], net.initial_state())
        with pytest.raises(ValueError, match="goal vectors"):
            net.forward(np.zeros(5), [np.zeros(3)], net.initial_state())

    def test_input_sizes_per_variant(self):
        assert PolicyValueNet(10, 3, 4, 5, goal_slots=2).input_dim == 16
        assert PolicyValueNet(10, 3, 4, 5, goal_slots=1).input_dim == 13

    def test_frozen_forward_records_no_parameter_graph(self, rng):
        net = small_net()
        z = ad.Tensor(np.full(3, 1 / 3), requires_grad=True)
        out = net.forward(rng.random(5), [z, np.eye(3)[0]], net.initial_state(), frozen=True)
        grads = ad.backward(ad.cross_entropy(out.probs, 1))
        assert z in grads
        assert all(t not in grads for _, t in net.params.items())

    def test_column_forward_matches_single(self, rng):
        net = small_net()
        S, A, B = rng.random((5, 3)), rng.random((3, 3)), rng.random((3, 3))
        logits, rec = net.forward_columns(S, [A, B], RecurrentState.zeros(4, 3))
        for j in range(3):
            o = net.forward(S[:, j], [A[:, j], B[:, j]], net.initial_state())
            np.testing.assert_allclose(logits.data[:, j], o.logits.data, atol=1e-14)
            np.testing.assert_allclose(rec.h.data[:, j], o.rec.h.data, atol=1e-14)


class TestParameters:
    @given(st.integers(1, 30), st.integers(1, 5), st.integers(1, 8), st.integers(2, 6),
           st.integers(1, 2), st.integers(0, 3), st.integers(0, 3))
    def test_count_closed_form(self, nf, ng, h, na, slots, extra, aux):
        net = PolicyValueNet(nf, ng, h, na, slots, extra, aux)
        assert net.params.count() == PolicyValueNet.expected_param_count(nf, ng, h, na, slots, extra, aux)

    def test_biases_zero_weights_semi_orthogonal(self):
        net = small_net()
        for name, t in net.params.items():
            if name.endswith(".b"):
                assert not t.data.any()
            else:
                np.testing.assert_allclose(np.linalg.svd(t.data, compute_uv=False), 1.0, atol=1e-6)

    def test_full_network_loss_gradcheck(self, rng):
        net = small_net(hidden=3)
        z = ad.Tensor(np.array([0.2, 0.5, 0.3]), requires_grad=True)
        states = [rng.integers(0, 2, 5).astype(float) for _ in range(3)]

        def f():
            rec = net.initial_state()
            terms = []
            for t, s in enumerate(states):
                out = net.forward(s, [np.eye(3)[1], z], rec)
                rec = out.rec
                terms += [ad.cross_entropy(out.probs, t), ad.square(out.value)]
            return ad.stack_sum(terms)

        assert ad.grad_check(f, list(dict(net.params.items()).values()) + [z]) < 1e-4


class TestRecurrentState:
    def test_snapshot_restore_round_trip(self, rng):
        net = small_net()
        s, z = rng.random(5), [np.eye(3)[0], np.eye(3)[1]]
        rec = net.forward(s, z, net.initial_state()).rec
        saved = rec.snapshot()
        direct = net.forward(s, z, rec)
        detour = net.forward(s, z, RecurrentState.restore(saved))
        assert direct.probs.data.tobytes() == detour.probs.data.tobytes()

    def test_snapshot_not_aliased(self, rng):
        net = small_net()
        rec = net.forward(rng.random(5), [np.eye(3)[0]] * 2, net.initial_state()).rec
        saved = rec.snapshot()
        before = saved[0].copy()
        restored = RecurrentState.restore(saved)
        restored.h.data += 1.0
        net.forward(rng.random(5), [np.eye(3)[0]] * 2, restored)
        np.testing.assert_array_equal(saved[0], before)

    def test_zero_initialised(self):
        rec = small_net().initial_state()
        assert not rec.h.data.any() and not rec.c.data.any()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = small_net(aux_actions=4)
        path = tmp_path / "net.ckpt"
        net.save(path, {"note": "x"})
        loaded, meta = PolicyValueNet.load(path)
        assert meta["note"] == "x"
        for name, t in net.params.items():
            assert loaded.params[name].data.tobytes() == t.data.tobytes()

    def test_layout_is_little_endian_doubles(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint(path, {"a": np.array([1.5, -2.0])}, {})
        raw = path.read_bytes()
        assert raw[:8] == CHECKPOINT_MAGIC
        version, hlen = struct.unpack("<II", raw[8:16])
        assert version == 1
        assert struct.unpack("<2d", raw[16 + hlen:]) == (1.5, -2.0)

    def test_rejects_foreign_file_and_version(self, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(bad)
        path = tmp_path / "v.ckpt"
        save_checkpoint(path, {}, {})
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)
