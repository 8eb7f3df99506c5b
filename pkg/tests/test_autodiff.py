import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drfcode import autodiff as ad
from drfcode import checkpoint as ckpt
from drfcode.autodiff import AdamState, DimensionError, NonFiniteGradientError, Tensor
from drfcode.nn import BatchNorm, Dense, LSTMWeights, bilstm_layer, lstm_cell, lstm_layer, param


def grad_of(fn, *values):
    """Backprop gradients of scalar fn(*leaves) for each leaf."""
    leaves = [param(v, f"p{i}") for i, v in enumerate(values)]
    with ad.Tape() as tape:
        loss = fn(*leaves)
    ad.backward(tape, loss)
    return [p.grad for p in leaves]


def numeric_grad(fn, values, i, h=1e-5):
    base = [np.array(v, dtype=float) for v in values]
    g = np.zeros_like(base[i])
    for idx in np.ndindex(base[i].shape):
        up = [b.copy() for b in base]
        dn = [b.copy() for b in base]
        up[i][idx] += h
        dn[i][idx] -= h
        f_up = fn(*[Tensor(v) for v in up]).data
        f_dn = fn(*[Tensor(v) for v in dn]).data
        g[idx] = (f_up - f_dn) / (2 * h)
    return g


def rel_err(a, b):
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / scale))


class TestPrimitives:
    def test_sigmoid_midpoint(self):
        assert ad.sigmoid(Tensor(0.0)).data == 0.5

    def test_tanh_origin_value_and_slope(self):
        assert ad.tanh(Tensor(0.0)).data == 0.0
        (g,) = grad_of(lambda w: ad.tanh(w), 0.0)
        assert g == pytest.approx(1.0)

    def test_matmul_identity(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(A), Tensor(np.eye(2))).data, A)

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0])

    @pytest.mark.parametrize("op, a, b", [
        ("matmul", (2, 3), (2, 3)),
        ("add", (2, 3), (3, 2)),
        ("mul", (4,), (5,)),
    ])
    def test_shape_mismatch_names_operation(self, op, a, b):
        with pytest.raises(DimensionError) as err:
            getattr(ad, op)(Tensor(np.ones(a)), Tensor(np.ones(b)))
        assert err.value.op == op
        assert op in str(err.value)

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)

    def test_no_recording_outside_tape(self):
        w = param([1.0, 2.0], "w")
        out = ad.sum_(ad.mul(w, w))
        assert ad.active_tape() is None
        assert out.data == 5.0

    def test_slice_with_index_list_accumulates_repeats(self):
        (g,) = grad_of(lambda w: ad.sum_(w[[0, 0, 2]]), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


class TestBackward:
    def test_quadratic(self):
        (g,) = grad_of(lambda w: ad.sum_(ad.mul(w, w)), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])

    def test_sigmoid_slope_at_zero(self):
        (g,) = grad_of(lambda w: ad.sigmoid(w), 0.0)
        assert g == pytest.approx(0.25)

    def test_non_scalar_loss_rejected(self):
        w = param([1.0, 2.0], "w")
        with ad.Tape() as tape:
            out = ad.mul(w, w)
        with pytest.raises(ValueError):
            ad.backward(tape, out)

    def test_repeated_backward_accumulates(self):
        w = param([1.0, -2.0], "w")
        with ad.Tape() as tape:
            loss = ad.sum_(ad.mul(w, w))
        ad.backward(tape, loss)
        ad.backward(tape, loss)
        np.testing.assert_array_equal(w.grad, [4.0, -8.0])

    def test_tape_records_in_topological_order(self):
        w = param([1.0], "w")
        with ad.Tape() as tape:
            a = ad.mul(w, 2.0)
            b = ad.tanh(a)
            ad.sum_(b)
        produced = set()
        for op in tape.ops:
            for t in op.inputs:
                assert t.requires_grad is False or t is w or id(t) in produced
            produced.add(id(op.out))

    def test_three_layer_network_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 3))
        W1, W2, W3 = rng.normal(size=(3, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 1))
        b1 = rng.normal(size=4)

        def net(W1, b1, W2, W3):
            h = ad.tanh(ad.add(ad.matmul(Tensor(x), W1), b1))
            h = ad.sigmoid(ad.matmul(h, W2))
            return ad.mean(ad.matmul(h, W3))

        values = [W1, b1, W2, W3]
        grads = grad_of(net, *values)
        for i, g in enumerate(grads):
            assert rel_err(g, numeric_grad(net, values, i)) < 1e-4

    @pytest.mark.parametrize("fn", [
        lambda a, b: ad.sum_(ad.div(a, ad.add(ad.mul(b, b), 1.0))),
        lambda a, b: ad.sum_(ad.log(ad.add(ad.sigmoid(a), ad.sigmoid(b)))),
        lambda a, b: ad.mean(ad.sqrt(ad.add(ad.mul(a, a), ad.mul(b, b)))),
        lambda a, b: ad.sum_(ad.mul(ad.concat([a, b], axis=0), ad.concat([b, a], axis=0))),
        lambda a, b: ad.sum_(ad.mul(ad.stack([a, b], axis=1), ad.stack([b, b], axis=1))),
        lambda a, b: ad.sum_(ad.reshape(ad.mul(a, b), (-1,))[1:]),
        lambda a, b: ad.mean(ad.sub(a, ad.mean(b, axis=0, keepdims=True))),
    ], ids=["div", "log", "sqrt", "concat", "stack", "reshape-slice", "broadcast-mean"])
    def test_composites_match_finite_differences(self, fn):
        rng = np.random.default_rng(11)
        values = [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))]
        grads = grad_of(fn, *values)
        for i, g in enumerate(grads):
            assert rel_err(g, numeric_grad(fn, values, i)) < 1e-4

    def test_clip_gradient_zero_outside_range(self):
        (g,) = grad_of(lambda w: ad.sum_(ad.clip(w, 0.0, 1.0)), np.array([-1.0, 0.5, 2.0]))
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(0)
            w = param(rng.normal(size=(4, 4)), "w")
            x = Tensor(rng.normal(size=(2, 4)))
            with ad.Tape() as tape:
                loss = ad.sum_(ad.tanh(ad.matmul(x, w)))
            ad.backward(tape, loss)
            return loss.data.copy(), w.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3,), elements=st.floats(-3, 3)))
    def test_tanh_derivative_property(self, v):
        (g,) = grad_of(lambda w: ad.sum_(ad.tanh(w)), v)
        np.testing.assert_allclose(g, 1 - np.tanh(v) ** 2, rtol=1e-12)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        w = param([1.0, -1.0], "w")
        ad.adam_step({"w": w}, {"w": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(w.data, [1.0, -1.0])

    def test_first_step_moves_by_learning_rate(self):
        w = param([0.0], "w")
        ad.adam_step({"w": w}, {"w": np.ones(1)}, AdamState())
        assert w.data[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_two_steps_same_direction(self):
        w = param([0.0], "w")
        state = AdamState()
        ad.adam_step({"w": w}, {"w": np.ones(1)}, state)
        first = w.data[0]
        ad.adam_step({"w": w}, {"w": np.ones(1)}, state)
        assert first < 0 and w.data[0] < first
        assert state.t == 2

    def test_moment_shapes_track_parameters(self):
        w = param(np.zeros((2, 3)), "w")
        state = AdamState()
        ad.adam_step({"w": w}, {"w": np.ones((2, 3))}, state)
        assert state.m["w"].shape == state.v["w"].shape == (2, 3)

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_gradient_names_parameter(self, bad):
        w = param([1.0], "encoder.lstm.W")
        with pytest.raises(NonFiniteGradientError) as err:
            ad.adam_step({"encoder.lstm.W": w}, {"encoder.lstm.W": np.array([bad])}, AdamState())
        assert err.value.name == "encoder.lstm.W"

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = ad.clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        total = math.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
        assert total == pytest.approx(1.0)


def lstm_oracle(x, h, c, W, b):
    """Gate-by-gate scalar loops, independent of the fused implementation."""
    H = h.size
    v = np.concatenate([x, h])
    sig = lambda t: 1.0 / (1.0 + math.exp(-t))
    h_new, c_new = np.zeros(H), np.zeros(H)
    for j in range(H):
        pre = [b[g * H + j] + sum(v[r] * W[r, g * H + j] for r in range(v.size)) for g in range(4)]
        i, f, gg, o = sig(pre[0]), sig(pre[1]), math.tanh(pre[2]), sig(pre[3])
        c_new[j] = f * c[j] + i * gg
        h_new[j] = o * math.tanh(c_new[j])
    return h_new, c_new


class TestLSTM:
    def test_zero_weights_zero_input_stays_at_origin(self):
        w = LSTMWeights(param(np.zeros((7, 12)), "W"), param(np.zeros(12), "b"))
        h, c = lstm_cell(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))), w)
        np.testing.assert_array_equal(h.data, 0.0)
        np.testing.assert_array_equal(c.data, 0.0)

    def test_matches_gate_by_gate_oracle(self):
        rng = np.random.default_rng(5)
        w = LSTMWeights.init(4, 3, rng, "l")
        w.b.data = rng.normal(size=12)
        x, h, c = rng.normal(size=4), rng.normal(size=3), rng.normal(size=3)
        h1, c1 = lstm_cell(Tensor(x[None]), Tensor(h[None]), Tensor(c[None]), w)
        ho, co = lstm_oracle(x, h, c, w.W.data, w.b.data)
        np.testing.assert_allclose(h1.data[0], ho, atol=1e-12)
        np.testing.assert_allclose(c1.data[0], co, atol=1e-12)

    def test_init_convention(self):
        w = LSTMWeights.init(5, 4, np.random.default_rng(0), "l")
        assert np.all(np.abs(w.W.data) <= 0.5)
        np.testing.assert_array_equal(w.b.data, [0] * 4 + [1] * 4 + [0] * 8)

    def test_bilstm_width_on_length_one(self):
        rng = np.random.default_rng(0)
        fw, bw = LSTMWeights.init(3, 5, rng, "f"), LSTMWeights.init(3, 5, rng, "b")
        out = bilstm_layer([Tensor(rng.normal(size=(2, 3)))], fw, bw)
        assert len(out) == 1 and out[0].shape == (2, 10)

    def test_dimension_mismatch(self):
        w = LSTMWeights.init(3, 2, np.random.default_rng(0), "l")
        with pytest.raises(DimensionError):
            lstm_cell(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), w)

    def test_gradient_flows_through_all_steps(self):
        rng = np.random.default_rng(2)
        w = LSTMWeights.init(2, 3, rng, "l")
        xs = [Tensor(rng.normal(size=(1, 2))) for _ in range(6)]

        def last_grad(seq):
            w.W.grad = None
            with ad.Tape() as tape:
                loss = ad.sum_(lstm_layer(seq, w)[-1])
            ad.backward(tape, loss)
            return w.W.grad.copy()

        base = last_grad(xs)
        xs[0] = Tensor(xs[0].data + 0.5)
        assert not np.allclose(base, last_grad(xs))

    def test_bilstm_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        fw, bw = LSTMWeights.init(2, 2, rng, "f"), LSTMWeights.init(2, 2, rng, "b")
        seq = [Tensor(rng.normal(size=(2, 2))) for _ in range(3)]

        def f(W):
            fw.W = W
            return ad.sum_(ad.mul(ad.stack(bilstm_layer(seq, fw, bw), 0), 0.7))

        W0 = fw.W.data.copy()
        (g,) = grad_of(f, W0)
        assert rel_err(g, numeric_grad(f, [W0], 0)) < 1e-4


class TestBatchNorm:
    def test_training_mode_standardizes(self):
        bn = BatchNorm(3, "bn")
        x = np.random.default_rng(0).normal(2.0, 3.0, size=(500, 3))
        y = bn(Tensor(x), training=True).data
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-5)

    def test_running_statistics_momentum(self):
        bn = BatchNorm(1, "bn")
        bn(Tensor(np.array([[1.0], [3.0]])), training=True)
        assert bn.running_mean[0] == pytest.approx(0.2)
        assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * 1.0)

    def test_modes_differ_unless_statistics_match(self):
        bn = BatchNorm(2, "bn")
        x = Tensor(np.random.default_rng(1).normal(1.0, 2.0, size=(50, 2)))
        train_out = bn(x, training=True, update_stats=False).data
        assert not np.allclose(train_out, bn(x, training=False).data)
        bn.running_mean = x.data.mean(axis=0)
        bn.running_var = x.data.var(axis=0)
        np.testing.assert_allclose(train_out, bn(x, training=False).data)

    def test_gradient_matches_finite_differences(self):
        x0 = np.random.default_rng(4).normal(size=(6, 2))
        bn = BatchNorm(2, "bn")
        bn.gamma.data = np.array([1.5, -0.5])
        target = np.random.default_rng(5).normal(size=(6, 2))
        f = lambda x: ad.sum_(ad.mul(bn(x, training=True, update_stats=False), target))
        (g,) = grad_of(f, x0)
        assert rel_err(g, numeric_grad(f, [x0], 0)) < 1e-4


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(1.5)}
        digest = ckpt.save(tmp_path / "m.ckpt", tensors, {"note": "x"})
        loaded, meta = ckpt.load(tmp_path / "m.ckpt")
        assert meta == {"note": "x"}
        for k, v in tensors.items():
            assert loaded[k].shape == v.shape
            assert loaded[k].tobytes() == v.tobytes()
        assert ckpt.checksum(loaded) == digest

    def test_identical_contents_give_identical_bytes(self, tmp_path):
        t = {"z": np.arange(3.0), "a": np.ones((2, 2))}
        ckpt.save(tmp_path / "1.ckpt", t)
        ckpt.save(tmp_path / "2.ckpt", dict(reversed(list(t.items()))))
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load(tmp_path / "absent.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load(tmp_path / "x.ckpt")

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v.ckpt"
        ckpt.save(path, {"a": np.ones(2)})
        raw = bytearray(path.read_bytes())
        raw[8:12] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ckpt.CheckpointError, match="version"):
            ckpt.load(path)


def test_dense_glorot_bounds():
    d = Dense.init(6, 2, np.random.default_rng(0), "d")
    assert np.all(np.abs(d.W.data) <= math.sqrt(6 / 8))
    assert d(Tensor(np.zeros((3, 6)))).shape == (3, 2)
