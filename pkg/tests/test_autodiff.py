import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atm import autodiff as ad
from atm.autodiff import DenseParams, LossParams, LstmParams, LstmState, Tape
from atm.errors import InvalidInputError, UsageError

from conftest import numeric_grad, rel_error


def _randomize(params, rng, scale=0.5):
    for p in params.values():
        p.data = rng.normal(scale=scale, size=p.shape)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


class TestDense:
    def test_identity(self):
        x = np.array([[1.0, -2.0, 3.0]])
        p = DenseParams(ad.parameter(np.eye(3)), ad.parameter(np.zeros(3)))
        np.testing.assert_array_equal(ad.dense_forward(p, x).data, x)

    def test_zero_weight_gives_bias(self):
        b = np.array([0.5, -1.5])
        p = DenseParams(ad.parameter(np.zeros((2, 4))), ad.parameter(b))
        x = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_array_equal(ad.dense_forward(p, x).data, np.tile(b, (5, 1)))

    def test_matches_dot_product_oracle(self):
        rng = np.random.default_rng(1)
        w, b, x = rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=2)
        p = DenseParams(ad.parameter(w), ad.parameter(b))
        oracle = [sum(w[i, j] * x[j] for j in range(2)) + b[i] for i in range(3)]
        np.testing.assert_allclose(ad.dense_forward(p, x).data, oracle, rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        p = DenseParams(ad.parameter(np.zeros((2, 3))), ad.parameter(np.zeros(2)))
        with pytest.raises(InvalidInputError):
            ad.dense_forward(p, np.zeros(4))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        p = DenseParams.init(rng, 4, 3)
        _randomize(p.named_parameters("d"), rng)
        x = ad.parameter(rng.normal(size=(5, 4)))
        loss = lambda: ad.total(ad.tanh(ad.dense_forward(p, x)))  # noqa: E731
        with Tape() as tape:
            out = loss()
        g = tape.backward(out)
        for t in (p.weight, p.bias, x):
            assert rel_error(g[t], numeric_grad(loss, t)) < 1e-7


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


class TestLstm:
    def test_all_zero(self):
        p = LstmParams.zeros(3, 2)
        s = ad.lstm_step(p, np.array([1.0, -2.0, 0.5]), LstmState.zeros(2))
        np.testing.assert_array_equal(s.h.data, 0)
        np.testing.assert_array_equal(s.c.data, 0)

    def test_scalar_forget_gate_oracle(self):
        p = LstmParams.zeros(1, 1)
        p.biases["f"].data = np.array([10.0])
        s = ad.lstm_step(p, np.zeros(1), LstmState(ad.Tensor(np.zeros(1)), ad.Tensor(np.ones(1))))
        sig10 = 1.0 / (1.0 + math.exp(-10.0))
        # i = sigma(0) = 0.5, g = tanh(0) = 0, so c' = f * c
        assert s.c.data[0] == pytest.approx(sig10, abs=1e-15)
        assert s.c.data[0] == pytest.approx(0.99995, abs=1e-5)
        assert s.h.data[0] == pytest.approx(0.5 * math.tanh(sig10), abs=1e-15)

    def test_step_gradients(self):
        rng = np.random.default_rng(3)
        p = LstmParams.init(rng, 3, 4)
        params = p.named_parameters("l")
        _randomize(params, rng)
        x = rng.normal(size=3)
        s0 = LstmState(ad.Tensor(rng.normal(size=4)), ad.Tensor(rng.normal(size=4)))
        loss = lambda: ad.total(ad.lstm_step(p, x, s0).h)  # noqa: E731
        with Tape() as tape:
            out = loss()
        g = tape.backward(out)
        for name, t in params.items():
            assert rel_error(g[t], numeric_grad(loss, t)) < 1e-5, name

    def test_sequence_matches_repeated_steps(self):
        rng = np.random.default_rng(4)
        p = LstmParams.init(rng, 3, 5)
        _randomize(p.named_parameters("l"), rng)
        x = rng.normal(size=(6, 3))
        s = LstmState.zeros(5)
        hs = []
        for t in range(6):
            s = ad.lstm_step(p, x[t], s)
            hs.append(s.h.data)
        np.testing.assert_allclose(ad.lstm_sequence(p, x).data, np.stack(hs), atol=1e-14)

    def test_sequence_gradients_match_step_graph(self):
        rng = np.random.default_rng(5)
        p = LstmParams.init(rng, 2, 3)
        params = p.named_parameters("l")
        _randomize(params, rng)
        rows = [ad.parameter(rng.normal(size=2)) for _ in range(4)]
        target = rng.normal(size=(4, 3))

        def fused():
            return ad.mse_loss(ad.lstm_sequence(p, ad.concat_rows(rows)), target)

        def stepped():
            s, hs = LstmState.zeros(3), []
            for r in rows:
                s = ad.lstm_step(p, r, s)
                hs.append(s.h)
            return ad.mse_loss(ad.concat_rows(hs), target)

        with Tape() as t1:
            l1 = fused()
        g1 = t1.backward(l1)
        with Tape() as t2:
            l2 = stepped()
        g2 = t2.backward(l2)
        assert l1.item() == pytest.approx(l2.item(), abs=1e-14)
        leaves = {**params, **{f"x{i}": r for i, r in enumerate(rows)}}
        for name, t in leaves.items():
            np.testing.assert_allclose(g1[t], g2[t], atol=1e-12, err_msg=name)
            assert rel_error(g1[t], numeric_grad(fused, t)) < 1e-6, name

    def test_width_mismatch(self):
        p = LstmParams.zeros(3, 2)
        with pytest.raises(InvalidInputError):
            ad.lstm_sequence(p, np.zeros((4, 2)))
        with pytest.raises(InvalidInputError):
            ad.lstm_step(p, np.zeros(2), LstmState.zeros(2))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


class TestActivations:
    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ad.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])

    def test_softmax_analytic(self):
        np.testing.assert_allclose(ad.softmax(np.array([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_softmax_large_inputs(self):
        out = ad.softmax(np.array([1000.0, 1000.0])).data
        shifted = ad.softmax(np.array([0.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, shifted)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 7), elements=st.floats(-500, 500)))
    def test_softmax_is_distribution(self, x):
        p = ad.softmax(x).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_sigmoid_extremes(self):
        out = ad.sigmoid(np.array([-800.0, 0.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_unknown_kind(self):
        with pytest.raises(UsageError):
            ad.activation("gelu", np.zeros(2))

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh", "softmax"])
    def test_gradients(self, kind):
        rng = np.random.default_rng(6)
        x = ad.parameter(rng.normal(size=(3, 5)))
        w = rng.normal(size=(3, 5))
        loss = lambda: ad.total(ad.mul(ad.activation(kind, x), w))  # noqa: E731
        with Tape() as tape:
            out = loss()
        assert rel_error(tape.backward(out)[x], numeric_grad(loss, x)) < 1e-7


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


class TestLosses:
    def test_mse_zero(self):
        x = np.random.default_rng(7).normal(size=(3, 4))
        assert ad.mse_loss(x, x).item() == 0.0

    def test_mse_unit_offset(self):
        x = np.random.default_rng(8).normal(size=(3, 4))
        assert ad.mse_loss(x + 1.0, x).item() == pytest.approx(1.0, abs=1e-15)

    def test_mse_brute_force(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        brute = sum((a[i, j] - b[i, j]) ** 2 for i in range(5) for j in range(6)) / 30
        assert ad.mse_loss(a, b).item() == pytest.approx(brute, abs=1e-12)

    def test_mse_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            ad.mse_loss(np.zeros(3), np.zeros(4))

    def test_ce_perfect(self):
        y = np.eye(7)[[0, 3, 6]]
        assert ad.cross_entropy_loss(y, y).item() == pytest.approx(0.0, abs=1e-12)

    def test_ce_uniform(self):
        post = np.full((5, 7), 1 / 7)
        y = np.eye(7)[[0, 1, 2, 3, 4]]
        assert ad.cross_entropy_loss(post, y).item() == pytest.approx(math.log(7), abs=1e-12)
        assert math.log(7) == pytest.approx(1.9459, abs=1e-4)

    def test_ce_per_frame_oracle(self):
        rng = np.random.default_rng(10)
        post = ad.softmax(rng.normal(size=(6, 4))).data
        cls = rng.integers(0, 4, 6)
        oracle = -sum(math.log(post[n, cls[n]]) for n in range(6)) / 6
        assert ad.cross_entropy_loss(post, np.eye(4)[cls]).item() == pytest.approx(oracle, abs=1e-12)

    def test_ce_rejects_bad_one_hot(self):
        with pytest.raises(InvalidInputError):
            ad.cross_entropy_loss(np.full((1, 3), 1 / 3), np.array([[1.0, 1.0, 0.0]]))

    def test_ce_floor_keeps_finite(self):
        post = np.array([[1.0, 0.0]])
        assert ad.cross_entropy_loss(post, np.array([[0.0, 1.0]])).item() == pytest.approx(-math.log(1e-12))

    def test_weighted_loss_unit_sigmas(self):
        assert ad.dynamic_weighted_loss(LossParams(), 2.0, 3.0).item() == 4.0

    def test_weighted_loss_log_terms(self):
        lp = LossParams(ad.parameter(1.0), ad.parameter(0.0))
        assert ad.dynamic_weighted_loss(lp, 0.0, 0.0).item() == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 100), st.floats(0, 100))
    def test_weighted_loss_reduces_at_unit_sigma(self, l1, l2):
        out = ad.dynamic_weighted_loss(LossParams(), l1, l2).item()
        assert out == pytest.approx(l1 / 2 + l2, rel=1e-12, abs=1e-12)

    def test_weighted_loss_sigma_gradient(self):
        lp = LossParams()
        loss = lambda: ad.dynamic_weighted_loss(lp, 2.0, 3.0)  # noqa: E731
        with Tape() as tape:
            out = loss()
        g = tape.backward(out)
        for t in (lp.log_sigma1, lp.log_sigma2):
            assert rel_error(g[t], numeric_grad(loss, t)) < 1e-6
        # d/ds1 [exp(-2 s1) + s1] at 0 = -2 + 1
        assert g[lp.log_sigma1] == pytest.approx(-1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class TestTape:
    def test_mse_to_zero_gradient(self):
        x = ad.parameter(np.array([1.7]))
        with Tape() as tape:
            loss = ad.mse_loss(x, np.zeros(1))
        assert tape.backward(loss)[x][0] == pytest.approx(2 * 1.7, abs=1e-15)

    def test_unused_parameter_has_zero_gradient(self):
        used, unused = ad.parameter(np.ones(3)), ad.parameter(np.ones(3))
        with Tape() as tape:
            loss = ad.total(ad.mul(used, used))
        g = tape.backward(loss)
        np.testing.assert_array_equal(g[unused], 0.0)

    def test_loss_not_on_tape(self):
        x = ad.parameter(np.ones(2))
        loss = ad.total(x)  # no active tape
        with Tape() as tape:
            pass
        with pytest.raises(UsageError):
            tape.backward(loss)

    def test_each_node_visited_once(self):
        x = ad.parameter(np.array([2.0]))
        with Tape() as tape:
            y = ad.mul(x, x)
            z = ad.add(y, y)
            loss = ad.total(z)
        calls = []
        for node in tape.nodes:
            fn = node.backward
            node.backward = lambda g, fn=fn, node=node: calls.append(id(node)) or fn(g)
        assert tape.backward(loss)[x][0] == pytest.approx(8.0)
        assert len(calls) == len(set(calls)) == len(tape.nodes)

    def test_no_tape_records_nothing(self):
        x = ad.parameter(np.ones(2))
        assert not ad.total(x).requires_grad

    def test_stop_gradient(self):
        x = ad.parameter(np.array([3.0]))
        with Tape() as tape:
            loss = ad.total(ad.mul(x, ad.stop_gradient(x)))
        assert tape.backward(loss)[x][0] == pytest.approx(3.0)

    def test_context_stack_gradient(self):
        rng = np.random.default_rng(11)
        x = ad.parameter(rng.normal(size=(4, 2)))
        w = rng.normal(size=(4, 10))
        loss = lambda: ad.total(ad.mul(ad.context_stack(x, 2), w))  # noqa: E731
        with Tape() as tape:
            out = loss()
        assert rel_error(tape.backward(out)[x], numeric_grad(loss, x)) < 1e-8

    def test_forward_deterministic(self):
        rng = np.random.default_rng(12)
        p = LstmParams.init(rng, 3, 4)
        x = rng.normal(size=(5, 3))
        a = ad.lstm_sequence(p, x).data
        b = ad.lstm_sequence(p, x).data
        assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        new, _ = ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState(), lr=0.1)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_first_step_magnitude(self):
        p = {"w": np.array([0.0, 0.0])}
        g = {"w": np.array([0.3, -5.0])}
        new, state = ad.adam_step(p, g, ad.AdamState(), lr=1e-3)
        # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        expected = -1e-3 * g["w"] / (np.abs(g["w"]) + 1e-8)
        np.testing.assert_allclose(new["w"], expected, rtol=1e-12)
        assert state.step == 1

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            p, s = {"w": np.ones(4)}, ad.AdamState()
            r = np.random.default_rng(0)
            for _ in range(5):
                p, s = ad.adam_step(p, {"w": r.normal(size=4)}, s)
            runs.append(p["w"].tobytes())
        assert runs[0] == runs[1]

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            ad.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, ad.AdamState())

    def test_wrapper_updates_tensors(self):
        w = ad.parameter(np.array([1.0]))
        opt = ad.Adam({"w": w}, lr=0.5)
        with Tape() as tape:
            loss = ad.total(ad.mul(w, w))
        opt.step(tape.backward(loss))
        assert w.data[0] == pytest.approx(0.5)
