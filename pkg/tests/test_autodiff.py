from __future__ import annotations

import numpy as np
import pytest

from gsnop import autodiff as ad
from gsnop.errors import ConfigError, DivergenceError, DomainError, UsageError

from .conftest import numeric_grad, tape_grads

RNG = np.random.default_rng(7)

# (name, op, input arrays)
UNARY_CASES = [
    ("tanh", ad.tanh, RNG.normal(size=(3, 4))),
    ("relu", ad.relu, RNG.normal(size=(3, 4))),
    ("sigmoid", ad.sigmoid, RNG.normal(size=(3, 4))),
    ("cos", ad.cos, RNG.normal(size=(3, 4))),
    ("log", ad.log, RNG.uniform(0.5, 2.0, size=(3, 4))),
    ("clip", lambda a: ad.clip(a, -0.5, 0.5), RNG.normal(size=(3, 4))),
    ("scale", lambda a: ad.scale(a, -2.5), RNG.normal(size=(3, 4))),
    ("mean_rows", ad.mean_rows, RNG.normal(size=(5, 3))),
    ("sum", ad.sum, RNG.normal(size=(2, 3))),
    ("take_rows", lambda a: ad.take_rows(a, np.array([0, 2, 2, 1])), RNG.normal(size=(3, 2))),
    ("columns", lambda a: ad.columns(a, 1, 3), RNG.normal(size=(2, 4))),
    (
        "segment_mean",
        lambda a: ad.segment_mean(a, np.array([0, 0, 2, 2, 2]), 3),
        RNG.normal(size=(5, 2)),
    ),
    ("broadcast_rows", lambda a: ad.broadcast_rows(a, 4), RNG.normal(size=(1, 3))),
]

BINARY_CASES = [
    ("add", ad.add, RNG.normal(size=(3, 4)), RNG.normal(size=(1, 4))),
    ("sub", ad.sub, RNG.normal(size=(3, 4)), RNG.normal(size=(3, 1))),
    ("mul", ad.mul, RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))),
    ("div", ad.div, RNG.normal(size=(3, 4)), RNG.uniform(1.0, 2.0, size=(1, 4))),
    ("matmul", ad.matmul, RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))),
    ("concat", lambda a, b: ad.concat([a, b]), RNG.normal(size=(2, 3)), RNG.normal(size=(2, 2))),
    (
        "scatter_rows",
        lambda a, b: ad.scatter_rows(a, np.array([1, 3]), b),
        RNG.normal(size=(4, 3)),
        RNG.normal(size=(2, 3)),
    ),
]


def _projected(op, arrays, weight):
    def value() -> float:
        with ad.paused():
            return float(np.sum(op(*[ad.Tensor(a) for a in arrays]).value * weight))

    return value


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name,op,x", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
    def test_unary_matches_finite_differences(self, name, op, x):
        x = x.copy()
        tensor = ad.Tensor(x, requires_grad=True)
        weight = np.random.default_rng(1).normal(size=op(ad.Tensor(x)).shape)
        (grad,) = tape_grads(lambda: ad.sum(ad.mul(op(tensor), weight)), [tensor])
        expected = numeric_grad(_projected(op, [x], weight), x)
        np.testing.assert_allclose(grad, expected, rtol=1e-4, atol=1e-7)

    @pytest.mark.parametrize("name,op,a,b", BINARY_CASES, ids=[c[0] for c in BINARY_CASES])
    def test_binary_matches_finite_differences(self, name, op, a, b):
        a, b = a.copy(), b.copy()
        ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
        weight = np.random.default_rng(2).normal(size=op(ad.Tensor(a), ad.Tensor(b)).shape)
        grads = tape_grads(lambda: ad.sum(ad.mul(op(ta, tb), weight)), [ta, tb])
        fn = _projected(op, [a, b], weight)
        np.testing.assert_allclose(grads[0], numeric_grad(fn, a), rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(grads[1], numeric_grad(fn, b), rtol=1e-4, atol=1e-7)

    def test_reused_tensor_accumulates(self):
        x = ad.Tensor(np.array([[1.5, -2.0]]), requires_grad=True)
        (grad,) = tape_grads(lambda: ad.sum(ad.mul(x, x)), [x])
        np.testing.assert_allclose(grad, [[3.0, -4.0]])


class TestTape:
    def test_no_recording_without_tape(self):
        x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        y = ad.tanh(x)
        assert y.tape is None

    def test_paused_suspends_recording(self):
        x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.Tape() as tape:
            with ad.paused():
                ad.tanh(x)
            assert len(tape) == 0
            ad.tanh(x)
            assert len(tape) == 1

    def test_constants_are_not_recorded(self):
        with ad.Tape() as tape:
            ad.add(np.ones(3), np.ones(3))
        assert len(tape) == 0

    def test_backward_rejects_non_scalar(self):
        x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.Tape():
            y = ad.tanh(x)
            with pytest.raises(UsageError):
                ad.backward(y)

    def test_backward_rejects_untaped_loss(self):
        with pytest.raises(UsageError):
            ad.backward(ad.Tensor(1.0))

    def test_vjp_leaves_grad_untouched(self):
        x = ad.Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        with ad.Tape():
            y = ad.mul(x, x)
            (g,) = ad.vjp(y, [x], np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(g, [[2.0, 4.0]])
        np.testing.assert_array_equal(x.grad, np.zeros((1, 2)))

    def test_custom_op_backward(self):
        x = ad.Tensor(np.array([2.0]), requires_grad=True)

        def cube(t: ad.Tensor) -> ad.Tensor:
            v = t.value
            return ad.custom_op("cube", v**3, (t,), lambda g: (3 * v**2 * g,))

        (grad,) = tape_grads(lambda: ad.sum(cube(x)), [x])
        np.testing.assert_allclose(grad, [12.0])


class TestErrors:
    def test_matmul_shape_mismatch(self):
        with pytest.raises(ConfigError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_broadcast_mismatch(self):
        with pytest.raises(ConfigError):
            ad.add(np.ones((2, 3)), np.ones((4, 3)))

    def test_division_by_zero(self):
        with pytest.raises(DomainError):
            ad.div(np.ones(2), np.array([1.0, 0.0]))

    def test_log_of_nonpositive(self):
        with pytest.raises(DomainError):
            ad.log(np.array([1.0, 0.0]))


class TestOptimizer:
    def _params(self):
        return {"w": ad.Tensor(np.array([[1.0, -1.0]]), requires_grad=True)}

    def test_first_adam_step_moves_by_learning_rate(self):
        params = self._params()
        params["w"].grad = np.array([[0.5, -2.0]])
        state = ad.AdamState(learning_rate=0.1)
        ad.optimizer_step(params, state)
        np.testing.assert_allclose(params["w"].value, [[0.9, -0.9]], atol=1e-6)
        np.testing.assert_array_equal(params["w"].grad, np.zeros((1, 2)))
        assert state.step == 1

    def test_clip_grad_norm(self):
        params = self._params()
        params["w"].grad = np.array([[3.0, 4.0]])
        norm = ad.clip_grad_norm(params, 1.0)
        assert norm == pytest.approx(5.0)
        assert ad.global_grad_norm(params) == pytest.approx(1.0)

    def test_clip_leaves_small_gradients(self):
        params = self._params()
        params["w"].grad = np.array([[0.3, 0.4]])
        ad.clip_grad_norm(params, 5.0)
        np.testing.assert_allclose(params["w"].grad, [[0.3, 0.4]])

    def test_nan_gradient_names_parameter(self):
        params = self._params()
        params["w"].grad = np.array([[np.nan, 0.0]])
        with pytest.raises(DivergenceError) as info:
            ad.optimizer_step(params, ad.AdamState())
        assert info.value.diagnostics["parameter"] == "w"
        np.testing.assert_array_equal(params["w"].value, [[1.0, -1.0]])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = {"a": ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)}
        ad.save_checkpoint(tmp_path / "ckpt", params)
        restored = {"a": ad.Tensor(np.zeros((2, 3)), requires_grad=True)}
        ad.load_checkpoint(tmp_path / "ckpt", restored)
        np.testing.assert_array_equal(restored["a"].value, params["a"].value)

    def test_shape_mismatch(self, tmp_path):
        ad.save_checkpoint(tmp_path / "ckpt", {"a": ad.Tensor(np.zeros((2, 3)))})
        with pytest.raises(ConfigError):
            ad.load_checkpoint(tmp_path / "ckpt", {"a": ad.Tensor(np.zeros((3, 2)))})

    def test_missing_parameter(self, tmp_path):
        ad.save_checkpoint(tmp_path / "ckpt", {"a": ad.Tensor(np.zeros(2))})
        with pytest.raises(ConfigError):
            ad.load_checkpoint(tmp_path / "ckpt", {"b": ad.Tensor(np.zeros(2))})

    def test_foreign_document(self, tmp_path):
        (tmp_path / "ckpt").write_text('{"format": "other"}', encoding="utf-8")
        with pytest.raises(ConfigError):
            ad.load_checkpoint(tmp_path / "ckpt", {})

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ad.load_checkpoint(tmp_path / "absent", {})
        (tmp_path / "truncated").write_text('{"format": ', encoding="utf-8")
        with pytest.raises(ConfigError):
            ad.load_checkpoint(tmp_path / "truncated", {})


def test_square_sum_gradient():
    x = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    (grad,) = tape_grads(lambda: ad.sum(ad.mul(x, x)), [x])
    np.testing.assert_allclose(grad, [2.0, 4.0, 6.0])


def test_separate_tapes_do_not_leak():
    x = ad.Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    y = ad.Tensor(np.array([[3.0]]), requires_grad=True)
    with ad.Tape():
        ad.backward(ad.sum(ad.scale(x, 2.0)))
    with ad.Tape():
        ad.backward(ad.sum(ad.mul(y, y)))
    np.testing.assert_allclose(x.grad, [[2.0, 2.0]])
    np.testing.assert_allclose(y.grad, [[6.0]])


def test_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    w, v = rng.normal(size=(4, 1)), rng.normal(size=(2, 4))

    def run():
        x = ad.Tensor(v, requires_grad=True)
        (grad,) = tape_grads(lambda: ad.sum(ad.sigmoid(ad.matmul(x, w))), [x])
        return grad

    np.testing.assert_array_equal(run(), run())


def test_zero_gradient_leaves_parameter_and_counts_step():
    params = {"p": ad.Tensor(np.array([1.0]), requires_grad=True)}
    state = ad.AdamState(learning_rate=0.1)
    ad.optimizer_step(params, state)
    np.testing.assert_array_equal(params["p"].value, [1.0])
    assert state.step == 1


def test_constant_gradient_moves_monotonically():
    params = {"p": ad.Tensor(np.array([1.0]), requires_grad=True)}
    state = ad.AdamState(learning_rate=0.1)
    seen = [1.0]
    for _ in range(2):
        params["p"].grad = np.array([1.0])
        ad.optimizer_step(params, state)
        seen.append(float(params["p"].value[0]))
    assert seen[0] > seen[1] > seen[2]
    assert seen[1] == pytest.approx(0.9, abs=1e-6)


@pytest.mark.parametrize(
    "op,x,expected",
    [
        (ad.sigmoid, 0.0, 0.5),
        (ad.tanh, 0.0, 0.0),
    ],
)
def test_values_at_origin(op, x, expected):
    assert op(np.array([x])).item() == expected


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, np.eye(2)).value, a)
