import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stylefl import numerics as nx
from stylefl.errors import DomainError, NumericError, ShapeError


def brute_sq_dist(h, P):
    return np.array([[sum((a - b) ** 2 for a, b in zip(row, p)) for p in P] for row in h])


class TestProtoLogits:
    def test_identity_case(self):
        p = np.array([[0.3, -1.2, 2.0], [1.0, 1.0, 1.0]])
        out = nx.proto_logits(p[0], p).value
        assert out[0] == pytest.approx(0.0, abs=1e-15)
        assert out[1] < 0

    def test_zero_features(self):
        P = np.array([[1.0, 2.0], [-3.0, 0.5]])
        out = nx.proto_logits(np.zeros(2), P).value
        np.testing.assert_allclose(out, -(P**2).sum(axis=1))

    def test_orthogonal_units(self):
        out = nx.proto_logits(np.array([1.0, 0.0]), np.array([[0.0, 1.0]])).value
        assert out[0] == pytest.approx(-2.0)

    def test_matches_negative_pairwise_distance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            h = rng.normal(size=(5, 7))
            P = rng.normal(size=(4, 7))
            np.testing.assert_allclose(nx.proto_logits(h, P).value, -brute_sq_dist(h, P), atol=1e-10)

    def test_all_nonpositive(self):
        rng = np.random.default_rng(4)
        out = nx.proto_logits(rng.normal(size=(10, 3)), rng.normal(size=(6, 3))).value
        assert np.all(out <= 1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            nx.proto_logits(np.zeros(3), np.zeros((2, 4)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax_scaled(np.full(4, 1.7), 2.0).value, [0.25] * 4)

    def test_no_overflow(self):
        out = nx.softmax_scaled(np.array([1e6, 0.0]), 1.0).value
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    def test_ln2(self):
        out = nx.softmax_scaled(np.array([math.log(2.0), 0.0]), 1.0).value
        np.testing.assert_allclose(out, [2 / 3, 1 / 3], atol=1e-15)

    def test_empty(self):
        with pytest.raises(DomainError):
            nx.softmax_scaled(np.zeros(0), 1.0)

    def test_mask_gives_exact_zero(self):
        out = nx.softmax_scaled(np.array([5.0, 1.0, 2.0]), 1.0, mask=np.array([True, False, True])).value
        assert out[1] == 0.0
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
        st.floats(-100, 100),
        st.floats(0.1, 10),
    )
    def test_sum_and_shift_invariance(self, scores, shift, scale):
        a = nx.softmax_scaled(scores, scale).value
        b = nx.softmax_scaled(scores + shift, scale).value
        assert abs(a.sum() - 1.0) <= 1e-12
        assert np.all(a >= 0)
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestLayerNorm:
    def test_constant_input(self):
        out = nx.layer_norm(np.full(5, 3.0), np.ones(5), np.zeros(5)).value
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_pair(self):
        out = nx.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-12).value
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-9)

    def test_zero_gain(self):
        b = np.array([0.5, -2.0, 3.0])
        out = nx.layer_norm(np.array([9.0, -4.0, 1.0]), np.zeros(3), b).value
        np.testing.assert_allclose(out, b)

    def test_moments(self):
        x = np.random.default_rng(0).normal(size=16) * 4 + 2
        out = nx.layer_norm(x, np.ones(16), np.zeros(16)).value
        assert out.mean() == pytest.approx(0.0, abs=1e-12)
        assert out.var() == pytest.approx(1.0, abs=1e-6)

    def test_too_short(self):
        with pytest.raises(DomainError):
            nx.layer_norm(np.ones(1), np.ones(1), np.zeros(1))


class TestCosine:
    def test_self(self):
        a = np.array([0.2, -3.0, 1.0])
        assert nx.cosine_sim(a, a).item() == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert nx.cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 2.0])).item() == 0.0

    def test_diagonal(self):
        assert nx.cosine_sim(np.array([1.0, 1.0]), np.array([1.0, 0.0])).item() == pytest.approx(1 / math.sqrt(2))

    def test_antisymmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=5), rng.normal(size=5)
        assert nx.cosine_sim(a, -b).item() == pytest.approx(-nx.cosine_sim(a, b).item())

    def test_zero_vector_is_finite(self):
        assert nx.cosine_sim(np.zeros(3), np.ones(3)).item() == 0.0

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            nx.cosine_sim(np.ones(2), np.ones(3))


class TestGradCheck:
    def test_quadratic(self):
        x = nx.param(np.array(3.0))
        err = nx.grad_check(lambda: x * x, [x], step=1e-4)
        assert x.grad is not None
        assert err < 1e-9

    def test_step_range(self):
        x = nx.param(np.array(1.0))
        with pytest.raises(DomainError):
            nx.grad_check(lambda: x * x, [x], step=1e-2)

    def test_non_finite(self):
        x = nx.param(np.array(-1.0))
        with pytest.raises(NumericError):
            nx.grad_check(lambda: nx.log(x), [x])

    def test_detects_wrong_gradient(self):
        x = nx.param(np.array([1.0, 2.0]))

        def broken():
            return nx.Tensor(x.value**2 @ np.ones(2), _parents=(x,), _backward=lambda g: (g * x.value,))

        assert nx.grad_check(broken, [x]) > 0.1

    def test_pull_loss_random_inputs(self):
        rng = np.random.default_rng(8)
        a, b = nx.param(rng.normal(size=8)), nx.param(rng.normal(size=8))
        assert nx.grad_check(lambda: 1.0 - nx.cosine_sim(a, b), [a, b]) < 1e-4


PRIMITIVES = {
    "proto_logits_ce": lambda a, b, y: nx.cross_entropy(nx.proto_logits(a, b), y),
    "softmax": lambda a, b, y: (nx.softmax_scaled(a, 1.7) * b[: a.shape[0]]).sum(),
    "masked_softmax": lambda a, b, y: (nx.masked_softmax(a, a.value > -0.5, axis=0) * b[: a.shape[0]]).sum(),
    "layer_norm": lambda a, b, y: (nx.layer_norm(a, b[0], b[1]) ** 2).sum() + nx.layer_norm(a, b[0], b[1])[0, 0],
    "cosine": lambda a, b, y: nx.cosine_sim(a, b[: a.shape[0]]).sum(),
    "norm": lambda a, b, y: nx.norm(a, axis=-1).sum(),
    "tanh_sigmoid_gelu": lambda a, b, y: (nx.tanh(a) * nx.sigmoid(a) + nx.gelu(a)).sum(),
    "abs_concat": lambda a, b, y: (nx.concat([nx.absolute(a), a * a], axis=-1) ** 2).sum(),
    "matmul_transpose": lambda a, b, y: ((a @ b.T) ** 2).mean(),
    "exp_log_div": lambda a, b, y: (nx.log(nx.exp(a) + 1.0) / (b[: a.shape[0]] ** 2 + 1.0)).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_randomized(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn = PRIMITIVES[name]
    worst = 0.0
    for trial in range(100):
        d = (4, 8, 32)[trial % 3]
        a = nx.param(rng.normal(size=(3, d)))
        b = nx.param(rng.normal(size=(4, d)))
        y = rng.integers(0, 4, size=3)
        worst = max(worst, nx.grad_check(lambda: fn(a, b, y), [a, b], step=1e-5, max_entries=6, rng=rng))
    assert worst < 1e-4


def test_broadcast_gradients_reduce_to_operand_shape():
    a = nx.param(np.ones((3, 4)))
    b = nx.param(np.arange(4.0))
    (a * b + b).sum().backward()
    np.testing.assert_allclose(b.grad, np.full(4, 3.0) + 3.0)
    np.testing.assert_allclose(a.grad, np.tile(np.arange(4.0), (3, 1)))


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError):
        nx.add(np.ones((2, 3)), np.ones((3, 2)))


def test_param_gradient_starts_zero():
    p = nx.param(np.ones((2, 2)))
    assert p.grad.shape == p.shape
    assert not p.grad.any()
    (p * 2.0).sum().backward()
    p.zero_grad()
    assert not p.grad.any()


def test_tensor_shape_and_data():
    t = nx.Tensor(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3)
    assert t.data.tolist() == [0, 1, 2, 3, 4, 5]
    assert np.prod(t.shape) == t.data.size
