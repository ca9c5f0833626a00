import numpy as np
import pytest

from stylefl import numerics as nx
from stylefl.encoder import MLP, FiLMParams, encode, film_modulate, init_encoder
from stylefl.errors import ShapeError


def test_identity_layer_returns_input():
    enc = MLP([nx.param(np.eye(5))], [nx.param(np.zeros(5))])
    x = np.array([0.3, -2.0, 7.5, 0.0, 1e-3])
    np.testing.assert_array_equal(encode(enc, x).value, x)


def test_zero_weights_give_zero_features():
    enc = init_encoder(6, 4, (8, 8), np.random.default_rng(0))
    for t in enc.parameters():
        t.value[...] = 0.0
    assert not encode(enc, np.ones(6)).value.any()


def test_layer_dims_chain():
    enc = init_encoder(7, 32, (64, 64), np.random.default_rng(0))
    shapes = [w.shape for w in enc.weights]
    assert shapes == [(7, 64), (64, 64), (64, 32)]
    assert enc.out_dim == 32
    assert encode(enc, np.zeros((3, 7))).shape == (3, 32)


def test_shape_error():
    enc = init_encoder(3, 4, (5,), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        encode(enc, np.zeros(4))


def test_final_layer_has_no_nonlinearity():
    # a single affine layer can emit values well outside tanh's range
    enc = MLP([nx.param(np.full((1, 1), 10.0))], [nx.param(np.zeros(1))])
    assert encode(enc, np.ones(1)).item() == 10.0


def test_encode_gradient():
    rng = np.random.default_rng(1)
    enc = init_encoder(5, 4, (6, 6), rng)
    x = nx.param(rng.normal(size=(3, 5)))
    P = rng.normal(size=(3, 4))
    y = np.array([0, 2, 1])
    err = nx.grad_check(lambda: nx.cross_entropy(nx.proto_logits(encode(enc, x), P), y), enc.parameters() + [x])
    assert err < 1e-4


def test_pure():
    enc = init_encoder(5, 4, (6,), np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(4, 5))
    np.testing.assert_array_equal(encode(enc, x).value, encode(enc, x).value)


class TestFiLM:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.film = FiLMParams.init(6, self.rng)

    def test_identity_at_init_for_any_style(self):
        h = self.rng.normal(size=(4, 6))
        for _ in range(5):
            s = self.rng.normal(size=6) * 10
            np.testing.assert_array_equal(film_modulate(self.film, h, s).value, h)

    def test_zero_features_give_beta(self):
        film = FiLMParams.init(6, self.rng)
        for t in film.parameters():
            t.value[...] = self.rng.normal(size=t.shape)
        s = self.rng.normal(size=6)
        np.testing.assert_allclose(film_modulate(film, np.zeros(6), s).value, film.beta_net(s).value)

    def test_output_dims(self):
        assert self.film.gamma_net.out_dim == self.film.beta_net.out_dim == 6
        assert len(self.film.gamma_net.weights) == 2

    def test_gradient(self):
        film = FiLMParams.init(4, self.rng)
        for t in film.parameters():
            t.value[...] = self.rng.normal(size=t.shape) * 0.5
        h = nx.param(self.rng.normal(size=(3, 4)))
        s = nx.param(self.rng.normal(size=(3, 4)))
        w = self.rng.normal(size=(3, 4))
        err = nx.grad_check(lambda: (film_modulate(film, h, s) * w).sum(), film.parameters() + [h, s])
        assert err < 1e-4

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            film_modulate(self.film, np.zeros(5), np.zeros(6))

    def test_copy_is_independent(self):
        twin = self.film.copy()
        twin.beta_net.biases[-1].value[...] = 1.0
        assert not self.film.beta_net.biases[-1].value.any()
