import math

import numpy as np
import pytest

from flowldp.errors import ConfigError
from flowldp.flow import (
    ActNorm,
    Coupling,
    FixedPermutation,
    Invertible1x1,
    squeeze,
    unsqueeze,
)


def test_squeeze_2x2_order():
    x = np.array([[[1.0], [2.0]], [[3.0], [4.0]]])
    s = squeeze(x)
    assert s.shape == (1, 1, 4)
    assert s.ravel().tolist() == [1.0, 2.0, 3.0, 4.0]


def test_squeeze_shapes():
    assert squeeze(np.zeros((4, 4, 1))).shape == (2, 2, 4)
    assert squeeze(np.zeros((2, 8, 8, 3))).shape == (2, 4, 4, 12)


def test_unsqueeze_exact_inverse():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 6, 10, 2))
    assert np.array_equal(unsqueeze(squeeze(x)), x)


def test_squeeze_rejects_odd_dims():
    with pytest.raises(ConfigError):
        squeeze(np.zeros((3, 4, 1)))


def test_actnorm_scale_two_logdet():
    layer = ActNorm(channels=1)
    layer.params["log_scale"][:] = math.log(2.0)
    x = np.random.default_rng(1).normal(size=(1, 4, 4, 1))
    y, logdet = layer.forward(x)
    assert np.allclose(y, 2.0 * x)
    assert logdet[0] == pytest.approx(16 * math.log(2.0))
    assert logdet[0] == pytest.approx(11.0904, abs=5e-5)


def test_actnorm_data_init_normalizes():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 2.5, size=(8, 4, 4, 3))
    layer = ActNorm(channels=3)
    layer.data_init(x)
    y, _ = layer.forward(x)
    assert np.abs(y.mean(axis=(0, 1, 2))).max() < 1e-9
    assert np.abs(y.var(axis=(0, 1, 2)) - 1.0).max() < 1e-9


def _layer_cases():
    rng = np.random.default_rng(7)
    act = ActNorm(4)
    act.params["log_scale"] = rng.normal(0, 0.3, 4)
    act.params["bias"] = rng.normal(0, 0.3, 4)
    coup_a = Coupling(4, hidden=8, affine=True, rng=rng)
    coup_a.params["w2"] = rng.normal(0, 0.3, coup_a.params["w2"].shape)
    coup_a.params["b2"] = rng.normal(0, 0.3, coup_a.params["b2"].shape)
    coup_n = Coupling(4, hidden=8, affine=False, rng=rng)
    coup_n.params["w2"] = rng.normal(0, 0.3, coup_n.params["w2"].shape)
    return [
        act,
        FixedPermutation.reverse(4),
        Invertible1x1(4, rng=rng),
        coup_a,
        coup_n,
    ]


@pytest.mark.parametrize("layer", _layer_cases(), ids=lambda l: l.kind)
def test_layer_bijectivity_and_logdet_antisymmetry(layer):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4, 4, 4))
    y, ld_f = layer.forward(x)
    x_back, ld_i = layer.inverse(y)
    assert np.abs(x_back - x).max() < 1e-10
    assert np.abs(ld_f + ld_i).max() < 1e-9 * max(1.0, np.abs(ld_f).max())


def test_permutation_like_layers_zero_logdet():
    from flowldp.flow import Split, Squeeze

    x = np.random.default_rng(4).normal(size=(2, 4, 4, 4))
    for layer in (FixedPermutation.reverse(4), Squeeze()):
        _, logdet = layer.forward(x)
        assert (logdet == 0).all()
    keep, exit_part = Split().split(x)
    assert keep.shape[-1] + exit_part.shape[-1] == x.shape[-1]


def test_invertible_1x1_determinant_matches_logdet():
    rng = np.random.default_rng(9)
    layer = Invertible1x1(6, rng=rng)
    w, _, _ = layer._weight()
    _, np_logdet = np.linalg.slogdet(w)
    assert np_logdet == pytest.approx(layer.params["log_diag"].sum(), rel=1e-12)
    assert abs(np.linalg.det(w)) > 1e-12


def test_invertible_1x1_identity_init():
    layer = Invertible1x1(5, rng=None)
    w, _, _ = layer._weight()
    assert np.array_equal(w, np.eye(5))


def test_coupling_identity_at_init():
    rng = np.random.default_rng(11)
    for affine in (True, False):
        layer = Coupling(4, hidden=8, affine=affine, rng=rng)
        x = rng.normal(size=(2, 4, 4, 4))
        y, logdet = layer.forward(x)
        assert np.array_equal(y, x)
        assert (logdet == 0).all()


def test_affine_coupling_scale_strictly_positive():
    rng = np.random.default_rng(13)
    layer = Coupling(4, hidden=8, affine=True, rng=rng)
    layer.params["w2"] = rng.normal(0, 10.0, layer.params["w2"].shape)  # force clamping
    x = rng.normal(size=(2, 4, 4, 4))
    _, _, cache = layer.forward(x, want_cache=True)
    scale = cache[5]
    assert (scale > 0).all()
    assert scale.max() <= math.exp(5.0)
    assert scale.min() >= math.exp(-5.0)
