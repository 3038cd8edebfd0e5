import numpy as np
import pytest

from colf.encoder import Encoder, encode
from colf.geometry import Camera
from colf.numerics import ShapeError, backward, check_param_grads
from colf.numerics import tensor as T

IDENTITY = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)


def test_output_shape_64_to_32():
    enc = Encoder(32, np.random.default_rng(0))
    img = np.random.default_rng(1).random((64, 64, 3))
    assert encode(enc, img).shape == (32, 32, 32)


def test_odd_sizes_round_up():
    enc = Encoder(4, np.random.default_rng(0))
    assert encode(enc, np.zeros((7, 9, 3))).shape == (4, 5, 4)


def test_identical_images_identical_volumes():
    enc = Encoder(8, np.random.default_rng(0))
    img = np.random.default_rng(1).random((16, 16, 3))
    assert np.array_equal(encode(enc, img).data, encode(enc, img.copy()).data)


def test_extent_mismatch_raises():
    enc = Encoder(4, np.random.default_rng(0))
    cam = Camera(10, 10, 5, 5, IDENTITY, 12, 10)
    with pytest.raises(ShapeError):
        encode(enc, np.zeros((10, 10, 3)), cam)
    with pytest.raises(ShapeError):
        enc(np.zeros((10, 10, 4)))


def test_bad_width():
    with pytest.raises(ValueError):
        Encoder(5, np.random.default_rng(0))


def test_translation_covariance():
    enc = Encoder(6, np.random.default_rng(3))
    big = np.random.default_rng(4).random((24, 26, 3))
    a = encode(enc, big[:, 2:24]).data       # columns 2..23
    b = encode(enc, big[:, 0:22]).data       # columns 0..21, i.e. shifted by 2
    # output column j of a corresponds to column j+1 of b; compare away from borders
    np.testing.assert_allclose(a[2:-2, 2:-3], b[2:-2, 3:-2], atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_weight_gradient_matches_fd(seed):
    r = np.random.default_rng(seed)
    enc = Encoder(4, r)
    img = r.random((8, 8, 3))
    probe = r.normal(size=(4, 4, 4))
    err = check_param_grads(lambda: (encode(enc, img) * probe).sum(), enc.parameters(), max_coords=15, rng=r)
    assert err < 1e-4


def test_every_conv_parameter_gets_gradient():
    hits = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        enc = Encoder(4, r)
        enc.zero_grad()
        backward((T.elu(enc(r.random((2, 10, 10, 3)))) * r.normal(size=(2, 5, 5, 4))).sum())
        hits += all(p.grad is not None and np.all(np.abs(p.grad).sum(axis=tuple(range(p.grad.ndim - 1))) > 0)
                    for p in enc.parameters())
    assert hits == 20
