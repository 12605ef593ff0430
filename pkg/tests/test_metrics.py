import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcmc import metrics
from gcmc import tensor as T
from gcmc.metrics import MsSsimConfig, ms_ssim, msssim_db, mse, psnr, ssim

from oracles import ms_ssim_scalar, ssim_scalar


def _pair(seed, shape=(3, 24, 24), noise=0.1):
    rng = np.random.default_rng(seed)
    x = rng.random(shape)
    y = np.clip(x + rng.normal(scale=noise, size=shape), 0, 1)
    return x, y


def quiet(fn, *args):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fn(*args)


def test_weights_sum_to_one():
    assert abs(sum(MsSsimConfig().weights) - 1.0) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_scalar(seed):
    x, y = _pair(seed, (2, 16, 18))
    assert abs(ssim(x, y).item() - ssim_scalar(x, y)) < 1e-6


@pytest.mark.parametrize("seed", range(2))
def test_ms_ssim_matches_scalar(seed):
    x, y = _pair(seed, (1, 44, 46), noise=0.2)
    assert abs(quiet(ms_ssim, x, y).item() - ms_ssim_scalar(x, y)) < 1e-6


def test_identity_is_exactly_one():
    x = np.random.default_rng(0).random((3, 40, 40))
    assert quiet(ms_ssim, x, x).item() == 1.0
    assert ssim(x, x).item() == 1.0


def test_small_image_warns_and_renormalises():
    x, y = _pair(1, (1, 30, 30))
    with pytest.warns(RuntimeWarning, match="2 of 5 scales"):
        v = ms_ssim(x, y).item()
    assert 0 < v < 1


def test_full_scale_no_warning():
    x, y = _pair(2, (1, 176, 176))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        v = ms_ssim(x, y).item()
    assert 0 < v < 1


def test_too_small_rejected():
    with pytest.raises(T.ShapeError):
        ms_ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def test_shape_mismatch():
    with pytest.raises(T.ShapeError):
        mse(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_gradient_vanishes_at_identity():
    x = np.random.default_rng(3).random((1, 24, 24))
    xh = T.tensor(x.copy(), requires_grad=True)
    T.backward(quiet(ms_ssim, xh, x))
    assert np.max(np.abs(xh.grad)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16), noise=st.floats(0.01, 0.5))
def test_symmetry(seed, noise):
    x, y = _pair(seed, (2, 24, 24), noise)
    assert quiet(ms_ssim, x, y).item() == pytest.approx(quiet(ms_ssim, y, x).item(), abs=1e-14)
    assert ssim(x, y).item() == pytest.approx(ssim(y, x).item(), abs=1e-14)
    assert mse(x, y).item() == mse(y, x).item()
    assert psnr(x, y) == psnr(y, x)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16), i=st.integers(0, 23), j=st.integers(0, 23))
def test_any_change_drops_below_one(seed, i, j):
    x = np.random.default_rng(seed).random((1, 24, 24))
    y = x.copy()
    y[0, i, j] = 1.0 - y[0, i, j] if abs(y[0, i, j] - 0.5) > 0.01 else 0.9
    assert quiet(ms_ssim, x, y).item() < 1.0


def test_db_transform():
    assert msssim_db(0.9) == pytest.approx(10.0, abs=1e-12)
    assert msssim_db(0.99) == pytest.approx(20.0, abs=1e-12)
    assert msssim_db(0.0) == 0.0
    assert msssim_db(1.0) == math.inf
    with pytest.raises(ValueError):
        msssim_db(-0.1)


def test_mse_and_psnr_examples():
    x = np.full((3, 8, 8), 0.4)
    assert mse(x, x + 0.1).item() == pytest.approx(0.01, abs=1e-15)
    assert psnr(x, x) == math.inf
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_batch_is_mean_of_singles():
    x1, y1 = _pair(4)
    x2, y2 = _pair(5)
    both = quiet(ms_ssim, np.stack([x1, x2]), np.stack([y1, y2])).item()
    singles = (quiet(ms_ssim, x1, y1).item() + quiet(ms_ssim, x2, y2).item()) / 2
    assert both == pytest.approx(singles, abs=1e-14)


def test_window_normalised():
    g = metrics.gaussian_window()
    assert len(g) == 11 and abs(g.sum() - 1.0) < 1e-15
    np.testing.assert_allclose(g, g[::-1])
