import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsct.metrics import mse, psnr, report, ssim
from oracles import block_ssim


def test_mse_cases():
    x = np.random.default_rng(0).random((16, 16))
    assert mse(x, x) == 0
    assert mse(x, x + 0.1) == pytest.approx(0.01, abs=1e-15)
    y = np.random.default_rng(1).random((16, 16))
    direct = sum((b - a) ** 2 for a, b in zip(x.ravel(), y.ravel())) / x.size
    assert abs(mse(x, y) - direct) < 1e-12
    with pytest.raises(ValueError):
        mse(x, y[:8])


def test_psnr_cases():
    y = np.zeros((10, 10))
    y[0, 0] = 1.0
    assert psnr(y, y) == float("inf")
    # MSE = 0.01 with MAX = 1
    x = y.copy()
    x.flat[1:11] = np.sqrt(0.1)
    assert mse(x, y) == pytest.approx(0.01)
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-12)
    x = y.copy()
    x.flat[1:11] = np.sqrt(0.01)
    assert psnr(x, y) == pytest.approx(30.0, abs=1e-12)


def test_psnr_falls_with_noise():
    rng = np.random.default_rng(2)
    y = rng.random((32, 32))
    n = rng.standard_normal((32, 32))
    vals = [psnr(y + a * n, y) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_identity_and_constants():
    x = np.random.default_rng(3).random((24, 24))
    assert ssim(x, x) == 1.0
    a, b = 0.3, 0.8
    c1 = (0.01 * b) ** 2
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.ones((4, 4)))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), h=st.integers(8, 30), w=st.integers(8, 30))
def test_ssim_matches_blockwise_oracle(seed, h, w):
    rng = np.random.default_rng(seed)
    x, y = rng.random((2, h, w))
    y[0, 0] = 1.0
    assert abs(ssim(x, y) - block_ssim(x, y, float(y.max()))) < 1e-10


def test_ssim_symmetric_with_shared_range():
    rng = np.random.default_rng(4)
    x, y = rng.random((2, 32, 32))
    assert ssim(x, y, data_range=1.0) == pytest.approx(ssim(y, x, data_range=1.0), abs=1e-15)


def test_report_json():
    y = np.random.default_rng(5).random((16, 16))
    r = report(y, y)
    d = r.to_json()
    assert d == {"mse": 0.0, "psnr_db": "inf", "ssim": 1.0, "block": 8}
    json.dumps(d)
