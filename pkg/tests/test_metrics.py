import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msfrecon.geometry import Volume
from msfrecon.metrics import MetricError, nrmse, psnr, ssim
from oracles import nrmse_loop, psnr_loop, ssim_loop


def pairs(n=50, shape=(2, 9, 10)):
    rng = np.random.default_rng(99)
    for _ in range(n):
        truth = rng.random(shape)
        yield truth + rng.normal(0, rng.uniform(0.01, 0.5), shape), truth


def test_identity_cases():
    t = np.random.default_rng(0).random((2, 8, 8)) + 0.1
    assert nrmse(t, t) == 0.0
    assert psnr(t, t) == math.inf
    assert ssim(t, t) == 1.0


def test_closed_forms():
    t = np.random.default_rng(1).random((1, 8, 8)) + 0.1
    assert nrmse(2 * t, t) == pytest.approx(0.5, rel=1e-15)
    assert nrmse(2 * t, t, normalize="truth") == pytest.approx(1.0, rel=1e-15)
    truth = np.zeros((1, 8, 8))
    truth[0, 0, 0] = 1.0
    assert psnr(truth + 0.1, truth) == pytest.approx(20.0, abs=1e-12)


@given(st.floats(1e-3, 1e3))
def test_psnr_scale_invariance(c):
    est, truth = next(pairs(1))
    assert psnr(c * est, c * truth) == pytest.approx(psnr(est, truth), abs=1e-9)


def test_oracle_agreement_over_random_pairs():
    for est, truth in pairs():
        assert abs(nrmse(est, truth) - nrmse_loop(est, truth)) <= 1e-12
        assert abs(psnr(est, truth) - psnr_loop(est, truth)) <= 1e-10
        assert abs(ssim(est, truth) - ssim_loop(est, truth)) <= 1e-8


def test_heavy_noise_ssim_is_low():
    rng = np.random.default_rng(3)
    truth = np.zeros((2, 32, 32))
    truth[:, 8:24, 8:24] = 1.0
    est = truth + rng.normal(0, np.ptp(truth), truth.shape)
    assert ssim(est, truth) < 0.5


def test_errors():
    a = np.ones((1, 8, 8))
    with pytest.raises(MetricError):
        nrmse(np.zeros_like(a), a)
    with pytest.raises(MetricError):
        nrmse(a, np.ones((1, 8, 7)))
    with pytest.raises(MetricError):
        ssim(np.ones((1, 6, 6)), np.ones((1, 6, 6)))
    with pytest.raises(ValueError):
        nrmse(a, a, normalize="max")


def test_accepts_volumes_and_2d():
    t = np.random.default_rng(4).random((8, 8))
    e = t + 0.1
    assert ssim(e, t) == ssim(Volume(e[None]), Volume(t[None]))
    assert nrmse(Volume(e[None]), Volume(t[None])) == nrmse(e, t)


@given(st.integers(0, 2 ** 31), st.floats(0.0, 3.0))
def test_ssim_bounded(seed, amp):
    rng = np.random.default_rng(seed)
    truth = rng.random((1, 8, 8))
    est = truth + amp * rng.standard_normal(truth.shape)
    val = ssim(est, truth)
    assert -1.0 - 1e-12 <= val <= 1.0 + 1e-12
    assert nrmse(est + 1.0, truth) >= 0
