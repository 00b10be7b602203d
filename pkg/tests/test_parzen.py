import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parznet.parzen import (
    ETA_MAX,
    ETA_MIN,
    GAMMA_MAX,
    GAMMA_MIN,
    FilterConfigError,
    ParzenFilterParams,
    WindowKind,
    bank_tap_grads,
    bank_taps,
    clip_params,
    discretize,
    filter_param_grads,
    filter_value,
    freq_response,
    mel_init,
    tap_times,
    window,
)

FS = 16000.0
BIN = FS / 8192


def mel_oracle(f):
    # HTK mel written in log10 form, independent of the package's log1p form
    return 2595.0 * math.log10(1.0 + f / 700.0)


def inverse_by_bisection(g, target, lo, hi):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if g(mid) < target else (lo, mid)
    return 0.5 * (lo + hi)


def test_window_examples():
    for g in (1.0, 6400.0, 4e6):
        assert window(0.0, g) == 1.0
    assert window(0.5, 1.0) == pytest.approx(0.5625)
    assert window(0.5, 4.0) == 0.0
    assert window(0.7, 4.0) == 0.0


def test_filter_value_examples():
    p = ParzenFilterParams(100.0, 6400.0)
    assert filter_value(0.0, p) == 1.0
    assert filter_value(1 / 400.0, ParzenFilterParams(100.0, 1000.0)) == pytest.approx(0.0, abs=1e-15)
    expect = math.cos(0.2 * math.pi) * (1 - 6400e-6) ** 2
    assert filter_value(1e-3, p) == pytest.approx(expect, rel=1e-14)
    assert expect == pytest.approx(0.79869, abs=1e-5)


def test_discretize_centre_and_support():
    taps = discretize(ParzenFilterParams(300.0, 4e6))  # 1 ms full width
    assert taps[200] == 1.0
    t = tap_times(FS, 401)
    assert np.count_nonzero(taps) <= np.count_nonzero(np.abs(t) < 0.5e-3)
    assert np.count_nonzero(taps) <= 17
    assert np.all(taps[np.abs(t) >= 0.5e-3] == 0.0)


def test_even_tap_count_rejected():
    with pytest.raises(FilterConfigError):
        tap_times(FS, 400)


@settings(max_examples=60, deadline=None)
@given(st.floats(ETA_MIN, ETA_MAX), st.floats(GAMMA_MIN, GAMMA_MAX), st.sampled_from(list(WindowKind)))
def test_taps_even_symmetric_and_supported(eta, gamma, kind):
    taps = discretize(ParzenFilterParams(eta, gamma, kind))
    assert np.max(np.abs(taps - taps[::-1])) <= 1e-15
    if kind is WindowKind.EPANECHNIKOV:
        t = tap_times(FS, 401)
        assert np.all(taps[gamma * t**2 >= 1.0] == 0.0)


def test_mel_init_endpoints_and_order():
    b2 = mel_init(2)
    assert b2.eta.tolist() == [50.0, 7950.0]
    b = mel_init(40)
    assert np.all(np.diff(b.eta) > 0)
    assert b.eta.min() >= 50.0 and b.eta.max() <= 7950.0


def test_mel_init_midpoint():
    target = 0.5 * (mel_oracle(50.0) + mel_oracle(7950.0))
    mid = inverse_by_bisection(mel_oracle, target, 50.0, 7950.0)
    assert mel_init(3).eta[1] == pytest.approx(mid, rel=1e-10)
    assert mid == pytest.approx(1847.06, abs=0.01)


def test_mel_init_widths_clamped():
    b = mel_init(40)
    width = 2.0 / np.sqrt(b.gamma)
    assert np.all(width >= 1e-3 - 1e-15) and np.all(width <= 25e-3 + 1e-15)


def test_clip_params_examples():
    assert clip_params(ParzenFilterParams(8000.0, 1e5)).eta == 7950.0
    assert clip_params(ParzenFilterParams(1000.0, 5e6)).gamma == 4e6
    p = ParzenFilterParams(1234.5, 54321.0)
    assert clip_params(p) == p
    with pytest.raises(FilterConfigError):
        clip_params(ParzenFilterParams(float("nan"), 1e5))


def test_freq_response_peak_at_1000():
    b = mel_init(40)
    gamma = b.gamma[np.argmin(np.abs(b.eta - 1000.0))]
    _, peak = freq_response(discretize(ParzenFilterParams(1000.0, gamma)), 8192, FS)
    assert abs(peak - 1000.0) <= BIN


@pytest.mark.parametrize("gamma", [GAMMA_MIN, 1e5, GAMMA_MAX])
def test_freq_response_lowest_band(gamma):
    _, peak = freq_response(discretize(ParzenFilterParams(ETA_MIN, gamma)), 8192, FS)
    assert peak <= ETA_MIN + 2 * BIN


def test_freq_response_degenerate():
    mags, peak = freq_response(np.zeros(401), 8192)
    assert math.isnan(peak) and not mags.any()


def test_freq_response_matches_direct_dft():
    taps = discretize(ParzenFilterParams(700.0, 2e5))
    mags, _ = freq_response(taps, 1024, FS)
    k = np.arange(513)[:, None]
    direct = np.abs(np.exp(-2j * np.pi * k * np.arange(401) / 1024) @ taps)
    np.testing.assert_allclose(mags, direct, atol=1e-10)


def test_param_grads_zero_at_centre_and_outside():
    p = ParzenFilterParams(500.0, 1e5)
    d_eta, d_gamma = filter_param_grads(np.array([0.0, 0.02, -0.02]), p)
    assert np.all(d_eta == 0.0) and np.all(d_gamma == 0.0)


@pytest.mark.parametrize("kind", list(WindowKind))
def test_param_grads_fd(kind):
    p = ParzenFilterParams(730.0, 2.5e5, kind)
    t = np.array([-1.3e-3, -4e-4, 2e-4, 9e-4, 1.7e-3])
    d_eta, d_gamma = filter_param_grads(t, p)
    he, hg = 1e-7 * p.eta, 1e-7 * p.gamma
    fd_eta = (filter_value(t, ParzenFilterParams(p.eta + he, p.gamma, kind))
              - filter_value(t, ParzenFilterParams(p.eta - he, p.gamma, kind))) / (2 * he)
    fd_gamma = (filter_value(t, ParzenFilterParams(p.eta, p.gamma + hg, kind))
                - filter_value(t, ParzenFilterParams(p.eta, p.gamma - hg, kind))) / (2 * hg)
    np.testing.assert_allclose(d_eta, fd_eta, rtol=1e-6)
    np.testing.assert_allclose(d_gamma, fd_gamma, rtol=1e-6)


def test_bank_functions_agree_with_scalar_versions():
    b = mel_init(6)
    taps = bank_taps(b.eta, b.gamma)
    d_eta, d_gamma = bank_tap_grads(b.eta, b.gamma)
    t = tap_times(FS, 401)
    for i in range(len(b)):
        np.testing.assert_array_equal(taps[i], discretize(b[i]))
        ge, gg = filter_param_grads(t, b[i])
        np.testing.assert_allclose(d_eta[i], ge, rtol=1e-15, atol=0)
        np.testing.assert_allclose(d_gamma[i], gg, rtol=1e-15, atol=0)
