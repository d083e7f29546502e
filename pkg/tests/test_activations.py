import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ternkit.activations import (
    ContinuationSchedule,
    beta_at,
    boxcar_ste,
    tanh_beta,
    tanh_beta_grad,
    tern_tanh,
    tern_tanh_grad,
)
from ternkit.errors import DomainError
from ternkit.quantize import tern_hard


def central_difference(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_tern_tanh_values():
    assert tern_tanh(0.0, 3.0) == 0.0
    assert tern_tanh(0.5, 3.0) == pytest.approx(0.5 * np.tanh(6.0), abs=1e-15)
    assert tern_tanh(10.0, 3.0) == pytest.approx(1.0, abs=1e-9)
    assert tern_tanh(-10.0, 3.0) == pytest.approx(-1.0, abs=1e-9)


def test_grad_at_origin():
    assert tern_tanh_grad(0.0, 3.0) == pytest.approx(6 / np.cosh(3.0) ** 2, rel=1e-12)
    assert tern_tanh_grad(0.0, 3.0) == pytest.approx(0.0592, abs=1e-4)


@pytest.mark.parametrize("fn", [tern_tanh, tern_tanh_grad, tanh_beta, tanh_beta_grad])
@pytest.mark.parametrize("beta", [0.0, -1.0])
def test_nonpositive_beta_rejected(fn, beta):
    with pytest.raises(DomainError):
        fn(0.3, beta)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.5, 1.5, 100)
    beta = rng.uniform(1.0, 8.0, 100)
    fd = central_difference(lambda z: tern_tanh(z, beta), x)
    an = tern_tanh_grad(x, beta)
    big = np.abs(an) > 1e-4  # relative error is meaningless deep in the plateaus
    rel = np.abs(fd - an)[big] / np.abs(an)[big]
    assert rel.max() < 1e-5
    assert np.abs(fd - an).max() < 1e-6


def test_tanh_beta_grad_finite_differences():
    x = np.linspace(-1, 1, 41)
    fd = central_difference(lambda z: tanh_beta(z, 2.5), x)
    assert np.allclose(fd, tanh_beta_grad(x, 2.5), rtol=1e-6, atol=1e-8)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 20))
def test_grad_even(x, beta):
    assert tern_tanh_grad(x, beta) == pytest.approx(tern_tanh_grad(-x, beta), rel=1e-12, abs=1e-300)


def test_grad_stable_for_huge_arguments():
    g = tern_tanh_grad(np.array([1e6, -1e6]), 50.0)
    assert np.all(np.isfinite(g)) and np.all(g == 0)


def test_limit_matches_tern_hard():
    x = np.linspace(-2, 2, 10_000)
    keep = np.minimum(np.abs(x - 0.5), np.abs(x + 0.5)) > 0.05
    assert np.abs(tern_tanh(x[keep], 50.0) - tern_hard(x[keep])).max() < 0.01


def test_range_plateaus_and_monotonicity():
    x = np.linspace(-3, 3, 6001)
    y = tern_tanh(x, 8.0)
    assert np.all(np.abs(y) <= 1)
    # strictly inside (-1, 1) wherever float64 can still tell
    assert np.all(np.abs(tern_tanh(np.linspace(-1, 1, 2001), 3.0)) < 1)
    assert np.all(np.abs(y[np.abs(x) < 0.25]) < 0.02)
    assert np.all(np.diff(y) >= 0)


def test_float32_preserved():
    assert tern_tanh(np.zeros(3, np.float32), 3.0).dtype == np.float32
    assert tern_tanh(np.zeros(3, np.int64), 3.0).dtype == np.float64


def test_tanh_beta_cases():
    assert tanh_beta(0.0, 4.0) == 0.0
    assert tanh_beta(0.2, 50.0) == pytest.approx(1.0, abs=1e-8)
    x = np.linspace(-2, 2, 9)
    assert np.array_equal(tanh_beta(x, 1.0), np.tanh(x))


def test_boxcar():
    codes, mask = boxcar_ste(np.array([0.3, 1.5, -1.0]))
    assert codes.tolist() == [1, 1, -1]
    assert mask.tolist() == [1, 0, 1]


def test_schedule_endpoints_and_midpoint():
    s = ContinuationSchedule()
    assert beta_at(s, 0) == 3.0
    assert beta_at(s, 39) == 8.0
    assert beta_at(s, 19) == pytest.approx(3 + 5 * 19 / 39)
    assert beta_at(s, 19) < 5.5 < beta_at(s, 20)
    assert round(beta_at(s, 19), 3) == 5.436 and round(beta_at(s, 20), 3) == 5.564


def test_schedule_edges():
    assert beta_at(ContinuationSchedule(3.0, 8.0, 1), 0) == 8.0
    assert ContinuationSchedule.fixed(3.0, 5).beta(4) == 3.0
    with pytest.raises(DomainError):
        beta_at(ContinuationSchedule(), 40)
    with pytest.raises(DomainError):
        beta_at(ContinuationSchedule(), -1)
    with pytest.raises(DomainError):
        ContinuationSchedule(8.0, 3.0)
