import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from itgpt.time_encoding import PeConfig, default_lambda, encode_time, encode_timeline, translation_kernel


def test_zero_time():
    np.testing.assert_array_equal(encode_time(0.0, PeConfig(4, 100.0)), [0.0, 1.0, 0.0, 1.0])


def test_half_turn_at_lambda_pi():
    # dim 2 has a single frequency 1/lam, so t = pi*lam lands on phase pi
    out = encode_time(math.pi * 100, PeConfig(2, 100.0))
    np.testing.assert_allclose(out, [0.0, -1.0], atol=1e-12)


def test_frequencies_decay_geometrically():
    cfg = PeConfig(8, 1e4)
    w = cfg.frequencies
    assert w[-1] == pytest.approx(1e-4)
    np.testing.assert_allclose(w[1:] / w[:-1], 1e4 ** (-2 / 8))


@pytest.mark.parametrize("dim,lam", [(0, 1.0), (3, 1.0), (4, 0.0), (4, -2.0)])
def test_invalid_config(dim, lam):
    with pytest.raises(ValueError):
        PeConfig(dim, lam)


def test_timeline_matches_pointwise(rng):
    cfg = PeConfig(8, 500.0)
    tau = np.sort(rng.uniform(0, 50, 7))
    rows = encode_timeline(tau, cfg)
    for t, row in zip(tau, rows):
        np.testing.assert_array_equal(row, encode_time(t, cfg))


def test_timeline_degenerate_cases():
    cfg = PeConfig(6, 10.0)
    rows = encode_timeline([0.0, 0.0], cfg)
    np.testing.assert_array_equal(rows[0], rows[1])
    assert encode_timeline(np.zeros(0), cfg).shape == (0, 6)
    with pytest.raises(ValueError):
        encode_timeline([2.0, 1.0], cfg)
    assert not encode_timeline([1.0], cfg).flags.writeable


def test_default_lambda():
    assert default_lambda(250.0) == 2500.0
    assert default_lambda(0.0) == 10.0


@given(
    t=st.floats(0, 1000),
    s=st.floats(0, 1000),
    dim=st.sampled_from([2, 8, 32, 64]),
)
def test_dot_product_depends_only_on_difference(t, s, dim):
    cfg = PeConfig(dim, 1e4)
    dot = encode_time(t, cfg) @ encode_time(s, cfg)
    assert abs(dot - translation_kernel(t - s, cfg)) < 1e-9


@given(t=st.floats(-1e4, 1e4), dim=st.sampled_from([2, 8, 64]))
def test_self_dot_is_half_dim(t, dim):
    p = encode_time(t, PeConfig(dim, 1e4))
    assert abs(p @ p - dim / 2) < 1e-12
