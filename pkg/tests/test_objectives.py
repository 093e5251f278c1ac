import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from itgpt import autodiff as ad
from itgpt.objectives import (
    SKIP,
    USE_CE,
    USE_MSE,
    EmptyLossWarning,
    LossConfig,
    canonical_scheme,
    ce_loss,
    combined_loss,
    loss_terms,
    schedule_select,
    ssl_mse_loss,
    subsample_labels,
)


def test_perfect_prediction_has_zero_ce():
    y = np.eye(3)
    assert ce_loss(y, y).value == 0.0


def test_uniform_prediction_costs_ln_classes():
    y = np.eye(5)[[0, 3, 4]]
    loss = ce_loss(y, np.full((3, 5), 0.2)).value
    assert abs(loss - math.log(5)) < 1e-12


def test_ce_is_positive_mean_of_negative_log_likelihood():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = np.array([[0.8, 0.2], [0.4, 0.6]])
    want = -(math.log(0.8) + math.log(0.6)) / 2
    assert ce_loss(y, p).value == pytest.approx(want, abs=1e-15)


def test_censored_and_uncovered_rows_are_excluded():
    y = np.eye(3)[[0, 1, 2, 1]]
    p = np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6], [0.3, 0.3, 0.4]])
    got = ce_loss(y, p, censored_class=2, coverage=[True, True, True, False]).value
    assert got == pytest.approx(-(math.log(0.5) + math.log(0.8)) / 2, abs=1e-15)


def test_all_censored_is_zero_with_warning():
    y = np.eye(2)[[1, 1]]
    with pytest.warns(EmptyLossWarning):
        assert ce_loss(y, np.full((2, 2), 0.5), censored_class=1).value == 0.0


def test_probability_floor_keeps_ce_finite():
    loss = ce_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).value
    assert loss == pytest.approx(-math.log(1e-12))


def test_ssl_hand_case():
    # rows t >= 2 predicted as zero; the first row is never scored
    pred = np.array([[99.0], [0.0], [0.0]])
    assert ssl_mse_loss([np.array([[1.0], [2.0], [3.0]])], [pred]).value == pytest.approx(13 / 3, abs=1e-15)


def test_ssl_degenerate_cases(rng):
    x = rng.standard_normal((4, 2))
    assert ssl_mse_loss([x], [x]).value == 0.0
    assert ssl_mse_loss([x], [x + 1], coverage=[np.zeros(4, dtype=bool)]).value == 0.0
    with pytest.raises(ad.ShapeError):
        ssl_mse_loss([x], [x[:3]])


def test_ssl_sums_over_modalities_with_own_normalization():
    a = [np.zeros((2, 1)), np.zeros((4, 1))]
    p = [np.ones((2, 1)), np.ones((4, 1)) * 2]
    assert ssl_mse_loss(a, p).value == pytest.approx(1 / 2 + 12 / 4)


def test_combined_loss():
    cfg = LossConfig("CE+SSL", labeled={1, 2})
    assert combined_loss(0, cfg, 0.5, 0.25).value == 0.25
    assert combined_loss(1, cfg, 0.5, 0.25).value == 0.75
    everyone = LossConfig("CE_SSL", labeled=range(4))
    assert all(combined_loss(i, everyone, 0.5, 0.25).value == 0.75 for i in range(4))
    with pytest.raises(ValueError):
        combined_loss(0, LossConfig("CE"), 0.5, 0.25)


def test_gpt_schedule():
    cfg = LossConfig("GPT->CE", labeled={3})
    assert [schedule_select(n, i, cfg) for n in (1, 2) for i in (0, 3)] == [USE_MSE] * 4
    assert schedule_select(3, 3, cfg) == USE_CE
    assert schedule_select(5, 0, cfg) == SKIP
    with pytest.raises(ValueError):
        schedule_select(8, 0, cfg)
    assert cfg.gpt_epochs == 7


def test_loss_terms_per_scheme():
    cfg = LossConfig("CE", labeled={0})
    assert loss_terms("CE", 1, 0, cfg) == (True, False)
    assert loss_terms("CE", 1, 1, cfg) == (False, False)
    assert loss_terms("CE_SSL", 1, 1, cfg) == (False, True)
    gpt = LossConfig("GPT_then_CE", labeled={0})
    assert loss_terms("GPT_then_CE", 2, 0, gpt) == (False, True)
    assert loss_terms("GPT_then_CE", 3, 0, gpt) == (True, False)


def test_scheme_spellings():
    assert canonical_scheme("CE+SSL") == "CE_SSL"
    assert canonical_scheme("GPT→CE") == "GPT_then_CE"
    with pytest.raises(ValueError, match="CE\\+SSL"):
        canonical_scheme("SSL")


def test_subsample_rules():
    assert subsample_labels(range(10), 1.0, 0) == frozenset(range(10))
    assert subsample_labels(range(50), 0.3, 4) == subsample_labels(range(50), 0.3, 4)
    assert len(subsample_labels(range(1000), 0.001, 0)) == 1
    assert len(subsample_labels(range(10), 0.25, 0)) == 3  # 2.5 rounds half up
    with pytest.raises(ValueError, match="raise"):
        subsample_labels(range(100), 0.001, 0)


@given(seed=st.integers(0, 2**31), frac=st.floats(0.05, 1.0), n=st.integers(10, 200))
def test_stratified_subset_is_proportional(seed, frac, n):
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n) + 7
    strata = rng.integers(0, 3, n)
    chosen = subsample_labels(idx, frac, seed, strata)
    assert len(chosen) == math.floor(frac * n + 0.5)
    assert chosen <= set(idx.tolist())
    lookup = dict(zip(idx.tolist(), strata.tolist()))
    for c in range(3):
        members = int((strata == c).sum())
        got = sum(lookup[i] == c for i in chosen)
        assert abs(got - members * len(chosen) / n) < 1 + 1e-9


def test_ce_gradient():
    y = np.eye(3)[[0, 2]]
    p = np.array([[0.5, 0.3, 0.2], [0.1, 0.3, 0.6]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert ad.grad_check(lambda q: ce_loss(y, q), p) < 1e-6
