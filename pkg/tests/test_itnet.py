import numpy as np
import pytest
from hypothesis import given, strategies as st

from itgpt import autodiff as ad
from itgpt.attention import AttentionParams, causal_cross_attention
from itgpt.checks import _random_itnet, random_times
from itgpt.itnet import ItnetParams, MixingLayer, itnet_forward, itnet_oracle, mixing_apply, mixing_oracle
from itgpt.time_encoding import PeConfig

PE = PeConfig(4, 50.0)


def modalities(rng, dims, n=6):
    return [(random_times(rng, n), rng.standard_normal((n, d))) for d in dims]


def test_single_modality_identity_mixing_is_plain_attention(rng):
    (times, x), = modalities(rng, [3])
    attn = AttentionParams(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))
    params = ItnetParams([attn], MixingLayer("Linear", [np.eye(4)], [np.zeros(4)]))
    out_times = random_times(rng, 5)
    got = itnet_forward([(times, x)], out_times, params, PE, PE).value
    want = causal_cross_attention(out_times, times, x, attn, PE, PE).values.value
    np.testing.assert_array_equal(got, want)


def test_three_modalities_against_oracle(rng):
    mods = modalities(rng, [1, 2, 3])
    for kind in ("Linear", "MLP1", "MLP2"):
        params = _random_itnet(rng, (1, 2, 3), 4, 4, 5, kind, query_map=False)
        out_times = random_times(rng, 7)
        got = itnet_forward(mods, out_times, params, PE, PE).value
        np.testing.assert_allclose(got, itnet_oracle(mods, out_times, params, PE, PE), rtol=0, atol=1e-9)


def test_nothing_strictly_past_gives_zero(rng):
    mods = [(t + 20.0, x) for t, x in modalities(rng, [2, 2])]
    params = _random_itnet(rng, (2, 2), 4, 4, 3, "Linear", False)
    params.mixing.biases[0] = np.zeros(3)
    out, cov = itnet_forward(mods, [0.0, 5.0, 20.0], params, PE, PE, return_coverage=True)
    np.testing.assert_array_equal(out.value, 0.0)
    assert not cov.any()


def test_modality_count_mismatch(rng):
    params = _random_itnet(rng, (2, 2), 4, 4, 3, "Linear", False)
    with pytest.raises(ValueError):
        itnet_forward(modalities(rng, [2]), [1.0], params, PE, PE)


def test_mixing_basics(rng):
    x = rng.uniform(0, 1, (4, 3))
    zero = MixingLayer("Linear", [np.zeros((3, 2))], [np.zeros(2)])
    np.testing.assert_array_equal(mixing_apply(x, zero).value, 0.0)
    passthrough = MixingLayer("MLP1", [np.eye(3), np.eye(3)], [np.zeros(3), np.zeros(3)])
    np.testing.assert_array_equal(mixing_apply(x, passthrough).value, x)
    with pytest.raises(ad.ShapeError):
        mixing_apply(np.ones((2, 4)), zero)
    with pytest.raises(ValueError):
        MixingLayer("MLP2", [np.eye(3)], [np.zeros(3)])
    with pytest.raises(ValueError):
        MixingLayer("Conv", [np.eye(3)], [np.zeros(3)])


def test_zero_dropout_in_training_matches_eval(rng):
    x = rng.standard_normal((5, 6))
    layer = MixingLayer("MLP2", [rng.standard_normal((6, 4)), rng.standard_normal((4, 4)), rng.standard_normal((4, 2))],
                        [np.zeros(4), np.zeros(4), np.zeros(2)], dropout_p=0.0)
    a = mixing_apply(x, layer, training=True, rng=np.random.default_rng(0)).value
    np.testing.assert_array_equal(a, mixing_apply(x, layer).value)
    np.testing.assert_allclose(a, mixing_oracle(x, layer), rtol=0, atol=1e-12)


def test_dropout_changes_only_training_output(rng):
    x = rng.standard_normal((5, 6))
    layer = MixingLayer("MLP1", [rng.standard_normal((6, 8)), rng.standard_normal((8, 2))],
                        [np.zeros(8), np.zeros(2)], dropout_p=0.5)
    evals = mixing_apply(x, layer).value
    assert not np.array_equal(mixing_apply(x, layer, True, np.random.default_rng(1)).value, evals)
    np.testing.assert_array_equal(mixing_apply(x, layer, False, np.random.default_rng(1)).value, evals)


@given(seed=st.integers(0, 2**32 - 1))
def test_permuting_modalities_with_weight_blocks(seed):
    rng = np.random.default_rng(seed)
    dims = (1, 2, 3)
    mods = modalities(rng, dims, n=4)
    params = _random_itnet(rng, dims, 4, 4, 3, "MLP1", False)
    out_times = random_times(rng, 5)
    base = itnet_forward(mods, out_times, params, PE, PE).value
    perm = rng.permutation(3)
    w0 = params.mixing.weights[0]
    blocks = [w0[4 * m:4 * (m + 1)] for m in range(3)]
    permuted = ItnetParams(
        [params.per_modality[m] for m in perm],
        MixingLayer("MLP1", [np.concatenate([blocks[m] for m in perm]), params.mixing.weights[1]], params.mixing.biases),
    )
    got = itnet_forward([mods[m] for m in perm], out_times, permuted, PE, PE).value
    np.testing.assert_allclose(got, base, rtol=0, atol=1e-12)


@given(seed=st.integers(0, 2**32 - 1), cut=st.floats(1.0, 9.0))
def test_itnet_causality(seed, cut):
    rng = np.random.default_rng(seed)
    mods = modalities(rng, (2, 1))
    params = _random_itnet(rng, (2, 1), 4, 4, 3, "MLP2", False)
    out_times = random_times(rng, 6)
    changed = []
    for t, x in mods:
        x = x.copy()
        x[t >= cut] = rng.standard_normal(x[t >= cut].shape) * 5
        changed.append((t, x))
    a = itnet_forward(mods, out_times, params, PE, PE).value
    b = itnet_forward(changed, out_times, params, PE, PE).value
    np.testing.assert_array_equal(a[out_times < cut], b[out_times < cut])


@pytest.mark.parametrize("kind", ["Linear", "MLP1", "MLP2"])
def test_mixing_gradients(rng, kind):
    mods = modalities(rng, (2, 1), n=5)
    params = _random_itnet(rng, (2, 1), 4, 4, 3, kind, False)
    out_times = random_times(rng, 5)
    for j, w in enumerate(params.mixing.weights):

        def f(v, j=j):
            weights = list(params.mixing.weights)
            weights[j] = v
            p = ItnetParams(params.per_modality, MixingLayer(kind, weights, params.mixing.biases))
            return ad.sum(ad.square(itnet_forward(mods, out_times, p, PE, PE)))

        assert ad.grad_check(f, w) < 1e-4
