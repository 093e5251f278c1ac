import hashlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from itgpt import autodiff as ad
from itgpt.checks import random_observation, random_params
from itgpt.data import ModalitySeries, Observation
from itgpt.model import (
    AnchorSpec,
    ModelConfig,
    checkpoint_bytes,
    count_params,
    init_params,
    itgpt_forward,
    itgpt_oracle,
    load_checkpoint,
    make_anchor,
    param_shapes,
    parse_checkpoint,
    predict_labels,
    predict_next_inputs,
    save_checkpoint,
)

CFG = ModelConfig((2, 3), 2, d_k=4, d_a=4, depth=1, anchor_length=6, lam=100.0)


def toy(rng, cfg=CFG, **kw):
    return random_observation(rng, cfg.modality_dims, cfg.n_classes, max_len=6, **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig((2,), 2, depth=0)
    with pytest.raises(ValueError):
        ModelConfig((2,), 2, d_k=5)
    with pytest.raises(ValueError):
        ModelConfig((2,), 2, mixing="MLP3")
    assert ModelConfig((2,), 2, d_k=8).d_o == 8


def test_shapes_cover_every_path():
    cfg = ModelConfig((2, 3), 4, d_k=4, d_a=6, depth=2, mixing="MLP2", query_map=True)
    shapes = param_shapes(cfg)
    assert shapes["layers.1.encoder.mix.0.weight"] == (8, 6)
    assert shapes["layers.1.encoder.mix.2.weight"] == (6, 6)
    assert shapes["layers.0.decoder.out.1.weight"] == (4, 3)
    assert shapes["head.label.out.weight"] == (4, 4)
    assert shapes["head.ssl.1.weight"] == (3, 3)
    assert shapes["head.label.attn.w_query"] == (4, 4)
    params = init_params(cfg, 0)
    assert count_params(params) == sum(int(np.prod(s)) for s in shapes.values())
    np.testing.assert_array_equal(params["head.label.out.weight"], 0.0)
    np.testing.assert_array_equal(params["head.label.attn.w_query"], np.eye(4))


def test_negative_encoder_output_leaves_anchor_at_zero(rng):
    obs = toy(rng)
    params = random_params(CFG, rng)
    params["layers.0.encoder.mix.0.weight"][:] = 0.0
    params["layers.0.encoder.mix.0.bias"][:] = -1.0
    res = itgpt_forward(obs, make_anchor(obs, 6, 4), params, CFG)
    np.testing.assert_array_equal(res.anchor_state.value, 0.0)


def test_zero_decoder_gives_zero_embeddings(rng):
    obs = toy(rng)
    params = random_params(CFG, rng)
    for m in range(2):
        params[f"layers.0.decoder.out.{m}.weight"][:] = 0.0
        params[f"layers.0.decoder.out.{m}.bias"][:] = 0.0
    res = itgpt_forward(obs, make_anchor(obs, 6, 4), params, CFG)
    for e in res.embeddings:
        np.testing.assert_array_equal(e.value, 0.0)


def test_zero_heads_predict_zero(rng):
    obs = toy(rng)
    params = random_params(CFG, rng)
    for k in params:
        if k.startswith("head."):
            params[k][:] = 0.0
    res = itgpt_forward(obs, make_anchor(obs, 6, 4), params, CFG)
    for p in predict_next_inputs(res.embeddings, params):
        np.testing.assert_array_equal(p.value, 0.0)


def test_single_anchor_head_is_affine_of_its_state(rng):
    params = random_params(CFG, rng)
    z = rng.standard_normal((1, 4))
    logits, cov = predict_labels(z, [0.0], [1.0], params, CFG)
    wv = params["head.label.attn.w_value"]
    value = z @ wv + np.array([0.0, 1.0, 0.0, 1.0])
    want = value @ params["head.label.out.weight"] + params["head.label.out.bias"]
    np.testing.assert_allclose(logits.value, want, rtol=0, atol=1e-12)
    assert cov.tolist() == [True]


def test_uncovered_target_rows_are_zero(rng):
    params = random_params(CFG, rng)
    logits, cov = predict_labels(rng.standard_normal((2, 4)), [1.0, 2.0], [0.5, 1.0, 1.5], params, CFG)
    assert cov.tolist() == [False, False, True]
    np.testing.assert_array_equal(logits.value[:2], 0.0)
    assert np.any(logits.value[2] != 0.0)


def test_first_sample_of_each_modality_is_uncovered():
    obs = Observation("o", [ModalitySeries("a", [0.0, 1.0, 2.0], np.ones((3, 2))),
                            ModalitySeries("b", [0.0, 3.0], np.ones((2, 3)))])
    res = itgpt_forward(obs, make_anchor(obs, 6, 4), init_params(CFG, 0), CFG)
    for cov in res.coverage:
        assert not cov[0]
        assert cov[1:].all()


@given(seed=st.integers(0, 2**32 - 1), depth=st.sampled_from([1, 2]), mixing=st.sampled_from(["Linear", "MLP1"]))
def test_forward_matches_oracle_chain(seed, depth, mixing):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig((1, 2), 3, d_k=4, d_a=4, depth=depth, mixing=mixing, anchor_length=5, lam=50.0)
    obs = toy(rng, cfg)
    params = random_params(cfg, rng)
    anchor = make_anchor(obs, 5, 4)
    res = itgpt_forward(obs, anchor, params, cfg)
    want = itgpt_oracle(obs, anchor, params, cfg)
    np.testing.assert_allclose(res.anchor_state.value, want["anchor_state"], rtol=0, atol=1e-8)
    for got, ref in zip(predict_next_inputs(res.embeddings, params), want["next_inputs"]):
        np.testing.assert_allclose(got.value, ref, rtol=0, atol=1e-8)
    logits, _ = predict_labels(res.anchor_state, anchor.times, obs.target.times, params, cfg)
    np.testing.assert_allclose(logits.value, want["logits"], rtol=0, atol=1e-8)


@given(seed=st.integers(0, 2**32 - 1), cut=st.floats(1.0, 9.0))
def test_labels_ignore_data_at_or_after_target_time(seed, cut):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig((2, 1), 2, d_k=4, d_a=4, depth=2, anchor_length=8, lam=50.0)
    obs = toy(rng, cfg)
    params = random_params(cfg, rng)
    # the anchor grid stays fixed so that only the data differs
    anchor = AnchorSpec(np.linspace(0.0, 10.0, 8), 4)
    late = Observation(obs.id, [
        ModalitySeries(m.name, m.times, np.where((m.times >= cut)[:, None], m.values * 3 + 1, m.values))
        for m in obs.modalities
    ], obs.target)

    def logits(o):
        res = itgpt_forward(o, anchor, params, cfg, decode_last=False)
        return predict_labels(res.anchor_state, anchor.times, o.target.times, params, cfg)[0].value

    early = obs.target.times < cut
    np.testing.assert_array_equal(logits(obs)[early], logits(late)[early])


def test_anchor_validation(rng):
    with pytest.raises(ValueError):
        AnchorSpec(np.zeros(0), 4)
    with pytest.raises(ValueError):
        AnchorSpec([2.0, 1.0], 4)
    obs = toy(rng)
    with pytest.raises(ValueError):
        itgpt_forward(obs, AnchorSpec([100.0, 200.0], 4), init_params(CFG, 0), CFG)


def test_gradient_through_whole_model(rng):
    from itgpt.checks import full_loss

    obs = toy(rng, target_start=2.0)
    params = random_params(CFG, rng)
    for path in ("layers.0.encoder.attn.0.w_key", "layers.0.encoder.mix.0.weight",
                 "layers.0.decoder.out.1.weight", "head.label.out.weight", "head.ssl.0.weight"):

        def f(v, path=path):
            return full_loss(obs, {**params, path: v}, CFG)

        assert ad.grad_check(f, params[path]) < 1e-4, path


def test_checkpoint_round_trip(tmp_path, rng):
    params = init_params(CFG, 3)
    config = {"depth": 1, "scheme": "CE"}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, config)
    loaded, cfg = load_checkpoint(path)
    assert cfg == config
    assert list(loaded) == list(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])
    with pytest.raises(ValueError):
        parse_checkpoint(b"NOTACKPT" + path.read_bytes()[8:])


def test_checkpoint_bytes_are_frozen():
    params = {"a": np.array([[1.0, -2.0]]), "b": np.array([0.5])}
    blob = checkpoint_bytes(params, {"x": 1})
    assert blob[:8] == b"ITGPTCKP"
    assert hashlib.sha256(blob).hexdigest() == FROZEN_CKPT_SHA


def test_same_seed_same_checkpoint():
    assert checkpoint_bytes(init_params(CFG, 7), {}) == checkpoint_bytes(init_params(CFG, 7), {})
    assert checkpoint_bytes(init_params(CFG, 7), {}) != checkpoint_bytes(init_params(CFG, 8), {})


# hand-packed from the documented layout (magic, <IQ header, sorted JSON, <f8 payload)
FROZEN_CKPT_SHA = "8f9286fcf9fe559cf80c60a4aad6d18e4d6d3492783bf4a711d676c16bfa3011"


def test_zero_encoder_keeps_anchor_at_zero(rng):
    cfg = replace(CFG, depth=3, mixing="MLP1")
    obs = toy(rng, cfg)
    params = random_params(cfg, rng)
    for k in params:
        if ".encoder." in k:
            params[k][:] = 0.0
    res = itgpt_forward(obs, make_anchor(obs, 6, 4), params, cfg)
    np.testing.assert_array_equal(res.anchor_state.value, 0.0)


@pytest.mark.parametrize("mixing", ["Linear", "MLP1", "MLP2"])
def test_each_layer_adds_one_encoder_decoder_pair(mixing):
    counts = [count_params(init_params(replace(CFG, depth=d, mixing=mixing), 0)) for d in (1, 2, 3, 4)]
    pair = count_params({k: v for k, v in init_params(replace(CFG, mixing=mixing), 0).items() if k.startswith("layers.0.")})
    assert np.diff(counts).tolist() == [pair] * 3
