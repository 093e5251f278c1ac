import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from itgpt.data import (
    DataError,
    Dataset,
    ModalitySeries,
    Observation,
    Schema,
    SynthConfig,
    Target,
    fingerprint,
    load_dataset,
    log_normalize,
    log_normalize_dataset,
    observation_strata,
    split_kfold,
    split_timeseries,
    synth_generate,
    time_deltas,
    times_from_deltas,
    write_dataset,
)

COMPX_MODALITIES = (
    ("specs", 94), ("397", 36), ("459", 20), ("291", 11), ("158", 10), ("272", 10), ("167", 10),
    ("370_0", 1), ("835_0", 1), ("309_0", 1), ("837_0", 1), ("427_0", 1), ("666_0", 1), ("171_0", 1), ("100_0", 1),
)

SMALL = SynthConfig(n_observations=6, horizon=30.0, rates=(0.5, 0.3, 0.8), label_start=3.0, label_rate=0.5)


def test_compx_shaped_schema(tmp_path):
    text = "modalities = " + ",".join(f"{n}:{d}" for n, d in COMPX_MODALITIES) + "\nn_classes = 5\n"
    (tmp_path / "schema.txt").write_text(text)
    ds, report = load_dataset(tmp_path)
    s = ds.schema
    assert s.n_modalities == 15
    assert dict(zip(s.modality_names, s.modality_dims))["specs"] == 94
    assert dict(zip(s.modality_names, s.modality_dims))["397"] == 36
    assert len(ds) == 0 and report.n_observations == 0 and report.n_targets == 0


def test_empty_modality_file(tmp_path):
    write_dataset(Dataset(Schema(("a",), (2,), 2), []), tmp_path)
    (tmp_path / "o1").mkdir()
    (tmp_path / "o1" / "a.csv").write_text("")
    ds, report = load_dataset(tmp_path)
    assert ds[0].modalities[0].length == 0
    assert report.n_samples == {"a": 0}


def test_round_trip_is_value_identical(tmp_path):
    ds = synth_generate(SMALL, 3)
    write_dataset(ds, tmp_path)
    back, report = load_dataset(tmp_path)
    assert report.n_observations == len(ds)
    assert back.schema == ds.schema
    for a, b in zip(ds.observations, back.observations):
        assert a.id == b.id
        for ma, mb in zip(a.modalities, b.modalities):
            np.testing.assert_array_equal(ma.times, mb.times)
            np.testing.assert_array_equal(ma.values, mb.values)
        np.testing.assert_array_equal(a.target.times, b.target.times)
        np.testing.assert_array_equal(a.target.labels, b.target.labels)


def test_parse_errors_name_file_and_line(tmp_path):
    write_dataset(Dataset(Schema(("a",), (1,), 2), []), tmp_path)
    (tmp_path / "o1").mkdir()
    (tmp_path / "o1" / "a.csv").write_text("0.0,1.0\n1.0,oops\n")
    with pytest.raises(DataError, match=r"a\.csv:2: non-numeric"):
        load_dataset(tmp_path)
    (tmp_path / "o1" / "a.csv").write_text("0.0,1.0,2.0\n")
    with pytest.raises(DataError, match="expected 2 columns"):
        load_dataset(tmp_path)
    (tmp_path / "o1" / "a.csv").write_text("0.0,1.0\n")
    (tmp_path / "o1" / "b.csv").write_text("0.0,1.0\n")
    with pytest.raises(DataError, match="not modalities"):
        load_dataset(tmp_path)


def test_schema_mismatch(tmp_path):
    write_dataset(Dataset(Schema(("a",), (1,), 2), []), tmp_path)
    with pytest.raises(DataError):
        load_dataset(tmp_path, Schema(("a",), (2,), 2))


def test_unsorted_rows_are_resorted(tmp_path):
    write_dataset(Dataset(Schema(("a",), (1,), 2), []), tmp_path)
    (tmp_path / "o1").mkdir()
    (tmp_path / "o1" / "a.csv").write_text("2.0,20\n1.0,10\n")
    ds, report = load_dataset(tmp_path)
    assert report.resorted == 1
    np.testing.assert_array_equal(ds[0].modalities[0].values[:, 0], [10.0, 20.0])


def test_label_out_of_range(tmp_path):
    write_dataset(Dataset(Schema(("a",), (1,), 2), []), tmp_path)
    (tmp_path / "o1").mkdir()
    (tmp_path / "o1" / "target.csv").write_text("1.0,2\n")
    with pytest.raises(DataError, match="label outside"):
        load_dataset(tmp_path)


def test_series_validation():
    with pytest.raises(DataError):
        ModalitySeries("a", [0.0, 1.0], np.zeros((3, 1)))
    with pytest.raises(DataError):
        ModalitySeries("a", [1.0, 0.0], np.zeros((2, 1)))
    with pytest.raises(DataError):
        Target([0.0], [0, 1])


def test_log_normalize():
    assert log_normalize(np.array([0.0]))[0] == 0.0
    assert log_normalize(np.array([1e9]))[0] == pytest.approx(20.7233, abs=5e-5)
    assert log_normalize(np.array([1e9]))[0] == math.log1p(1e9)
    with pytest.raises(DataError, match="row 1"):
        log_normalize(np.array([[1.0], [-1.0]]), "speed")


@given(st.lists(st.floats(0, 1e9), min_size=2, max_size=30))
def test_log_normalize_is_monotone(xs):
    col = np.sort(np.asarray(xs))
    assert np.all(np.diff(log_normalize(col)) >= 0)


def test_log_normalize_dataset_keeps_times():
    ds = synth_generate(replace(SMALL, n_observations=2), 0)
    for o in ds.observations:
        for m in o.modalities:
            m.values = np.abs(m.values)
    out = log_normalize_dataset(ds)
    np.testing.assert_array_equal(out[0].modalities[0].times, ds[0].modalities[0].times)
    np.testing.assert_array_equal(out[0].modalities[0].values, np.log1p(ds[0].modalities[0].values))


def test_time_deltas():
    np.testing.assert_array_equal(time_deltas([1.0, 1.5, 4.0]), [0.0, 0.5, 2.5])
    assert time_deltas([]).size == 0
    with pytest.raises(DataError):
        time_deltas([2.0, 1.0])


@given(st.lists(st.integers(0, 2**20), min_size=1, max_size=50), st.integers(-8, 8))
def test_deltas_round_trip_on_dyadic_grid(steps, shift):
    # dyadic timestamps of bounded magnitude make every sum and difference exact
    times = np.cumsum(np.asarray(steps, dtype=np.float64)) * 2.0 ** shift
    d = time_deltas(times)
    assert np.all(d >= 0)
    np.testing.assert_array_equal(times_from_deltas(times[0], d), times)


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    write_dataset(synth_generate(SMALL, 11), a)
    write_dataset(synth_generate(SMALL, 11), b)
    assert fingerprint(a) == fingerprint(b)
    write_dataset(synth_generate(SMALL, 12), b)
    assert fingerprint(a) != fingerprint(b)


def test_fingerprint_ignores_non_dataset_files(tmp_path):
    write_dataset(synth_generate(SMALL, 1), tmp_path)
    before = fingerprint(tmp_path)
    (tmp_path / "manifest.json").write_text("{}")
    assert fingerprint(tmp_path) == before
    with pytest.raises(DataError):
        fingerprint(tmp_path / "o_missing")


def test_synth_rejects_degenerate_specs():
    with pytest.raises(DataError):
        synth_generate(replace(SMALL, modality_dims=(), rates=()), 0)
    with pytest.raises(DataError):
        SynthConfig.from_text("n_observations = 3\nbogus = 1\n")
    with pytest.raises(DataError, match="rates"):
        SynthConfig.from_text("rates = 0.1\n")


def test_synth_spec_text():
    cfg = SynthConfig.from_text("n_observations = 4\nmodality_dims = 1,2\nrates = 0.5, 0.5\nthresholds = -0.5,0.5\n")
    assert cfg.modality_dims == (1, 2) and cfg.n_classes == 3 and cfg.n_observations == 4


def test_synth_class_balance():
    # label rule latent[0] > 0 on a symmetric latent
    fractions = []
    for seed in range(3):
        ds = synth_generate(replace(SynthConfig(n_observations=500), rates=(0.01, 0.01, 0.01)), seed)
        labels = np.concatenate([o.target.labels for o in ds.observations])
        fractions.append(labels.mean())
    assert all(abs(f - 0.5) < 0.05 for f in fractions), fractions


def test_synth_sampling_rate():
    cfg = SynthConfig(n_observations=1, rates=(0.4, 0.25, 0.6), horizon=2000.0)
    obs = synth_generate(cfg, 5)[0]
    for m, rate in zip(obs.modalities, cfg.rates):
        assert m.length >= 200
        assert abs(np.mean(np.diff(m.times)) - 1 / rate) < 0.1 / rate


def test_kfold():
    folds = split_kfold(10, 5, 0)
    assert [len(v) for _, v in folds] == [2] * 5
    allv = np.concatenate([v for _, v in folds])
    assert sorted(allv.tolist()) == list(range(10))
    for tr, va in folds:
        assert not set(tr) & set(va) and len(tr) + len(va) == 10
    assert all((a[1] == b[1]).all() for a, b in zip(folds, split_kfold(10, 5, 0)))
    assert max(len(v) for _, v in split_kfold(13, 5, 1)) - min(len(v) for _, v in split_kfold(13, 5, 1)) <= 1
    with pytest.raises(ValueError):
        split_kfold(3, 5, 0)


def test_split_timeseries_halves():
    t = np.arange(0.0, 100.0)
    obs = Observation("o", [ModalitySeries("a", t, t[:, None])], Target([10.0, 90.0], [0, 1]))
    tr, va = split_timeseries(Dataset(Schema(("a",), (1,), 2), [obs]), 0.5)
    assert abs(tr[0].modalities[0].length - 50) <= 1
    assert tr[0].modalities[0].times.max() < va[0].modalities[0].times.min()
    assert tr[0].target.labels.tolist() == [0] and va[0].target.labels.tolist() == [1]
    with pytest.raises(ValueError):
        split_timeseries(Dataset(Schema(("a",), (1,), 2), [obs]), 1.0)


def test_split_timeseries_drops_one_sided():
    obs = Observation("o", [ModalitySeries("a", [0.0], [[1.0]])], Target([5.0], [0]))
    with pytest.warns(UserWarning, match="no samples"):
        tr, va = split_timeseries(Dataset(Schema(("a",), (1,), 2), [obs]), 0.5)
    assert len(tr) == 1 and len(va) == 0


def test_strata():
    ds = Dataset(Schema(("a",), (1,), 3), [
        Observation("x", [ModalitySeries("a", [], np.zeros((0, 1)))], Target([1, 2, 3], [2, 2, 0])),
        Observation("y", [ModalitySeries("a", [], np.zeros((0, 1)))], None),
    ])
    assert observation_strata(ds) == [2, -1]
