"""Observations, on-disk dataset format, normalization, synthetic data and splits.

Dataset directory layout::

    <root>/schema.txt                 key = value manifest
    <root>/<obs_id>/<modality>.csv    timestamp,v_1,...,v_dm   (one row per sample)
    <root>/<obs_id>/target.csv        timestamp,class          (optional)

Floats are written with ``repr`` so a write/read round trip is value-identical.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_FILE = "schema.txt"
TARGET_FILE = "target.csv"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed or schema-inconsistent dataset content."""


@dataclass(frozen=True)
class Schema:
    modality_names: tuple[str, ...]
    modality_dims: tuple[int, ...]
    n_classes: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.modality_names) != len(self.modality_dims):
            raise DataError("modality names and dims differ in length")
        if len(set(self.modality_names)) != len(self.modality_names):
            raise DataError("duplicate modality names")
        if any(d <= 0 for d in self.modality_dims):
            raise DataError("modality dimensions must be positive")
        if self.class_names and len(self.class_names) != self.n_classes:
            raise DataError("class_names length does not match n_classes")

    @property
    def n_modalities(self) -> int:
        return len(self.modality_names)

    def to_text(self) -> str:
        lines = [
            f"format_version = {FORMAT_VERSION}",
            "modalities = " + ",".join(f"{n}:{d}" for n, d in zip(self.modality_names, self.modality_dims)),
            f"n_classes = {self.n_classes}",
        ]
        if self.class_names:
            lines.append("class_names = " + ",".join(self.class_names))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<schema>") -> "Schema":
        kv = parse_key_values(text, source)
        try:
            mods = [item.split(":") for item in kv["modalities"].split(",") if item.strip()]
            names = tuple(m[0].strip() for m in mods)
            dims = tuple(int(m[1]) for m in mods)
            n_classes = int(kv["n_classes"])
        except (KeyError, IndexError, ValueError) as exc:
            raise DataError(f"{source}: invalid schema ({exc})") from None
        class_names = tuple(c.strip() for c in kv.get("class_names", "").split(",") if c.strip())
        return cls(names, dims, n_classes, class_names)


def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class ModalitySeries:
    name: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.times.size:
            raise DataError(
                f"modality {self.name!r}: {self.times.size} timestamps but values of shape {self.values.shape}"
            )
        if self.times.size > 1 and np.any(np.diff(self.times) < 0):
            raise DataError(f"modality {self.name!r}: timestamps not sorted")

    @property
    def length(self) -> int:
        return self.times.size

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class Target:
    times: np.ndarray
    labels: np.ndarray  # integer class ids

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size != self.times.size:
            raise DataError("target times and labels differ in length")
        if self.times.size > 1 and np.any(np.diff(self.times) < 0):
            raise DataError("target timestamps not sorted")

    def one_hot(self, n_classes: int) -> np.ndarray:
        out = np.zeros((self.labels.size, n_classes))
        out[np.arange(self.labels.size), self.labels] = 1.0
        return out


@dataclass
class Observation:
    id: str
    modalities: list[ModalitySeries]
    target: Target | None = None

    def span(self) -> tuple[float, float]:
        stamps = [m.times for m in self.modalities if m.length]
        if self.target is not None and self.target.times.size:
            stamps.append(self.target.times)
        if not stamps:
            return 0.0, 0.0
        allt = np.concatenate(stamps)
        return float(allt.min()), float(allt.max())

    def max_time(self) -> float:
        return self.span()[1]


@dataclass
class Dataset:
    schema: Schema
    observations: list[Observation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.observations)

    def __getitem__(self, i: int) -> Observation:
        return self.observations[i]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.schema, [self.observations[i] for i in indices])

    def validate(self) -> None:
        for obs in self.observations:
            names = tuple(m.name for m in obs.modalities)
            if names != self.schema.modality_names:
                raise DataError(f"observation {obs.id}: modalities {names} do not match schema")
            for m, d in zip(obs.modalities, self.schema.modality_dims):
                if m.dim != d:
                    raise DataError(f"observation {obs.id}: modality {m.name!r} has dim {m.dim}, schema says {d}")
            if obs.target is not None and obs.target.labels.size:
                lab = obs.target.labels
                if lab.min() < 0 or lab.max() >= self.schema.n_classes:
                    raise DataError(f"observation {obs.id}: label outside [0, {self.schema.n_classes})")

    def max_time(self) -> float:
        return max((abs(o.max_time()) for o in self.observations), default=0.0)


def time_deltas(times) -> np.ndarray:
    """``[0, t_2 - t_1, ..., t_L - t_{L-1}]``."""
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        return times.copy()
    out = np.empty_like(times)
    out[0] = 0.0
    out[1:] = np.diff(times)
    if np.any(out < 0):
        raise DataError("timestamps not sorted; deltas would be negative")
    return out


def times_from_deltas(t0: float, deltas) -> np.ndarray:
    """Inverse of :func:`time_deltas` by sequential summation from ``t0``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        return deltas.copy()
    out = np.cumsum(deltas)
    out += t0
    return out


def log_normalize(values, name: str = "values") -> np.ndarray:
    """Elementwise ``ln(1 + x)`` for nonnegative inputs."""
    values = np.asarray(values, dtype=np.float64)
    bad = np.argwhere(values < 0)
    if bad.size:
        raise DataError(f"{name}: negative value at row {int(bad[0][0])}; log normalization needs x >= 0")
    return np.log1p(values)


def log_normalize_dataset(ds: Dataset) -> Dataset:
    obs = [
        replace(o, modalities=[replace(m, values=log_normalize(m.values, f"{o.id}/{m.name}")) for m in o.modalities])
        for o in ds.observations
    ]
    return Dataset(ds.schema, obs)


# --- file IO -----------------------------------------------------------------


@dataclass
class ParseReport:
    n_observations: int = 0
    n_samples: dict[str, int] = field(default_factory=dict)
    n_targets: int = 0
    t_min: float = math.inf
    t_max: float = -math.inf
    resorted: int = 0


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / SCHEMA_FILE).write_text(ds.schema.to_text())
    for obs in ds.observations:
        d = root / obs.id
        d.mkdir(exist_ok=True)
        for m in obs.modalities:
            rows = (",".join([_fmt(t)] + [_fmt(v) for v in row]) for t, row in zip(m.times, m.values))
            (d / f"{m.name}.csv").write_text("".join(r + "\n" for r in rows))
        if obs.target is not None:
            rows = (f"{_fmt(t)},{int(c)}\n" for t, c in zip(obs.target.times, obs.target.labels))
            (d / TARGET_FILE).write_text("".join(rows))


def _read_rows(path: Path, width: int) -> list[list[float]]:
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
            if not all(math.isfinite(v) for v in rows[-1]):
                raise DataError(f"{path}:{lineno}: non-finite value")
    return rows


def _sorted_rows(rows, path, report):
    times = [r[0] for r in rows]
    if any(b < a for a, b in zip(times, times[1:])):
        report.resorted += 1
        log.warning("%s: timestamps out of order, re-sorted", path)
        rows = sorted(rows, key=lambda r: r[0])
    return rows


def load_dataset(path, schema: Schema | None = None) -> tuple[Dataset, ParseReport]:
    root = Path(path)
    on_disk = Schema.from_text((root / SCHEMA_FILE).read_text(), str(root / SCHEMA_FILE))
    if schema is None:
        schema = on_disk
    elif schema != on_disk:
        raise DataError(f"{root}: schema on disk {on_disk} does not match expected {schema}")
    report = ParseReport(n_samples={n: 0 for n in schema.modality_names})
    observations = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        modalities = []
        for name, dim in zip(schema.modality_names, schema.modality_dims):
            f = d / f"{name}.csv"
            rows = _sorted_rows(_read_rows(f, dim + 1), f, report) if f.exists() else []
            arr = np.array(rows, dtype=np.float64).reshape(len(rows), dim + 1)
            modalities.append(ModalitySeries(name, arr[:, 0], arr[:, 1:]))
            report.n_samples[name] += len(rows)
            if rows:
                report.t_min = min(report.t_min, float(arr[0, 0]))
                report.t_max = max(report.t_max, float(arr[-1, 0]))
        extra = {p.stem for p in d.glob("*.csv")} - set(schema.modality_names) - {Path(TARGET_FILE).stem}
        if extra:
            raise DataError(f"{d}: files {sorted(extra)} are not modalities in the schema")
        target = None
        tf = d / TARGET_FILE
        if tf.exists():
            rows = _sorted_rows(_read_rows(tf, 2), tf, report)
            arr = np.array(rows, dtype=np.float64).reshape(len(rows), 2)
            labels = arr[:, 1]
            if np.any(labels != np.round(labels)):
                raise DataError(f"{tf}: class ids must be integers")
            target = Target(arr[:, 0], labels.astype(np.int64))
            report.n_targets += len(rows)
        observations.append(Observation(d.name, modalities, target))
    ds = Dataset(schema, observations)
    ds.validate()
    report.n_observations = len(observations)
    return ds, report


def fingerprint(path) -> str:
    """SHA-256 over the schema and every observation CSV, in sorted path order.

    Other files (manifests, notes) do not change the fingerprint.
    """
    root = Path(path)
    if not (root / SCHEMA_FILE).is_file():
        raise DataError(f"{root}: no {SCHEMA_FILE}; not a dataset directory")
    h = hashlib.sha256()
    for f in [root / SCHEMA_FILE] + sorted(root.glob("*/*.csv")):
        h.update(str(f.relative_to(root)).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


# --- synthetic data ----------------------------------------------------------


@dataclass
class SynthConfig:
    """Latent-sinusoid generator.

    Each observation draws ``n_latent`` smooth channels (sums of random
    sinusoids, unit variance). Modality ``m`` is a linear readout of the
    latent plus Gaussian noise, sampled at Poisson times with rate
    ``rates[m]``; each sample is dropped with probability ``missing_prob``.
    Labels are the bin of ``latent[0](t)`` among ``thresholds`` on a separate
    Poisson timeline that starts after ``label_start``. Readout matrices are
    drawn once per dataset; everything else is drawn per observation.
    """

    n_observations: int = 500
    modality_dims: tuple[int, ...] = (2, 1, 3)
    rates: tuple[float, ...] = (0.4, 0.25, 0.6)
    horizon: float = 100.0
    n_latent: int = 3
    n_sines: int = 3
    period_range: tuple[float, float] = (60.0, 200.0)
    noise: float = 0.1
    missing_prob: float = 0.0
    label_rate: float = 0.15
    label_start: float = 10.0
    thresholds: tuple[float, ...] = (0.0,)

    def validate(self) -> None:
        if len(self.modality_dims) == 0:
            raise DataError("synthetic spec needs at least one modality")
        if len(self.rates) != len(self.modality_dims):
            raise DataError("rates must have one entry per modality")
        if any(r <= 0 for r in self.rates) or self.label_rate <= 0:
            raise DataError("sampling rates must be positive")
        if any(d <= 0 for d in self.modality_dims):
            raise DataError("modality dimensions must be positive")
        if self.n_observations < 0 or self.horizon <= 0 or self.n_latent <= 0 or self.n_sines <= 0:
            raise DataError("n_observations, horizon, n_latent and n_sines must be positive")
        if not 0.0 <= self.missing_prob < 1.0:
            raise DataError("missing_prob must lie in [0, 1)")
        lo, hi = self.period_range
        if not 0 < lo <= hi:
            raise DataError("period_range must satisfy 0 < low <= high")
        if list(self.thresholds) != sorted(self.thresholds):
            raise DataError("thresholds must be ascending")

    @property
    def n_classes(self) -> int:
        return len(self.thresholds) + 1

    def schema(self) -> Schema:
        return Schema(
            tuple(f"m{i}" for i in range(len(self.modality_dims))),
            tuple(self.modality_dims),
            self.n_classes,
        )

    _TUPLES = {"modality_dims": int, "rates": float, "period_range": float, "thresholds": float}

    @classmethod
    def from_text(cls, text: str, source: str = "<synth spec>") -> "SynthConfig":
        kv = parse_key_values(text, source)
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {}
        for key, raw in kv.items():
            if key not in known:
                raise DataError(f"{source}: unknown field {key!r}")
            try:
                if key in cls._TUPLES:
                    conv = cls._TUPLES[key]
                    kwargs[key] = tuple(conv(v) for v in raw.replace(" ", "").split(",") if v)
                elif key in ("n_observations", "n_latent", "n_sines"):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError:
                raise DataError(f"{source}: field {key!r} has invalid value {raw!r}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


class _Latent:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        shape = (cfg.n_latent, cfg.n_sines)
        self.freq = 2 * np.pi / rng.uniform(*cfg.period_range, size=shape)
        self.phase = rng.uniform(0, 2 * np.pi, size=shape)
        self.amp = rng.standard_normal(shape) * np.sqrt(2.0 / cfg.n_sines)

    def __call__(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        arg = self.freq[None] * t[:, None, None] + self.phase[None]
        return (self.amp[None] * np.sin(arg)).sum(axis=2)


def _poisson_times(rng, rate, start, stop):
    n_guess = int(rate * (stop - start) * 1.5) + 20
    times = []
    t = start
    while True:
        gaps = rng.exponential(1.0 / rate, size=n_guess)
        for g in gaps:
            t += g
            if t >= stop:
                return np.array(times)
            times.append(t)


def synth_readouts(cfg: SynthConfig, seed_seq: np.random.SeedSequence) -> list[np.ndarray]:
    """Dataset-wide linear maps from the latent to each modality."""
    rng = np.random.default_rng(seed_seq)
    return [rng.standard_normal((cfg.n_latent, dim)) / np.sqrt(cfg.n_latent) for dim in cfg.modality_dims]


def synth_observation(
    cfg: SynthConfig,
    readouts: Sequence[np.ndarray],
    seed_seq: np.random.SeedSequence,
    obs_id: str,
) -> Observation:
    latent_ss, sample_ss, label_ss = seed_seq.spawn(3)
    latent = _Latent(cfg, np.random.default_rng(latent_ss))
    sample_rng = np.random.default_rng(sample_ss)
    modalities = []
    for m, (readout, rate) in enumerate(zip(readouts, cfg.rates)):
        dim = readout.shape[1]
        times = _poisson_times(sample_rng, rate, 0.0, cfg.horizon)
        if cfg.missing_prob > 0 and times.size:
            times = times[sample_rng.random(times.size) >= cfg.missing_prob]
        values = latent(times) @ readout + cfg.noise * sample_rng.standard_normal((times.size, dim))
        modalities.append(ModalitySeries(f"m{m}", times, values.reshape(times.size, dim)))
    label_times = _poisson_times(np.random.default_rng(label_ss), cfg.label_rate, cfg.label_start, cfg.horizon)
    labels = np.searchsorted(np.asarray(cfg.thresholds), latent(label_times)[:, 0], side="right")
    return Observation(obs_id, modalities, Target(label_times, labels))


def synth_generate(cfg: SynthConfig, seed: int) -> Dataset:
    """Deterministic given ``(cfg, seed)``.

    Latent paths, sampling times and label times use independent seed
    streams per observation, so changing the modality configuration never
    changes the labels.
    """
    cfg.validate()
    readout_ss, obs_ss = np.random.SeedSequence(seed).spawn(2)
    readouts = synth_readouts(cfg, readout_ss)
    width = max(4, len(str(cfg.n_observations)))
    obs = [
        synth_observation(cfg, readouts, ss, f"obs{i:0{width}d}")
        for i, ss in enumerate(obs_ss.spawn(cfg.n_observations))
    ]
    return Dataset(cfg.schema(), obs)


# --- splits ------------------------------------------------------------------


def split_kfold(n: int | Dataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition; validation folds differ in size by at most one."""
    n = len(n) if isinstance(n, Dataset) else int(n)
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError(f"cannot split {n} observations into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        valid = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, valid))
    return out


def _slice_obs(obs: Observation, keep) -> Observation:
    mods = [ModalitySeries(m.name, m.times[keep(m.times)], m.values[keep(m.times)]) for m in obs.modalities]
    target = None
    if obs.target is not None:
        sel = keep(obs.target.times)
        target = Target(obs.target.times[sel], obs.target.labels[sel])
    return Observation(obs.id, mods, target)


def split_timeseries(ds: Dataset, train_frac: float) -> tuple[Dataset, Dataset]:
    """Cut each observation at the ``train_frac`` point of its time span.

    Samples strictly before the cut go to the training view, the rest to
    validation. Observations left empty on one side are dropped from it.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0, 1)")
    train, valid = [], []
    for obs in ds.observations:
        lo, hi = obs.span()
        cut = lo + train_frac * (hi - lo)
        before = _slice_obs(obs, lambda t: t < cut)
        after = _slice_obs(obs, lambda t: t >= cut)
        for view, side, name in ((before, train, "training"), (after, valid, "validation")):
            if any(m.length for m in view.modalities):
                side.append(view)
            else:
                warnings.warn(f"observation {obs.id} has no samples in the {name} view; dropped", stacklevel=2)
    return Dataset(ds.schema, train), Dataset(ds.schema, valid)


def observation_strata(ds: Dataset) -> list[int]:
    """Majority class per observation, used to stratify label subsampling."""
    out = []
    for obs in ds.observations:
        if obs.target is None or obs.target.labels.size == 0:
            out.append(-1)
        else:
            out.append(int(np.bincount(obs.target.labels).argmax()))
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
