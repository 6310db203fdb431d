"""Drifting, temporally dependent data streams for networks of devices.

Two stream kinds are supported:

* ``srw``: a 2-D reflected random walk labelled by sine boundary functions,
  with a rolling-majority label filter adding temporal dependence.
* ``csv``: a time series read from CSV, labelled by comparing a target
  column with its own recent history.

A scenario lays out one ordered list of concepts per device; drifts are
abrupt and each device starts ``offset`` ticks after the previous one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError

SRW_STEP = 0.05


@dataclass(frozen=True)
class StreamPoint:
    features: np.ndarray
    label: int
    global_index: int


# -- SRW ---------------------------------------------------------------------


@dataclass(frozen=True)
class BoundarySpec:
    """Sine boundary ``x1 - alpha - beta*sin(gamma*[pi*]x2)``.

    ``family`` S1 uses ``gamma*x2``, S2 uses ``gamma*pi*x2``. ``sign`` picks
    which side is labelled 1: ``">=0"`` or ``"<0"``.
    """

    family: str
    alpha: float
    beta: float
    gamma: float
    sign: str = ">=0"

    def __post_init__(self):
        if self.family not in ("S1", "S2"):
            raise ConfigurationError(f"unknown boundary family {self.family!r}")
        if self.sign not in (">=0", "<0"):
            raise ConfigurationError(f"sign must be '>=0' or '<0', got {self.sign!r}")

    def value(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        x1, x2 = points[..., 0], points[..., 1]
        arg = self.gamma * x2 if self.family == "S1" else self.gamma * np.pi * x2
        return x1 - self.alpha - self.beta * np.sin(arg)

    def flipped(self) -> BoundarySpec:
        return BoundarySpec(self.family, self.alpha, self.beta, self.gamma,
                            "<0" if self.sign == ">=0" else ">=0")


def label_boundary(points, spec: BoundarySpec):
    """Label one point (returns int) or an (N, 2) array (returns int8 array)."""
    v = spec.value(points)
    labels = (v >= 0) if spec.sign == ">=0" else (v < 0)
    if np.ndim(labels) == 0:
        return int(labels)
    return labels.astype(np.int8)


def s1_pool() -> list[BoundarySpec]:
    """16 simple boundaries: alpha in {0,1}, beta in {-1,1}, 4 gammas over [0.8, 1.2]."""
    return [BoundarySpec("S1", a, b, round(float(g), 4))
            for g in np.linspace(0.8, 1.2, 4) for a in (0.0, 1.0) for b in (-1.0, 1.0)]


def s2_pool() -> list[BoundarySpec]:
    """16 complex boundaries: alpha 0.5, 4 betas over [-0.25,-0.15], 4 gammas over [-2.2,-1.8]."""
    return [BoundarySpec("S2", 0.5, round(float(b), 4), round(float(g), 4))
            for b in np.linspace(-0.25, -0.15, 4) for g in np.linspace(-2.2, -1.8, 4)]


def srw_walk(n: int, rng) -> np.ndarray:
    """``n`` points of a random walk in the unit square with reflecting walls.

    Steps are uniform in [-0.05, 0.05] per coordinate. Folding the free walk
    with a period-2 triangle wave is equivalent to reflecting at 0 and 1.
    """
    if n < 1:
        raise ContractError("n must be positive")
    rng = np.random.default_rng(rng)
    start = rng.uniform(0.0, 1.0, size=2)
    free = start + np.cumsum(rng.uniform(-SRW_STEP, SRW_STEP, size=(n, 2)), axis=0)
    return 1.0 - np.abs(1.0 - np.mod(free, 2.0))


def apply_mode_dependence(labels, width: int = 5, context=None) -> np.ndarray:
    """Replace each label by the majority of itself and the ``width - 1`` before it.

    ``context`` holds raw labels that precede ``labels`` (e.g. earlier points
    relabelled by the current concept's function). Where fewer than ``width``
    labels exist, the window is truncated; a tie keeps the current label.
    """
    y = np.asarray(labels, dtype=np.int64)
    if y.size < 1:
        raise ContractError("need at least one label")
    ctx = np.asarray([] if context is None else context, dtype=np.int64)[-(width - 1):]
    full = np.concatenate([ctx, y])
    csum = np.concatenate([[0], np.cumsum(full)])
    end = np.arange(len(ctx) + 1, len(full) + 1)
    start = np.maximum(end - width, 0)
    ones = csum[end] - csum[start]
    n = end - start
    out = np.where(2 * ones > n, 1, np.where(2 * ones < n, 0, full[end - 1]))
    return out.astype(np.int8)


# -- CSV series labellers -------------------------------------------------------


@dataclass(frozen=True)
class SeriesLabelSpec:
    function: str  # F1..F5
    polarity: str = "+"
    k: int = 10
    target: str | None = None

    def __post_init__(self):
        if self.function not in ("F1", "F2", "F3", "F4", "F5"):
            raise ConfigurationError(f"unknown series function {self.function!r}")
        if self.polarity not in ("+", "-"):
            raise ConfigurationError(f"polarity must be '+' or '-', got {self.polarity!r}")
        if self.k < 1:
            raise ConfigurationError("temporal order k must be positive")


def _rolling(a: np.ndarray, k: int) -> np.ndarray:
    # row t holds a[t-k .. t-1]; defined for t >= k
    return np.lib.stride_tricks.sliding_window_view(a[:-1], k)


def series_labels(values, function: str, k: int, polarity: str = "+") -> np.ndarray:
    """Labels aligned with ``values``; -1 where the function is not yet defined."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    out = np.full(n, -1, dtype=np.int8)
    if function == "F1":
        out[1:] = v[1:] > v[:-1]
    elif function in ("F2", "F3"):
        if n > k:
            past = _rolling(v, k)
            ref = np.median(past, axis=1) if function == "F2" else past.min(axis=1)
            out[k:] = v[k:] > ref
    else:
        d = np.full(n, np.nan)
        d[1:] = np.diff(v)
        if function == "F4":
            out[2:] = d[2:] > d[1:-1]
        elif n > k + 1:
            past = _rolling(d[1:], k)
            out[k + 1:] = d[k + 1:] > np.median(past, axis=1)
    if polarity == "-":
        out = np.where(out >= 0, 1 - out, out).astype(np.int8)
    return out


def label_series(values, spec: SeriesLabelSpec) -> np.ndarray:
    """Labels for indices ``k+1 ..``; the first ``k+1`` points are dropped."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) <= spec.k + 1:
        raise ContractError(f"series of length {len(v)} too short for k={spec.k}")
    if not np.all(np.isfinite(v)):
        raise ContractError("series contains non-finite values")
    return series_labels(v, spec.function, spec.k, spec.polarity)[spec.k + 1:]


@dataclass
class LabelReport:
    minority_share: list[float]
    disagreement: dict[tuple[int, int], float]
    max_unbalance: float = 0.30
    min_disagreement: float = 0.20

    @property
    def failures(self) -> list[str]:
        out = [f"vector {i}: minority class {s:.1%} < {self.max_unbalance:.0%}"
               for i, s in enumerate(self.minority_share) if s < self.max_unbalance]
        out += [f"vectors {i},{j}: disagree on {d:.1%} <= {self.min_disagreement:.0%}"
                for (i, j), d in self.disagreement.items() if d <= self.min_disagreement]
        return out

    @property
    def passed(self) -> bool:
        return not self.failures


def check_label_constraints(vectors, max_unbalance: float = 0.30,
                            min_disagreement: float = 0.20) -> LabelReport:
    """Balance (minority >= 30%) and pairwise distinctness (> 20% disagreement)."""
    vs = [np.asarray(v, dtype=np.int8) for v in vectors]
    if len({len(v) for v in vs}) > 1:
        raise ContractError("label vectors must have equal length")
    share = [float(min(v.mean(), 1 - v.mean())) for v in vs]
    dis = {(i, j): float(np.mean(vs[i] != vs[j])) for i, j in combinations(range(len(vs)), 2)}
    return LabelReport(share, dis, max_unbalance, min_disagreement)


def temporal_augment(features, labels, k: int) -> np.ndarray:
    """Append the previous ``k`` labels (most recent first) to every feature row.
    Labels before the start of the stream count as 0."""
    if k < 1:
        raise ContractError("k must be positive")
    x = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels, dtype=np.float32)
    padded = np.concatenate([np.zeros(k, dtype=np.float32), y])
    lags = np.stack([padded[k - j: k - j + len(y)] for j in range(1, k + 1)], axis=1)
    return np.concatenate([x, lags], axis=1)


# -- scenarios ----------------------------------------------------------------


@dataclass
class Hyperparameters:
    window_size: int = 10
    batch_size: int = 128
    epochs: int = 10
    lr: float = 0.01
    hidden_size: int = 50
    max_models: int = 10
    prop: float = 0.3
    num_batches: int = 50

    def validate(self):
        for name in ("window_size", "batch_size", "epochs", "hidden_size", "num_batches"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.max_models < 1:
            raise ConfigurationError("max_models must be at least 1")
        if not 0 < self.prop < 1:
            raise ConfigurationError("prop must be in (0, 1)")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.window_size > self.batch_size:
            raise ConfigurationError("window_size must not exceed batch_size")

    @property
    def num_dp(self) -> int:
        return self.num_batches * self.batch_size


@dataclass
class ConceptSpec:
    function: str  # key into ScenarioConfig.functions
    length: int | None = None  # SRW points; CSV: optional truncation
    source: str | None = None  # CSV file
    rows: tuple[int, int] | None = None  # CSV row slice, after dropping missing values


@dataclass
class ScenarioConfig:
    kind: str  # "srw" | "csv"
    functions: dict  # name -> BoundarySpec | SeriesLabelSpec
    devices: list[list[ConceptSpec]]
    offset: int = 2000
    seed: int = 0
    concept_length: int = 25000
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    target: str | None = None  # CSV target column
    standardize: bool = True
    strict_layout: bool = True
    base_dir: Path = field(default_factory=Path.cwd)


@dataclass
class DeviceStream:
    device_id: int
    features: np.ndarray  # (N, F) float32
    labels: np.ndarray  # (N,) int8
    concept_ids: np.ndarray  # (N,) int: index of the concept within the device
    functions: list[str]  # function name per concept
    offset: int

    @property
    def drift_indices(self) -> list[int]:
        """Stream positions of the first point of every concept after the first."""
        return [int(i) for i in np.flatnonzero(np.diff(self.concept_ids)) + 1]

    def __len__(self):
        return len(self.labels)

    def points(self):
        for i, (x, y) in enumerate(zip(self.features, self.labels)):
            yield StreamPoint(x, int(y), self.offset + i)


@dataclass
class NetworkScenario:
    config: ScenarioConfig
    devices: list[DeviceStream]

    @property
    def hyper(self) -> Hyperparameters:
        return self.config.hyper

    @property
    def offsets(self) -> list[int]:
        return [d.offset for d in self.devices]


def validate_layout(config: ScenarioConfig):
    """Structural checks on the concept assignment; raises ConfigurationError."""
    names = set(config.functions)
    for d, concepts in enumerate(config.devices):
        for c in concepts:
            if c.function not in names:
                raise ConfigurationError(f"device {d}: unknown function {c.function!r}")
    if config.kind == "srw":
        used = {c.function for concepts in config.devices for c in concepts}
        fams = [config.functions[f].family for f in used]
        if config.strict_layout and len(used) == 5 and max(fams.count("S1"), fams.count("S2")) > 3:
            raise ConfigurationError("an SRW configuration may use at most three S1 or three S2 functions")
    if not config.strict_layout:
        return
    if len(config.devices) != 3 or any(len(c) != 5 for c in config.devices):
        raise ConfigurationError("strict layout needs 3 devices with 5 concepts each")
    starts = _concept_start_ticks(config)
    for d, concepts in enumerate(config.devices):
        for slot in (2, 4):
            fn = concepts[slot].function
            seen_here = any(c.function == fn for c in concepts[:slot])
            seen_elsewhere = any(
                other.function == fn and starts[e][j] < starts[d][slot]
                for e, oc in enumerate(config.devices) if e != d
                for j, other in enumerate(oc))
            if seen_here or not seen_elsewhere:
                raise ConfigurationError(
                    f"device {d} concept {slot + 1} ({fn}) must reuse a function seen "
                    f"earlier on another device and not yet on this one")


def _concept_start_ticks(config: ScenarioConfig) -> list[list[int]]:
    # CSV lengths are unknown until loaded; fall back to concept_length for ordering
    out = []
    for d, concepts in enumerate(config.devices):
        t = d * config.offset
        row = []
        for c in concepts:
            row.append(t)
            t += c.length or config.concept_length
        out.append(row)
    return out


def build_scenario(config: ScenarioConfig) -> NetworkScenario:
    """Materialize every device stream of ``config``."""
    config.hyper.validate()
    if config.kind not in ("srw", "csv"):
        raise ConfigurationError(f"unknown stream kind {config.kind!r}")
    validate_layout(config)
    root = np.random.SeedSequence(config.seed)
    device_seeds = root.spawn(len(config.devices))
    devices = []
    for d, concepts in enumerate(config.devices):
        if config.kind == "srw":
            x, y, cid = _build_srw_device(config, concepts, device_seeds[d])
        else:
            x, y, cid = _build_csv_device(config, concepts)
        devices.append(DeviceStream(d, x, y, cid, [c.function for c in concepts], d * config.offset))
    return NetworkScenario(config, devices)


def _build_srw_device(config: ScenarioConfig, concepts, seed):
    lengths = [c.length or config.concept_length for c in concepts]
    walk = srw_walk(sum(lengths), np.random.default_rng(seed))
    labels = np.empty(len(walk), dtype=np.int8)
    cid = np.repeat(np.arange(len(concepts)), lengths)
    start = 0
    for c, n in zip(concepts, lengths):
        spec = config.functions[c.function]
        ctx_start = max(start - 4, 0)
        raw = label_boundary(walk[ctx_start:start + n], spec)
        labels[start:start + n] = apply_mode_dependence(raw[start - ctx_start:],
                                                        context=raw[:start - ctx_start])
        start += n
    return walk.astype(np.float32), labels, cid


def read_series_csv(path, target: str):
    """Numeric columns of a CSV with rows containing missing values dropped.

    Returns ``(target_values, feature_matrix, feature_names)``; the target
    column is excluded from the features.
    """
    import pandas as pd

    df = pd.read_csv(path)
    if target not in df.columns:
        raise ConfigurationError(f"{path}: target column {target!r} not found")
    df = df.select_dtypes("number").dropna().reset_index(drop=True)
    feats = [c for c in df.columns if c != target]
    return df[target].to_numpy(np.float64), df[feats].to_numpy(np.float64), feats


def _build_csv_device(config: ScenarioConfig, concepts):
    if not config.target:
        raise ConfigurationError("csv scenarios need a target column")
    xs, ys = [], []
    for c in concepts:
        if not c.source:
            raise ConfigurationError(f"csv concept {c.function!r} has no source file")
        path = Path(c.source)
        if not path.is_absolute():
            path = config.base_dir / path
        v, x, _ = read_series_csv(path, config.target)
        if config.standardize:
            sd = x.std(axis=0)
            x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        if c.rows:
            v, x = v[c.rows[0]:c.rows[1]], x[c.rows[0]:c.rows[1]]
        spec = config.functions[c.function]
        y = label_series(v, spec)
        x = x[spec.k + 1:]
        if c.length:
            x, y = x[:c.length], y[:c.length]
        xs.append(x)
        ys.append(y)
    cid = np.repeat(np.arange(len(concepts)), [len(y) for y in ys])
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.int8), cid


def concept_label_report(scenario: NetworkScenario, n: int | None = None) -> LabelReport:
    """Balance/distinctness check of every SRW function on a common walk."""
    cfg = scenario.config
    if cfg.kind != "srw":
        raise ContractError("only SRW functions can be compared on a common walk")
    n = n or cfg.concept_length
    walk = srw_walk(n, np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0]))
    names = sorted({c.function for d in cfg.devices for c in d})
    return check_label_constraints(
        [apply_mode_dependence(label_boundary(walk, cfg.functions[f])) for f in names])


def dump_stream(stream: DeviceStream, path):
    """CSV with columns global_index, feature_0.., label, concept_id."""
    f = stream.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["global_index", *[f"feature_{i}" for i in range(f)], "label", "concept_id"])
        for i in range(len(stream)):
            w.writerow([stream.offset + i, *[repr(float(v)) for v in stream.features[i]],
                        int(stream.labels[i]), int(stream.concept_ids[i])])


def load_stream(path, device_id: int = 0, functions=None) -> DeviceStream:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "global_index" or header[-2:] != ["label", "concept_id"]:
        raise ContractError(f"{path}: unexpected stream header {header}")
    data = np.array(body, dtype=np.float64)
    cid = data[:, -1].astype(np.int64)
    n_concepts = int(cid.max()) + 1 if len(cid) else 0
    return DeviceStream(device_id, data[:, 1:-2].astype(np.float32), data[:, -2].astype(np.int8), cid,
                        list(functions or [str(i) for i in range(n_concepts)]),
                        int(data[0, 0]) if len(data) else 0)
