"""Config-driven experiments: parse a scenario file, run every requested
model kind over the same streams, write logs, summaries and plots.

Output layout under ``out``::

    manifest.json            run metadata and file index
    summary.csv              start/end metrics per device and drift, plus averages
    curves.csv               subsampled prequential curves
    seed_<s>/<kind>/device_<d>.csv   per-point run logs
    seed_<s>/<kind>/ledger.csv       communications (empty for standalone kinds)
    seed_<s>/kappa_device_<d>.svg    one line per model kind
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigurationError
from .mal import CommLedger, DeviceLog, count_communications, run_network, run_standalone
from .metrics import prequential_curves, start_end_summary
from .streams import (BoundarySpec, ConceptSpec, Hyperparameters, NetworkScenario, ScenarioConfig,
                      SeriesLabelSpec, build_scenario)

MODEL_KINDS = ("clstm", "cpnn", "macpnn")

_TOP_KEYS = {"name", "kind", "stream_seed", "offset", "concept_length", "target", "standardize",
             "strict_layout", "functions", "devices", "hyperparameters", "models", "seeds", "out",
             "plot", "scale", "curve_stride"}
_CONCEPT_KEYS = {"function", "length", "source", "rows"}
_BOUNDARY_KEYS = {"family", "alpha", "beta", "gamma", "sign"}
_SERIES_KEYS = {"function", "polarity", "k"}
_HYPER_KEYS = set(Hyperparameters.__dataclass_fields__)


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig  # lengths as written; see scaled_scenario()
    models: list[str] = field(default_factory=lambda: list(MODEL_KINDS))
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "results"
    plot: bool = True
    scale: float = 1.0
    curve_stride: int = 25
    name: str = "experiment"

    def validate(self):
        if not self.models:
            raise ConfigurationError("at least one model kind is required")
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad:
            raise ConfigurationError(f"unknown model kind(s) {bad}; expected {list(MODEL_KINDS)}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if not self.scale > 0:
            raise ConfigurationError("scale must be positive")
        if self.curve_stride < 1:
            raise ConfigurationError("curve_stride must be positive")
        self.scenario.hyper.validate()

    def scaled_scenario(self) -> ScenarioConfig:
        """Scenario with concept lengths multiplied by ``scale``.

        The trial length (numBatches) is left alone, so start_j on concepts
        shorter than the trial falls back to the concept's final value.
        """
        sc = self.scenario
        if self.scale == 1.0:
            return sc
        s = self.scale
        devices = [[replace(c, length=_scaled(c.length, s) if c.length else None) for c in d]
                   for d in sc.devices]
        return replace(sc, devices=devices, concept_length=_scaled(sc.concept_length, s))

    @property
    def start_points(self) -> int:
        return self.scenario.hyper.num_dp


def _scaled(n: int, s: float) -> int:
    return max(1, int(round(n * s)))


@dataclass
class RunManifest:
    config_hash: str
    name: str
    seeds: list[int]
    models: list[str]
    start_points: int
    n_devices: int
    files: dict = field(default_factory=dict)
    durations: dict = field(default_factory=dict)
    communications: dict = field(default_factory=dict)
    stream_hashes: list[str] = field(default_factory=list)
    status: str = "ok"

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> RunManifest:
        try:
            return cls(**json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigurationError(f"{path}: no manifest; run the experiment first") from None


# -- config parsing ------------------------------------------------------------


def _line_index(node, path=(), out=None) -> dict:
    # path tuple -> 1-based source line, from the YAML node tree
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            out[path + (k.value,)] = k.start_mark.line + 1
            _line_index(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


class _Ctx:
    """Raises ConfigurationError pointing at the offending line."""

    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path, msg):
        line = None
        p = tuple(path)
        while line is None and p:
            line = self.lines.get(p)
            p = p[:-1]
        where = f"{self.source}:{line}" if line else self.source
        dotted = ".".join(str(x) for x in path) or "<root>"
        raise ConfigurationError(f"{where}: {dotted}: {msg}")

    def mapping(self, value, path, allowed):
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
        unknown = sorted(set(value) - allowed, key=str)
        if unknown:
            self.fail(path + (unknown[0],), f"unknown key {unknown[0]!r} (allowed: {sorted(allowed)})")
        return value

    def build(self, path, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except (ConfigurationError, TypeError, ValueError) as e:
            self.fail(path, str(e))


def parse_config_text(text: str, source: str = "<config>", base_dir=None) -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigurationError(f"{where}: invalid YAML: {getattr(e, 'problem', e)}") from None
    ctx = _Ctx(source, _line_index(node) if node is not None else {})
    raw = ctx.mapping(raw if raw is not None else {}, (), _TOP_KEYS)
    for key in ("kind", "functions", "devices"):
        if key not in raw:
            ctx.fail((), f"missing required key {key!r}")
    kind = raw["kind"]
    if kind not in ("srw", "csv"):
        ctx.fail(("kind",), f"kind must be 'srw' or 'csv', got {kind!r}")

    functions = {}
    for fname, spec in ctx.mapping(raw["functions"], ("functions",), set(raw["functions"] or {})).items():
        p = ("functions", fname)
        if kind == "srw":
            spec = ctx.mapping(spec, p, _BOUNDARY_KEYS)
            functions[str(fname)] = ctx.build(p, BoundarySpec, **spec)
        else:
            spec = ctx.mapping(spec, p, _SERIES_KEYS)
            functions[str(fname)] = ctx.build(p, SeriesLabelSpec, target=raw.get("target"), **spec)

    if not isinstance(raw["devices"], list) or not raw["devices"]:
        ctx.fail(("devices",), "expected a non-empty list of concept lists")
    devices = []
    for d, concepts in enumerate(raw["devices"]):
        if not isinstance(concepts, list) or not concepts:
            ctx.fail(("devices", d), "expected a non-empty list of concepts")
        row = []
        for j, c in enumerate(concepts):
            p = ("devices", d, j)
            if isinstance(c, str):
                c = {"function": c}
            c = dict(ctx.mapping(c, p, _CONCEPT_KEYS))
            if "function" not in c:
                ctx.fail(p, "concept needs a 'function'")
            if c.get("rows") is not None:
                if not (isinstance(c["rows"], list) and len(c["rows"]) == 2):
                    ctx.fail(p + ("rows",), "rows must be [start, stop]")
                c["rows"] = tuple(int(v) for v in c["rows"])
            if c.get("length") is not None and (not isinstance(c["length"], int) or c["length"] < 1):
                ctx.fail(p + ("length",), "length must be a positive integer")
            row.append(ConceptSpec(**c))
        devices.append(row)

    hp = ctx.mapping(raw.get("hyperparameters") or {}, ("hyperparameters",), _HYPER_KEYS)
    hyper = ctx.build(("hyperparameters",), Hyperparameters, **hp)
    ctx.build(("hyperparameters",), hyper.validate)

    scenario = ScenarioConfig(
        kind=kind, functions=functions, devices=devices,
        offset=raw.get("offset", 2000), seed=raw.get("stream_seed", 0),
        concept_length=raw.get("concept_length", 25000), hyper=hyper, target=raw.get("target"),
        standardize=raw.get("standardize", True), strict_layout=raw.get("strict_layout", True),
        base_dir=Path(base_dir) if base_dir is not None else Path.cwd())
    for key in ("offset", "stream_seed", "concept_length"):
        v = raw.get(key, 0)
        if not isinstance(v, int) or v < 0:
            ctx.fail((key,), f"{key} must be a non-negative integer")
    models = raw.get("models", list(MODEL_KINDS))
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(models, list):
        ctx.fail(("models",), "expected a list")
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        ctx.fail(("seeds",), "expected a list of integers")
    cfg = ExperimentConfig(scenario, list(models), list(seeds), str(raw.get("out", "results")),
                           bool(raw.get("plot", True)), float(raw.get("scale", 1.0)),
                           int(raw.get("curve_stride", 25)), str(raw.get("name", Path(source).stem)))
    try:
        cfg.validate()
    except ConfigurationError as e:
        msg = str(e)
        key = next((k for k in ("model", "seed", "scale", "curve_stride") if k in msg), None)
        path = {"model": ("models",), "seed": ("seeds",), "scale": ("scale",),
                "curve_stride": ("curve_stride",)}.get(key, ())
        ctx.fail(path, msg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"{path}: cannot read config: {e.strerror or e}") from None
    return parse_config_text(text, str(path), base_dir=path.parent)


def parse_config(path, scale: float | None = None) -> tuple[ExperimentConfig, NetworkScenario]:
    """Validated experiment config plus its materialized (scaled) scenario."""
    cfg = load_config(path)
    if scale is not None:
        cfg.scale = float(scale)
        cfg.validate()
    return cfg, build_scenario(cfg.scaled_scenario())


def config_to_dict(cfg: ExperimentConfig) -> dict:
    sc = cfg.scenario
    if sc.kind == "srw":
        functions = {k: {"family": f.family, "alpha": f.alpha, "beta": f.beta, "gamma": f.gamma,
                         "sign": f.sign} for k, f in sc.functions.items()}
    else:
        functions = {k: {"function": f.function, "polarity": f.polarity, "k": f.k}
                     for k, f in sc.functions.items()}
    devices = []
    for d in sc.devices:
        row = []
        for c in d:
            item = {"function": c.function}
            if c.length is not None:
                item["length"] = c.length
            if c.source is not None:
                item["source"] = c.source
            if c.rows is not None:
                item["rows"] = list(c.rows)
            row.append(item)
        devices.append(row)
    out = {"name": cfg.name, "kind": sc.kind, "stream_seed": sc.seed, "offset": sc.offset,
           "concept_length": sc.concept_length, "standardize": sc.standardize,
           "strict_layout": sc.strict_layout, "functions": functions, "devices": devices,
           "hyperparameters": asdict(sc.hyper), "models": list(cfg.models), "seeds": list(cfg.seeds),
           "out": cfg.out, "plot": cfg.plot, "scale": cfg.scale, "curve_stride": cfg.curve_stride}
    if sc.target is not None:
        out["target"] = sc.target
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


# -- running ---------------------------------------------------------------------


def stream_hash(stream) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(stream.features, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(stream.labels, dtype="i1").tobytes())
    h.update(np.ascontiguousarray(stream.concept_ids, dtype="<i8").tobytes())
    return h.hexdigest()


def run_kind(kind: str, scenario: NetworkScenario, seed: int, audit: bool = True):
    """Logs and ledger of one model kind; standalone kinds never talk."""
    if kind == "macpnn":
        res = run_network(scenario, seed=seed, audit=audit)
        return res.logs, res.ledger
    if kind in ("cpnn", "clstm"):
        return [run_standalone(s, scenario.hyper, seed, kind) for s in scenario.devices], CommLedger()
    raise ConfigurationError(f"unknown model kind {kind!r}")


def run_experiment(cfg: ExperimentConfig, out=None, scenario: NetworkScenario | None = None) -> RunManifest:
    """Run every (seed, kind) pair, then summarize and plot from the written logs.

    On failure a ``FAILED`` marker with the traceback is left next to the
    partial outputs and the exception propagates.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    scaled = cfg.scaled_scenario()
    manifest = RunManifest(config_hash(cfg), cfg.name, list(cfg.seeds), list(cfg.models),
                           scaled.hyper.num_dp, len(scaled.devices))
    try:
        cfg.validate()
        scenario = scenario or build_scenario(scaled)
        manifest.stream_hashes = [stream_hash(s) for s in scenario.devices]
        n = len(scenario.devices)
        n_batches = max(math.ceil(len(s) / scenario.hyper.batch_size) for s in scenario.devices)
        for seed in cfg.seeds:
            for kind in cfg.models:
                t0 = time.perf_counter()
                logs, ledger = run_kind(kind, scenario, seed)
                manifest.durations[f"{seed}/{kind}"] = round(time.perf_counter() - t0, 3)
                run_dir = out / f"seed_{seed}" / kind
                run_dir.mkdir(parents=True, exist_ok=True)
                files = []
                for log in logs:
                    p = run_dir / f"device_{log.device_id}.csv"
                    log.to_csv(p)
                    files.append(str(p.relative_to(out)))
                ledger.to_csv(run_dir / "ledger.csv")
                files.append(str((run_dir / "ledger.csv").relative_to(out)))
                manifest.files[f"{seed}/{kind}"] = files
                ours, naive, ratio = count_communications(ledger, n, n_batches)
                manifest.communications[f"{seed}/{kind}"] = {
                    "ours": ours, "naive": naive, "ratio": ratio,
                    "models": ledger.total_models, "bytes": ledger.total_bytes}
        manifest.write(out / "manifest.json")
        summarize(out)
        if cfg.plot:
            plot_outputs(out)
    except BaseException:
        manifest.status = "failed"
        manifest.write(out / "manifest.json")
        marker.write_text(traceback.format_exc())
        raise
    return manifest


# -- summaries -------------------------------------------------------------------

SUMMARY_COLUMNS = ["config", "seed", "kind", "device", "drift", "start_kappa", "end_kappa",
                   "start_balanced_accuracy", "end_balanced_accuracy", "start_truncated"]


def _fmt(v) -> str:
    return f"{v:.12g}" if isinstance(v, float) else str(v)


def _read_logs(out: Path, seed, kind, n_devices) -> list[DeviceLog]:
    return [DeviceLog.from_csv(out / f"seed_{seed}" / kind / f"device_{d}.csv", d)
            for d in range(n_devices)]


def summary_rows(name: str, seed, kind: str, logs: list[DeviceLog], start_points: int) -> list[list]:
    curves = [prequential_curves(l.y_true, l.y_pred, l.drift_indices) for l in logs]
    kap = start_end_summary(curves, start_points, "kappa")
    bac = start_end_summary(curves, start_points, "balanced_accuracy")
    rows = []
    for d, (dk, db) in enumerate(zip(kap.devices, bac.devices)):
        for j in range(len(dk.start)):
            rows.append([name, seed, kind, d, j + 1, dk.start[j], dk.end[j], db.start[j], db.end[j],
                         int(dk.start_truncated[j])])
    rows.append([name, seed, kind, "all", "avg", kap.start_avg, kap.end_avg, bac.start_avg,
                 bac.end_avg, int(any(any(d.start_truncated) for d in kap.devices))])
    return rows


def curve_rows(seed, kind: str, logs: list[DeviceLog], stride: int) -> list[list]:
    rows = []
    for log in logs:
        for c_id, c in enumerate(prequential_curves(log.y_true, log.y_pred, log.drift_indices)):
            n = len(c.kappa)
            idx = sorted(set(range(stride - 1, n, stride)) | {n - 1})
            for i in idx:
                rows.append([seed, kind, log.device_id, c.start + i, c_id, float(c.kappa[i]),
                             float(c.balanced_accuracy[i])])
    return rows


def summarize(out) -> Path:
    """Recompute summary.csv and curves.csv from the run logs under ``out``."""
    out = Path(out)
    man = RunManifest.read(out / "manifest.json")
    stride = 25
    cfg_file = out / "config.yaml"
    if cfg_file.exists():
        stride = load_config(cfg_file).curve_stride
    summary, curves = [], []
    for seed in man.seeds:
        for kind in man.models:
            logs = _read_logs(out, seed, kind, man.n_devices)
            summary.extend(summary_rows(man.name, seed, kind, logs, man.start_points))
            curves.extend(curve_rows(seed, kind, logs, stride))
    for kind in man.models:
        agg = [r for r in summary if r[2] == kind and r[3] == "all"]
        means = [float(np.mean([r[k] for r in agg])) for k in range(5, 9)]
        summary.append([man.name, "mean", kind, "all", "avg", *means, max(r[9] for r in agg)])
    path = out / "summary.csv"
    _write_csv(path, SUMMARY_COLUMNS, summary)
    _write_csv(out / "curves.csv", ["seed", "kind", "device", "index", "concept", "kappa",
                                    "balanced_accuracy"], curves)
    return path


def _write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(_fmt(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_summary(path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- plotting --------------------------------------------------------------------

_COLOURS = {"clstm": "#1f77b4", "cpnn": "#ff7f0e", "macpnn": "#2ca02c"}


def emit_plot(curves_csv, out_path, seed=None, device: int = 0, metric: str = "kappa") -> Path:
    """Static SVG of one device's prequential curves, one polyline per model kind,
    dashed verticals at drifts. Pure function of the curves CSV."""
    import csv

    curves_csv = Path(curves_csv)
    if not curves_csv.exists():
        raise ConfigurationError(f"{curves_csv}: curve file not found")
    with open(curves_csv, newline="") as fh:
        rows = [r for r in csv.DictReader(fh)
                if int(r["device"]) == device and (seed is None or r["seed"] == str(seed))]
    if not rows:
        raise ConfigurationError(f"{curves_csv}: no curve rows for device {device}, seed {seed}")
    if seed is None:
        seed = rows[0]["seed"]
        rows = [r for r in rows if r["seed"] == seed]
    kinds = list(dict.fromkeys(r["kind"] for r in rows))
    series = {k: [(int(r["index"]), float(r[metric]), int(r["concept"])) for r in rows if r["kind"] == k]
              for k in kinds}
    drifts = _drift_positions(series[kinds[0]])

    width, height, ml, mr, mt, mb = 800, 320, 60, 110, 20, 45
    x_max = max(i for s in series.values() for i, _, _ in s) or 1
    vals = [v for s in series.values() for _, v, _ in s if np.isfinite(v)]
    y_lo = min(-0.2, math.floor(min(vals, default=0) * 5) / 5)
    y_hi = 1.0
    sx = lambda i: ml + (width - ml - mr) * i / x_max
    sy = lambda v: mt + (height - mt - mb) * (y_hi - v) / (y_hi - y_lo)
    el = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
          f'viewBox="0 0 {width} {height}">',
          f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
          f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
          f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>']
    for v in np.linspace(y_lo, y_hi, int(round((y_hi - y_lo) / 0.2)) + 1):
        el.append(f'<text x="{ml - 6}" y="{sy(v) + 4:.2f}" font-size="10" text-anchor="end">{v:.1f}</text>')
        el.append(f'<line x1="{ml}" y1="{sy(v):.2f}" x2="{width - mr}" y2="{sy(v):.2f}" '
                  f'stroke="#dddddd" stroke-width="0.5"/>')
    for d in drifts:
        el.append(f'<line class="drift" x1="{sx(d):.2f}" y1="{mt}" x2="{sx(d):.2f}" y2="{height - mb}" '
                  f'stroke="grey" stroke-dasharray="4,3"/>')
    for k, kind in enumerate(kinds):
        pts = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v, _ in series[kind] if np.isfinite(v))
        colour = _COLOURS.get(kind, "black")
        el.append(f'<polyline class="curve" data-kind="{kind}" fill="none" stroke="{colour}" '
                  f'stroke-width="1" points="{pts}"/>')
        el.append(f'<text x="{width - mr + 10}" y="{mt + 15 + 15 * k}" font-size="12" '
                  f'fill="{colour}">{kind}</text>')
    label = "Cohen&#39;s kappa" if metric == "kappa" else "balanced accuracy"
    el.append(f'<text x="{(ml + width - mr) / 2:.1f}" y="{height - 10}" font-size="12" '
              f'text-anchor="middle">stream position (device {device})</text>')
    el.append(f'<text x="14" y="{(mt + height - mb) / 2:.1f}" font-size="12" text-anchor="middle" '
              f'transform="rotate(-90 14 {(mt + height - mb) / 2:.1f})">{label}</text>')
    el.append("</svg>")
    out_path = Path(out_path)
    out_path.write_text("\n".join(el) + "\n")
    return out_path


def _drift_positions(series) -> list[int]:
    out = []
    prev = series[0][2]
    for j, (i, _, c) in enumerate(series[1:], 1):
        if c != prev:
            # the previous kept row is the concept's last point
            out.append(series[j - 1][0] + 1)
            prev = c
    return out


def plot_outputs(out) -> list[Path]:
    out = Path(out)
    man = RunManifest.read(out / "manifest.json")
    paths = []
    for seed in man.seeds:
        for d in range(man.n_devices):
            p = out / f"seed_{seed}" / f"kappa_device_{d}.svg"
            p.parent.mkdir(parents=True, exist_ok=True)
            paths.append(emit_plot(out / "curves.csv", p, seed=seed, device=d))
    return paths


def generate_streams(cfg: ExperimentConfig, out) -> list[Path]:
    from .streams import dump_stream

    out = Path(out) / "streams"
    out.mkdir(parents=True, exist_ok=True)
    scenario = build_scenario(cfg.scaled_scenario())
    paths = []
    for s in scenario.devices:
        p = out / f"device_{s.device_id}.csv"
        dump_stream(s, p)
        paths.append(p)
    return paths
