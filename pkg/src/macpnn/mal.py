"""Mutual assisted learning over a network of progressive models.

Every device follows the same per-point procedure. At a drift it asks every
peer for copies of its stored models, builds an ensemble of its own and the
received models (each grown by one column), and lets them compete for
``num_batches`` mini-batches. After that it keeps the best one. Peers only
talk at drifts.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cpnn import CpnnModel, TrainingBuffer, pad_window, stack_windows
from .errors import ContractError
from .metrics import ConfusionCounts, cohen_kappa
from .streams import DeviceStream, Hyperparameters, NetworkScenario

LOCAL = -1


@dataclass
class MalConfig:
    max_models: int = 10
    prop: float = 0.3
    num_batches: int = 50

    def __post_init__(self):
        if self.max_models < 1:
            raise ContractError("max_models must be at least 1")
        if not 0 < self.prop < 1:
            raise ContractError("prop must be in (0, 1)")

    def num_dp(self, batch_size: int) -> int:
        return self.num_batches * batch_size

    @classmethod
    def from_hyper(cls, hyper: Hyperparameters) -> MalConfig:
        return cls(hyper.max_models, hyper.prop, hyper.num_batches)


def local_slots(prop: float, max_models: int) -> int:
    # round() first so that 0.3 * 10 does not ceil to 4
    return math.ceil(round(prop * max_models, 9))


@dataclass(frozen=True)
class LedgerEntry:
    tick: int
    requester: int
    responder: int
    models: int
    bytes: int


@dataclass
class CommLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def append(self, entry: LedgerEntry):
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    @property
    def total_models(self) -> int:
        return sum(e.models for e in self.entries)

    @property
    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.entries)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "requester", "responder", "models", "bytes"])
            for e in self.entries:
                w.writerow([e.tick, e.requester, e.responder, e.models, e.bytes])

    @classmethod
    def from_csv(cls, path) -> CommLedger:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([LedgerEntry(*(int(r[k]) for k in ("tick", "requester", "responder", "models", "bytes")))
                    for r in rows])


def count_communications(ledger: CommLedger, n: int, n_batches: int):
    """Communications made vs. a scheme talking to every peer each training round.

    Returns ``(ours, naive, ours / naive)`` with ``naive = n (n - 1) N_B``.
    """
    ours = len(ledger)
    naive = n * (n - 1) * n_batches
    return ours, naive, (ours / naive if naive else float("nan"))


def prune_models(models: list, ids: list[int], ts: list[int], max_models: int, prop: float):
    """Keep ``max_models`` models, favouring recent selection timestamps.

    Local models get ``ceil(prop * max_models)`` slots and external ones the
    rest; slots a group cannot fill go to the other group. Ties on timestamp
    keep the earlier entry. Survivors keep their relative order.
    """
    if len(models) <= max_models:
        return list(models), list(ids), list(ts)
    local = [i for i, d in enumerate(ids) if d == LOCAL]
    ext = [i for i, d in enumerate(ids) if d != LOCAL]
    newest = lambda group: sorted(group, key=lambda i: (-ts[i], i))
    n_local = min(len(local), local_slots(prop, max_models))
    n_ext = min(len(ext), max_models - n_local)
    n_local = min(len(local), max_models - n_ext)
    keep = sorted(newest(local)[:n_local] + newest(ext)[:n_ext])
    return [models[i] for i in keep], [ids[i] for i in keep], [ts[i] for i in keep]


@dataclass
class AssistResponse:
    device_id: int
    payloads: list[bytes]
    ts: list[int]

    def models(self) -> list[CpnnModel]:
        return [CpnnModel.from_bytes(p) for p in self.payloads]

    @property
    def n_bytes(self) -> int:
        return sum(len(p) for p in self.payloads)


class DeviceState:
    """Model store, ensemble and selection state of one device.

    ``models``/``ids``/``ts`` are the store (M, IDs, TS). During a trial the
    ensemble is the store itself, index for index; otherwise it holds the
    single selected model.
    """

    def __init__(self, device_id: int, model: CpnnModel, config: MalConfig, clock: int = 0):
        self.device_id = device_id
        self.config = config
        self.models: list[CpnnModel] = [model]
        self.ids: list[int] = [LOCAL]
        self.ts: list[int] = [clock]
        self.ensemble: list[CpnnModel] = [model]
        self.sel = 0
        self.perf: list[ConfusionCounts] = [ConfusionCounts()]
        self.count = 0
        self.buffer = TrainingBuffer(model.batch_size)
        self.history: deque = deque(maxlen=model.window_size)
        self.num_dp = config.num_dp(model.batch_size)
        self.last_origin = LOCAL
        self.last_ensemble_size = 1

    @property
    def in_trial(self) -> bool:
        return len(self.ensemble) > 1

    def respond_assist(self) -> AssistResponse:
        """Serialized copies of every stored model with their selection timestamps."""
        return AssistResponse(self.device_id, [m.to_bytes() for m in self.models], list(self.ts))

    def _drop_losers(self, tick: int):
        for k, m in enumerate(self.ensemble):
            if k != self.sel:
                m.remove_last_column()
        self.ts[self.sel] = tick
        self.ids[self.sel] = LOCAL
        self._purge_external()

    def _purge_external(self):
        keep = [i for i, d in enumerate(self.ids) if d == LOCAL]
        self.models = [self.models[i] for i in keep]
        self.ids = [self.ids[i] for i in keep]
        self.ts = [self.ts[i] for i in keep]

    def handle_drift(self, responses: list[AssistResponse], tick: int):
        if self.in_trial:
            self._drop_losers(tick)
        for r in responses:
            self.models.extend(r.models())
            self.ids.extend([r.device_id] * len(r.payloads))
            self.ts.extend(r.ts)
        if len(self.models) > self.config.max_models:
            self.models, self.ids, self.ts = prune_models(
                self.models, self.ids, self.ts, self.config.max_models, self.config.prop)
        self.ensemble = list(self.models)
        for m in self.ensemble:
            m.add_column()
        self.perf = [ConfusionCounts() for _ in self.ensemble]
        self.sel = 0
        self.count = 0
        self.buffer.clear()

    def _collapse(self, tick: int):
        chosen = self.ensemble[self.sel]
        self._drop_losers(tick)
        self.perf = [self.perf[self.sel]]
        self.ensemble = [chosen]
        self.sel = 0

    def request_assistance(self, peers, tick: int, ledger: CommLedger | None = None):
        """Drift reaction: collect every reachable peer's models, then :meth:`handle_drift`."""
        responses = [p.respond_assist() for p in peers]
        if ledger is not None:
            for r in responses:
                ledger.append(LedgerEntry(tick, self.device_id, r.device_id,
                                          len(r.payloads), r.n_bytes))
        self.handle_drift(responses, tick)

    def _score(self, y: int, labels) -> tuple[int, int, int]:
        # bookkeeping for one point once every member has predicted it
        pred, origin, size = labels[self.sel], self.selected_origin, len(self.ensemble)
        for k, lab in enumerate(labels):
            self.perf[k].update(y, lab)
        self.count += 1
        if len(self.perf) > 1:
            scores = [cohen_kappa(c) for c in self.perf]
            self.sel = max(range(len(scores)), key=lambda k: (scores[k], -k))
        return pred, origin, size

    def _train(self, batch):
        for m in self.ensemble:
            m.train_on_batch(*batch)

    def process_point(self, x, y: int, tick: int, drift: bool = False,
                      peers: list[DeviceState] = (), ledger: CommLedger | None = None) -> int:
        """Test-then-train one point; returns the selected model's prediction.

        The selected model's origin and the ensemble size at prediction time
        are left in ``last_origin`` / ``last_ensemble_size``.
        """
        if drift:
            self.request_assistance(peers, tick, ledger)
        self.history.append(np.asarray(x, dtype=np.float32))
        window = pad_window(self.history, self.history.maxlen)
        labels = [int(m.predict_window(window) >= 0.5) for m in self.ensemble]
        pred, self.last_origin, self.last_ensemble_size = self._score(int(y), labels)
        batch = self.buffer.add(x, y)
        if batch is not None:
            self._train(batch)
        if self.count == self.num_dp:
            self._collapse(tick)
        return pred

    def process_block(self, xs, ys, tick: int):
        """Same as calling :meth:`process_point` on each row, for a block that
        ends no later than the next training flush and contains no drift.

        Parameters only change at flushes, so every member scores the whole
        block in one batched pass. ``tick`` is the clock value of the last row.
        Returns ``(predictions, origins, ensemble_sizes)``.
        """
        xs = np.asarray(xs, dtype=np.float32)
        n = len(xs)
        if self.buffer.count + n > self.buffer.batch_size:
            raise ContractError("block crosses a training flush")
        windows = stack_windows(self.history, xs, self.history.maxlen)
        labels = np.stack([m.predict_windows(windows) >= 0.5 for m in self.ensemble]).astype(np.int64)
        out = np.empty((3, n), dtype=np.int64)
        for i in range(n):
            out[:, i] = self._score(int(ys[i]), labels[:, i].tolist())
            if self.count == self.num_dp and i != n - 1:
                raise ContractError("trial ends inside a block")
        self.history.extend(xs)
        batch = None
        for x, y in zip(xs, ys):
            batch = self.buffer.add(x, y)
        if batch is not None:
            self._train(batch)
        if self.count == self.num_dp:
            self._collapse(tick)
        return out[0], out[1], out[2]

    @property
    def selected_origin(self) -> int:
        return self.ids[self.sel] if self.in_trial else LOCAL

    def audit(self):
        """Raise AssertionError if any state invariant is broken."""
        n = len(self.models)
        assert 1 <= n <= max(self.config.max_models, 1), f"|M|={n}"
        assert len(self.ids) == len(self.ts) == n
        assert len(self.perf) == len(self.ensemble)
        assert 0 <= self.sel < len(self.ensemble)
        if self.in_trial:
            assert all(a is b for a, b in zip(self.ensemble, self.models)) and len(self.ensemble) == n
            assert self.count < self.num_dp
        for m in self.ensemble:
            assert m.trainable is not None, "ensemble member without a trainable column"
        for m in self.models:
            assert all(c.frozen for c in m.columns[:-1])


@dataclass
class DeviceLog:
    device_id: int
    tick: np.ndarray
    concept_id: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray
    origin: np.ndarray
    ensemble_size: np.ndarray
    drift_indices: list[int]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "global_index", "concept_id", "y_true", "y_pred",
                        "selected_model_origin", "ensemble_size"])
            for row in zip(self.tick, self.tick, self.concept_id, self.y_true, self.y_pred,
                           self.origin, self.ensemble_size):
                w.writerow([int(v) for v in row])

    @classmethod
    def from_csv(cls, path, device_id: int = 0) -> DeviceLog:
        a = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        cid = a[:, 2]
        return cls(device_id, a[:, 0], cid, a[:, 3], a[:, 4], a[:, 5], a[:, 6],
                   [int(i) for i in np.flatnonzero(np.diff(cid)) + 1])


@dataclass
class NetworkResult:
    logs: list[DeviceLog]
    ledger: CommLedger

    @property
    def drift_indices(self) -> list[list[int]]:
        return [log.drift_indices for log in self.logs]


def make_model(stream: DeviceStream, hyper: Hyperparameters, seed: int) -> CpnnModel:
    return CpnnModel(stream.features.shape[1], hyper.hidden_size, hyper.window_size,
                     hyper.batch_size, hyper.epochs, hyper.lr, seed)


def run_network(scenario: NetworkScenario, seed: int = 0, peers: bool = True,
                audit: bool = False, offline=None, engine: str = "block") -> NetworkResult:
    """Round-robin simulation on a global clock.

    At tick ``t`` every device whose stream covers ``t`` handles one point,
    in ascending device order. Assistance requests are served synchronously
    from the responders' current state. ``offline(tick, device_id)`` may mark
    peers unreachable; the requester then proceeds with whoever answered.
    Every device starts from identical initial weights.

    ``engine="point"`` steps each device point by point; ``"block"`` defers
    a device's predictions until its next flush or drift, which gives the
    same logs because no state a peer can observe changes in between.
    """
    if engine not in ("block", "point"):
        raise ContractError(f"unknown engine {engine!r}")
    hyper = scenario.hyper
    cfg = MalConfig.from_hyper(hyper)
    streams = scenario.devices
    states = [DeviceState(s.device_id, make_model(s, hyper, seed), cfg, s.offset) for s in streams]
    drifts = [set(s.drift_indices) for s in streams]
    n_pts = [len(s) for s in streams]
    out = [np.zeros((3, n), dtype=np.int64) for n in n_pts]
    pending = [0] * len(streams)
    ledger = CommLedger()
    end = max(s.offset + len(s) for s in streams)
    for tick in range(min(s.offset for s in streams), end):
        for d, (s, st) in enumerate(zip(streams, states)):
            i = tick - s.offset
            if not 0 <= i < n_pts[d]:
                continue
            drift = i in drifts[d]
            helpers = []
            if drift and peers:
                helpers = [p for p in states if p is not st
                           and not (offline and offline(tick, p.device_id))]
            if engine == "point":
                out[d][0, i] = st.process_point(s.features[i], int(s.labels[i]), tick,
                                                drift, helpers, ledger)
                out[d][1, i] = st.last_origin
                out[d][2, i] = st.last_ensemble_size
                if audit:
                    st.audit()
                continue
            if drift:
                st.request_assistance(helpers, tick, ledger)
            a = pending[d]
            if (i + 1 in drifts[d] or i + 1 == n_pts[d]
                    or st.buffer.count + (i - a + 1) == st.buffer.batch_size):
                out[d][:, a:i + 1] = st.process_block(s.features[a:i + 1], s.labels[a:i + 1], tick)
                pending[d] = i + 1
                if audit:
                    st.audit()
    logs = [DeviceLog(s.device_id, s.offset + np.arange(len(s)), s.concept_ids.astype(np.int64),
                      s.labels.astype(np.int64), out[d][0], out[d][1], out[d][2], s.drift_indices)
            for d, s in enumerate(streams)]
    return NetworkResult(logs, ledger)


def run_standalone(stream: DeviceStream, hyper: Hyperparameters, seed: int = 0,
                   kind: str = "cpnn") -> DeviceLog:
    """Single-device baseline, independent of :class:`DeviceState`.

    ``cpnn`` grows one column per drift (the drift is signalled by the known
    concept boundaries) and drops the partial mini-batch; ``clstm`` keeps
    training its single column straight through.
    """
    if kind not in ("cpnn", "clstm"):
        raise ContractError(f"unknown standalone model kind {kind!r}")
    model = make_model(stream, hyper, seed)
    drifts = set(stream.drift_indices)
    n = len(stream)
    preds = np.zeros(n, dtype=np.int64)
    a = 0
    for i in range(n):
        if i == a and i in drifts and kind == "cpnn":
            model.add_column()
            model.buffer.clear()
        if i + 1 in drifts or i + 1 == n or model.buffer.count + (i - a + 1) == model.batch_size:
            xs = stream.features[a:i + 1]
            windows = stack_windows(model.history, xs, model.window_size)
            preds[a:i + 1] = model.predict_windows(windows) >= 0.5
            model.history.extend(np.asarray(xs, dtype=np.float32))
            for x, y in zip(xs, stream.labels[a:i + 1]):
                model.learn_one(x, y)
            a = i + 1
    return DeviceLog(stream.device_id, stream.offset + np.arange(n), stream.concept_ids.astype(np.int64),
                     stream.labels.astype(np.int64), preds, np.full(n, LOCAL, dtype=np.int64),
                     np.ones(n, dtype=np.int64), stream.drift_indices)
