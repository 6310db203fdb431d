"""Progressive-column anytime classifier.

Each column is an LSTM plus a sigmoid head. Column ``k > 0`` reads the original
features concatenated with the previous column's hidden state at the same
window position. Only the last column trains; older columns are frozen and
stored as INT8.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericalError
from .nn import (AdamState, HeadParams, LstmParams, adam_step, backprop_batch, forward_batch,
                 head_probabilities, init_head, init_lstm, param_dict, windows_hidden)
from .quantize import QuantizedTensor, quantize_tensor

MAGIC = b"CPNN"
FORMAT_VERSION = 1
_QUANTIZED_NAMES = ("w_ih", "w_hh", "head_w")


def build_training_sequences(features: np.ndarray, labels: np.ndarray, window_size: int):
    """All ``B - W + 1`` overlapping windows of a mini-batch.

    Returns ``(sequences, last_labels)`` with shapes ``(B-W+1, W, F)`` and
    ``(B-W+1,)``; sequence ``i`` covers rows ``i .. i+W-1``.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    if features.ndim != 2 or len(features) != len(labels):
        raise ContractError("features must be (B, F) with one label per row")
    if len(features) < window_size:
        raise ContractError(f"batch of {len(features)} points is shorter than window {window_size}")
    seqs = sliding_window_view(features, window_size, axis=0).transpose(0, 2, 1)
    return np.ascontiguousarray(seqs), labels[window_size - 1:].copy()


def column_input(item_features: np.ndarray, prev_hidden: np.ndarray | None = None) -> np.ndarray:
    """Input of a column: raw features, plus the previous column's hidden output if any."""
    if prev_hidden is None:
        return np.asarray(item_features)
    return np.concatenate([item_features, prev_hidden], axis=-1)


@dataclass
class Column:
    lstm: LstmParams
    head: HeadParams
    frozen: bool = False
    quantized: dict[str, QuantizedTensor] | None = None

    @property
    def input_size(self) -> int:
        return self.lstm.input_size

    def freeze(self):
        """Quantize the weight matrices and make the dequantized copies authoritative."""
        if self.frozen:
            return
        tensors = {"w_ih": self.lstm.w_ih, "w_hh": self.lstm.w_hh, "head_w": self.head.w}
        self.quantized = {name: quantize_tensor(t) for name, t in tensors.items()}
        self._load_dequantized()
        self.frozen = True

    def _load_dequantized(self):
        q = self.quantized
        self.lstm = LstmParams(q["w_ih"].dequantize(), q["w_hh"].dequantize(), self.lstm.b)
        self.head = HeadParams(q["head_w"].dequantize(), self.head.b)


class TrainingBuffer:
    """Accumulates points until a full mini-batch is available."""

    def __init__(self, batch_size: int):
        self.batch_size = batch_size
        self._x: list[np.ndarray] = []
        self._y: list[int] = []

    @property
    def count(self) -> int:
        return len(self._y)

    def add(self, x, y):
        """Buffer one point; returns ``(X, y)`` and empties the buffer when full."""
        self._x.append(np.asarray(x, dtype=np.float32))
        self._y.append(int(y))
        if len(self._y) < self.batch_size:
            return None
        batch = np.stack(self._x), np.asarray(self._y, dtype=np.int8)
        self.clear()
        return batch

    def clear(self):
        self._x.clear()
        self._y.clear()


class CpnnModel:
    """Progressive LSTM columns with an anytime (many-to-one) head.

    New columns are initialized from ``seed`` and the column index, so two
    models built with the same seed grow identical fresh columns.
    """

    def __init__(self, input_size: int, hidden_size: int = 50, window_size: int = 10,
                 batch_size: int = 128, epochs: int = 10, lr: float = 0.01, seed: int = 0,
                 _columns: list[Column] | None = None):
        if window_size > batch_size:
            raise ContractError(f"window {window_size} exceeds mini-batch size {batch_size}")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.window_size = window_size
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.columns: list[Column] = []
        self.optimizer = AdamState(lr=lr)
        self.history: deque = deque(maxlen=window_size)
        self.buffer = TrainingBuffer(batch_size)
        if _columns is None:
            self.columns.append(self._fresh_column())
        else:
            self.columns = _columns

    def _fresh_column(self) -> Column:
        rng = np.random.default_rng([self.seed, len(self.columns)])
        n_in = self.input_size if not self.columns else self.input_size + self.hidden_size
        lstm = init_lstm(n_in, self.hidden_size, rng)
        return Column(lstm, init_head(self.hidden_size, rng))

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @property
    def trainable(self) -> Column | None:
        last = self.columns[-1]
        return None if last.frozen else last

    # -- structure -----------------------------------------------------------

    def add_column(self):
        """Freeze and quantize the current last column, then append a fresh one."""
        self.columns[-1].freeze()
        self.columns.append(self._fresh_column())
        self.optimizer = AdamState(lr=self.lr)
        return self

    def remove_last_column(self):
        if len(self.columns) < 2:
            raise ContractError("cannot remove the only column of a model")
        self.columns.pop()
        self.optimizer = AdamState(lr=self.lr)
        return self

    # -- inference -----------------------------------------------------------

    def last_column_input(self, windows: np.ndarray) -> np.ndarray:
        """Input of the last column for a stack of windows (N x W x F)."""
        windows = np.asarray(windows, dtype=np.float32)
        inp = windows
        for col in self.columns[:-1]:
            inp = column_input(windows, windows_hidden(inp, col.lstm))
        return inp

    def predict_windows(self, windows: np.ndarray) -> np.ndarray:
        """Probability of label 1 for the last item of each window (N x W x F)."""
        windows = np.asarray(windows)
        if windows.ndim != 3 or windows.shape[2] != self.input_size:
            raise ContractError(f"windows of shape {windows.shape}, model expects (N, W, {self.input_size})")
        last = self.columns[-1]
        hidden = windows_hidden(self.last_column_input(windows), last.lstm)
        return head_probabilities(hidden[:, -1], last.head)

    def predict_window(self, window: np.ndarray) -> float:
        """Probability of label 1 for the last item of ``window`` (W x F)."""
        # two identical rows keep BLAS on the same gemm path as block
        # prediction (a single row goes through gemv and rounds differently)
        window = np.asarray(window)
        return float(self.predict_windows(np.stack([window, window]))[0])

    def predict(self, x) -> tuple[float, int]:
        """Append ``x`` to the model's own recent history and predict it."""
        self.history.append(np.asarray(x, dtype=np.float32))
        p = self.predict_window(pad_window(self.history, self.window_size))
        return p, int(p >= 0.5)

    # -- training ------------------------------------------------------------

    def _frozen_features(self, seqs: np.ndarray) -> np.ndarray:
        inp = seqs
        for col in self.columns[:-1]:
            hidden, _ = forward_batch(inp, col.lstm)
            inp = column_input(seqs, hidden)
        return inp

    def train_on_batch(self, features: np.ndarray, labels: np.ndarray) -> list[float]:
        """Train the last column for ``epochs`` full-batch steps; returns per-epoch losses."""
        col = self.trainable
        if col is None:
            raise ContractError("model has no trainable column")
        if len(features) != self.batch_size:
            raise ContractError(f"expected a full mini-batch of {self.batch_size}, got {len(features)}")
        seqs, last_labels = build_training_sequences(features, labels, self.window_size)
        inp = self._frozen_features(seqs.astype(np.float32))
        params = param_dict(col.lstm, col.head)
        losses = []
        for _ in range(self.epochs):
            loss, grads = backprop_batch(col.lstm, col.head, inp, last_labels)
            losses.append(loss)
            adam_step(params, grads, self.optimizer)
        if not np.all(np.isfinite(losses)):
            raise NumericalError(f"non-finite training loss: {losses}")
        return losses

    def learn_one(self, x, y):
        """Buffer one labelled point; trains when the mini-batch fills."""
        batch = self.buffer.add(x, y)
        if batch is not None:
            return self.train_on_batch(*batch)
        return None

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        return serialize_header(self) + b"".join(serialize_column(c) for c in self.columns)

    @classmethod
    def from_bytes(cls, buf: bytes) -> CpnnModel:
        if buf[:4] != MAGIC:
            raise ContractError("not a serialized model")
        (version, f, h, w, b, epochs, lr, seed, n_cols) = struct.unpack_from(_HEADER, buf, 4)
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported model format version {version}")
        offset = 4 + struct.calcsize(_HEADER)
        columns = []
        for _ in range(n_cols):
            col, offset = _read_column(buf, offset)
            columns.append(col)
        return cls(f, h, w, b, epochs, lr, seed, _columns=columns)

    def copy(self) -> CpnnModel:
        return CpnnModel.from_bytes(self.to_bytes())


def pad_window(history, window_size: int) -> np.ndarray:
    """Stack the recent history into a W x F window, left-padding with the
    earliest available point while fewer than W points exist."""
    items = list(history)
    if not items:
        raise ContractError("no points observed yet")
    if len(items) < window_size:
        items = [items[0]] * (window_size - len(items)) + items
    return np.stack(items)


def stack_windows(prefix, points: np.ndarray, window_size: int) -> np.ndarray:
    """Windows ending at each of ``points`` (n x F), given up to W-1 earlier points.

    Matches :func:`pad_window` applied point by point: while fewer than W
    points exist, windows are left-padded with the first point seen.
    """
    points = np.asarray(points, dtype=np.float32)
    prefix = [np.asarray(p, dtype=np.float32) for p in list(prefix)[-(window_size - 1):]] \
        if window_size > 1 else []
    seq = np.concatenate([np.stack(prefix), points]) if prefix else points
    short = window_size - 1 - len(prefix)
    if short > 0:
        seq = np.concatenate([np.repeat(seq[:1], short, axis=0), seq])
    return np.ascontiguousarray(sliding_window_view(seq, window_size, axis=0).transpose(0, 2, 1))


_HEADER = "<BIIIIIdQI"


def serialize_header(model: CpnnModel) -> bytes:
    return MAGIC + struct.pack(_HEADER, FORMAT_VERSION, model.input_size, model.hidden_size,
                               model.window_size, model.batch_size, model.epochs, model.lr,
                               model.seed, len(model.columns))


def _float_payload(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    return struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def _read_float(buf: bytes, offset: int):
    (ndim,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    a = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
    return a.astype(np.float32), offset + 4 * count


def serialize_column(col: Column, force_float: bool = False) -> bytes:
    """Frozen flag, then either INT8 payloads (frozen) or float32 tensors; biases are float."""
    quantized = col.frozen and not force_float
    out = [struct.pack("<B", int(quantized))]
    tensors = {"w_ih": col.lstm.w_ih, "w_hh": col.lstm.w_hh, "b": col.lstm.b,
               "head_w": col.head.w, "head_b": col.head.b}
    for name, arr in tensors.items():
        if quantized and name in _QUANTIZED_NAMES:
            out.append(col.quantized[name].to_bytes())
        else:
            out.append(_float_payload(arr))
    return b"".join(out)


def _read_column(buf: bytes, offset: int):
    (quantized,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    arrays, qs = {}, {}
    for name in ("w_ih", "w_hh", "b", "head_w", "head_b"):
        if quantized and name in _QUANTIZED_NAMES:
            qs[name], offset = QuantizedTensor.from_bytes(buf, offset)
            arrays[name] = qs[name].dequantize()
        else:
            arrays[name], offset = _read_float(buf, offset)
    col = Column(LstmParams(arrays["w_ih"], arrays["w_hh"], arrays["b"]),
                 HeadParams(arrays["head_w"], arrays["head_b"]),
                 frozen=bool(quantized), quantized=qs or None)
    return col, offset
