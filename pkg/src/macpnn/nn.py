"""Single-layer LSTM with a sigmoid head, trained by backpropagation through time.

Gate layout follows the usual (input, forget, cell, output) stacking along the
first axis of the weight matrices, so ``w_ih`` is ``4H x F``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError

PROB_EPS = 1e-7


@dataclass
class LstmParams:
    w_ih: np.ndarray  # (4H, F)
    w_hh: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        h4, f = self.w_ih.shape
        if h4 % 4 or self.w_hh.shape != (h4, h4 // 4) or self.b.shape != (h4,):
            raise ContractError(
                f"inconsistent LSTM shapes: w_ih {self.w_ih.shape}, "
                f"w_hh {self.w_hh.shape}, b {self.b.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    def astype(self, dtype) -> LstmParams:
        return LstmParams(*(a.astype(dtype) for a in (self.w_ih, self.w_hh, self.b)))


@dataclass
class HeadParams:
    w: np.ndarray  # (H,)
    b: np.ndarray  # (1,)

    def astype(self, dtype) -> HeadParams:
        return HeadParams(self.w.astype(dtype), self.b.astype(dtype))


PARAM_NAMES = ("w_ih", "w_hh", "b", "head_w", "head_b")


def param_dict(lstm: LstmParams, head: HeadParams) -> dict[str, np.ndarray]:
    """Name -> array view of every trainable tensor of one column."""
    return {"w_ih": lstm.w_ih, "w_hh": lstm.w_hh, "b": lstm.b,
            "head_w": head.w, "head_b": head.b}


def init_lstm(input_size: int, hidden_size: int, rng: np.random.Generator,
              dtype=np.float32) -> LstmParams:
    bound = 1.0 / np.sqrt(hidden_size)
    u = lambda *shape: rng.uniform(-bound, bound, size=shape).astype(dtype)
    return LstmParams(u(4 * hidden_size, input_size), u(4 * hidden_size, hidden_size),
                      u(4 * hidden_size))


def init_head(hidden_size: int, rng: np.random.Generator, dtype=np.float32) -> HeadParams:
    bound = 1.0 / np.sqrt(hidden_size)
    return HeadParams(rng.uniform(-bound, bound, size=hidden_size).astype(dtype),
                      rng.uniform(-bound, bound, size=1).astype(dtype))


def sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _check_input(x, lstm, ndim):
    if x.ndim != ndim or x.shape[-1] != lstm.input_size:
        raise ContractError(f"input shape {x.shape} does not match input size {lstm.input_size}")
    if x.shape[-2] < 1:
        raise ContractError("empty sequence")


def sequence_hidden(x: np.ndarray, lstm: LstmParams) -> np.ndarray:
    """Hidden states (W x H) of one sequence, starting from zero state."""
    x = np.asarray(x, dtype=lstm.w_hh.dtype)
    _check_input(x, lstm, 2)
    return windows_hidden(x[None], lstm)[0]


def windows_hidden(x: np.ndarray, lstm: LstmParams) -> np.ndarray:
    """Hidden states (N x W x H) of N independent windows, each from zero state."""
    x = np.asarray(x, dtype=lstm.w_hh.dtype)
    _check_input(x, lstm, 3)
    hidden, _ = forward_batch(x, lstm)
    return np.ascontiguousarray(hidden)


def head_probabilities(h_last: np.ndarray, head: HeadParams) -> np.ndarray:
    """Sigmoid head over rows of ``h_last`` (N x H), evaluated in float64."""
    h = np.asarray(h_last, dtype=np.float64)
    return sigmoid(h @ head.w.astype(np.float64) + np.float64(head.b[0]))


def head_probability(h_last: np.ndarray, head: HeadParams) -> float:
    return float(head_probabilities(np.asarray(h_last)[None], head)[0])


def lstm_forward(sequence: np.ndarray, lstm: LstmParams, head: HeadParams):
    """Many-to-one forward pass: returns the hidden states and the probability
    produced by the head from the last item's hidden state."""
    hidden = sequence_hidden(sequence, lstm)
    return hidden, head_probability(hidden[-1], head)


def bce_loss(probability, label):
    """Binary cross entropy; arrays are averaged."""
    p = np.clip(np.asarray(probability, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(label, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def _gate_scale(hs: int, dtype) -> np.ndarray:
    # 0.5 on the sigmoid gates (i, f, o), 1 on the cell candidate g
    d = np.full(4 * hs, 0.5, dtype=dtype)
    d[2 * hs:3 * hs] = 1.0
    return d


def _forward_time_major(xt: np.ndarray, lstm: LstmParams):
    """Forward over ``xt`` of shape (W, N, F); hidden/cells carry a zero row 0.

    Weights are pre-scaled by 0.5 on the sigmoid rows (exact in floating
    point), so a single tanh over all four gates yields tanh(z/2) there and
    tanh(z) for the cell candidate; sigmoid(z) = (tanh(z/2) + 1) / 2.
    Returns activated gates, hidden states, cell states and tanh(cells[1:]).
    """
    w, n, f = xt.shape
    hs = lstm.hidden_size
    dtype = lstm.w_hh.dtype
    d = _gate_scale(hs, dtype)
    gates = (xt.reshape(w * n, f) @ (lstm.w_ih * d[:, None]).T).reshape(w, n, 4 * hs)
    gates += lstm.b * d
    hidden = np.zeros((w + 1, n, hs), dtype=dtype)
    cells = np.zeros((w + 1, n, hs), dtype=dtype)
    tanh_c = np.empty((w, n, hs), dtype=dtype)
    w_hh_t = np.ascontiguousarray((lstm.w_hh * d[:, None]).T)
    shift = np.where(d == 0.5, 0.5, 0.0).astype(dtype)  # a*d + shift: exact for every gate
    tmp = np.empty((n, hs), dtype=dtype)
    for t in range(w):
        a = gates[t]
        a += hidden[t] @ w_hh_t
        np.tanh(a, out=a)
        a *= d
        a += shift
        c = cells[t + 1]
        np.multiply(a[:, hs:2 * hs], cells[t], out=c)
        np.multiply(a[:, :hs], a[:, 2 * hs:3 * hs], out=tmp)
        c += tmp
        np.tanh(c, out=tanh_c[t])
        np.multiply(tanh_c[t], a[:, 3 * hs:], out=hidden[t + 1])
    return gates, hidden, cells, tanh_c


def forward_batch(x: np.ndarray, lstm: LstmParams):
    """Batched forward over ``x`` of shape (N, W, F).

    Returns the hidden states (N, W, H) and a time-major cache for
    :func:`backprop_batch`.
    """
    xt = np.ascontiguousarray(np.asarray(x).transpose(1, 0, 2), dtype=lstm.w_hh.dtype)
    cache = _forward_time_major(xt, lstm)
    return cache[1][1:].transpose(1, 0, 2), (xt, *cache)


def backprop_batch(lstm: LstmParams, head: HeadParams, x: np.ndarray, labels):
    """Mean BCE over the last item of every sequence and its gradients.

    ``x`` has shape (N, W, F) and already contains whatever frozen-column
    features the column consumes; only this column's tensors get gradients.
    Returns ``(loss, grads)`` with ``grads`` keyed like :func:`param_dict`.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[2] != lstm.input_size:
        raise ContractError(f"batch shape {x.shape} incompatible with input size {lstm.input_size}")
    y = np.asarray(labels, dtype=lstm.w_hh.dtype)
    n, w, _ = x.shape
    hs = lstm.hidden_size
    _, (xt, gates, hidden, cells, tanh_c) = forward_batch(x, lstm)
    h_last = hidden[w]
    p = sigmoid(h_last @ head.w + head.b[0])
    loss = bce_loss(p, y)
    if not np.isfinite(loss) or not np.all(np.isfinite(h_last)):
        raise NumericalError(
            f"non-finite forward pass: loss={loss}, "
            f"max|h|={np.nanmax(np.abs(hidden))}, "
            f"max|w_hh|={np.max(np.abs(lstm.w_hh))}"
        )

    dlogit = (p - y) / n
    dh = np.outer(dlogit, head.w)
    dc = np.zeros((n, hs), dtype=dh.dtype)
    dz_all = np.empty((w, n, 4 * hs), dtype=dh.dtype)
    for t in range(w - 1, -1, -1):
        a = gates[t]
        i, f, g, o = a[:, :hs], a[:, hs:2 * hs], a[:, 2 * hs:3 * hs], a[:, 3 * hs:]
        tc = tanh_c[t]
        dz = dz_all[t]
        dc += dh * o * (1 - tc * tc)
        dz[:, :hs] = dc * g * i * (1 - i)
        dz[:, hs:2 * hs] = dc * cells[t] * f * (1 - f)
        dz[:, 2 * hs:3 * hs] = dc * i * (1 - g * g)
        dz[:, 3 * hs:] = dh * tc * o * (1 - o)
        dh = dz @ lstm.w_hh
        dc *= f
    # weight gradients summed over every step and sequence in one product
    dz_flat = dz_all.reshape(w * n, 4 * hs)
    g_w_ih = dz_flat.T @ xt.reshape(w * n, -1)
    g_w_hh = dz_flat.T @ hidden[:w].reshape(w * n, hs)
    g_b = dz_flat.sum(axis=0)
    grads = {"w_ih": g_w_ih, "w_hh": g_w_hh, "b": g_b,
             "head_w": (h_last.T @ dlogit).astype(head.w.dtype),
             "head_b": np.array([dlogit.sum()], dtype=head.b.dtype)}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    return loss, grads


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if params.keys() != grads.keys():
        raise ContractError(f"parameter/gradient names differ: {sorted(params)} vs {sorted(grads)}")
    state.step += 1
    t = state.step
    corr1 = 1 - state.beta1 ** t
    corr2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)
    return params, state
