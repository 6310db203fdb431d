"""INT8 affine quantization of frozen column weights and model size accounting."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

QMIN, QMAX = -128, 127


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray  # int8, same shape as the source tensor
    scale: float
    zero_point: int

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return (self.scale * (self.values.astype(np.float64) - self.zero_point)).astype(dtype)

    @property
    def shape(self):
        return self.values.shape

    def to_bytes(self) -> bytes:
        """Shape header, float64 scale, int8 zero point, row-major int8 values."""
        header = struct.pack("<B", self.values.ndim) + struct.pack(
            f"<{self.values.ndim}I", *self.values.shape)
        return (header + struct.pack("<db", self.scale, self.zero_point)
                + np.ascontiguousarray(self.values, dtype=np.int8).tobytes())

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0):
        """Decode one payload; returns ``(tensor, new_offset)``."""
        (ndim,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        scale, zero_point = struct.unpack_from("<db", buf, offset)
        offset += 9
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(buf, dtype=np.int8, count=count, offset=offset).reshape(shape).copy()
        return cls(values, scale, zero_point), offset + count


def quantize_tensor(weights) -> QuantizedTensor:
    """Per-tensor affine INT8 quantization.

    The quantized range always contains zero, so zero stays exactly
    representable and an all-zero tensor round-trips exactly (scale 1).
    Already-quantized input is returned unchanged.
    """
    if isinstance(weights, QuantizedTensor):
        return weights
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ContractError("cannot quantize a tensor with non-finite values")
    lo = min(float(w.min(initial=0.0)), 0.0)
    hi = max(float(w.max(initial=0.0)), 0.0)
    if hi == lo:
        return QuantizedTensor(np.zeros(w.shape, dtype=np.int8), 1.0, 0)
    scale = (hi - lo) / (QMAX - QMIN)
    zero_point = int(np.clip(np.rint(QMIN - lo / scale), QMIN, QMAX))
    q = np.clip(np.rint(w / scale) + zero_point, QMIN, QMAX).astype(np.int8)
    return QuantizedTensor(q, scale, zero_point)


def dequantize(q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    return q.dequantize(dtype)


def quantized_forward(window: np.ndarray, column) -> np.ndarray:
    """Hidden states of a frozen column over ``window``, weights dequantized on read."""
    from .nn import sequence_hidden

    if not column.frozen:
        raise ContractError("quantized_forward needs a frozen column")
    return sequence_hidden(window, column.lstm)


@dataclass
class SizeReport:
    float_model_bytes: int
    quantized_model_bytes: int
    float_column_bytes: list[int]
    quantized_column_bytes: list[int]
    header_bytes: int

    @property
    def compression_ratio(self) -> float:
        return self.quantized_model_bytes / self.float_model_bytes


def model_size_bytes(model) -> SizeReport:
    """Exact serialized sizes of ``model`` as stored, and with every column in float."""
    from .cpnn import serialize_column, serialize_header

    header = len(serialize_header(model))
    quant = [len(serialize_column(c)) for c in model.columns]
    flt = [len(serialize_column(c, force_float=True)) for c in model.columns]
    return SizeReport(
        float_model_bytes=header + sum(flt),
        quantized_model_bytes=header + sum(quant),
        float_column_bytes=flt,
        quantized_column_bytes=quant,
        header_bytes=header,
    )
