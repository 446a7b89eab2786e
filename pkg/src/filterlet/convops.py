"""Convolution operators over dense and pruned weight formats.

Every operator returns the raw accumulator map of shape (out_h, out_w,
n_filters).  int8 inputs accumulate exactly in 64-bit integers; float32
inputs accumulate in float64 and are cast back to float32 once at the end,
so the dense path and every sparse path agree bitwise on integer data and
to float32 rounding on real data.  Lane width only changes how the dot
products are chunked, never what they sum to.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, DataError, EmptyOutputError
from .fwcs import CsrLayer, FwcsLayer
from .tensor import ConvLayerSpec, Tensor, patch_matrix

VALID_LANES = (2, 4, 8, 16)


@dataclass(frozen=True)
class LaneConfig:
    """Vector unit shape: lane count plus register budget."""

    lanes: int = 4
    register_count: int = 8
    register_bits: int = 128

    def __post_init__(self):
        if self.lanes not in VALID_LANES:
            raise ConfigError(f"lanes {self.lanes} not in {VALID_LANES}")
        if self.lanes * 8 > self.register_bits:
            raise ConfigError("lanes do not fit the register width at 8-bit elements")
        if self.register_count < 3:
            raise ConfigError("need at least 3 vector registers")


class ComputeSchedule(Enum):
    """Loop order of the sparse operator; both orders compute the same values."""

    DEFAULT = "default"
    REORDERED = "reordered"


def _acc_dtype(t: Tensor):
    return np.int64 if t.dtype == "int8" else np.float64


def _finish(acc: np.ndarray, spec: ConvLayerSpec, dtype: str,
            bias: np.ndarray | None) -> np.ndarray:
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (spec.n_filters,):
            raise DataError(f"bias shape {bias.shape} != ({spec.n_filters},)")
        acc = acc + bias.astype(acc.dtype)
    out = acc.reshape(spec.out_h, spec.out_w, spec.n_filters)
    if dtype == "float32":
        return out.astype(np.float32)
    return out


def conv_dense(input: Tensor, filters: Tensor, spec: ConvLayerSpec,
               bias: np.ndarray | None = None) -> np.ndarray:
    """Reference convolution: o[x,y,n] = sum_{h,w,c} k[n,h,w,c] * f[x*s+h, y*s+w, c].

    This is the oracle every sparse path is checked against.
    """
    if filters.dims != spec.weight_dims:
        raise DataError(f"filter dims {filters.dims} != {spec.weight_dims}")
    if input.dtype != filters.dtype:
        raise DataError("input/filter dtype mismatch")
    acc = _acc_dtype(input)
    p = patch_matrix(input, spec).astype(acc)
    w = filters.to_array().reshape(spec.n_filters, -1).astype(acc)
    out = p @ w.T
    return _finish(out, spec, input.dtype, bias)


def _chunk_bounds(size: int, lanes: int):
    """Start/length of each lane-wide dot-product chunk, with predicated tail."""
    bounds = []
    k = 0
    while k < size:
        bounds.append((k, min(lanes, size - k)))
        k += lanes
    return bounds


def conv_fwcs(input: Tensor, layer: FwcsLayer, spec: ConvLayerSpec,
              lanes: LaneConfig, bias: np.ndarray | None = None,
              sorted_accumulation: bool = False) -> np.ndarray:
    """Sparse operator in the default order: positions outermost.

    For each output position the receptive field is prefetched, then every
    retained filterlet contributes ceil(size/lanes) chunked MACs gathered at
    the offset its c_ptr entry names.  ``sorted_accumulation`` sums each
    output's chunk contributions in value order instead of stream order,
    which makes float results schedule-independent for tests.
    """
    if input.dtype != layer.dtype:
        raise DataError("input/layer dtype mismatch")
    layer.validate(spec)
    acc = _acc_dtype(input)
    p = patch_matrix(input, spec).astype(acc)
    arr = layer.arr.astype(acc)
    chunks = _chunk_bounds(layer.size, lanes.lanes)
    n_pos = spec.out_positions
    out = np.zeros((n_pos, spec.n_filters), dtype=acc)
    parts = [[[] for _ in range(spec.n_filters)] for _ in range(n_pos)] \
        if sorted_accumulation else None
    for pos in range(n_pos):
        buf = p[pos]
        for n in range(spec.n_filters):
            for j in layer.filterlets_of(n):
                base = int(layer.c_ptr[j])
                off = j * layer.size
                for k, cl in chunks:
                    v = buf[base + k:base + k + cl] @ arr[off + k:off + k + cl]
                    if parts is None:
                        out[pos, n] += v
                    else:
                        parts[pos][n].append(v)
    if parts is not None:
        for pos in range(n_pos):
            for n in range(spec.n_filters):
                out[pos, n] = np.sum(np.sort(np.array(parts[pos][n], dtype=acc)))
    return _finish(out, spec, input.dtype, bias)


def conv_fwcs_reordered(input: Tensor, layer: FwcsLayer, spec: ConvLayerSpec,
                        lanes: LaneConfig, bias: np.ndarray | None = None,
                        sorted_accumulation: bool = False) -> np.ndarray:
    """Sparse operator with filterlets outermost over tiles of output positions.

    One filterlet's weights stay resident while every position in the tile
    consumes them; the tile width is the register budget minus the two
    alternating feature registers.  Same sums as :func:`conv_fwcs`.
    """
    if input.dtype != layer.dtype:
        raise DataError("input/layer dtype mismatch")
    layer.validate(spec)
    acc = _acc_dtype(input)
    p = patch_matrix(input, spec).astype(acc)
    arr = layer.arr.astype(acc)
    chunks = _chunk_bounds(layer.size, lanes.lanes)
    tile = max(1, lanes.register_count - 2)
    n_pos = spec.out_positions
    out = np.zeros((n_pos, spec.n_filters), dtype=acc)
    parts = [[[] for _ in range(spec.n_filters)] for _ in range(n_pos)] \
        if sorted_accumulation else None
    for t0 in range(0, n_pos, tile):
        t1 = min(t0 + tile, n_pos)
        pt = p[t0:t1]
        for n in range(spec.n_filters):
            for j in layer.filterlets_of(n):
                base = int(layer.c_ptr[j])
                off = j * layer.size
                for k, cl in chunks:
                    seg = arr[off + k:off + k + cl]
                    vals = pt[:, base + k:base + k + cl] @ seg
                    if parts is None:
                        out[t0:t1, n] += vals
                    else:
                        for i, v in enumerate(vals):
                            parts[t0 + i][n].append(v)
    if parts is not None:
        for pos in range(n_pos):
            for n in range(spec.n_filters):
                out[pos, n] = np.sum(np.sort(np.array(parts[pos][n], dtype=acc)))
    return _finish(out, spec, input.dtype, bias)


def conv_csr(input: Tensor, layer: CsrLayer, spec: ConvLayerSpec,
             bias: np.ndarray | None = None) -> np.ndarray:
    """Per-weight gather-multiply-accumulate over the CSR baseline."""
    if input.dtype != layer.dtype:
        raise DataError("input/layer dtype mismatch")
    layer.validate(spec)
    acc = _acc_dtype(input)
    p = patch_matrix(input, spec).astype(acc)
    arr = layer.arr.astype(acc)
    out = np.zeros((spec.out_positions, spec.n_filters), dtype=acc)
    for n in range(spec.n_filters):
        lo, hi = int(layer.f_idx[n]), int(layer.f_idx[n + 1])
        if hi > lo:
            idxs = layer.c_ptr[lo:hi]
            out[:, n] = p[:, idxs] @ arr[lo:hi]
    return _finish(out, spec, input.dtype, bias)


def conv_structured(input: Tensor, filters: Tensor, kept_filters,
                    spec: ConvLayerSpec, bias: np.ndarray | None = None) -> np.ndarray:
    """Whole-filter pruning baseline: pruned output channels disappear."""
    kept = np.asarray(kept_filters, dtype=bool)
    if kept.shape != (spec.n_filters,):
        raise DataError(f"kept_filters shape {kept.shape} != ({spec.n_filters},)")
    if not kept.any():
        raise EmptyOutputError("all filters pruned; no output channels left")
    if filters.dims != spec.weight_dims:
        raise DataError(f"filter dims {filters.dims} != {spec.weight_dims}")
    sub_spec = ConvLayerSpec(
        n_filters=int(kept.sum()), kernel_h=spec.kernel_h, kernel_w=spec.kernel_w,
        channels=spec.channels, input_h=spec.input_h, input_w=spec.input_w,
        stride=spec.stride,
    )
    sub_w = Tensor.from_array(filters.to_array()[kept], filters.dtype)
    sub_bias = None if bias is None else np.asarray(bias)[kept]
    return conv_dense(input, sub_w, sub_spec, sub_bias)
