"""Channel-major tensors, convolution layer geometry, and 8-bit quantization.

Feature maps are stored as (height, width, channels) with the channel index
varying fastest in memory, so all values at one spatial position sit in one
contiguous run.  Filter banks add a leading filter axis (n, kh, kw, c) and
keep the same fastest-to-slowest ordering, which makes every filterlet (the
c-long run at one kernel position) a contiguous slice of the flat weight
array.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, CorruptionError, DataError

DTYPES = {"float32": np.float32, "int8": np.int8}
_DTYPE_TAGS = {"float32": 0, "int8": 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}

TENSOR_MAGIC = b"DTTN"


@dataclass(frozen=True)
class Tensor:
    """Immutable flat value container with channel-major indexing.

    ``data`` holds ``prod(dims)`` values; the last axis varies fastest, so a
    rank-3 tensor maps coordinate (h, w, c) to flat index (h*W + w)*C + c.
    """

    dims: tuple[int, ...]
    dtype: str
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise DataError(f"unsupported dtype {self.dtype!r}")
        dims = tuple(int(d) for d in self.dims)
        if any(d <= 0 for d in dims):
            raise DataError(f"non-positive extent in {dims}")
        flat = np.ascontiguousarray(self.data, dtype=DTYPES[self.dtype]).reshape(-1)
        if flat.size != int(np.prod(dims)):
            raise DataError(
                f"data length {flat.size} != prod{dims} = {int(np.prod(dims))}"
            )
        flat = flat.copy()
        flat.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", flat)

    @classmethod
    def from_array(cls, arr, dtype: str | None = None) -> "Tensor":
        arr = np.asarray(arr)
        if dtype is None:
            dtype = "int8" if arr.dtype == np.int8 else "float32"
        return cls(tuple(arr.shape), dtype, arr.reshape(-1))

    @classmethod
    def zeros(cls, dims, dtype: str = "float32") -> "Tensor":
        n = int(np.prod([int(d) for d in dims]))
        return cls(tuple(dims), dtype, np.zeros(n, dtype=DTYPES[dtype]))

    @property
    def nelems(self) -> int:
        return self.data.size

    def to_array(self) -> np.ndarray:
        """Read-only view shaped as ``dims``."""
        return self.data.reshape(self.dims)

    def item(self, *coords) -> float:
        return self.to_array()[coords]


@dataclass(frozen=True)
class ConvLayerSpec:
    """Geometry of one convolution layer (valid padding, square stride)."""

    n_filters: int
    kernel_h: int
    kernel_w: int
    channels: int
    input_h: int
    input_w: int
    stride: int = 1

    def __post_init__(self):
        for name in ("n_filters", "kernel_h", "kernel_w", "channels",
                     "input_h", "input_w", "stride"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.kernel_h > self.input_h or self.kernel_w > self.input_w:
            raise DataError("kernel does not fit inside the input")

    @property
    def out_h(self) -> int:
        return (self.input_h - self.kernel_h) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.input_w - self.kernel_w) // self.stride + 1

    @property
    def out_positions(self) -> int:
        return self.out_h * self.out_w

    @property
    def filterlets_per_filter(self) -> int:
        return self.kernel_h * self.kernel_w

    @property
    def filterlet_length(self) -> int:
        return self.channels

    @property
    def weight_count(self) -> int:
        return self.n_filters * self.kernel_h * self.kernel_w * self.channels

    @property
    def weight_dims(self) -> tuple[int, int, int, int]:
        return (self.n_filters, self.kernel_h, self.kernel_w, self.channels)

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return (self.input_h, self.input_w, self.channels)


def flat_index(spec: ConvLayerSpec, h: int, w: int, c: int) -> int:
    """Flat offset of kernel coordinate (h, w, c) within one filter."""
    if not (0 <= h < spec.kernel_h and 0 <= w < spec.kernel_w
            and 0 <= c < spec.channels):
        raise BoundsError(
            f"coordinate ({h},{w},{c}) outside kernel "
            f"{spec.kernel_h}x{spec.kernel_w}x{spec.channels}"
        )
    return (h * spec.kernel_w + w) * spec.channels + c


def coords_from_flat(spec: ConvLayerSpec, idx: int) -> tuple[int, int, int]:
    """Inverse of :func:`flat_index`."""
    total = spec.kernel_h * spec.kernel_w * spec.channels
    if not 0 <= idx < total:
        raise BoundsError(f"flat index {idx} outside [0, {total})")
    c = idx % spec.channels
    pos = idx // spec.channels
    return pos // spec.kernel_w, pos % spec.kernel_w, c


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor affine quantization (symmetric when zero_point is 0)."""

    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise DataError(f"scale must be positive and finite, got {self.scale}")


def quantize(t: Tensor, q: QuantParams) -> Tensor:
    """Map float32 values onto int8 via clamp(round(x/scale) + zp, -128, 127)."""
    if t.dtype != "float32":
        raise DataError(f"quantize expects float32 input, got {t.dtype}")
    x = t.data
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite value in tensor")
    codes = np.clip(np.rint(x / q.scale) + q.zero_point, -128, 127)
    return Tensor(t.dims, "int8", codes.astype(np.int8))


def dequantize(t: Tensor, q: QuantParams) -> Tensor:
    if t.dtype != "int8":
        raise DataError(f"dequantize expects int8 input, got {t.dtype}")
    x = (t.data.astype(np.float64) - q.zero_point) * q.scale
    return Tensor(t.dims, "float32", x.astype(np.float32))


def extract_patch(input: Tensor, spec: ConvLayerSpec, out_h: int, out_w: int) -> np.ndarray:
    """Flat receptive field feeding output position (out_h, out_w).

    Returns kernel_h*kernel_w*channels values in the same channel-major
    order as one filter, so patch[i] pairs with weight flat index i.
    """
    if input.dims != spec.input_dims:
        raise DataError(f"input dims {input.dims} do not match spec {spec.input_dims}")
    if not (0 <= out_h < spec.out_h and 0 <= out_w < spec.out_w):
        raise BoundsError(f"output position ({out_h},{out_w}) outside "
                          f"{spec.out_h}x{spec.out_w}")
    h0 = out_h * spec.stride
    w0 = out_w * spec.stride
    view = input.to_array()[h0:h0 + spec.kernel_h, w0:w0 + spec.kernel_w, :]
    return view.reshape(-1).copy()


def patch_matrix(input, spec: ConvLayerSpec) -> np.ndarray:
    """All receptive fields stacked row-wise, row index = out_h*out_w grid order.

    Accepts a Tensor or a plain (input_h, input_w, channels) array.
    """
    arr = input.to_array() if isinstance(input, Tensor) else np.asarray(input)
    if arr.shape != spec.input_dims:
        raise DataError(f"input dims {arr.shape} do not match spec {spec.input_dims}")
    k = spec.filterlets_per_filter * spec.channels
    out = np.empty((spec.out_positions, k), dtype=arr.dtype)
    row = 0
    for oh in range(spec.out_h):
        h0 = oh * spec.stride
        for ow in range(spec.out_w):
            w0 = ow * spec.stride
            out[row] = arr[h0:h0 + spec.kernel_h, w0:w0 + spec.kernel_w, :].reshape(-1)
            row += 1
    return out


def write_tensor(t: Tensor) -> bytes:
    """Serialize as: magic, u8 dtype tag, u8 rank, u32 extents, raw LE data."""
    head = TENSOR_MAGIC + struct.pack("<BB", _DTYPE_TAGS[t.dtype], len(t.dims))
    head += struct.pack(f"<{len(t.dims)}I", *t.dims)
    if t.dtype == "int8":
        body = t.data.tobytes()
    else:
        body = t.data.astype("<f4").tobytes()
    return head + body


def read_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one serialized tensor; returns (tensor, offset past it)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise CorruptionError("bad tensor magic")
    offset += 4
    try:
        tag, rank = struct.unpack_from("<BB", buf, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
    except struct.error as e:
        raise CorruptionError(f"truncated tensor header: {e}") from None
    if tag not in _TAG_DTYPES:
        raise CorruptionError(f"unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    n = int(np.prod(dims)) if dims else 0
    if rank == 0 or n <= 0:
        raise CorruptionError("tensor with empty shape")
    width = 1 if dtype == "int8" else 4
    end = offset + n * width
    if end > len(buf):
        raise CorruptionError("truncated tensor payload")
    raw = buf[offset:end]
    if dtype == "int8":
        data = np.frombuffer(raw, dtype=np.int8)
    else:
        data = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return Tensor(tuple(dims), dtype, data), end
