"""Single-file model container: canonical JSON manifest plus binary payloads.

Layout: magic, u16 version, u32 manifest length, manifest JSON, u32 blob
count, a table of u32 blob lengths, u32 CRC32 over the concatenated blobs,
then the blobs themselves.  One blob per layer: the weight block in the
layer's declared format followed by an optional bias tensor block.
"""

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .convops import ComputeSchedule, LaneConfig, conv_csr, conv_dense, \
    conv_fwcs, conv_fwcs_reordered
from .cyclesim import MachineConfig, csr_counts, schedule_counts
from .errors import CorruptionError, DataError, FormatError
from .fwcs import CsrLayer, FilterletMask, FwcsLayer, decode_csr, decode_fwcs, \
    encode_csr, encode_fwcs, read_csr, read_fwcs, write_csr, write_fwcs
from .model import LayerDef, LayerQuant, SequentialModel
from .tensor import ConvLayerSpec, Tensor, read_tensor, write_tensor

BUNDLE_MAGIC = b"FLTB"
BUNDLE_VERSION = 1

FORMATS = ("dense", "fwcs", "csr")
_FORMAT_MAGIC = {"dense": b"DTTN", "fwcs": b"FWCS", "csr": b"CSRW"}

_INT32_MIN = -(2 ** 31)
_INT32_MAX = 2 ** 31 - 1


@dataclass
class BundleLayer:
    """Manifest entry plus the raw payload for one layer."""

    name: str
    fmt: str
    spec: ConvLayerSpec
    dtype: str
    has_bias: bool
    quant: LayerQuant | None
    payload: bytes

    def __post_init__(self):
        if self.fmt not in FORMATS:
            raise FormatError(f"unknown layer format {self.fmt!r}")
        if self.payload[:4] != _FORMAT_MAGIC[self.fmt]:
            raise CorruptionError(
                f"layer {self.name}: payload magic does not match format {self.fmt}"
            )

    def decode_weights(self):
        """(dense Tensor, FwcsLayer | CsrLayer | None) for this layer."""
        if self.fmt == "dense":
            weights, off = read_tensor(self.payload, 0)
            packed = None
        elif self.fmt == "fwcs":
            packed, off = read_fwcs(self.payload, 0, self.dtype)
            weights = decode_fwcs(packed, self.spec)
        else:
            packed, off = read_csr(self.payload, 0, self.dtype)
            weights = decode_csr(packed, self.spec)
        bias = None
        if self.has_bias:
            bias_t, off = read_tensor(self.payload, off)
            bias = bias_t.data.astype(np.int64 if self.dtype == "int8"
                                      else np.float64)
        if off != len(self.payload):
            raise CorruptionError(f"layer {self.name}: trailing payload bytes")
        if weights.dims != self.spec.weight_dims:
            raise CorruptionError(f"layer {self.name}: decoded shape mismatch")
        return weights, packed, bias


@dataclass
class ModelBundle:
    name: str
    role: str  # "model" or "grads"
    layers: list[BundleLayer]

    def manifest(self) -> dict:
        layers = []
        for layer in self.layers:
            entry = {
                "name": layer.name,
                "format": layer.fmt,
                "dtype": layer.dtype,
                "has_bias": layer.has_bias,
                "spec": {
                    "n_filters": layer.spec.n_filters,
                    "kernel_h": layer.spec.kernel_h,
                    "kernel_w": layer.spec.kernel_w,
                    "channels": layer.spec.channels,
                    "input_h": layer.spec.input_h,
                    "input_w": layer.spec.input_w,
                    "stride": layer.spec.stride,
                },
                "quant": None if layer.quant is None else {
                    "input_scale": layer.quant.input_scale,
                    "weight_scale": layer.quant.weight_scale,
                    "output_scale": layer.quant.output_scale,
                    "input_zero_point": layer.quant.input_zero_point,
                    "output_zero_point": layer.quant.output_zero_point,
                },
            }
            layers.append(entry)
        return {"name": self.name, "role": self.role, "layers": layers}

    def to_bytes(self) -> bytes:
        manifest = json.dumps(self.manifest(), sort_keys=True,
                              separators=(",", ":")).encode()
        blobs = [layer.payload for layer in self.layers]
        body = struct.pack("<I", len(manifest)) + manifest
        body += struct.pack("<I", len(blobs))
        body += b"".join(struct.pack("<I", len(b)) for b in blobs)
        body += struct.pack("<I", zlib.crc32(b"".join(blobs)) & 0xFFFFFFFF)
        return BUNDLE_MAGIC + struct.pack("<H", BUNDLE_VERSION) + body + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelBundle":
        if buf[:4] != BUNDLE_MAGIC:
            raise CorruptionError("bad bundle magic")
        off = 4
        try:
            (version,) = struct.unpack_from("<H", buf, off)
            off += 2
            (mlen,) = struct.unpack_from("<I", buf, off)
            off += 4
        except struct.error as e:
            raise CorruptionError(f"truncated bundle header: {e}") from None
        if version != BUNDLE_VERSION:
            raise CorruptionError(f"unsupported bundle version {version}")
        if off + mlen > len(buf):
            raise CorruptionError("truncated manifest")
        try:
            manifest = json.loads(buf[off:off + mlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptionError(f"manifest is not valid JSON: {e}") from None
        off += mlen
        try:
            (n_blobs,) = struct.unpack_from("<I", buf, off)
            off += 4
            lengths = struct.unpack_from(f"<{n_blobs}I", buf, off)
            off += 4 * n_blobs
            (crc,) = struct.unpack_from("<I", buf, off)
            off += 4
        except struct.error as e:
            raise CorruptionError(f"truncated blob table: {e}") from None
        if len(manifest.get("layers", [])) != n_blobs:
            raise CorruptionError("manifest layer count != payload count")
        blobs = []
        for n in lengths:
            if off + n > len(buf):
                raise CorruptionError("truncated blob data")
            blobs.append(buf[off:off + n])
            off += n
        if zlib.crc32(b"".join(blobs)) & 0xFFFFFFFF != crc:
            raise CorruptionError("payload checksum mismatch")
        layers = []
        try:
            for entry, blob in zip(manifest["layers"], blobs):
                spec = ConvLayerSpec(**entry["spec"])
                quant = None if entry["quant"] is None else LayerQuant(**entry["quant"])
                layers.append(BundleLayer(
                    name=entry["name"], fmt=entry["format"], spec=spec,
                    dtype=entry["dtype"], has_bias=entry["has_bias"],
                    quant=quant, payload=blob,
                ))
            return cls(manifest["name"], manifest.get("role", "model"), layers)
        except (KeyError, TypeError, DataError) as e:
            raise CorruptionError(f"malformed manifest entry: {e}") from None

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def payload_bytes(self) -> int:
        return sum(len(layer.payload) for layer in self.layers)


def _bias_block(layer: LayerDef) -> bytes:
    if layer.bias is None:
        return b""
    # biases travel as float32; desk-scale integer biases round-trip exactly
    return write_tensor(Tensor.from_array(
        np.asarray(layer.bias, dtype=np.float32), "float32"))


def bundle_from_model(model: SequentialModel, role: str = "model") -> ModelBundle:
    """Dense bundle of every layer of ``model``."""
    layers = []
    for layer in model.layers:
        payload = write_tensor(layer.weights) + _bias_block(layer)
        layers.append(BundleLayer(
            name=layer.name, fmt="dense", spec=layer.spec,
            dtype=layer.weights.dtype, has_bias=layer.bias is not None,
            quant=layer.quant, payload=payload,
        ))
    return ModelBundle(model.name, role, layers)


def bundle_from_masks(model: SequentialModel, masks: list[FilterletMask],
                      fmt: str = "fwcs") -> ModelBundle:
    """Pack ``model`` with each layer pruned by its mask, in FWCS or CSR form."""
    if len(masks) != len(model.layers):
        raise DataError("mask count != layer count")
    layers = []
    for layer, mask in zip(model.layers, masks):
        if fmt == "fwcs":
            block = write_fwcs(encode_fwcs(layer.weights, mask))
        elif fmt == "csr":
            block = write_csr(encode_csr(layer.weights, mask.to_weight_mask()))
        else:
            raise FormatError(f"cannot pack pruned layers as {fmt!r}")
        layers.append(BundleLayer(
            name=layer.name, fmt=fmt, spec=layer.spec,
            dtype=layer.weights.dtype, has_bias=layer.bias is not None,
            quant=layer.quant, payload=block + _bias_block(layer),
        ))
    return ModelBundle(model.name, "model", layers)


def model_from_bundle(bundle: ModelBundle) -> SequentialModel:
    """Materialize dense weights for every layer (pruned layers decode to zeros)."""
    layers = []
    for bl in bundle.layers:
        weights, _, bias = bl.decode_weights()
        if bias is not None and bl.dtype == "float32":
            bias = bias.astype(np.float32)
        layers.append(LayerDef(bl.name, bl.spec, weights,
                               None if bias is None else np.asarray(bias),
                               bl.quant))
    return SequentialModel(bundle.name, layers)


def gradients_from_bundle(bundle: ModelBundle):
    from .importance import GradientBundle

    if bundle.role != "grads":
        raise DataError(f"expected a gradient bundle, got role {bundle.role!r}")
    grads = []
    for bl in bundle.layers:
        if bl.fmt != "dense" or bl.dtype != "float32":
            raise DataError("gradient bundles must hold dense float32 tensors")
        weights, _, _ = bl.decode_weights()
        grads.append(weights.to_array().astype(np.float64))
    return GradientBundle(grads, provenance="external file")


@dataclass
class RunResult:
    output: Tensor
    layer_counts: list[dict[str, int]]
    saturated: bool


def _requantize(acc: np.ndarray, quant: LayerQuant) -> tuple[np.ndarray, bool]:
    saturated = bool(np.any(acc < _INT32_MIN) or np.any(acc > _INT32_MAX))
    acc = np.clip(acc, _INT32_MIN, _INT32_MAX)
    mult = quant.input_scale * quant.weight_scale / quant.output_scale
    codes = np.clip(np.rint(acc * mult) + quant.output_zero_point, -128, 127)
    return codes.astype(np.int8), saturated


def run_bundle(bundle: ModelBundle, input: Tensor,
               schedule: ComputeSchedule = ComputeSchedule.REORDERED,
               lanes: LaneConfig = LaneConfig()) -> RunResult:
    """Execute every layer with its format's operator; int8 layers requantize."""
    if bundle.role != "model":
        raise DataError("can only run bundles with role 'model'")
    cfg = MachineConfig(lanes=lanes.lanes, register_count=lanes.register_count)
    x = input
    counts = []
    saturated = False
    for bl in bundle.layers:
        if x.dims != bl.spec.input_dims:
            raise DataError(
                f"layer {bl.name}: input dims {x.dims} != {bl.spec.input_dims}"
            )
        weights, packed, bias = bl.decode_weights()
        if bl.fmt == "dense":
            acc = conv_dense(x, weights, bl.spec, bias)
            all_kept = encode_fwcs(weights, FilterletMask.all_kept(bl.spec))
            counts.append(schedule_counts(all_kept, bl.spec, schedule, cfg))
        elif bl.fmt == "fwcs":
            op = conv_fwcs if schedule is ComputeSchedule.DEFAULT \
                else conv_fwcs_reordered
            acc = op(x, packed, bl.spec, lanes, bias)
            counts.append(schedule_counts(packed, bl.spec, schedule, cfg))
        else:
            acc = conv_csr(x, packed, bl.spec, bias)
            counts.append(csr_counts(packed, bl.spec))
        if bl.dtype == "int8":
            if bl.quant is None:
                raise FormatError(f"layer {bl.name}: int8 layer without quant params")
            codes, sat = _requantize(acc, bl.quant)
            saturated = saturated or sat
            x = Tensor.from_array(codes, "int8")
        else:
            x = Tensor.from_array(acc.astype(np.float32), "float32")
    return RunResult(x, counts, saturated)
