"""Layer specifications, reference networks, parameter counting and the
``ROPM`` model container."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CapabilityError, FormatError, ParameterError, ShapeError

LAYER_KINDS = (
    "conv",
    "depthwise_conv",
    "batch_norm",
    "relu",
    "sigmoid",
    "flatten",
    "global_avg_pool",
    "dense",
)
NON_TRAINABLE_SUFFIXES = (".running_mean", ".running_var")
SUPPORTED_INPUT_SIZES = (64, 128, 224)
WIDTH_MULTIPLIERS = (1.0, 0.5, 0.25)
CUSTOM_BASE_CHANNELS = (16, 32, 64)
FEATURE_UNITS = 160
MOBILENET_CHANNELS = (32, 64, 128, 128, 256, 256, 512, 512)

MAGIC = b"ROPM"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: str = "same"
    out_channels: int | None = None
    units: int | None = None
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise CapabilityError(f"unsupported layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))

    def conv_config(self, channels=None):
        out = channels if self.kind == "depthwise_conv" else self.out_channels
        return T.ConvConfig(self.kernel[0], self.kernel[1], out, self.stride, self.padding)


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple
    layers: list = field(default_factory=list)
    width_multiplier: float = 1.0

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "width_multiplier": self.width_multiplier,
            "layers": [
                {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(layer).items()}
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            layers=[LayerSpec(**layer) for layer in d["layers"]],
            width_multiplier=d.get("width_multiplier", 1.0),
        )


def is_trainable(name):
    return not name.endswith(NON_TRAINABLE_SUFFIXES)


# --------------------------------------------------------------------------
# shape inference


def layer_output_shape(layer: LayerSpec, in_shape):
    """Per-example output shape (no batch axis) of ``layer``."""
    kind = layer.kind
    if kind in ("conv", "depthwise_conv"):
        if len(in_shape) != 3:
            raise ShapeError(f"{layer.name}: expects [H,W,C] input, got {in_shape}")
        h, w, c = in_shape
        cfg = layer.conv_config(c)
        ho, wo = cfg.output_hw(h, w)
        return (ho, wo, cfg.out_channels)
    if kind == "flatten":
        if len(in_shape) != 3:
            raise ShapeError(f"{layer.name}: flatten expects [H,W,C] input, got {in_shape}")
        return (math.prod(in_shape),)
    if kind == "global_avg_pool":
        if len(in_shape) != 3:
            raise ShapeError(f"{layer.name}: pooling expects [H,W,C] input, got {in_shape}")
        return (in_shape[2],)
    if kind == "dense":
        if len(in_shape) != 1:
            raise ShapeError(f"{layer.name}: dense expects flat input, got {in_shape}")
        return (layer.units,)
    return tuple(in_shape)


def infer_shapes(spec: ModelSpec):
    """Per-example shapes: element 0 is the input, element i+1 the output of layer i."""
    shapes = [tuple(spec.input_shape)]
    for layer in spec.layers:
        shapes.append(layer_output_shape(layer, shapes[-1]))
    return shapes


def param_shapes(spec: ModelSpec):
    shapes = {}
    for layer, in_shape in zip(spec.layers, infer_shapes(spec)):
        n = layer.name
        if layer.kind == "conv":
            shapes[f"{n}.weight"] = (*layer.kernel, in_shape[-1], layer.out_channels)
        elif layer.kind == "depthwise_conv":
            shapes[f"{n}.weight"] = (*layer.kernel, in_shape[-1])
        elif layer.kind == "batch_norm":
            c = in_shape[-1]
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{n}.{suffix}"] = (c,)
        elif layer.kind == "dense":
            shapes[f"{n}.weight"] = (in_shape[0], layer.units)
            shapes[f"{n}.bias"] = (layer.units,)
    return shapes


def validate(spec: ModelSpec, params=None, binary_head=True):
    """Check layer-by-layer shape compatibility (and parameter shapes)."""
    if not spec.layers:
        raise CapabilityError(f"model {spec.name!r} has no layers")
    names = [layer.name for layer in spec.layers]
    if len(set(names)) != len(names):
        raise ParameterError("layer names must be unique")
    shapes = infer_shapes(spec)
    if binary_head and shapes[-1] != (1,):
        raise ShapeError(f"final layer must produce [N,1], got [N,{','.join(map(str, shapes[-1]))}]")
    if params is not None:
        expected = param_shapes(spec)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ShapeError(f"parameter names mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise ShapeError(f"{name}: shape {params[name].shape} != expected {tuple(shape)}")
    return shapes


# --------------------------------------------------------------------------
# builders


def _scaled(base, w):
    return max(1, int(math.floor(base * w + 0.5)))


def init_params(spec: ModelSpec, seed, dtype=np.float32):
    """He-normal weights (std = sqrt(2/fan_in)), BN gamma=1/beta=0, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".weight"):
            fan_in = math.prod(shape[:-1])
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith((".gamma", ".running_var")):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    return params


def _conv_bn_relu(tag, kind="conv", kernel=3, stride=1, out_channels=None):
    return [
        LayerSpec(kind, f"{tag}", kernel=(kernel, kernel), stride=stride, out_channels=out_channels),
        LayerSpec("batch_norm", f"bn_{tag}"),
        LayerSpec("relu", f"relu_{tag}"),
    ]


def custom_rop_spec(input_size=64, width_multiplier=1.0):
    if input_size not in SUPPORTED_INPUT_SIZES:
        raise ParameterError(f"input_size must be one of {SUPPORTED_INPUT_SIZES}, got {input_size}")
    if width_multiplier not in WIDTH_MULTIPLIERS:
        raise ParameterError(f"width_multiplier must be one of {WIDTH_MULTIPLIERS}, got {width_multiplier}")
    layers = []
    for block, base in enumerate(CUSTOM_BASE_CHANNELS, start=1):
        ch = _scaled(base, width_multiplier)
        layers += _conv_bn_relu(f"conv{block}a", stride=1, out_channels=ch)
        layers += _conv_bn_relu(f"conv{block}b", stride=2, out_channels=ch)
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "features", units=FEATURE_UNITS),
        LayerSpec("relu", "relu_features"),
        LayerSpec("dense", "head", units=1),
        LayerSpec("sigmoid", "prob"),
    ]
    return ModelSpec("custom_rop", (input_size, input_size, 3), layers, float(width_multiplier))


def build_custom_rop_net(input_size=64, width_multiplier=1.0, seed=0):
    spec = custom_rop_spec(input_size, width_multiplier)
    validate(spec)
    return spec, init_params(spec, seed)


def mobilenet_like_spec(input_size=224):
    if input_size not in SUPPORTED_INPUT_SIZES:
        raise ParameterError(f"input_size must be one of {SUPPORTED_INPUT_SIZES}, got {input_size}")
    layers = _conv_bn_relu("stem", stride=2, out_channels=MOBILENET_CHANNELS[0])
    for block, ch in enumerate(MOBILENET_CHANNELS, start=1):
        stride = 2 if block % 2 == 0 else 1
        layers += _conv_bn_relu(f"dw{block}", kind="depthwise_conv", stride=stride)
        layers += _conv_bn_relu(f"pw{block}", kernel=1, out_channels=ch)
    layers += [
        LayerSpec("global_avg_pool", "pool"),
        LayerSpec("dense", "head", units=1),
        LayerSpec("sigmoid", "prob"),
    ]
    return ModelSpec("mobilenet_like", (input_size, input_size, 3), layers, 1.0)


def build_mobilenet_like(input_size=224, seed=0):
    spec = mobilenet_like_spec(input_size)
    validate(spec)
    return spec, init_params(spec, seed)


def count_parameters(spec: ModelSpec, params):
    validate(spec, params, binary_head=False)
    trainable = sum(p.size for n, p in params.items() if is_trainable(n))
    total = sum(p.size for p in params.values())
    return {"trainable": int(trainable), "total": int(total)}


def feature_width(spec: ModelSpec):
    """Width of the penultimate feature vector (input to the last dense layer)."""
    shapes = infer_shapes(spec)
    last_dense = max(i for i, layer in enumerate(spec.layers) if layer.kind == "dense")
    return shapes[last_dense][0]


# --------------------------------------------------------------------------
# forward evaluation


def apply_layer(layer: LayerSpec, x, params, mode="infer"):
    """Evaluate one layer.  Returns ``(output, cache)``; the cache holds what
    the backward pass needs and is ignored by plain inference."""
    kind, n = layer.kind, layer.name
    dt = x.dtype
    if kind == "conv":
        w = params[f"{n}.weight"]
        return T.conv2d(x, w, layer.conv_config()), {"x": x}
    if kind == "depthwise_conv":
        w = params[f"{n}.weight"]
        return T.depthwise_conv2d(x, w, layer.conv_config(x.shape[-1])), {"x": x}
    if kind == "batch_norm":
        gamma = params[f"{n}.gamma"].astype(dt, copy=False)
        beta = params[f"{n}.beta"].astype(dt, copy=False)
        if layer.eps <= 0:
            raise ParameterError(f"{n}: eps must be > 0")
        if mode == "train":
            mean, var = T.batch_stats(x)
        else:
            mean = params[f"{n}.running_mean"].astype(dt, copy=False)
            var = params[f"{n}.running_var"]
        inv_std = T.inverse_std(var, layer.eps, dt)
        y = T.batch_norm_infer(x, gamma, beta, mean, inv_std)
        return y, {"x": x, "mean": mean, "var": var, "inv_std": inv_std, "mode": mode}
    if kind == "relu":
        return T.relu(x), {"x": x}
    if kind == "sigmoid":
        y = T.sigmoid(x)
        return y, {"y": y}
    if kind == "flatten":
        return T.flatten(x), {"shape": x.shape}
    if kind == "global_avg_pool":
        return T.global_avg_pool(x), {"shape": x.shape}
    if kind == "dense":
        w = params[f"{n}.weight"]
        b = params[f"{n}.bias"].astype(dt, copy=False)
        y = T.matmul(x, w)
        y += b
        return y, {"x": x}
    raise CapabilityError(f"unsupported layer kind {kind!r}")


def check_batch(spec: ModelSpec, batch):
    batch = np.asarray(batch)
    if batch.ndim != len(spec.input_shape) + 1 or batch.shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"batch shape {batch.shape} does not match model input [N,{','.join(map(str, spec.input_shape))}]")
    if batch.shape[0] < 1:
        raise ShapeError("batch must contain at least one example")
    if batch.dtype not in T.FLOAT_DTYPES:
        raise ShapeError(f"batch dtype must be float32/float64, got {batch.dtype}")
    return np.ascontiguousarray(batch)


def forward(spec: ModelSpec, params, batch, mode="infer"):
    """Run the network.  ``train`` mode normalizes with batch statistics but,
    unlike :func:`ropnet.tensor.batch_norm`, never mutates running stats."""
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = check_batch(spec, batch)
    if not spec.layers:
        raise CapabilityError(f"model {spec.name!r} has no layers")
    for layer in spec.layers:
        x, _ = apply_layer(layer, x, params, mode)
    return x


# --------------------------------------------------------------------------
# serialization


def _descriptor_bytes(spec):
    return json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps_model(spec: ModelSpec, params) -> bytes:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    desc = _descriptor_bytes(spec)
    out += [struct.pack("<I", len(desc)), desc]
    for name, arr in params.items():
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise FormatError(f"parameter {name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        out += [struct.pack("<I", len(encoded)), encoded, struct.pack("<BI", _DTYPE_TAGS[dt], arr.ndim)]
        out += [struct.pack("<Q", s) for s in arr.shape]
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def save_model(spec: ModelSpec, params, path):
    Path(path).write_bytes(dumps_model(spec, params))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads_model(buf: bytes):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a ROPM model file", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    (desc_len,) = r.unpack("<I", "descriptor length")
    desc_at = r.pos
    try:
        spec = ModelSpec.from_dict(json.loads(r.take(desc_len, "descriptor").decode("utf-8")))
    except (ValueError, KeyError, TypeError, CapabilityError) as exc:
        raise FormatError(f"invalid model descriptor: {exc}", desc_at) from exc
    params = {}
    while r.pos < len(buf):
        rec_at = r.pos
        (name_len,) = r.unpack("<I", "parameter name length")
        name = r.take(name_len, "parameter name").decode("utf-8")
        tag, rank = r.unpack("<BI", "parameter header")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"parameter {name}: unknown dtype tag {tag}", rec_at)
        shape = tuple(r.unpack("<Q", "extent")[0] for _ in range(rank))
        dt = _TAG_DTYPES[tag]
        payload = r.take(math.prod(shape) * dt.itemsize, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    try:
        validate(spec, params, binary_head=False)
    except ShapeError as exc:
        raise FormatError(f"parameters inconsistent with descriptor: {exc}", len(buf)) from exc
    return spec, params


def load_model(path):
    return loads_model(Path(path).read_bytes())
