"""Feature extractor F, classifier C and mirrored decoder D.

F: conv blocks (conv -> relu -> optional pool) -> dense hidden layers (relu)
   -> linear dense to the semantic vector z.
C: dense hidden layers (relu) -> dense logits -> softmax.
D: dense layers from z back to the flattened conv map (relu), then for each
   conv block in reverse: unpool (using F's pool record) -> deconv -> relu,
   with no activation after the final deconv.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import FormatError, ShapeError


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: tuple[int, int]
    padding: tuple[int, int] = (0, 0)
    stride: tuple[int, int] = (1, 1)
    pool: str | None = None
    pool_window: tuple[int, int] = (1, 2)


DEFAULT_CONV = (
    ConvLayer(64, (1, 3), (0, 1), pool="max"),
    ConvLayer(64, (2, 3), (0, 1)),
    ConvLayer(32, (1, 3), (0, 1), pool="max"),
    ConvLayer(32, (1, 3), (0, 1)),
)


@dataclass(frozen=True)
class ArchConfig:
    input_shape: tuple[int, int] = (2, 128)
    conv_layers: tuple[ConvLayer, ...] = DEFAULT_CONV
    dense_widths: tuple[int, ...] = (256,)
    semantic_dim: int = 64
    classifier_widths: tuple[int, ...] = (128,)
    n_classes: int = 9
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.semantic_dim < 1 or self.n_classes < 1:
            raise ValueError("semantic_dim and n_classes must be positive")
        if self.class_names and len(self.class_names) != self.n_classes:
            raise ValueError("class_names must list exactly n_classes names")
        if any(w < 1 for w in self.dense_widths + self.classifier_widths):
            raise ValueError("dense widths must be positive")
        # walking the shapes validates every conv/pool and the decoder mirror
        self.feature_shapes()

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) entering each conv block, plus the final map."""
        shape = (1,) + tuple(self.input_shape)
        shapes = [shape]
        for layer in self.conv_layers:
            ho, wo = nn.conv_output_hw(shape[1:], layer.kernel, layer.stride, layer.padding)
            if ho < 1 or wo < 1:
                raise ValueError(f"conv layer {layer} does not fit input {shape}")
            if nn.deconv_output_hw((ho, wo), layer.kernel, layer.stride, layer.padding) != shape[1:]:
                raise ValueError(f"decoder cannot mirror conv layer {layer} on input {shape}")
            shape = (layer.out_channels, ho, wo)
            if layer.pool:
                if layer.pool not in ("max", "avg"):
                    raise ValueError(f"unknown pool mode {layer.pool!r}")
                kh, kw = layer.pool_window
                if ho % kh or wo % kw:
                    raise ValueError(f"pool window {layer.pool_window} does not tile {ho}x{wo}")
                shape = (layer.out_channels, ho // kh, wo // kw)
            shapes.append(shape)
        return shapes

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.feature_shapes()[-1]))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["conv_layers"] = tuple(
            ConvLayer(
                c["out_channels"], tuple(c["kernel"]), tuple(c["padding"]), tuple(c["stride"]),
                c["pool"], tuple(c["pool_window"]),
            )
            for c in d["conv_layers"]
        )
        for key in ("input_shape", "dense_widths", "classifier_widths", "class_names"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelParams:
    config: ArchConfig
    tensors: dict[str, np.ndarray]
    centers: np.ndarray

    def group(self, prefix: str) -> list[str]:
        return [k for k in self.tensors if k.startswith(prefix + ".")]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.centers.copy())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.centers.astype(dtype)
        )

    @property
    def dtype(self):
        return self.centers.dtype


def _dense_chain(widths):
    return list(zip(widths[:-1], widths[1:]))


def param_shapes(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    fs = config.feature_shapes()
    for i, layer in enumerate(config.conv_layers):
        shapes[f"F.conv{i}.w"] = (layer.out_channels, fs[i][0]) + tuple(layer.kernel)
        shapes[f"F.conv{i}.b"] = (layer.out_channels,)
    f_widths = (config.flat_dim,) + config.dense_widths + (config.semantic_dim,)
    for i, (a, b) in enumerate(_dense_chain(f_widths)):
        shapes[f"F.fc{i}.w"], shapes[f"F.fc{i}.b"] = (b, a), (b,)
    c_widths = (config.semantic_dim,) + config.classifier_widths + (config.n_classes,)
    for i, (a, b) in enumerate(_dense_chain(c_widths)):
        shapes[f"C.fc{i}.w"], shapes[f"C.fc{i}.b"] = (b, a), (b,)
    d_widths = (config.semantic_dim,) + config.dense_widths[::-1] + (config.flat_dim,)
    for i, (a, b) in enumerate(_dense_chain(d_widths)):
        shapes[f"D.fc{i}.w"], shapes[f"D.fc{i}.b"] = (b, a), (b,)
    for i in reversed(range(len(config.conv_layers))):
        layer = config.conv_layers[i]
        # deconv kernel is (small-side channels, large-side channels, kH, kW)
        shapes[f"D.deconv{i}.w"] = (layer.out_channels, fs[i][0]) + tuple(layer.kernel)
        shapes[f"D.deconv{i}.b"] = (fs[i][0],)
    return shapes


def init_params(config: ArchConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-normal weights (variance 2/fan_in), zero biases, zero centers.

    Each tensor draws from its own stream derived from ``seed``.
    """
    tensors = {}
    for idx, (name, shape) in enumerate(param_shapes(config).items()):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        if ".deconv" in name:
            fan_in = shape[0] * shape[2] * shape[3]
        else:
            fan_in = int(np.prod(shape[1:]))
        rng = nn.child_rng(seed, idx)
        tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    centers = np.zeros((config.n_classes, config.semantic_dim), dtype=dtype)
    return ModelParams(config, tensors, centers)


def _conv_spec(params: ModelParams, name: str, layer: ConvLayer) -> nn.ConvSpec:
    t = params.tensors
    return nn.ConvSpec(t[name + ".w"], t[name + ".b"], layer.stride, layer.padding)


def _hwc(shape):
    c, h, w = shape
    return h, w, c


def _as_batch(x: np.ndarray, config: ArchConfig) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.shape == tuple(config.input_shape):
        return x[None], True
    if x.ndim != 3 or x.shape[1:] != tuple(config.input_shape):
        raise ShapeError(f"expected frames of shape {config.input_shape}, got {x.shape}")
    return x, False


@dataclass
class Forward:
    """Intermediate values kept for the backward pass."""

    x: np.ndarray
    conv_in: list = field(default_factory=list)
    conv_cols: list = field(default_factory=list)
    conv_pre: list = field(default_factory=list)
    records: list = field(default_factory=list)
    f_dense_in: list = field(default_factory=list)
    f_dense_pre: list = field(default_factory=list)
    z: np.ndarray | None = None
    c_dense_in: list = field(default_factory=list)
    c_dense_pre: list = field(default_factory=list)
    probs: np.ndarray | None = None
    d_dense_in: list = field(default_factory=list)
    d_dense_pre: list = field(default_factory=list)
    deconv_in: dict = field(default_factory=dict)
    deconv_pre: dict = field(default_factory=dict)
    unpool_in: dict = field(default_factory=dict)
    recon: np.ndarray | None = None


def _encode(params: ModelParams, x: np.ndarray, fw: Forward | None = None):
    cfg, t = params.config, params.tensors
    h = x[..., None]  # channels-last internally: (N, H, W, C)
    records = []
    for i, layer in enumerate(cfg.conv_layers):
        pre, cols = nn.conv2d_nhwc(h, _conv_spec(params, f"F.conv{i}", layer))
        if fw is not None:
            fw.conv_in.append(h)
            fw.conv_cols.append(cols)
            fw.conv_pre.append(pre)
        h = nn.relu(pre)
        rec = None
        if layer.pool:
            h, rec = nn.pool2d(h, layer.pool, layer.pool_window, layout="NHWC")
        records.append(rec)
    h = h.reshape(len(x), -1)
    n_fc = len(cfg.dense_widths) + 1
    for i in range(n_fc):
        pre = nn.dense(h, t[f"F.fc{i}.w"], t[f"F.fc{i}.b"])
        if fw is not None:
            fw.f_dense_in.append(h)
            fw.f_dense_pre.append(pre)
        h = nn.relu(pre) if i < n_fc - 1 else pre
    return h, records


def _classify(params: ModelParams, z: np.ndarray, fw: Forward | None = None):
    t = params.tensors
    n_fc = len(params.config.classifier_widths) + 1
    h = z
    for i in range(n_fc):
        pre = nn.dense(h, t[f"C.fc{i}.w"], t[f"C.fc{i}.b"])
        if fw is not None:
            fw.c_dense_in.append(h)
            fw.c_dense_pre.append(pre)
        h = nn.relu(pre) if i < n_fc - 1 else pre
    return nn.softmax(h)


def _decode(params: ModelParams, z: np.ndarray, records, fw: Forward | None = None):
    cfg, t = params.config, params.tensors
    fs = cfg.feature_shapes()
    n_fc = len(cfg.dense_widths) + 1
    h = z
    for i in range(n_fc):
        pre = nn.dense(h, t[f"D.fc{i}.w"], t[f"D.fc{i}.b"])
        if fw is not None:
            fw.d_dense_in.append(h)
            fw.d_dense_pre.append(pre)
        h = nn.relu(pre)
    h = h.reshape((len(z),) + _hwc(fs[-1]))
    for i in reversed(range(len(cfg.conv_layers))):
        layer = cfg.conv_layers[i]
        if layer.pool:
            if records[i] is None:
                raise ShapeError(f"missing pool record for conv block {i}")
            if fw is not None:
                fw.unpool_in[i] = h
            h = nn.unpool2d(h, records[i])
        spec = _conv_spec(params, f"D.deconv{i}", layer)
        pre = nn.deconv2d_nhwc(h, spec, fs[i][1:])
        if fw is not None:
            fw.deconv_in[i] = h
            fw.deconv_pre[i] = pre
        h = nn.relu(pre) if i > 0 else pre
    return h[..., 0]


def extract_features(x: np.ndarray, params: ModelParams):
    """Semantic vectors z = F(x) and the pool records the decoder needs."""
    xb, single = _as_batch(x, params.config)
    z, records = _encode(params, xb)
    if single:
        return z[0], records
    return z, records


def classify(z: np.ndarray, params: ModelParams) -> np.ndarray:
    z = np.asarray(z)
    if z.shape[-1] != params.config.semantic_dim:
        raise ShapeError(f"semantic vectors must have dimension {params.config.semantic_dim}")
    return _classify(params, z)


def decode(z: np.ndarray, records, params: ModelParams) -> np.ndarray:
    z = np.asarray(z)
    single = z.ndim == 1
    zb = z[None] if single else z
    if len(records) != len(params.config.conv_layers):
        raise ShapeError("pool records do not match the conv stack")
    out = _decode(params, zb, records)
    return out[0] if single else out


def embed(params: ModelParams, frames: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """F over a large set of frames in chunks."""
    out = [
        _encode(params, frames[i : i + batch_size].astype(params.dtype, copy=False))[0]
        for i in range(0, len(frames), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0, params.config.semantic_dim), params.dtype)


def predict_proba(params: ModelParams, frames: np.ndarray, batch_size: int = 512) -> np.ndarray:
    z = embed(params, frames, batch_size)
    return _classify(params, z) if len(z) else np.zeros((0, params.config.n_classes))


def forward(params: ModelParams, x: np.ndarray, with_decoder: bool = True) -> Forward:
    fw = Forward(x=x)
    fw.z, fw.records = _encode(params, x, fw)
    fw.probs = _classify(params, fw.z, fw)
    if with_decoder:
        fw.recon = _decode(params, fw.z, fw.records, fw)
    return fw


def backward(
    params: ModelParams,
    fw: Forward,
    dlogits: np.ndarray | None,
    dz: np.ndarray | None,
    drecon: np.ndarray | None,
) -> dict[str, np.ndarray]:
    """Gradients of the loss given its partials w.r.t. logits, z and the reconstruction.

    A ``None`` partial switches that path off; the parameters it feeds get
    zero gradients.
    """
    cfg, t = params.config, params.tensors
    grads = {k: np.zeros_like(v) for k, v in t.items()}
    gz = np.zeros_like(fw.z) if dz is None else dz.astype(fw.z.dtype, copy=True)

    if dlogits is not None:
        g = dlogits
        for i in reversed(range(len(cfg.classifier_widths) + 1)):
            if i < len(cfg.classifier_widths):
                g = nn.relu_grad(g, fw.c_dense_pre[i])
            g, grads[f"C.fc{i}.w"], grads[f"C.fc{i}.b"] = nn.dense_grad(g, fw.c_dense_in[i], t[f"C.fc{i}.w"])
        gz += g

    if drecon is not None:
        if fw.recon is None:
            raise ValueError("forward pass ran without the decoder")
        g = drecon[..., None]
        for i in range(len(cfg.conv_layers)):
            layer = cfg.conv_layers[i]
            if i > 0:
                g = nn.relu_grad(g, fw.deconv_pre[i])
            spec = _conv_spec(params, f"D.deconv{i}", layer)
            g, grads[f"D.deconv{i}.w"], grads[f"D.deconv{i}.b"] = nn.deconv2d_grad_nhwc(g, fw.deconv_in[i], spec)
            if layer.pool:
                g = nn.unpool2d_grad(g, fw.records[i])
        g = g.reshape(len(g), -1)
        for i in reversed(range(len(cfg.dense_widths) + 1)):
            g = nn.relu_grad(g, fw.d_dense_pre[i])
            g, grads[f"D.fc{i}.w"], grads[f"D.fc{i}.b"] = nn.dense_grad(g, fw.d_dense_in[i], t[f"D.fc{i}.w"])
        gz += g

    if dlogits is None and dz is None and drecon is None:
        return grads
    g = gz
    n_fc = len(cfg.dense_widths) + 1
    for i in reversed(range(n_fc)):
        if i < n_fc - 1:
            g = nn.relu_grad(g, fw.f_dense_pre[i])
        g, grads[f"F.fc{i}.w"], grads[f"F.fc{i}.b"] = nn.dense_grad(g, fw.f_dense_in[i], t[f"F.fc{i}.w"])
    fs = cfg.feature_shapes()
    g = g.reshape((len(g),) + _hwc(fs[-1]))
    for i in reversed(range(len(cfg.conv_layers))):
        layer = cfg.conv_layers[i]
        if layer.pool:
            g = nn.pool2d_grad(g, fw.records[i])
        g = nn.relu_grad(g, fw.conv_pre[i])
        spec = _conv_spec(params, f"F.conv{i}", layer)
        g, grads[f"F.conv{i}.w"], grads[f"F.conv{i}.b"] = nn.conv2d_grad_nhwc(g, fw.conv_in[i], spec, fw.conv_cols[i])
    return grads


MAGIC = b"SR2C"
VERSION = 1


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    """Write ``SR2C`` | u16 version | u32 json length | json | tensors.

    Each tensor: u16 name length, name, u8 ndim, u32 extents, float32 LE data.
    Parameters come in declaration order followed by the center table.
    """
    header = json.dumps({"arch": params.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    items = list(params.tensors.items()) + [("centers", params.centers)]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, with_meta: bool = False):
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an SR2C checkpoint (bad magic)")
    version, hlen = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header") from e
    config = ArchConfig.from_dict(header["arch"])
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(r.take(size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    expected = param_shapes(config)
    centers = arrays.pop("centers", None)
    if centers is None or list(arrays) != list(expected) or any(
        arrays[k].shape != s for k, s in expected.items()
    ):
        raise FormatError(f"{path}: tensors do not match the stored architecture")
    params = ModelParams(config, arrays, centers)
    return (params, header["meta"]) if with_meta else params
