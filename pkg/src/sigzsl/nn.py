"""Differentiable building blocks for the encoder, classifier and decoder.

Everything here is a pure function over numpy arrays. Spatial ops take either
a single ``(C, H, W)`` tensor or a batch ``(N, C, H, W)`` and return the same
rank; ``layout="NHWC"`` selects channels-last, which the network uses
internally because its im2col matrices reshape without copies. Convolution follows the matrix view ``b = M a``: the backward pass
multiplies by ``M.T`` and a transposed convolution (``deconv2d``) multiplies
by a learned ``M~`` that has the shape of ``M.T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _check_finite(x: np.ndarray, what: str) -> None:
    # a single reduction is much cheaper than np.isfinite(x).all() on big maps
    if not np.isfinite(np.sum(x)):
        raise NonFiniteError(f"non-finite values in {what}")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a 3-D tensor or a 4-D batch, got shape {x.shape}")


def _unbatch(x: np.ndarray, squeeze: bool) -> np.ndarray:
    return x[0] if squeeze else x


def _to_nhwc(x: np.ndarray, layout: str) -> tuple[np.ndarray, bool]:
    if layout not in ("NCHW", "NHWC"):
        raise ValueError(f"unknown layout {layout!r}")
    x, squeeze = _batched(x)
    return (x.transpose(0, 2, 3, 1) if layout == "NCHW" else x), squeeze


def _from_nhwc(x: np.ndarray, layout: str, squeeze: bool) -> np.ndarray:
    if layout == "NCHW":
        x = x.transpose(0, 3, 1, 2)
    return _unbatch(x, squeeze)


@dataclass
class ConvSpec:
    """Kernel, bias, stride and zero-padding of a 2-D convolution.

    For ``conv2d`` the kernel is ``(out_ch, in_ch, kH, kW)``. For
    ``deconv2d`` it is ``(in_ch, out_ch, kH, kW)`` where ``in_ch`` is the
    small side, i.e. the kernel of the convolution whose matrix ``M`` has the
    shape of ``M~.T``.
    """

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.kernel.ndim != 4 or min(self.kernel.shape) < 1:
            raise ShapeError(f"kernel must be 4-D with positive extents, got {self.kernel.shape}")
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]


def conv_output_hw(hw, kernel_size, stride=(1, 1), padding=(0, 0)) -> tuple[int, int]:
    (h, w), (kh, kw) = hw, kernel_size
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def deconv_output_hw(hw, kernel_size, stride=(1, 1), padding=(0, 0)) -> tuple[int, int]:
    (h, w), (kh, kw) = hw, kernel_size
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    return (h - 1) * sh + kh - 2 * ph, (w - 1) * sw + kw - 2 * pw


# The kernels below work on channels-last batches (N, H, W, C), where both the
# im2col matrix and the upstream gradient reshape without copies.


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """(O, C, kH, kW) -> (kH * kW * C, O) matching the im2col column order."""
    return kernel.transpose(2, 3, 1, 0).reshape(-1, kernel.shape[0])


def _columns(x: np.ndarray, kernel_size, stride, padding, out_hw) -> np.ndarray:
    (kh, kw), (sh, sw), (ph, pw) = kernel_size, stride, padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    ho, wo = out_hw
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    n, c = x.shape[0], x.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _scatter(g: np.ndarray, kernel: np.ndarray, stride, padding, in_hw) -> np.ndarray:
    """Apply ``M.T`` of the conv with ``kernel`` to an output-side batch ``g``."""
    n, ho, wo, o = g.shape
    _, c, kh, kw = kernel.shape
    (sh, sw), (ph, pw) = stride, padding
    h, w = in_hw
    dcols = (g.reshape(-1, o) @ _kernel_matrix(kernel).T).reshape(n, ho, wo, kh, kw, c)
    hp = max(h + 2 * ph, (ho - 1) * sh + kh)
    wp = max(w + 2 * pw, (wo - 1) * sw + kw)
    out = np.zeros((n, hp, wp, c), dtype=np.result_type(g, kernel))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += dcols[:, :, :, i, j]
    return out[:, ph : ph + h, pw : pw + w]


def _kernel_grad(g: np.ndarray, cols: np.ndarray, kernel_shape) -> np.ndarray:
    o, c, kh, kw = kernel_shape
    gk = cols.T @ g.reshape(-1, o)
    return gk.reshape(kh, kw, c, o).transpose(3, 2, 0, 1)


def conv2d_nhwc(x: np.ndarray, spec: ConvSpec):
    """Batched channels-last convolution; returns ``(output, im2col matrix)``."""
    o, c, kh, kw = spec.kernel.shape
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D batch, got shape {x.shape}")
    if x.shape[3] != c:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {c}")
    ho, wo = conv_output_hw(x.shape[1:3], (kh, kw), spec.stride, spec.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {(kh, kw)} does not fit input {x.shape[1:3]}")
    _check_finite(x, "conv2d input")
    cols = _columns(x, (kh, kw), spec.stride, spec.padding, (ho, wo))
    out = (cols @ _kernel_matrix(spec.kernel)).reshape(x.shape[0], ho, wo, o)
    if spec.bias is not None:
        out += spec.bias
    return out, cols


def conv2d_grad_nhwc(g: np.ndarray, x: np.ndarray, spec: ConvSpec, cols: np.ndarray | None = None):
    o = spec.kernel.shape[0]
    expected = (x.shape[0],) + conv_output_hw(x.shape[1:3], spec.kernel_size, spec.stride, spec.padding) + (o,)
    if g.shape != expected:
        raise ShapeError(f"upstream shape {g.shape} != conv output shape {expected}")
    g = np.ascontiguousarray(g)
    if cols is None:
        cols = _columns(x, spec.kernel_size, spec.stride, spec.padding, g.shape[1:3])
    gx = _scatter(g, spec.kernel, spec.stride, spec.padding, x.shape[1:3])
    return gx, _kernel_grad(g, cols, spec.kernel.shape), g.sum(axis=(0, 1, 2))


def deconv2d_nhwc(x: np.ndarray, spec: ConvSpec, output_hw=None) -> np.ndarray:
    ci, co, kh, kw = spec.kernel.shape
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D batch, got shape {x.shape}")
    if x.shape[3] != ci:
        raise ShapeError(f"input has {x.shape[3]} channels, deconv kernel expects {ci}")
    if output_hw is None:
        output_hw = deconv_output_hw(x.shape[1:3], (kh, kw), spec.stride, spec.padding)
    output_hw = tuple(output_hw)
    if conv_output_hw(output_hw, (kh, kw), spec.stride, spec.padding) != tuple(x.shape[1:3]):
        raise ShapeError(f"output size {output_hw} is not a valid pre-image of {x.shape[1:3]}")
    _check_finite(x, "deconv2d input")
    out = _scatter(np.ascontiguousarray(x), spec.kernel, spec.stride, spec.padding, output_hw)
    if spec.bias is not None:
        out = out + spec.bias
    return out


def deconv2d_grad_nhwc(g: np.ndarray, x: np.ndarray, spec: ConvSpec):
    ci, co = spec.kernel.shape[:2]
    if (
        g.ndim != 4
        or g.shape[0] != x.shape[0]
        or g.shape[3] != co
        or conv_output_hw(g.shape[1:3], spec.kernel_size, spec.stride, spec.padding) != tuple(x.shape[1:3])
    ):
        raise ShapeError(f"upstream shape {g.shape} does not match deconv output for input {x.shape}")
    # M~.T is the forward convolution with the same kernel
    gx, cols = conv2d_nhwc(g, ConvSpec(spec.kernel, None, spec.stride, spec.padding))
    gk = _kernel_grad(np.ascontiguousarray(x), cols, spec.kernel.shape)
    return gx, gk, g.sum(axis=(0, 1, 2))


def conv2d(x: np.ndarray, spec: ConvSpec, layout: str = "NCHW") -> np.ndarray:
    """``M vec(x) + bias`` for a ``(C, H, W)`` tensor or ``(N, C, H, W)`` batch."""
    xh, squeeze = _to_nhwc(x, layout)
    out, _ = conv2d_nhwc(xh, spec)
    return _from_nhwc(out, layout, squeeze)


def conv2d_grad(upstream: np.ndarray, x: np.ndarray, spec: ConvSpec, layout: str = "NCHW"):
    """Return ``(grad_input, grad_kernel, grad_bias)``; ``grad_input = M.T g``."""
    xh, squeeze = _to_nhwc(x, layout)
    gh, _ = _to_nhwc(upstream, layout)
    gx, gk, gb = conv2d_grad_nhwc(gh, xh, spec)
    return _from_nhwc(gx, layout, squeeze), gk, gb


def deconv2d(x: np.ndarray, spec: ConvSpec, output_hw=None, layout: str = "NCHW") -> np.ndarray:
    """Transposed convolution ``a = M~ b``.

    ``output_hw`` disambiguates the large-side extent when stride > 1 makes
    several sizes map to the same small side; by default the minimal size
    ``(h - 1) * s + k - 2p`` is produced.
    """
    xh, squeeze = _to_nhwc(x, layout)
    return _from_nhwc(deconv2d_nhwc(xh, spec, output_hw), layout, squeeze)


def deconv2d_grad(upstream: np.ndarray, x: np.ndarray, spec: ConvSpec, layout: str = "NCHW"):
    """Return ``(grad_input, grad_kernel, grad_bias)``; ``grad_input = M~.T g``."""
    xh, squeeze = _to_nhwc(x, layout)
    gh, _ = _to_nhwc(upstream, layout)
    gx, gk, gb = deconv2d_grad_nhwc(gh, xh, spec)
    return _from_nhwc(gx, layout, squeeze), gk, gb


def build_conv_matrix(spec: ConvSpec, input_shape) -> np.ndarray:
    """Dense ``M`` with ``conv2d(x) == M @ x.ravel()`` for a single-channel spec.

    Built by direct enumeration of kernel taps, independent of the im2col path.
    """
    if spec.kernel.shape[:2] != (1, 1):
        raise ShapeError("build_conv_matrix only supports single-channel kernels")
    h, w = input_shape[-2:]
    k = spec.kernel[0, 0]
    kh, kw = k.shape
    (sh, sw), (ph, pw) = spec.stride, spec.padding
    ho, wo = conv_output_hw((h, w), (kh, kw), spec.stride, spec.padding)
    m = np.zeros((ho * wo, h * w), dtype=spec.kernel.dtype)
    for r in range(ho):
        for c in range(wo):
            for i in range(kh):
                for j in range(kw):
                    y, x = r * sh + i - ph, c * sw + j - pw
                    if 0 <= y < h and 0 <= x < w:
                        m[r * wo + c, y * w + x] += k[i, j]
    return m


@dataclass
class PoolRecord:
    mode: str
    window: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    input_shape: tuple[int, ...]
    layout: str = "NCHW"
    argmax_indices: np.ndarray | None = None  # flat offsets into the pre-pool tensor

    @property
    def spatial_axes(self) -> tuple[int, int]:
        return _spatial_axes(len(self.input_shape), self.layout)

    @property
    def output_shape(self) -> tuple[int, ...]:
        ah, aw = self.spatial_axes
        shape = list(self.input_shape)
        shape[ah], shape[aw] = _pool_geometry(self.input_shape, self.window, self.stride, self.layout)
        return tuple(shape)


def _spatial_axes(ndim: int, layout: str) -> tuple[int, int]:
    if layout == "NCHW":
        return ndim - 2, ndim - 1
    if layout == "NHWC":
        return ndim - 3, ndim - 2
    raise ValueError(f"unknown layout {layout!r}")


def _pool_geometry(shape, window, stride, layout):
    ah, aw = _spatial_axes(len(shape), layout)
    h, w = shape[ah], shape[aw]
    (kh, kw), (sh, sw) = window, stride
    if sh < kh or sw < kw:
        raise ValueError(f"overlapping pooling windows (window {window}, stride {stride}) are not supported")
    if h < kh or w < kw or (h - kh) % sh or (w - kw) % sw:
        raise ValueError(f"window {window} with stride {stride} does not tile input {h}x{w}")
    return (h - kh) // sh + 1, (w - kw) // sw + 1


def _window_slices(record: PoolRecord, i: int, j: int):
    ah, aw = record.spatial_axes
    ho, wo = _pool_geometry(record.input_shape, record.window, record.stride, record.layout)
    (sh, sw) = record.stride
    idx = [slice(None)] * len(record.input_shape)
    idx[ah] = slice(i, i + (ho - 1) * sh + 1, sh)
    idx[aw] = slice(j, j + (wo - 1) * sw + 1, sw)
    return tuple(idx)


def pool2d(x: np.ndarray, mode: str = "max", window=(2, 2), stride=None, padding=(0, 0), layout: str = "NCHW"):
    """Non-overlapping max or average pooling; returns ``(pooled, PoolRecord)``."""
    window = _pair(window)
    stride = window if stride is None else _pair(stride)
    if _pair(padding) != (0, 0):
        raise ValueError("pooling supports padding 0 only")
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected a 3-D tensor or a 4-D batch, got shape {x.shape}")
    kh, kw = window
    record = PoolRecord(mode, window, stride, (0, 0), tuple(x.shape), layout)
    views = [x[_window_slices(record, i, j)] for i in range(kh) for j in range(kw)]
    if mode == "avg":
        return sum(views[1:], views[0].copy()) / (kh * kw), record
    # running max over window positions; the first maximum wins ties
    out = views[0].copy()
    offset = np.zeros(out.shape, dtype=np.int64)
    ah, aw = record.spatial_axes
    elem = np.cumprod((1,) + x.shape[::-1])[-2::-1]  # element stride of each axis
    for k in range(1, kh * kw):
        better = views[k] > out
        np.maximum(out, views[k], out=out)
        # masked arithmetic; np.where/copyto with masks are far slower here
        offset += better * ((k // kw) * elem[ah] + (k % kw) * elem[aw] - offset)
    for axis, size in enumerate(out.shape):
        step = elem[axis] * (record.stride[0] if axis == ah else record.stride[1] if axis == aw else 1)
        shape = [1] * out.ndim
        shape[axis] = size
        offset += (np.arange(size, dtype=np.int64) * step).reshape(shape)
    record.argmax_indices = offset
    return out, record


def _check_record(x: np.ndarray, record: PoolRecord):
    if x.shape != record.output_shape:
        raise ShapeError(f"tensor shape {x.shape} does not match pool record (expects {record.output_shape})")
    if record.mode == "max" and (record.argmax_indices is None or record.argmax_indices.shape != x.shape):
        raise ShapeError("max-pool record has missing or stale argmax indices")


def _spread(x: np.ndarray, record: PoolRecord) -> np.ndarray:
    kh, kw = record.window
    out = np.zeros(record.input_shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out[_window_slices(record, i, j)] = x
    return out


def _gather_windows(g: np.ndarray, record: PoolRecord) -> np.ndarray:
    kh, kw = record.window
    views = [g[_window_slices(record, i, j)] for i in range(kh) for j in range(kw)]
    return sum(views[1:], views[0].copy())


def unpool2d(x: np.ndarray, record: PoolRecord) -> np.ndarray:
    """Max mode restores values at their argmax offsets (zeros elsewhere);
    average mode copies each value into its whole window without rescaling."""
    _check_record(x, record)
    if record.mode == "avg":
        return _spread(x, record)
    out = np.zeros(int(np.prod(record.input_shape)), dtype=x.dtype)
    out[record.argmax_indices.ravel()] = x.ravel()
    return out.reshape(record.input_shape)


def unpool2d_grad(upstream: np.ndarray, record: PoolRecord) -> np.ndarray:
    if upstream.shape != tuple(record.input_shape):
        raise ShapeError(f"upstream shape {upstream.shape} != unpooled shape {record.input_shape}")
    if record.mode == "avg":
        return _gather_windows(upstream, record)
    return upstream.ravel()[record.argmax_indices]


def pool2d_grad(upstream: np.ndarray, record: PoolRecord) -> np.ndarray:
    _check_record(upstream, record)
    if record.mode == "avg":
        kh, kw = record.window
        return _spread(upstream, record) / (kh * kw)
    return unpool2d(upstream, record)


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map ``W x + b`` over the last axis; ``weights`` is ``(out, in)``."""
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != weight fan-in {weights.shape[1]}")
    _check_finite(x, "dense input")
    out = x @ weights.T
    if bias is not None:
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
        out = out + bias
    return out


def dense_grad(upstream: np.ndarray, x: np.ndarray, weights: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    if upstream.shape[:-1] != x.shape[:-1] or upstream.shape[-1] != weights.shape[0]:
        raise ShapeError(f"upstream shape {upstream.shape} inconsistent with input {x.shape}")
    g2 = upstream.reshape(-1, weights.shape[0])
    x2 = x.reshape(-1, weights.shape[1])
    return upstream @ weights, g2.T @ x2, g2.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    _check_finite(x, "relu input")
    return np.maximum(x, 0)


def relu_grad(upstream: np.ndarray, x: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    _check_finite(logits, "softmax input")
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_grad(upstream: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (upstream - (upstream * probs).sum(axis=-1, keepdims=True))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, eta: float = 1e-3):
    """Bias-corrected Adam update, applied in place to ``params``."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments must have equal length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} vs grad {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {i} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (eta / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params, state


def grad_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-4,
    n_probe: int | None = None,
    seed: int = 0,
    atol: float = 1e-8,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``n_probe`` limits the check to a random subset of coordinates. The
    relative error of one coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    """
    x = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    coords = np.arange(x.size)
    if n_probe is not None and n_probe < x.size:
        coords = np.random.default_rng(seed).choice(x.size, size=n_probe, replace=False)
    flat = x.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        num = (fp - fm) / (2 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), atol))
    return worst


def projected(op: Callable[[np.ndarray], np.ndarray], weights: np.ndarray) -> Callable[[np.ndarray], float]:
    """Scalarize a tensor-valued op as ``sum(op(x) * weights)`` for grad_check."""
    return lambda x: float(np.sum(op(x) * weights))


def child_rng(root: int, *path: int) -> np.random.Generator:
    """Independent generator stream ``path`` fanned out from one root seed."""
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=tuple(path)))
