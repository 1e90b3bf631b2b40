"""
Network primitives: convolution, transposed convolution, batch normalization,
activations, max pooling and channel concatenation.

All primitives take and return :class:`~odcs.tensor.Tensor` in N, C, H, W layout
and record themselves in the active :class:`~odcs.tensor.Graph`.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateStatisticsError, DimensionError
from .tensor import Tensor, record

Pair = Tuple[int, int]

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(value: Union[int, Pair]) -> Pair:
    if isinstance(value, int):
        return (value, value)
    return (int(value[0]), int(value[1]))


@dataclass(frozen=True)
class ConvSpec:
    """
    Geometry of a (transposed) convolution.

    ``output_padding`` only affects :func:`conv_transpose2d`; it selects among the
    input sizes a strided convolution maps onto the same output size.
    """

    in_channels: int
    out_channels: int
    kernel: Pair = (4, 4)
    stride: Pair = (2, 2)
    padding: Pair = (1, 1)
    output_padding: Pair = (0, 0)

    @classmethod
    def square(cls, in_channels: int, out_channels: int, kernel: int = 4, stride: int = 2,
               padding: int = 1, output_padding: int = 0) -> "ConvSpec":
        return cls(in_channels, out_channels, _pair(kernel), _pair(stride), _pair(padding),
                   _pair(output_padding))

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise DimensionError(f"channel counts must be positive: {self}")
        if min(self.kernel) <= 0 or min(self.stride) <= 0:
            raise DimensionError(f"kernel and stride must be positive: {self}")
        if min(self.padding) < 0 or min(self.output_padding) < 0:
            raise DimensionError(f"padding must be non-negative: {self}")
        for op, s in zip(self.output_padding, self.stride):
            if op >= s:
                raise DimensionError(f"output_padding {self.output_padding} must be below stride {self.stride}")

    def output_size(self, size: Pair) -> Pair:
        """Spatial size produced by :func:`conv2d`"""
        return tuple(  # type: ignore[return-value]
            (n + 2 * p - k) // s + 1
            for n, k, s, p in zip(size, self.kernel, self.stride, self.padding)
        )

    def transposed_output_size(self, size: Pair) -> Pair:
        """Spatial size produced by :func:`conv_transpose2d`"""
        return tuple(  # type: ignore[return-value]
            (n - 1) * s - 2 * p + k + op
            for n, k, s, p, op in zip(size, self.kernel, self.stride, self.padding,
                                      self.output_padding)
        )


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer"""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32),
                   momentum, eps)


def _check_4d(op: str, name: str, t: Tensor):
    if t.ndim != 4:
        raise DimensionError(f"{op}: {name} must be 4-D (N, C, H, W), got shape {t.shape}")


def _check_conv_args(op: str, x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec,
                     transposed: bool):
    _check_4d(op, "input", x)
    _check_4d(op, "weight", weight)
    w_in, w_out = (weight.shape[0], weight.shape[1]) if transposed else (weight.shape[1], weight.shape[0])
    in_axis, out_axis = (0, 1) if transposed else (1, 0)
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"{op}: input axis 1 has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if w_in != spec.in_channels:
        raise DimensionError(f"{op}: weight axis {in_axis} has {w_in} channels, spec expects {spec.in_channels}")
    if w_out != spec.out_channels:
        raise DimensionError(f"{op}: weight axis {out_axis} has {w_out} channels, spec expects {spec.out_channels}")
    if weight.shape[2:] != spec.kernel:
        raise DimensionError(f"{op}: weight axes 2-3 are {weight.shape[2:]}, spec kernel is {spec.kernel}")
    if bias.shape != (spec.out_channels,):
        raise DimensionError(f"{op}: bias axis 0 has shape {bias.shape}, expected ({spec.out_channels},)")


def _strided_windows(xp: np.ndarray, kernel: Pair, stride: Pair, out: Pair) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, out_h, out_w, kh, kw) view of the sliding windows"""
    win = sliding_window_view(xp, kernel, axis=(2, 3))
    return win[:, :, : stride[0] * (out[0] - 1) + 1 : stride[0], : stride[1] * (out[1] - 1) + 1 : stride[1]]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """
    Cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, kh, kw) plus ``bias`` (O,).
    """
    _check_conv_args("conv2d", x, weight, bias, spec, transposed=False)
    out_hw = spec.output_size(x.shape[2:])
    if min(out_hw) <= 0:
        raise DimensionError(f"conv2d: input axes 2-3 {x.shape[2:]} give non-positive output {out_hw} for {spec}")
    (ph, pw), (sh, sw), (kh, kw) = spec.padding, spec.stride, spec.kernel
    dtype = x.dtype
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = _strided_windows(xp, spec.kernel, spec.stride, out_hw)
    w = weight.data.astype(dtype, copy=False)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = (out + bias.data.astype(dtype)[None, :, None, None]).astype(dtype)
    ho, wo = out_hw

    def vjp(g):
        g_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        g_b = g.sum(axis=(0, 2, 3), dtype=np.float64)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += contrib
        g_x = gxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]]
        return g_x, g_w.astype(weight.dtype), g_b.astype(bias.dtype)

    return record("conv2d", (x, weight, bias), out, vjp)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """
    Transposed convolution of ``x`` (N, C, H, W) with ``weight`` (C, O, kh, kw) plus ``bias`` (O,).

    With zero bias this is the adjoint of :func:`conv2d` under the same ``spec``.
    """
    _check_conv_args("conv_transpose2d", x, weight, bias, spec, transposed=True)
    h, w_in = x.shape[2:]
    ho, wo = spec.transposed_output_size((h, w_in))
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv_transpose2d: input axes 2-3 {x.shape[2:]} give non-positive output {(ho, wo)}")
    (ph, pw), (sh, sw), (kh, kw) = spec.padding, spec.stride, spec.kernel
    dtype = x.dtype
    full_h = max((h - 1) * sh + kh, ph + ho)
    full_w = max((w_in - 1) * sw + kw, pw + wo)
    wt = weight.data.astype(dtype, copy=False)

    buf = np.zeros((x.shape[0], spec.out_channels, full_h, full_w), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x.data, wt[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            buf[:, :, i : i + sh * (h - 1) + 1 : sh, j : j + sw * (w_in - 1) + 1 : sw] += contrib
    out = buf[:, :, ph : ph + ho, pw : pw + wo] + bias.data.astype(dtype)[None, :, None, None]

    def vjp(g):
        gbuf = np.zeros((g.shape[0], g.shape[1], full_h, full_w), dtype=g.dtype)
        gbuf[:, :, ph : ph + ho, pw : pw + wo] = g
        win = _strided_windows(gbuf, spec.kernel, spec.stride, (h, w_in))
        g_x = np.tensordot(win, wt, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        g_w = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        g_b = g.sum(axis=(0, 2, 3), dtype=np.float64)
        return g_x.astype(x.dtype), g_w.astype(weight.dtype), g_b.astype(bias.dtype)

    return record("conv_transpose2d", (x, weight, bias), out.astype(dtype), vjp)


def batch_statistics(x: Tensor) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance of an N, C, H, W tensor, in 64-bit"""
    _check_4d("batch_statistics", "input", x)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise DegenerateStatisticsError(
            f"batch_statistics: need at least 2 values per channel, got {m} "
            f"(batch {x.shape[0]} x spatial {x.shape[2]}x{x.shape[3]})")
    x64 = x.data.astype(np.float64)
    return x64.mean(axis=(0, 2, 3)), x64.var(axis=(0, 2, 3))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool = True,
                stats: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """
    Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    statistics follow them by exponential moving average; in eval mode the
    running statistics are used as-is. Statistics are accumulated in 64-bit.

    ``stats`` pins the (mean, variance) used for normalization, overriding
    ``training``; they are constants for differentiation and the running
    statistics are left unchanged.
    """
    _check_4d("batchnorm2d", "input", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: gamma/beta axis 0 must be ({c},), got {gamma.shape} and {beta.shape}")
    if state.running_mean.shape != (c,):
        raise DimensionError(f"batchnorm2d: running statistics have {state.running_mean.shape[0]} channels, input has {c}")
    if stats is not None and (np.shape(stats[0]) != (c,) or np.shape(stats[1]) != (c,)):
        raise DimensionError(f"batchnorm2d: reference statistics must have {c} channels")
    dtype = x.dtype
    x64 = x.data.astype(np.float64)
    g64 = gamma.data.astype(np.float64)[None, :, None, None]
    b64 = beta.data.astype(np.float64)[None, :, None, None]

    if stats is not None or not training:
        if stats is not None:
            mu, var = (np.asarray(s, dtype=np.float64) for s in stats)
        else:
            mu, var = state.running_mean.astype(np.float64), state.running_var.astype(np.float64)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x64 - mu[None, :, None, None]) * inv[None, :, None, None]
        out = (g64 * xhat + b64).astype(dtype)

        def vjp_eval(g):
            g = g.astype(np.float64)
            return ((g * g64 * inv[None, :, None, None]).astype(x.dtype),
                    (g * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype),
                    g.sum(axis=(0, 2, 3)).astype(beta.dtype))

        return record("batchnorm2d", (x, gamma, beta), out, vjp_eval)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise DegenerateStatisticsError(
            f"batchnorm2d: training mode needs at least 2 values per channel, got {m} "
            f"(batch {x.shape[0]} x spatial {x.shape[2]}x{x.shape[3]})")
    mu = x64.mean(axis=(0, 2, 3))
    var = x64.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x64 - mu[None, :, None, None]) * inv[None, :, None, None]
    out = (g64 * xhat + b64).astype(dtype)

    mom = state.momentum
    state.running_mean = ((1.0 - mom) * state.running_mean + mom * mu).astype(state.running_mean.dtype)
    state.running_var = ((1.0 - mom) * state.running_var + mom * var * m / (m - 1)).astype(state.running_var.dtype)

    def vjp(g):
        g = g.astype(np.float64)
        g_gamma = (g * xhat).sum(axis=(0, 2, 3))
        g_beta = g.sum(axis=(0, 2, 3))
        dxhat = g * g64
        g_x = (inv[None, :, None, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return g_x.astype(x.dtype), g_gamma.astype(gamma.dtype), g_beta.astype(beta.dtype)

    return record("batchnorm2d", (x, gamma, beta), out, vjp)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data).astype(x.dtype)
    scale = np.where(positive, 1.0, slope).astype(x.dtype)
    return record("leaky_relu", (x,), out, lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    positive = x.data > 0
    return record("relu", (x,), np.where(positive, x.data, 0).astype(x.dtype),
                  lambda g: (g * positive,))


def tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent, kept strictly inside (-1, 1) at the tensor's precision"""
    limit = 1.0 - np.finfo(x.dtype).epsneg
    out = np.clip(np.tanh(x.data), -limit, limit).astype(x.dtype)
    return record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def activation(x: Tensor, kind: str, slope: float = LEAKY_SLOPE) -> Tensor:
    """Dispatch on ``kind``: ``leaky_relu``, ``relu`` or ``tanh``"""
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ContractError(f"unknown activation {kind!r}; expected leaky_relu, relu or tanh")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Per-window maximum; the gradient goes to the first maximal element of each window"""
    _check_4d("maxpool2d", "input", x)
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"maxpool2d: input axes 2-3 {x.shape[2:]} smaller than window {window}")
    win = _strided_windows(x.data, (window, window), (stride, stride), (ho, wo))
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    rows = np.arange(ho)[None, None, :, None] * stride + arg // window
    cols = np.arange(wo)[None, None, None, :] * stride + arg % window
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]

    def vjp(g):
        g_x = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(g_x, (ni, ci, rows, cols), g)
        return (g_x,)

    return record("maxpool2d", (x,), np.ascontiguousarray(out), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two N, C, H, W tensors along the channel axis"""
    _check_4d("concat_channels", "first input", a)
    _check_4d("concat_channels", "second input", b)
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(
                f"concat_channels: {name} axis {axis} differs ({a.shape[axis]} vs {b.shape[axis]})")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype)], axis=1)
    return record("concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of an N, C, H, W tensor"""
    _check_4d("slice_channels", "input", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_channels: [{start}:{stop}] outside channel axis of size {x.shape[1]}")

    def vjp(g):
        g_x = np.zeros(x.shape, dtype=g.dtype)
        g_x[:, start:stop] = g
        return (g_x,)

    return record("slice_channels", (x,), x.data[:, start:stop].copy(), vjp)
