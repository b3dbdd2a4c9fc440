"""Neural-network primitives on :class:`~sonanet.tensor.Tensor`.

Convolutions are cross-correlations in NCHW layout lowered to a matmul over
gathered patches. Each primitive carries a hand-written backward; the test
suite checks all of them against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor, add, make_op

Pair = tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass
class Conv2dParams:
    weight: Tensor  # out_c x in_c x kh x kw
    bias: Tensor | None = None
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormState:
    scale: Tensor
    shift: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: Literal["train", "eval"] = "train"

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


@dataclass
class BottleneckParams:
    conv1: Conv2dParams
    bn1: BatchNormState
    conv2: Conv2dParams
    bn2: BatchNormState
    conv3: Conv2dParams
    bn3: BatchNormState
    proj_conv: Conv2dParams | None = None
    proj_bn: BatchNormState | None = None


# initialisers ------------------------------------------------------------------


def init_conv(
    rng: np.random.Generator,
    in_c: int,
    out_c: int,
    kernel=1,
    *,
    bias: bool = False,
    stride=1,
    padding=0,
    dilation=1,
    zero: bool = False,
) -> Conv2dParams:
    kh, kw = _pair(kernel)
    fan_in = in_c * kh * kw
    if zero:
        w = np.zeros((out_c, in_c, kh, kw))
    else:
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(out_c, in_c, kh, kw))
    b = Tensor(np.zeros(out_c), requires_grad=True) if bias else None
    return Conv2dParams(
        Tensor(w, requires_grad=True), b, _pair(stride), _pair(padding), _pair(dilation)
    )


def init_batch_norm(c: int, momentum: float = 0.1, epsilon: float = 1e-5) -> BatchNormState:
    return BatchNormState(
        scale=Tensor(np.ones(c), requires_grad=True),
        shift=Tensor(np.zeros(c), requires_grad=True),
        running_mean=Tensor(np.zeros(c)),
        running_var=Tensor(np.ones(c)),
        momentum=momentum,
        epsilon=epsilon,
    )


def init_bottleneck(
    rng: np.random.Generator,
    in_c: int,
    out_c: int,
    *,
    expansion: int = 4,
    stride: int = 1,
    dilation: int = 1,
) -> BottleneckParams:
    mid = max(out_c // expansion, 1)
    p = BottleneckParams(
        conv1=init_conv(rng, in_c, mid, 1),
        bn1=init_batch_norm(mid),
        conv2=init_conv(rng, mid, mid, 3, stride=stride, padding=dilation, dilation=dilation),
        bn2=init_batch_norm(mid),
        conv3=init_conv(rng, mid, out_c, 1),
        bn3=init_batch_norm(out_c),
    )
    if in_c != out_c or stride != 1:
        p.proj_conv = init_conv(rng, in_c, out_c, 1, stride=stride)
        p.proj_bn = init_batch_norm(out_c)
    return p


# convolution ----------------------------------------------------------------------


def conv_output_size(n: int, k: int, s: int, p: int, d: int) -> int:
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects n x c x h x w input, got {x.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = p.weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ic}")
    (sh, sw), (ph, pw), (dh, dw) = p.stride, p.padding, p.dilation
    oh = conv_output_size(h, kh, sh, ph, dh)
    ow = conv_output_size(w, kw, sw, pw, dw)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: non-positive output extent {oh}x{ow} for input {h}x{w}")

    if kh == kw == 1 and ph == pw == 0 and sh == sw == 1:
        cols = x.data.reshape(n, c, h * w)
        slices = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
        cols6 = np.empty((n, c, kh, kw, oh, ow), dtype=x.data.dtype)
        slices = []
        for i in range(kh):
            for j in range(kw):
                sl = (
                    slice(i * dh, i * dh + sh * (oh - 1) + 1, sh),
                    slice(j * dw, j * dw + sw * (ow - 1) + 1, sw),
                )
                slices.append((i, j, sl))
                cols6[:, :, i, j] = xp[:, :, sl[0], sl[1]]
        cols = cols6.reshape(n, c * kh * kw, oh * ow)

    w2 = p.weight.data.reshape(oc, -1)
    out = np.matmul(w2, cols)
    if p.bias is not None:
        out += p.bias.data[None, :, None]
    out = out.reshape(n, oc, oh, ow)

    parents = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def bw(g):
        g2 = g.reshape(n, oc, oh * ow)
        gw = np.einsum("nop,nkp->ok", g2, cols).reshape(p.weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if slices is None:
                gx = gcols.reshape(x.shape)
            else:
                gcols6 = gcols.reshape(n, c, kh, kw, oh, ow)
                gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
                for i, j, sl in slices:
                    gxp[:, :, sl[0], sl[1]] += gcols6[:, :, i, j]
                gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if p.bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return make_op(out, parents, bw, "conv2d")


# normalisation -----------------------------------------------------------------------


def batch_norm(x: Tensor, s: BatchNormState) -> Tensor:
    """Per-channel normalisation of ``n x c`` or ``n x c x h x w`` input.

    Train mode normalises with biased batch statistics and moves the running
    estimates (unbiased variance) by ``momentum``; eval mode uses the running
    estimates.
    """
    if x.ndim not in (2, 4) or x.shape[1] != s.channels:
        raise ShapeError(f"batch_norm: input {x.shape} does not match {s.channels} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    m = x.size // s.channels
    gamma = s.scale.data.reshape(bshape)
    beta = s.shift.data.reshape(bshape)

    if s.mode == "train":
        if m < 2:
            raise ContractError(f"batch_norm in train mode needs n*h*w >= 2, got {m}")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + s.epsilon)
        xhat = (x.data - mu) * inv
        mom = s.momentum
        s.running_mean.data = (1 - mom) * s.running_mean.data + mom * mu.reshape(-1)
        s.running_var.data = (1 - mom) * s.running_var.data + mom * var.reshape(-1) * m / (m - 1)

        def bw(g):
            gxhat = g * gamma
            gx = inv / m * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv = 1.0 / np.sqrt(s.running_var.data.reshape(bshape) + s.epsilon)
        xhat = (x.data - s.running_mean.data.reshape(bshape)) * inv

        def bw(g):
            return g * gamma * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_op(gamma * xhat + beta, (x, s.scale, s.shift), bw, "batch_norm")


# activations ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope)
    return make_op(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def activation(x: Tensor, kind: str = "relu", slope: float = 0.01) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


# pooling ----------------------------------------------------------------------------------


def global_pool(x: Tensor, kind: Literal["avg", "max"] = "avg") -> Tensor:
    """Reduce ``n x c x h x w`` to ``n x c``. Max ties go to the first
    position in row-major order."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    if kind == "avg":
        hw = h * w
        return make_op(
            flat.mean(axis=2),
            (x,),
            lambda g: (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),),
            "gap",
        )
    if kind == "max":
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

        def bw(g):
            gx = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
            return (gx.reshape(x.shape),)

        return make_op(out, (x,), bw, "gmp")
    raise ValueError(f"unknown pooling {kind!r}")


# softmax ----------------------------------------------------------------------------------


def _check_finite(a: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise NumericError(f"{op}: non-finite input at index {tuple(int(i) for i in bad)}")


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    _check_finite(m.data, "softmax_rows")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (m,), bw, "softmax")


def log_softmax_rows(m: Tensor) -> Tensor:
    _check_finite(m.data, "log_softmax_rows")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return make_op(out, (m,), bw, "log_softmax")


# dense layers -------------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` for ``x: B x d_in`` and ``weight: d_out x d_in``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    return make_op(xd @ wd.T, (x, weight), lambda g: (g @ wd, g.T @ xd), "linear")


# residual block ------------------------------------------------------------------------------


def bottleneck(x: Tensor, p: BottleneckParams) -> Tensor:
    """``relu(shortcut(x) + F(x))`` with F = 1x1 -> BN -> relu -> 3x3 -> BN ->
    relu -> 1x1 -> BN."""
    if x.shape[1] != p.conv1.in_channels:
        raise ShapeError(f"bottleneck: input has {x.shape[1]} channels, block expects {p.conv1.in_channels}")
    if p.proj_conv is None and p.conv3.out_channels != p.conv1.in_channels:
        raise ShapeError("bottleneck: channel change without a projection")
    y = relu(batch_norm(conv2d(x, p.conv1), p.bn1))
    y = relu(batch_norm(conv2d(y, p.conv2), p.bn2))
    y = batch_norm(conv2d(y, p.conv3), p.bn3)
    short = x if p.proj_conv is None else batch_norm(conv2d(x, p.proj_conv), p.proj_bn)
    if short.shape != y.shape:
        raise ShapeError(f"bottleneck: residual shapes {short.shape} and {y.shape} differ")
    return relu(add(short, y))
