"""Second-order non-local attention.

For a feature map flattened to ``hw x c`` the block projects to ``c/r``
channels twice (``theta`` with conv + BN + LeakyReLU, ``g`` with a bare conv),
forms the spatial covariance

    cov = theta @ Ibar @ theta.T,   Ibar = a * (I - a * ones),   a = r / c,

turns ``cov / sqrt(c/r)`` into row-wise attention with a softmax, attends over
``g`` and maps back to ``c`` channels through a 1x1 conv ``p`` added
residually. ``Ibar`` is never materialised: ``cov[i, j] = a * (<t_i, t_j> -
a * sum(t_i) * sum(t_j))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .nn import (
    BatchNormState,
    Conv2dParams,
    batch_norm,
    conv2d,
    init_batch_norm,
    init_conv,
    leaky_relu,
    softmax_rows,
)
from .tensor import Tensor, add, matmul, mul, no_grad, reshape, sub, swap_last, transpose, tsum


@dataclass(frozen=True)
class SonaConfig:
    channels: int
    reduction: int = 2
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.channels <= 0 or self.reduction <= 0:
            raise ContractError("channels and reduction must be positive")
        if self.channels % self.reduction:
            raise ContractError(f"reduction {self.reduction} does not divide {self.channels} channels")
        if self.inner < 2:
            raise ContractError(f"c/r must be at least 2, got {self.inner}")

    @property
    def inner(self) -> int:
        return self.channels // self.reduction


@dataclass
class SonaParams:
    theta: Conv2dParams
    theta_bn: BatchNormState
    g: Conv2dParams
    p: Conv2dParams


def init_sona(rng: np.random.Generator, cfg: SonaConfig) -> SonaParams:
    """theta and g get Kaiming-uniform weights; p starts at zero so the block
    is an exact identity until trained."""
    c, k = cfg.channels, cfg.inner
    return SonaParams(
        theta=init_conv(rng, c, k, 1, bias=True),
        theta_bn=init_batch_norm(k),
        g=init_conv(rng, c, k, 1, bias=True),
        p=init_conv(rng, k, c, 1, bias=True, zero=True),
    )


def count_params(params: SonaParams) -> int:
    tensors = [params.theta.weight, params.theta.bias, params.g.weight, params.g.bias,
               params.p.weight, params.p.bias, params.theta_bn.scale, params.theta_bn.shift]
    return sum(t.size for t in tensors if t is not None)


def spatial_covariance(theta_x: Tensor) -> Tensor:
    """Covariance across positions of ``hw x k`` (or ``n x hw x k``) features,
    centred over the channel axis."""
    if theta_x.ndim not in (2, 3):
        raise ShapeError(f"spatial_covariance expects hw x k or n x hw x k, got {theta_x.shape}")
    k = theta_x.shape[-1]
    if k < 2:
        raise ContractError(f"spatial_covariance needs at least 2 channels, got {k}")
    a = 1.0 / k
    # The centring annihilates per-row constants, so shifting each row by its
    # first entry leaves the result and its gradient unchanged while making
    # channel-constant rows exactly zero (no cancellation residue).
    shift = np.broadcast_to(theta_x.data[..., :1], theta_x.shape).copy()
    theta_x = sub(theta_x, Tensor(shift))
    gram = matmul(theta_x, swap_last(theta_x))
    s = tsum(theta_x, axis=-1, keepdims=True)
    outer = matmul(s, swap_last(s))
    return mul(sub(gram, mul(outer, a)), a)


def _project(x: Tensor, params: SonaParams, cfg: SonaConfig) -> tuple[Tensor, Tensor]:
    n, c, h, w = x.shape
    if c != cfg.channels or params.theta.in_channels != c:
        raise ShapeError(f"sona: input has {c} channels, module configured for {cfg.channels}")
    k = cfg.inner
    theta = leaky_relu(batch_norm(conv2d(x, params.theta), params.theta_bn), cfg.leaky_slope)
    g = conv2d(x, params.g)
    # n x k x hw -> n x hw x k
    theta = transpose(reshape(theta, (n, k, h * w)), (0, 2, 1))
    g = transpose(reshape(g, (n, k, h * w)), (0, 2, 1))
    return theta, g


def attention_from_theta(theta: Tensor, inner: int) -> Tensor:
    return softmax_rows(mul(spatial_covariance(theta), 1.0 / math.sqrt(inner)))


def sona_attention(x: Tensor, params: SonaParams, cfg: SonaConfig) -> Tensor:
    """Row-stochastic ``n x hw x hw`` attention matrices."""
    theta, _ = _project(x, params, cfg)
    return attention_from_theta(theta, cfg.inner)


def sona_forward(x: Tensor, params: SonaParams, cfg: SonaConfig) -> Tensor:
    n, c, h, w = x.shape
    theta, g = _project(x, params, cfg)
    attn = attention_from_theta(theta, cfg.inner)
    z = matmul(attn, g)  # n x hw x k
    z = reshape(transpose(z, (0, 2, 1)), (n, cfg.inner, h, w))
    return add(x, conv2d(z, params.p))


def attention_heatmap(
    x: Tensor, params: SonaParams, cfg: SonaConfig, ref: tuple[int, int], sample: int = 0
) -> np.ndarray:
    """Attention paid by position ``ref`` to every position, as an ``h x w``
    map summing to one. Uses whatever BN mode ``params`` is in."""
    n, _, h, w = x.shape
    r, c = ref
    if not (0 <= r < h and 0 <= c < w):
        raise ContractError(f"reference point {ref} outside the {h}x{w} feature map")
    if not 0 <= sample < n:
        raise ContractError(f"sample {sample} outside batch of {n}")
    with no_grad():
        attn = sona_attention(x, params, cfg)
    return attn.data[sample, r * w + c].reshape(h, w).copy()
