"""DropBlock+ : structured spatial dropout with rectangular blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, make_op


@dataclass(frozen=True)
class DropBlockPlusConfig:
    gamma: float = 0.1
    block_height: int = 5
    block_width: int = 8
    enabled: bool = True
    # draw block extents uniformly from 1..block_{height,width} on every mask
    random_size: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.block_height < 1 or self.block_width < 1:
            raise ContractError("block extents must be positive")


def sample_mask(h: int, w: int, cfg: DropBlockPlusConfig, rng: np.random.Generator) -> np.ndarray:
    """Binary ``h x w`` keep-mask.

    Seeds are Bernoulli(gamma) over the anchors where a full block fits; each
    seed zeroes the block whose top-left corner it marks. An all-zero result
    is replaced by all ones.
    """
    if cfg.block_height > h or cfg.block_width > w:
        raise ContractError(
            f"block {cfg.block_height}x{cfg.block_width} does not fit a {h}x{w} map"
        )
    bh, bw = cfg.block_height, cfg.block_width
    if cfg.random_size:
        bh = int(rng.integers(1, bh + 1))
        bw = int(rng.integers(1, bw + 1))
    ah, aw = h - bh + 1, w - bw + 1
    seeds = rng.random((ah, aw)) < cfg.gamma
    dropped = np.zeros((h, w), dtype=bool)
    for di in range(bh):
        for dj in range(bw):
            dropped[di : di + ah, dj : dj + aw] |= seeds
    if dropped.all():
        return np.ones((h, w))
    return (~dropped).astype(np.float64)


def sample_masks(n: int, h: int, w: int, cfg: DropBlockPlusConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_mask(h, w, cfg, rng) for _ in range(n)])


def apply_mask(x: Tensor, masks: np.ndarray) -> Tensor:
    """``x * mask * (h*w / sum(mask))`` with one mask per sample, shared over
    channels."""
    n, _, h, w = x.shape
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape != (n, h, w):
        raise ShapeError(f"apply_mask: masks {masks.shape} do not match input {x.shape}")
    kept = masks.reshape(n, -1).sum(axis=1)
    if np.any(kept <= 0):
        raise ContractError("apply_mask: a mask keeps no cells")
    factor = (masks * (h * w / kept)[:, None, None])[:, None, :, :]
    return make_op(x.data * factor, (x,), lambda g: (g * factor,), "dropblock")


def dropblock_plus(
    x: Tensor, cfg: DropBlockPlusConfig, rng: np.random.Generator, training: bool = True
) -> Tensor:
    if not (cfg.enabled and training):
        return x
    n, _, h, w = x.shape
    return apply_mask(x, sample_masks(n, h, w, cfg, rng))
