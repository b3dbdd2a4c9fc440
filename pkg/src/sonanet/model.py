"""Two-branch re-identification network with optional SONA blocks.

Backbone: a strided stem followed by four stages of bottleneck blocks.
Stages 3 and 4 keep stride 1 (dilated instead) so the final map has stage 2's
spatial size. SONA blocks may follow stage 2, 3 or 4.

Global branch: GAP -> 1x1 reduce -> BN -> ReLU.
Local branch: bottleneck -> DropBlock+ -> GMP -> 1x1 reduce -> BN -> ReLU.
Each branch has a bias-free linear classifier; the test-time embedding is
the concatenation of the two reduced features.
"""

from __future__ import annotations

import dataclasses
import hashlib
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .dropblock import DropBlockPlusConfig, apply_mask, sample_masks
from .errors import ContractError, ShapeError
from .nn import (
    BatchNormState,
    BottleneckParams,
    Conv2dParams,
    batch_norm,
    bottleneck,
    conv2d,
    conv_output_size,
    global_pool,
    init_batch_norm,
    init_bottleneck,
    init_conv,
    linear,
    relu,
)
from .sona import SonaConfig, SonaParams, init_sona, sona_forward
from .tensor import Tensor, no_grad, reshape

SITES = ("after_stage2", "after_stage3", "after_stage4")


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    out_channels: int
    stride: int
    dilation: int = 1


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stem_stride: int = 2
    stages: tuple[StageSpec, ...] = (
        StageSpec(1, 16, 2, 1),
        StageSpec(1, 32, 2, 1),
        StageSpec(1, 64, 1, 2),
        StageSpec(1, 128, 1, 2),
    )
    expansion: int = 4

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ContractError("the backbone has exactly four stages")
        for i in (2, 3):
            if self.stages[i].stride != 1:
                raise ContractError(f"stage {i + 1} must keep stride 1 to preserve stage 2's spatial size")
        for s in self.stages:
            if s.blocks < 1 or s.out_channels < 1 or s.stride < 1 or s.dilation < 1:
                raise ContractError(f"invalid stage spec {s}")

    @property
    def out_channels(self) -> int:
        return self.stages[-1].out_channels


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 64
    input_width: int = 32
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sona_sites: tuple[str, ...] = ("after_stage2",)
    sona_reduction: int = 2
    leaky_slope: float = 0.01
    dropblock: DropBlockPlusConfig = field(
        default_factory=lambda: DropBlockPlusConfig(gamma=0.1, block_height=1, block_width=2)
    )
    global_dim: int = 32
    local_dim: int = 64
    num_classes: int = 8
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        for s in self.sona_sites:
            if s not in SITES:
                raise ContractError(f"unknown SONA site {s!r}; choose from {SITES}")
        if len(set(self.sona_sites)) != len(self.sona_sites):
            raise ContractError("duplicate SONA site")
        if self.global_dim >= self.backbone.out_channels:
            raise ContractError("global_dim must be smaller than the backbone output channels")
        if self.local_dim != 2 * self.global_dim:
            raise ContractError("local_dim must be twice global_dim")
        if self.num_classes < 2:
            raise ContractError("need at least two classes")

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, h, w) after each stage."""
        h = conv_output_size(self.input_height, 3, self.backbone.stem_stride, 1, 1)
        w = conv_output_size(self.input_width, 3, self.backbone.stem_stride, 1, 1)
        shapes = []
        for s in self.backbone.stages:
            h = conv_output_size(h, 3, s.stride, s.dilation, s.dilation)
            w = conv_output_size(w, 3, s.stride, s.dilation, s.dilation)
            if h < 1 or w < 1:
                raise ContractError(f"input {self.input_height}x{self.input_width} is too small for the backbone")
            shapes.append((s.out_channels, h, w))
        return shapes

    @property
    def embedding_dim(self) -> int:
        return self.global_dim + self.local_dim


@dataclass
class ModelState:
    cfg: ModelConfig
    stem: Conv2dParams
    stem_bn: BatchNormState
    stages: list[list[BottleneckParams]]
    sona: dict[str, SonaParams]
    sona_cfg: dict[str, SonaConfig]
    global_reduce: Conv2dParams
    global_bn: BatchNormState
    local_block: BottleneckParams
    local_reduce: Conv2dParams
    local_bn: BatchNormState
    global_classifier: Tensor
    local_classifier: Tensor
    mode: str = "train"


def _component_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per component, so adding SONA leaves every other init untouched
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def build(cfg: ModelConfig, seed: int = 0) -> ModelState:
    shapes = cfg.stage_shapes()
    fc, fh, fw = shapes[-1]
    db = cfg.dropblock
    if db.block_height > fh or db.block_width > fw:
        raise ContractError(f"DropBlock+ block {db.block_height}x{db.block_width} exceeds the {fh}x{fw} feature map")
    if "after_stage4" in cfg.sona_sites:
        warnings.warn("SONA after stage 4 is supported but degrades accuracy; prefer stages 2/3", stacklevel=2)
    bb = cfg.backbone
    mom, eps = cfg.bn_momentum, cfg.bn_epsilon

    def bn(c):
        return init_batch_norm(c, mom, eps)

    def block(name, in_c, out_c, stride, dilation):
        p = init_bottleneck(_component_rng(seed, name), in_c, out_c, expansion=bb.expansion,
                            stride=stride, dilation=dilation)
        for s in (p.bn1, p.bn2, p.bn3, p.proj_bn):
            if s is not None:
                s.momentum, s.epsilon = mom, eps
        return p

    stem = init_conv(_component_rng(seed, "stem"), 3, bb.stem_channels, 3, stride=bb.stem_stride, padding=1)
    stages = []
    in_c = bb.stem_channels
    for si, spec in enumerate(bb.stages, start=1):
        blocks = []
        for bi in range(spec.blocks):
            stride = spec.stride if bi == 0 else 1
            blocks.append(block(f"stage{si}.block{bi}", in_c, spec.out_channels, stride, spec.dilation))
            in_c = spec.out_channels
        stages.append(blocks)

    sona, sona_cfg = {}, {}
    for site in cfg.sona_sites:
        c = shapes[int(site[-1]) - 1][0]
        scfg = SonaConfig(c, cfg.sona_reduction, cfg.leaky_slope)
        p = init_sona(_component_rng(seed, f"sona.{site}"), scfg)
        p.theta_bn.momentum, p.theta_bn.epsilon = mom, eps
        sona[site], sona_cfg[site] = p, scfg

    rng_head = _component_rng(seed, "heads")
    state = ModelState(
        cfg=cfg,
        stem=stem,
        stem_bn=bn(bb.stem_channels),
        stages=stages,
        sona=sona,
        sona_cfg=sona_cfg,
        global_reduce=init_conv(rng_head, fc, cfg.global_dim, 1),
        global_bn=bn(cfg.global_dim),
        local_block=block("local.block", fc, fc, 1, 1),
        local_reduce=init_conv(rng_head, fc, cfg.local_dim, 1),
        local_bn=bn(cfg.local_dim),
        global_classifier=Tensor(rng_head.normal(0, 0.01, (cfg.num_classes, cfg.global_dim)), requires_grad=True),
        local_classifier=Tensor(rng_head.normal(0, 0.01, (cfg.num_classes, cfg.local_dim)), requires_grad=True),
    )
    return state


# parameter bookkeeping ---------------------------------------------------------


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor, bool]]:
    """Yield (name, tensor, is_buffer) in a fixed order."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj, False
    elif isinstance(obj, BatchNormState):
        yield f"{prefix}.scale", obj.scale, False
        yield f"{prefix}.shift", obj.shift, False
        yield f"{prefix}.running_mean", obj.running_mean, True
        yield f"{prefix}.running_var", obj.running_var, True
    elif isinstance(obj, (Conv2dParams, BottleneckParams, SonaParams)):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}")


def named_tensors(state: ModelState) -> list[tuple[str, Tensor, bool]]:
    out = []
    out += _walk(state.stem, "backbone.stem.conv")
    out += _walk(state.stem_bn, "backbone.stem.bn")
    for si, blocks in enumerate(state.stages, start=1):
        for bi, b in enumerate(blocks):
            out += _walk(b, f"backbone.stage{si}.block{bi}")
    for site in SITES:
        if site in state.sona:
            out += _walk(state.sona[site], f"sona.{site}")
    out += _walk(state.global_reduce, "global.reduce.conv")
    out += _walk(state.global_bn, "global.reduce.bn")
    out += _walk(state.global_classifier, "global.classifier.weight")
    out += _walk(state.local_block, "local.bottleneck")
    out += _walk(state.local_reduce, "local.reduce.conv")
    out += _walk(state.local_bn, "local.reduce.bn")
    out += _walk(state.local_classifier, "local.classifier.weight")
    return out


def parameters(state: ModelState) -> list[tuple[str, Tensor]]:
    return [(n, t) for n, t, buf in named_tensors(state) if not buf]


def count_parameters(state: ModelState) -> int:
    return sum(t.size for _, t in parameters(state))


def checksum(state: ModelState) -> str:
    h = hashlib.sha256()
    for name, t, _ in named_tensors(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _bn_states(state: ModelState) -> Iterator[BatchNormState]:
    yield state.stem_bn
    for blocks in state.stages:
        for b in blocks:
            yield from _block_bns(b)
    for p in state.sona.values():
        yield p.theta_bn
    yield state.global_bn
    yield from _block_bns(state.local_block)
    yield state.local_bn


def _block_bns(b: BottleneckParams):
    for s in (b.bn1, b.bn2, b.bn3, b.proj_bn):
        if s is not None:
            yield s


def set_mode(state: ModelState, mode: str) -> ModelState:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    state.mode = mode
    for s in _bn_states(state):
        s.mode = mode
    return state


# forward passes ----------------------------------------------------------------


def backbone_forward(state: ModelState, x: Tensor, stop_after: str | None = None) -> Tensor:
    """Run the backbone (with SONA blocks). ``stop_after='stageK'`` returns
    the stage-K output before any SONA at that site."""
    y = relu(batch_norm(conv2d(x, state.stem), state.stem_bn))
    for si, blocks in enumerate(state.stages, start=1):
        for b in blocks:
            y = bottleneck(y, b)
        if stop_after == f"stage{si}":
            return y
        site = f"after_stage{si}"
        if site in state.sona:
            y = sona_forward(y, state.sona[site], state.sona_cfg[site])
    return y


def _reduce(v: Tensor, conv: Conv2dParams, bn: BatchNormState) -> Tensor:
    n, c = v.shape
    y = conv2d(reshape(v, (n, c, 1, 1)), conv)
    y = reshape(y, (n, conv.out_channels))
    return relu(batch_norm(y, bn))


def _as_batch(images) -> Tensor:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected n x 3 x H x W images, got {arr.shape}")
    return images if isinstance(images, Tensor) and images.ndim == 4 else Tensor._wrap(arr)


def _branches(state: ModelState, x: Tensor, masks=None) -> tuple[Tensor, Tensor]:
    cfg = state.cfg
    if x.shape[2:] != (cfg.input_height, cfg.input_width):
        raise ShapeError(f"model expects {cfg.input_height}x{cfg.input_width} input, got {x.shape[2:]}")
    fmap = backbone_forward(state, x)
    gfeat = _reduce(global_pool(fmap, "avg"), state.global_reduce, state.global_bn)
    local = bottleneck(fmap, state.local_block)
    if masks is not None:
        local = apply_mask(local, masks)
    lfeat = _reduce(global_pool(local, "max"), state.local_reduce, state.local_bn)
    return gfeat, lfeat


def local_map_shape(cfg: ModelConfig) -> tuple[int, int]:
    _, h, w = cfg.stage_shapes()[-1]
    return h, w


def forward_train(state: ModelState, images, rng: np.random.Generator | None = None, masks=None) -> dict:
    """Training forward. DropBlock+ masks are drawn from ``rng`` unless given
    explicitly (pass frozen masks for gradient checks)."""
    if state.mode != "train":
        raise ContractError("forward_train called on a model in eval mode")
    x = _as_batch(images)
    db = state.cfg.dropblock
    if db.enabled and masks is None:
        if rng is None:
            raise ContractError("DropBlock+ is enabled: pass an rng or explicit masks")
        h, w = local_map_shape(state.cfg)
        masks = sample_masks(x.shape[0], h, w, db, rng)
    if not db.enabled:
        masks = None
    gfeat, lfeat = _branches(state, x, masks)
    return {
        "global_feat": gfeat,
        "local_feat": lfeat,
        "global_logits": linear(gfeat, state.global_classifier),
        "local_logits": linear(lfeat, state.local_classifier),
    }


def embed(state: ModelState, images, flip_average: bool = True) -> np.ndarray:
    """Concatenated global+local features, optionally averaged with the
    features of the horizontally mirrored image."""
    if state.mode != "eval":
        raise ContractError("embed requires eval mode")
    x = _as_batch(images)
    with no_grad():
        g, l = _branches(state, x)
        feat = np.concatenate([g.data, l.data], axis=1)
        if flip_average:
            g2, l2 = _branches(state, Tensor._wrap(np.ascontiguousarray(x.data[..., ::-1])))
            feat = (feat + np.concatenate([g2.data, l2.data], axis=1)) / 2.0
    return feat
