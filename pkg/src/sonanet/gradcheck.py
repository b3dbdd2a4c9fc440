"""Finite-difference checks for every differentiable operation.

Each check builds small random inputs from a fixed seed, runs
:func:`grad_check_many` and returns the worst relative error. Groups can be
run on their own from the CLI.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dropblock import DropBlockPlusConfig, apply_mask, sample_masks
from .losses import batch_hard_triplet, label_smoothed_ce, reid_loss
from .model import BackboneConfig, ModelConfig, StageSpec, build, forward_train, local_map_shape, parameters
from .nn import (
    Conv2dParams,
    batch_norm,
    bottleneck,
    conv2d,
    global_pool,
    init_batch_norm,
    init_bottleneck,
    leaky_relu,
    linear,
    log_softmax_rows,
    relu,
    softmax_rows,
)
from .sona import SonaConfig, init_sona, sona_forward, spatial_covariance
from .tensor import Tensor, exp, grad_check_many, log, matmul, sqrt, tsum

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    group: str
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _weights(rng, x: np.ndarray) -> np.ndarray:
    # a random linear read-out makes every output element matter
    return rng.normal(size=x.shape)


def _project(rng, f: Callable[[], Tensor]) -> Callable[[Tensor], Tensor]:
    """Wrap ``f`` as ``sum(w * f())`` with a fixed random ``w``."""
    w = None

    def g(_):
        nonlocal w
        y = f()
        if w is None:
            w = Tensor(_weights(rng, y.data))
        return tsum(y * w)

    return g


# tensor core -------------------------------------------------------------------


def check_matmul(rng) -> float:
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    return grad_check_many(_project(rng, lambda: matmul(a, b)), [a, b])


def check_batched_matmul(rng) -> float:
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 2)
    return grad_check_many(_project(rng, lambda: matmul(a, b)), [a, b])


def check_elementwise(rng) -> float:
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    y = _t(rng, 3, 4)
    return grad_check_many(_project(rng, lambda: exp(y * 0.5) * log(x) + sqrt(x) - x**3 / (y + 5.0)), [x, y])


def check_softmax_composite(rng) -> float:
    x = _t(rng, 3, 2)
    return grad_check_many(lambda _: tsum(softmax_rows(matmul(x, x.T))), [x])


# nn ops ------------------------------------------------------------------------


def check_conv(rng) -> float:
    x = _t(rng, 2, 3, 6, 5)
    p = Conv2dParams(_t(rng, 4, 3, 3, 3), _t(rng, 4), (2, 1), (1, 1), (1, 1))
    return grad_check_many(_project(rng, lambda: conv2d(x, p)), [x, p.weight, p.bias])


def check_dilated_conv(rng) -> float:
    x = _t(rng, 1, 2, 7, 7)
    p = Conv2dParams(_t(rng, 3, 2, 3, 3), None, (1, 1), (2, 2), (2, 2))
    return grad_check_many(_project(rng, lambda: conv2d(x, p)), [x, p.weight])


def check_pointwise_conv(rng) -> float:
    x = _t(rng, 2, 4, 3, 2)
    p = Conv2dParams(_t(rng, 5, 4, 1, 1), _t(rng, 5), (1, 1), (0, 0), (1, 1))
    return grad_check_many(_project(rng, lambda: conv2d(x, p)), [x, p.weight, p.bias])


def check_batch_norm_train(rng) -> float:
    x = _t(rng, 4, 3, 2, 2)
    s = init_batch_norm(3)
    s.scale, s.shift = _t(rng, 3), _t(rng, 3)
    return grad_check_many(_project(rng, lambda: batch_norm(x, s)), [x, s.scale, s.shift])


def check_batch_norm_eval(rng) -> float:
    x = _t(rng, 3, 2, 2, 2)
    s = init_batch_norm(2)
    s.scale, s.shift = _t(rng, 2), _t(rng, 2)
    s.running_mean.data = rng.normal(size=2)
    s.running_var.data = rng.uniform(0.5, 2.0, size=2)
    s.mode = "eval"
    return grad_check_many(_project(rng, lambda: batch_norm(x, s)), [x, s.scale, s.shift])


def check_batch_norm_2d(rng) -> float:
    x = _t(rng, 5, 3)
    s = init_batch_norm(3)
    return grad_check_many(_project(rng, lambda: batch_norm(x, s)), [x, s.scale, s.shift])


def _away_from_zero(rng, *shape) -> Tensor:
    v = rng.uniform(0.1, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(v, requires_grad=True)


def check_relu(rng) -> float:
    x = _away_from_zero(rng, 3, 5)
    return grad_check_many(_project(rng, lambda: relu(x)), [x])


def check_leaky_relu(rng) -> float:
    x = _away_from_zero(rng, 3, 5)
    return grad_check_many(_project(rng, lambda: leaky_relu(x, 0.1)), [x])


def check_avg_pool(rng) -> float:
    x = _t(rng, 2, 3, 3, 2)
    return grad_check_many(_project(rng, lambda: global_pool(x, "avg")), [x])


def check_max_pool(rng) -> float:
    x = _t(rng, 2, 3, 3, 2)
    return grad_check_many(_project(rng, lambda: global_pool(x, "max")), [x])


def check_softmax(rng) -> float:
    x = _t(rng, 4, 5, scale=2.0)
    return grad_check_many(_project(rng, lambda: softmax_rows(x)), [x])


def check_log_softmax(rng) -> float:
    x = _t(rng, 4, 5, scale=2.0)
    return grad_check_many(_project(rng, lambda: log_softmax_rows(x)), [x])


def check_linear(rng) -> float:
    x, w = _t(rng, 3, 4), _t(rng, 5, 4)
    return grad_check_many(_project(rng, lambda: linear(x, w)), [x, w])


def check_bottleneck(rng) -> float:
    x = _t(rng, 2, 8, 4, 4)
    p = init_bottleneck(rng, 8, 8, expansion=4)
    leaves = [x, p.conv1.weight, p.conv2.weight, p.conv3.weight, p.bn3.scale]
    return grad_check_many(_project(rng, lambda: bottleneck(x, p)), leaves)


def check_bottleneck_projection(rng) -> float:
    x = _t(rng, 2, 4, 5, 4)
    p = init_bottleneck(rng, 4, 8, expansion=4, stride=2)
    leaves = [x, p.conv2.weight, p.proj_conv.weight, p.proj_bn.shift]
    return grad_check_many(_project(rng, lambda: bottleneck(x, p)), leaves)


# sona --------------------------------------------------------------------------


def check_covariance(rng) -> float:
    th = _t(rng, 2, 6, 4)
    return grad_check_many(_project(rng, lambda: spatial_covariance(th)), [th])


def _random_sona(rng, c: int, mode: str):
    cfg = SonaConfig(c, 2)
    p = init_sona(rng, cfg)
    # non-zero p so gradients reach theta and g
    p.p.weight.data = rng.normal(0.0, 0.5, size=p.p.weight.shape)
    p.p.bias.data = rng.normal(0.0, 0.5, size=p.p.bias.shape)
    p.theta_bn.mode = mode
    if mode == "eval":
        p.theta_bn.running_mean.data = rng.normal(0.0, 0.1, size=cfg.inner)
        p.theta_bn.running_var.data = rng.uniform(0.5, 1.5, size=cfg.inner)
    return cfg, p


def _sona_leaves(p):
    return [p.theta.weight, p.theta.bias, p.g.weight, p.g.bias, p.p.weight, p.p.bias,
            p.theta_bn.scale, p.theta_bn.shift]


def check_sona_eval(rng) -> float:
    x = _t(rng, 1, 4, 3, 2)
    cfg, p = _random_sona(rng, 4, "eval")
    return grad_check_many(lambda _: tsum(sona_forward(x, p, cfg)), [x, *_sona_leaves(p)])


def check_sona_train(rng) -> float:
    x = _t(rng, 2, 4, 3, 2)
    cfg, p = _random_sona(rng, 4, "train")
    return grad_check_many(_project(rng, lambda: sona_forward(x, p, cfg)), [x, *_sona_leaves(p)])


# dropblock ---------------------------------------------------------------------


def check_apply_mask(rng) -> float:
    x = _t(rng, 2, 2, 4, 4)
    masks = sample_masks(2, 4, 4, DropBlockPlusConfig(gamma=0.3, block_height=2, block_width=1), rng)
    return grad_check_many(_project(rng, lambda: apply_mask(x, masks)), [x])


# losses ------------------------------------------------------------------------


def check_triplet(rng) -> float:
    f = _t(rng, 6, 3)
    labels = np.array([0, 0, 1, 1, 2, 2])
    return grad_check_many(lambda _: batch_hard_triplet(f, labels, 0.3), [f])


def check_label_smoothed_ce(rng) -> float:
    z = _t(rng, 4, 5, scale=2.0)
    labels = np.array([0, 3, 4, 1])
    return grad_check_many(lambda _: label_smoothed_ce(z, labels, 0.1), [z])


# full model --------------------------------------------------------------------


def tiny_model_config() -> ModelConfig:
    bb = BackboneConfig(
        stem_channels=4,
        stem_stride=2,
        stages=(StageSpec(1, 8, 1, 1), StageSpec(1, 8, 2, 1), StageSpec(1, 8, 1, 2), StageSpec(1, 8, 1, 2)),
        expansion=4,
    )
    return ModelConfig(
        input_height=8,
        input_width=8,
        backbone=bb,
        sona_sites=("after_stage2",),
        dropblock=DropBlockPlusConfig(gamma=0.2, block_height=1, block_width=2),
        global_dim=4,
        local_dim=8,
        num_classes=2,
    )


def check_full_model(rng, per_tensor: int = 2) -> float:
    cfg = tiny_model_config()
    state = build(cfg, seed=int(rng.integers(1 << 30)))
    sona = state.sona["after_stage2"]
    sona.p.weight.data = rng.normal(0.0, 0.3, size=sona.p.weight.shape)
    x = Tensor(rng.normal(size=(4, 3, cfg.input_height, cfg.input_width)), requires_grad=True)
    labels = np.array([0, 0, 1, 1])
    h, w = local_map_shape(cfg)
    masks = sample_masks(4, h, w, cfg.dropblock, rng)

    def f(_):
        out = forward_train(state, x, masks=masks)
        return reid_loss(out, labels)[0]

    leaves = [x] + [t for _, t in parameters(state)]
    indices = {k: rng.choice(t.size, size=min(per_tensor, t.size), replace=False) for k, t in enumerate(leaves)}
    return grad_check_many(f, leaves, indices=indices)


GROUPS: dict[str, list[tuple[str, Callable]]] = {
    "tensor": [
        ("matmul", check_matmul),
        ("batched_matmul", check_batched_matmul),
        ("elementwise", check_elementwise),
        ("softmax_of_gram", check_softmax_composite),
    ],
    "nn": [
        ("conv2d", check_conv),
        ("conv2d_dilated", check_dilated_conv),
        ("conv2d_1x1", check_pointwise_conv),
        ("batch_norm_train", check_batch_norm_train),
        ("batch_norm_eval", check_batch_norm_eval),
        ("batch_norm_2d", check_batch_norm_2d),
        ("relu", check_relu),
        ("leaky_relu", check_leaky_relu),
        ("global_avg_pool", check_avg_pool),
        ("global_max_pool", check_max_pool),
        ("softmax_rows", check_softmax),
        ("log_softmax_rows", check_log_softmax),
        ("linear", check_linear),
        ("bottleneck", check_bottleneck),
        ("bottleneck_projection", check_bottleneck_projection),
    ],
    "sona": [
        ("spatial_covariance", check_covariance),
        ("sona_forward_eval_bn", check_sona_eval),
        ("sona_forward_train_bn", check_sona_train),
    ],
    "dropblock": [("apply_mask", check_apply_mask)],
    "losses": [
        ("batch_hard_triplet", check_triplet),
        ("label_smoothed_ce", check_label_smoothed_ce),
    ],
    "model": [("full_model", check_full_model)],
}


def run(groups=None, seed: int = 0) -> list[CheckResult]:
    names = list(GROUPS) if groups in (None, "all") else ([groups] if isinstance(groups, str) else list(groups))
    unknown = [g for g in names if g not in GROUPS]
    if unknown:
        raise ValueError(f"unknown gradcheck group(s) {unknown}; choose from {['all', *GROUPS]}")
    results = []
    for group in names:
        for name, fn in GROUPS[group]:
            rng = np.random.default_rng([seed, len(results)])
            t0 = time.perf_counter()
            err = fn(rng)
            results.append(CheckResult(group, name, err, time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'group':<10} {'check':<24} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.group:<10} {r.name:<24} {r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    worst = max((r.max_rel_error for r in results), default=0.0)
    lines.append("")
    lines.append(f"checks={len(results)}")
    lines.append(f"failed={sum(not r.passed for r in results)}")
    lines.append(f"max_rel_error={worst!r}")
    return "\n".join(lines) + "\n"
