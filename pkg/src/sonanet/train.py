"""Training loop: P x K batches, four-term loss, Adam with warm-up."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, Dataset, augment, pk_sample
from .errors import ContractError, NumericError
from .losses import reid_loss
from .model import ModelConfig, ModelState, build, forward_train, parameters, set_mode
from .tensor import Tensor

log = logging.getLogger(__name__)

REFERENCE_EPOCHS = 400


@dataclass(frozen=True)
class TrainConfig:
    P: int = 4
    K: int = 4
    margin: float = 0.3
    epsilon: float = 0.1
    base_lr: float = 5e-4
    epochs: int = 40
    batches_per_epoch: int = 5
    loss_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    model_seed: int = 0

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ContractError("P and K must both be at least 2")
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ContractError("epochs and batches_per_epoch must be positive")
        if len(self.loss_weights) != 4:
            raise ContractError("loss_weights needs four entries")

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainConfig":
        return cls(
            P=cfg["train.P"],
            K=cfg["train.K"],
            margin=cfg["train.margin"],
            epsilon=cfg["train.epsilon"],
            base_lr=cfg["train.base_lr"],
            epochs=cfg["train.epochs"],
            batches_per_epoch=cfg["train.batches_per_epoch"],
            loss_weights=tuple(cfg["train.loss_weights"]),
            augment=AugmentConfig.from_config(cfg),
            seed=cfg["train.seed"],
            model_seed=cfg["model.seed"],
        )


def lr_schedule(epoch: int, total_epochs: int = REFERENCE_EPOCHS, base_lr: float = 1e-4) -> float:
    """Warm-up then step decay.

    On the 400-epoch reference timeline: ``base * (1 + epoch // 5)`` for the
    first 50 epochs, then ``10 * base`` until 200, ``base`` until 300 and
    ``base / 10`` until 400. Shorter runs compress the timeline
    proportionally.
    """
    if not 0 <= epoch < total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs})")
    t = epoch * REFERENCE_EPOCHS / total_epochs
    if t < 50:
        return base_lr * (1 + math.floor(t / 5))
    if t < 200:
        return base_lr * 10
    if t < 300:
        return base_lr
    return base_lr / 10


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * p.grad
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * p.grad * p.grad
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDiverged(NumericError):
    pass


@dataclass
class TrainResult:
    state: ModelState
    epoch_log: list[dict]
    step_log: list[dict]


TERMS = ("triplet_global", "ce_global", "triplet_local", "ce_local")


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    state: ModelState | None = None,
    lr_override: float | None = None,
) -> TrainResult:
    """Fully seeded: identical inputs give bit-identical parameters and logs.

    ``dataset`` must hold only training images with labels ``0..C-1``.
    ``lr_override`` pins a constant learning rate (used by tests).
    """
    labels_all = np.asarray(dataset.person_ids)
    if len(np.unique(labels_all)) < train_cfg.P:
        raise ContractError(f"training set has fewer than P={train_cfg.P} identities")
    if labels_all.min() < 0 or labels_all.max() >= model_cfg.num_classes:
        raise ContractError("training labels must lie in [0, num_classes)")

    if state is None:
        state = build(model_cfg, seed=train_cfg.model_seed)
    set_mode(state, "train")
    params = parameters(state)
    opt = Adam(params)
    sample_ss, aug_ss, drop_ss = np.random.SeedSequence(train_cfg.seed).spawn(3)
    rng_sample = np.random.default_rng(sample_ss)
    rng_aug = np.random.default_rng(aug_ss)
    rng_drop = np.random.default_rng(drop_ss)

    epoch_log, step_log = [], []
    step = 0
    for epoch in range(train_cfg.epochs):
        lr = lr_override if lr_override is not None else lr_schedule(epoch, train_cfg.epochs, train_cfg.base_lr)
        sums = dict.fromkeys(("total", *TERMS), 0.0)
        for b in range(train_cfg.batches_per_epoch):
            idx = pk_sample(labels_all, train_cfg.P, train_cfg.K, rng_sample)
            x = np.stack([augment(dataset.images[i], train_cfg.augment, rng_aug, train=True) for i in idx])
            labels = labels_all[idx]
            try:
                out = forward_train(state, x, rng=rng_drop)
                total, terms = reid_loss(out, labels, train_cfg.margin, train_cfg.epsilon, train_cfg.loss_weights)
            except NumericError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from exc
            values = {k: v.item() for k, v in terms.items()}
            for name, val in values.items():
                if not math.isfinite(val):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}, term {name}")
            opt.zero_grad()
            total.backward()
            opt.step(lr)
            step += 1
            rec = {"step": step, "epoch": epoch, "lr": lr, "total": total.item(), **values}
            step_log.append(rec)
            for k in sums:
                sums[k] += rec[k]
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / train_cfg.batches_per_epoch for k, v in sums.items()})
        epoch_log.append(row)
        log.info("epoch %d lr %.2e total %.4f", epoch, lr, row["total"])
    set_mode(state, "eval")
    return TrainResult(state, epoch_log, step_log)


def format_epoch_log(epoch_log: list[dict]) -> str:
    cols = ("epoch", "lr", "total", *TERMS)
    lines = ["\t".join(cols)]
    for row in epoch_log:
        lines.append("\t".join(str(row["epoch"]) if c == "epoch" else repr(float(row[c])) for c in cols))
    return "\n".join(lines) + "\n"
