"""Flat ``key=value`` configuration files.

Keys are dotted (``sona.r=2``, ``dropblock.gamma=0.1``). Blank lines and
``#`` comments are ignored; unknown keys are errors. Every command reads the
same schema and uses the sections it needs.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .dropblock import DropBlockPlusConfig
from .model import BackboneConfig, ModelConfig, StageSpec


class ConfigError(ValueError):
    pass


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _sites(s: str) -> tuple[str, ...]:
    out = []
    for part in s.split(","):
        part = part.strip()
        if not part or part.lower() == "none":
            continue
        out.append(part if part.startswith("after_stage") else f"after_stage{part}")
    return tuple(out)


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "data.num_ids": (int, 16),
    "data.images_per_id": (int, 8),
    "data.height": (int, 64),
    "data.width": (int, 32),
    "data.cameras": (int, 2),
    "data.noise": (float, 0.03),
    "data.camera_strength": (float, 2.0),
    "data.holdout": (str, "images"),
    "data.train_ids": (int, 8),
    "data.seed": (int, 0),
    "model.variant": (str, ""),
    "model.sona_sites": (_sites, ("after_stage2",)),
    "model.stem_channels": (int, 16),
    "model.stage_channels": (_ints, (16, 32, 64, 128)),
    "model.stage_blocks": (_ints, (1, 1, 1, 1)),
    "model.stage_strides": (_ints, (2, 2, 1, 1)),
    "model.stage_dilations": (_ints, (1, 1, 2, 2)),
    "model.expansion": (int, 4),
    "model.global_dim": (int, 32),
    "model.local_dim": (int, 64),
    "model.leaky_slope": (float, 0.01),
    "model.bn_momentum": (float, 0.1),
    "model.bn_epsilon": (float, 1e-5),
    "model.seed": (int, 0),
    "sona.r": (int, 2),
    "dropblock.enabled": (_bool, True),
    "dropblock.gamma": (float, 0.1),
    "dropblock.block_height": (int, 1),
    "dropblock.block_width": (int, 2),
    "dropblock.random_size": (_bool, False),
    "train.P": (int, 4),
    "train.K": (int, 4),
    "train.margin": (float, 0.3),
    "train.epsilon": (float, 0.1),
    "train.base_lr": (float, 5e-4),
    "train.epochs": (int, 40),
    "train.batches_per_epoch": (int, 5),
    "train.loss_weights": (_floats, (1.0, 1.0, 1.0, 1.0)),
    "train.flip": (_bool, True),
    "train.normalize": (_bool, True),
    "train.norm_mean": (_floats, (0.5, 0.5, 0.5)),
    "train.norm_std": (_floats, (0.25, 0.25, 0.25)),
    "train.cutout": (int, -1),
    "train.seed": (int, 0),
    "bench.trials": (int, 50),
    "bench.warmup": (int, 5),
}

VARIANTS: dict[str, tuple[tuple[str, ...], bool]] = {
    "BL": ((), False),
    "BL+DB+": ((), True),
    "BL+SONA2": (("after_stage2",), False),
    "SONA2-Net": (("after_stage2",), True),
    "SONA3-Net": (("after_stage3",), True),
    "SONA2+3-Net": (("after_stage2", "after_stage3"), True),
}


def defaults() -> dict:
    return {k: d for k, (_, d) in SCHEMA.items()}


def parse_text(text: str, source: str = "<config>") -> dict:
    cfg = defaults()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            cfg[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return cfg


def load(path) -> dict:
    return parse_text(Path(path).read_text(encoding="utf-8"), str(path))


def override(cfg: dict, **updates) -> dict:
    """Copy of ``cfg`` with ``section__key=value`` style updates applied."""
    out = dict(cfg)
    for k, v in updates.items():
        key = k.replace("__", ".")
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = v
    return out


def dump(cfg: dict) -> str:
    lines = []
    for k in SCHEMA:
        v = cfg[k]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v) if v else "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def model_config(cfg: dict, num_classes: int) -> ModelConfig:
    sites, db_enabled = cfg["model.sona_sites"], cfg["dropblock.enabled"]
    variant = cfg["model.variant"]
    if variant:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown model.variant {variant!r}; choose from {sorted(VARIANTS)}")
        sites, db_enabled = VARIANTS[variant]
    lists = [cfg[f"model.stage_{k}"] for k in ("blocks", "channels", "strides", "dilations")]
    if any(len(v) != 4 for v in lists):
        raise ConfigError("model.stage_* lists need exactly four entries")
    stages = tuple(StageSpec(b, c, s, d) for b, c, s, d in zip(*lists))
    return ModelConfig(
        input_height=cfg["data.height"],
        input_width=cfg["data.width"],
        backbone=BackboneConfig(cfg["model.stem_channels"], 2, stages, cfg["model.expansion"]),
        sona_sites=tuple(sites),
        sona_reduction=cfg["sona.r"],
        leaky_slope=cfg["model.leaky_slope"],
        dropblock=DropBlockPlusConfig(
            gamma=cfg["dropblock.gamma"],
            block_height=cfg["dropblock.block_height"],
            block_width=cfg["dropblock.block_width"],
            enabled=db_enabled,
            random_size=cfg["dropblock.random_size"],
        ),
        global_dim=cfg["model.global_dim"],
        local_dim=cfg["model.local_dim"],
        num_classes=num_classes,
        bn_momentum=cfg["model.bn_momentum"],
        bn_epsilon=cfg["model.bn_epsilon"],
    )


def model_config_to_dict(mc: ModelConfig) -> dict:
    return dataclasses.asdict(mc)


def model_config_from_dict(d: dict) -> ModelConfig:
    bb = d["backbone"]
    backbone = BackboneConfig(
        bb["stem_channels"], bb["stem_stride"], tuple(StageSpec(**s) for s in bb["stages"]), bb["expansion"]
    )
    fields = dict(d)
    fields["backbone"] = backbone
    fields["dropblock"] = DropBlockPlusConfig(**d["dropblock"])
    fields["sona_sites"] = tuple(d["sona_sites"])
    return ModelConfig(**fields)
