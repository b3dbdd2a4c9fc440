"""Inference-time overhead of SONA blocks."""

from __future__ import annotations

import dataclasses
import logging
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import ModelConfig, build, embed, set_mode

log = logging.getLogger(__name__)


@dataclass
class BenchReport:
    with_sona_ms: float
    with_sona_std_ms: float
    without_sona_ms: float
    without_sona_std_ms: float
    trials: int
    sites: tuple[str, ...]

    @property
    def overhead_pct(self) -> float:
        return 100.0 * (self.with_sona_ms - self.without_sona_ms) / self.without_sona_ms

    def format(self) -> str:
        sites = ",".join(self.sites) or "none"
        return (
            f"sites           {sites}\n"
            f"with SONA       {self.with_sona_ms:.3f} ms +- {self.with_sona_std_ms:.3f}\n"
            f"without SONA    {self.without_sona_ms:.3f} ms +- {self.without_sona_std_ms:.3f}\n"
            f"overhead        {self.overhead_pct:.2f} %\n"
            "\n"
            f"with_sona_ms={self.with_sona_ms!r}\n"
            f"with_sona_std_ms={self.with_sona_std_ms!r}\n"
            f"without_sona_ms={self.without_sona_ms!r}\n"
            f"without_sona_std_ms={self.without_sona_std_ms!r}\n"
            f"overhead_pct={self.overhead_pct!r}\n"
            f"trials={self.trials}\n"
        )


def bench(cfg: ModelConfig, trials: int = 50, warmup: int = 5, seed: int = 0) -> BenchReport:
    """Mean and standard deviation of a single-image eval-mode forward pass,
    with the configured SONA sites and with none. The two models are timed
    alternately so drifts in machine load hit both equally."""
    if trials < 10:
        raise ContractError(f"trials must be at least 10, got {trials}")
    if not cfg.sona_sites:
        log.warning("configured model has no SONA sites; both timings measure the same network")
    with_sona = set_mode(build(cfg, seed), "eval")
    without = set_mode(build(dataclasses.replace(cfg, sona_sites=()), seed), "eval")
    x = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(1, 3, cfg.input_height, cfg.input_width))
    for _ in range(warmup):
        embed(with_sona, x, flip_average=False)
        embed(without, x, flip_average=False)
    ta, tb = [], []
    for _ in range(trials):
        t0 = time.perf_counter()
        embed(with_sona, x, flip_average=False)
        t1 = time.perf_counter()
        embed(without, x, flip_average=False)
        t2 = time.perf_counter()
        ta.append((t1 - t0) * 1e3)
        tb.append((t2 - t1) * 1e3)
    return BenchReport(
        statistics.fmean(ta), statistics.stdev(ta), statistics.fmean(tb), statistics.stdev(tb),
        trials, tuple(cfg.sona_sites),
    )
