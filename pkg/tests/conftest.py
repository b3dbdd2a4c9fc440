import functools
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sonanet import config
from sonanet.data import SyntheticDatasetConfig, gen_synthetic, prepare_eval
from sonanet.model import embed
from sonanet.reid import evaluate_arrays
from sonanet.train import TrainConfig, train

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


@functools.lru_cache(maxsize=None)
def desk_run(config_name: str):
    """Generate, train, embed and evaluate in memory for a config in
    ``configs/``. Cached so several test modules share one training run."""
    start = time.perf_counter()
    cfg = config.load(CONFIGS / config_name)
    ds = gen_synthetic(SyntheticDatasetConfig.from_config(cfg))
    tr = ds.subset("train")
    mc = config.model_config(cfg, int(tr.person_ids.max()) + 1)
    tc = TrainConfig.from_config(cfg)
    result = train(mc, tc, tr)
    q, g = ds.subset("query"), ds.subset("gallery")
    qf = embed(result.state, prepare_eval(q.images, tc.augment))
    gf = embed(result.state, prepare_eval(g.images, tc.augment))
    ranking = evaluate_arrays(q.person_ids, q.camera_ids, qf, g.person_ids, g.camera_ids, gf)
    seconds = time.perf_counter() - start
    return SimpleNamespace(cfg=cfg, result=result, ranking=ranking, seconds=seconds, qf=qf, gf=gf)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
