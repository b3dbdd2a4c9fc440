import dataclasses

import numpy as np
import pytest
from conftest import CONFIGS, desk_run

from sonanet import config
from sonanet.data import AugmentConfig, SyntheticDatasetConfig, gen_synthetic
from sonanet.errors import ContractError
from sonanet.model import ModelConfig, build, checksum, named_tensors
from sonanet.tensor import Tensor
from sonanet.train import Adam, TrainConfig, TrainingDiverged, format_epoch_log, lr_schedule, train


@pytest.fixture(scope="module")
def small_data():
    ds = gen_synthetic(SyntheticDatasetConfig(num_ids=4, images_per_id=4, holdout="images"))
    return ds.subset("train")


def tiny_train_config(**kw):
    base = dict(P=2, K=2, epochs=2, batches_per_epoch=2, augment=AugmentConfig(cutout=8))
    base.update(kw)
    return TrainConfig(**base)


MODEL = ModelConfig(num_classes=4)


class TestSchedule:
    @pytest.mark.parametrize("epoch,want", [(0, 1e-4), (49, 1e-3), (100, 1e-3), (250, 1e-4), (350, 1e-5)])
    def test_reference_points(self, epoch, want):
        assert lr_schedule(epoch) == pytest.approx(want, rel=1e-12)

    def test_warmup_steps(self):
        assert [lr_schedule(e) / 1e-4 for e in (4, 5, 9, 10, 45)] == pytest.approx([1, 2, 2, 3, 10])

    def test_boundaries(self):
        assert lr_schedule(199) == pytest.approx(1e-3)
        assert lr_schedule(200) == pytest.approx(1e-4)
        assert lr_schedule(299) == pytest.approx(1e-4)
        assert lr_schedule(300) == pytest.approx(1e-5)
        assert lr_schedule(399) == pytest.approx(1e-5)

    def test_compressed_timeline(self):
        full = [lr_schedule(e) for e in range(0, 400, 10)]
        short = [lr_schedule(e, total_epochs=40) for e in range(40)]
        assert short == full

    @pytest.mark.parametrize("epoch", [-1, 400])
    def test_out_of_range(self, epoch):
        with pytest.raises(ContractError):
            lr_schedule(epoch)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -3.0])
        Adam([("p", p)]).step(0.1)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-8)

    def test_missing_grad_is_skipped(self):
        p = Tensor(np.ones(2), requires_grad=True)
        Adam([("p", p)]).step(0.1)
        assert np.array_equal(p.data, np.ones(2))


class TestTrain:
    def test_zero_lr_leaves_parameters_bitwise(self, small_data):
        state = build(MODEL, 0)
        before = {n: t.data.copy() for n, t, is_buffer in named_tensors(state) if not is_buffer}
        train(MODEL, tiny_train_config(), small_data, state=state, lr_override=0.0)
        after = {n: t.data for n, t, is_buffer in named_tensors(state) if not is_buffer}
        assert all(np.array_equal(before[n], after[n]) for n in before)

    def test_reproducible(self, small_data):
        a = train(MODEL, tiny_train_config(), small_data)
        b = train(MODEL, tiny_train_config(), small_data)
        assert checksum(a.state) == checksum(b.state)
        assert a.step_log == b.step_log

    def test_seed_changes_run(self, small_data):
        a = train(MODEL, tiny_train_config(seed=0), small_data)
        b = train(MODEL, tiny_train_config(seed=1), small_data)
        assert checksum(a.state) != checksum(b.state)

    def test_logs(self, small_data):
        res = train(MODEL, tiny_train_config(), small_data)
        assert len(res.step_log) == 4 and len(res.epoch_log) == 2
        assert res.state.mode == "eval"
        text = format_epoch_log(res.epoch_log)
        assert text.splitlines()[0].split("\t") == [
            "epoch", "lr", "total", "triplet_global", "ce_global", "triplet_local", "ce_local"]

    def test_nan_aborts_with_diagnostic(self, small_data):
        state = build(MODEL, 0)
        state.global_classifier.data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match=r"epoch 0, batch 0: log_softmax_rows"):
            train(MODEL, tiny_train_config(), small_data, state=state)

    def test_labels_must_fit_classifier(self, small_data):
        with pytest.raises(ContractError):
            train(ModelConfig(num_classes=3), tiny_train_config(), small_data)

    def test_needs_p_identities(self, small_data):
        with pytest.raises(ContractError):
            train(MODEL, tiny_train_config(P=5), small_data)

    def test_config_validation(self):
        with pytest.raises(ContractError):
            TrainConfig(P=1)
        with pytest.raises(ContractError):
            TrainConfig(loss_weights=(1.0, 1.0))


class TestDeskRegression:
    """Seeded regression on the desk config (seed 0)."""

    def test_losses_fall(self):
        log = desk_run("desk.cfg").result.epoch_log
        assert log[-1]["total"] < 0.6 * log[0]["total"]
        margin = desk_run("desk.cfg").cfg["train.margin"]
        assert log[-1]["triplet_global"] < margin / 2
        assert log[-1]["triplet_local"] < margin / 2

    def test_step_budget(self):
        assert len(desk_run("desk.cfg").result.step_log) == 200

    def test_dropblock_raises_average_training_loss(self):
        cfg = config.load(CONFIGS / "desk.cfg")
        ds = gen_synthetic(SyntheticDatasetConfig.from_config(cfg)).subset("train")
        mc = config.model_config(cfg, 16)
        off = dataclasses.replace(mc, dropblock=dataclasses.replace(mc.dropblock, enabled=False))
        without = train(off, TrainConfig.from_config(cfg), ds)
        mean = lambda res: np.mean([s["total"] for s in res.step_log])
        assert mean(desk_run("desk.cfg").result) > mean(without)


def test_zero_lr_check_covers_every_parameter():
    names = [n for n, _, is_buffer in named_tensors(build(MODEL, 0)) if not is_buffer]
    assert len(names) > 50 and not any(n.endswith(("running_mean", "running_var")) for n in names)
