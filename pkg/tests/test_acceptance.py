"""One test per acceptance criterion. Each prints a single PASS/FAIL line,
and the lines are repeated in the terminal summary."""

import contextlib
import math

import numpy as np
from conftest import ACCEPTANCE_LINES, CONFIGS, desk_run

from sonanet import config, gradcheck
from sonanet.bench import bench
from sonanet.cli import main
from sonanet.dropblock import DropBlockPlusConfig, sample_mask
from sonanet.losses import batch_hard_triplet
from sonanet.reid import JUNK_ID, evaluate_arrays
from sonanet.sona import SonaConfig, attention_from_theta, init_sona, sona_forward, spatial_covariance
from sonanet.tensor import Tensor
from sonanet.train import lr_schedule

from test_dropblock import simulate_drop_fraction, square_dropblock_reference
from test_losses import brute_force_triplet
from test_reid import brute_force_eval, random_instance


@contextlib.contextmanager
def criterion(number, title):
    details = {}
    try:
        yield details
    except BaseException as exc:
        line = f"criterion {number} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    extra = "  ".join(f"{k}={v}" for k, v in details.items())
    line = f"criterion {number} PASS  {title}  {extra}".rstrip()
    print(line)
    ACCEPTANCE_LINES.append(line)


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite") as d:
        results = gradcheck.run("all", seed=0)
        total = sum(r.seconds for r in results)
        worst = max(results, key=lambda r: r.max_rel_error)
        d.update(checks=len(results), worst=f"{worst.max_rel_error:.2e}", seconds=f"{total:.1f}")
        failed = [f"{r.group}.{r.name}" for r in results if not r.passed]
        assert not failed, f"failed checks: {failed}"
        assert worst.max_rel_error < 1e-4
        assert total < 60


def test_criterion_2_sona_algebra():
    with criterion(2, "SONA algebra") as d:
        r = np.random.default_rng(2)
        worst_sym = worst_row = worst_scale = 0.0
        for _ in range(50):
            hw, k = int(r.integers(1, 40)), int(r.integers(2, 16))
            theta = r.normal(size=(2, hw, k)) * r.uniform(0.1, 5)
            sigma = spatial_covariance(Tensor(theta)).data
            worst_sym = max(worst_sym, np.abs(sigma - np.swapaxes(sigma, 1, 2)).max())
            attn = attention_from_theta(Tensor(theta), k).data
            worst_row = max(worst_row, np.abs(attn.sum(-1) - 1).max())
            s = r.uniform(-4, 4)
            scaled = spatial_covariance(Tensor(s * theta)).data
            worst_scale = max(worst_scale, np.abs(scaled - s * s * sigma).max() / max(1.0, np.abs(s * s * sigma).max()))
        const = np.outer(r.normal(size=12), np.ones(6))[None]
        sigma0 = spatial_covariance(Tensor(const)).data
        uniform = attention_from_theta(Tensor(const), 6).data
        cfg = SonaConfig(16, 2)
        x = r.normal(size=(2, 16, 8, 4))
        ident = np.abs(sona_forward(Tensor(x), init_sona(r, cfg), cfg).data - x).max()
        d.update(symmetry=f"{worst_sym:.1e}", rows=f"{worst_row:.1e}", scale=f"{worst_scale:.1e}", identity=f"{ident:.1e}")
        assert worst_sym < 1e-10
        assert np.abs(sigma0).max() < 1e-15
        assert np.all(uniform == 1.0 / 12)
        assert ident < 1e-15
        assert worst_row < 1e-10
        assert worst_scale < 1e-10


def test_criterion_3_dropblock_plus():
    with criterion(3, "DropBlock+") as d:
        zero = DropBlockPlusConfig(gamma=0.0, block_height=5, block_width=8)
        assert all(sample_mask(32, 32, zero, np.random.default_rng(s)).all() for s in range(20))
        cfg = DropBlockPlusConfig(gamma=0.1, block_height=5, block_width=8)
        a = [sample_mask(32, 32, cfg, np.random.default_rng(s)) for s in range(5)]
        b = [sample_mask(32, 32, cfg, np.random.default_rng(s)) for s in range(5)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        rng = np.random.default_rng(2024)
        ours = float(np.mean([1.0 - sample_mask(32, 32, cfg, rng).mean() for _ in range(10_000)]))
        oracle = simulate_drop_fraction(32, 32, 0.1, 5, 8, 10_000, seed=99)
        mismatches = 0
        for block in (1, 3, 5, 8):
            square = DropBlockPlusConfig(gamma=0.1, block_height=block, block_width=block)
            for seed in range(25):
                ours_mask = sample_mask(32, 32, square, np.random.default_rng(seed))
                ref = square_dropblock_reference(32, 32, 0.1, block, np.random.default_rng(seed))
                mismatches += not np.array_equal(ours_mask, ref)
        d.update(drop=f"{ours:.4f}", oracle=f"{oracle:.4f}", square_mismatches=mismatches)
        assert abs(ours - oracle) < 0.01
        assert mismatches == 0


def test_criterion_4_oracle_equivalence():
    with criterion(4, "oracle equivalence") as d:
        r = np.random.default_rng(4)
        worst_triplet = 0.0
        for _ in range(100):
            p, k = int(r.integers(2, 5)), int(r.integers(2, 4))
            labels = r.permutation(np.repeat(np.arange(p), k))
            f = r.normal(size=(p * k, int(r.integers(1, 6))))
            margin = float(r.uniform(0, 1))
            got = batch_hard_triplet(Tensor(f), labels, margin).item()
            worst_triplet = max(worst_triplet, abs(got - brute_force_triplet(f, labels, margin)))
        eval_mismatch = junk_changed = 0
        for _ in range(100):
            inst = random_instance(r, int(r.integers(1, 15)), int(r.integers(2, 40)),
                                   quantise=bool(r.integers(0, 2)))
            inst[3][0], inst[4][0] = inst[0][0], inst[1][0] + 1
            res = evaluate_arrays(*inst)
            cmc, mean_ap, n = brute_force_eval(*inst, 10)
            eval_mismatch += not (res.map == float(mean_ap) and res.cmc.tolist() == [float(c) for c in cmc]
                                  and res.evaluated == n)
            q_ids, q_cams, q_feats, g_ids, g_cams, g_feats = inst
            nj = int(r.integers(1, 10))
            junk = q_feats[r.integers(0, len(q_ids), nj)]
            res_j = evaluate_arrays(q_ids, q_cams, q_feats, np.concatenate([g_ids, np.full(nj, JUNK_ID)]),
                                    np.concatenate([g_cams, r.integers(0, 2, nj)]), np.concatenate([g_feats, junk]))
            junk_changed += not (res_j.map == res.map and np.array_equal(res_j.cmc, res.cmc))
        d.update(triplet_err=f"{worst_triplet:.1e}", eval_mismatches=eval_mismatch, junk_changes=junk_changed)
        assert worst_triplet < 1e-12
        assert eval_mismatch == 0
        assert junk_changed == 0


def test_criterion_5_lr_schedule():
    with criterion(5, "learning-rate schedule") as d:
        want = {0: 1e-4, 49: 1e-3, 100: 1e-3, 250: 1e-4, 350: 1e-5}
        got = {e: lr_schedule(e, 400, 1e-4) for e in want}
        d.update(**{f"lr{e}": f"{v:.0e}" for e, v in got.items()})
        for e in want:
            assert math.isclose(got[e], want[e], rel_tol=1e-12), (e, got[e])


def test_criterion_6_desk_experiment():
    with criterion(6, "desk experiment") as d:
        sona = desk_run("desk.cfg")
        base = desk_run("desk_bl.cfg")
        steps = len(sona.result.step_log)
        d.update(rank1=f"{sona.ranking.rank(1):.4f}", mAP=f"{sona.ranking.map:.4f}", steps=steps,
                 seconds=f"{sona.seconds:.1f}", baseline_rank1=f"{base.ranking.rank(1):.4f}",
                 baseline_mAP=f"{base.ranking.map:.4f}",
                 sona_ge_baseline=sona.ranking.map >= base.ranking.map)
        assert sona.cfg["model.variant"] == "SONA2-Net" and base.cfg["model.variant"] == "BL"
        assert len(base.result.step_log) == steps <= 200
        assert sona.ranking.rank(1) >= 0.90
        assert sona.ranking.map >= 0.80
        assert sona.seconds < 300


def test_criterion_7_bench():
    with criterion(7, "SONA inference overhead") as d:
        cfg = config.load(CONFIGS / "desk.cfg")
        report = bench(config.model_config(cfg, 16), trials=cfg["bench.trials"], warmup=cfg["bench.warmup"])
        d.update(with_ms=f"{report.with_sona_ms:.2f}", without_ms=f"{report.without_sona_ms:.2f}",
                 overhead_pct=f"{report.overhead_pct:.1f}")
        assert 0 <= report.overhead_pct < 25


def _pipeline(root, capsys):
    cfg = str(CONFIGS / "desk.cfg")
    data, ckpt = root / "data", root / "model.ckpt"
    assert main(["gen", "--config", cfg, "--out", str(data)]) == 0
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(ckpt)]) == 0
    for split in ("query", "gallery"):
        assert main(["embed", "--ckpt", str(ckpt), "--data", str(data), "--split", split,
                     "--out", str(root / f"{split}.tsv")]) == 0
    capsys.readouterr()
    assert main(["eval", "--query", str(root / "query.tsv"), "--gallery", str(root / "gallery.tsv")]) == 0
    return capsys.readouterr().out


def test_criterion_8_reproducibility(tmp_path, capsys):
    with criterion(8, "reproducibility") as d:
        reports = [_pipeline(tmp_path / f"run{i}", capsys) for i in (1, 2)]
        same_ckpt = (tmp_path / "run1" / "model.ckpt").read_bytes() == (tmp_path / "run2" / "model.ckpt").read_bytes()
        same_emb = all((tmp_path / "run1" / f).read_bytes() == (tmp_path / "run2" / f).read_bytes()
                       for f in ("query.tsv", "gallery.tsv"))
        d.update(checkpoint_identical=same_ckpt, embeddings_identical=same_emb,
                 reports_identical=reports[0] == reports[1])
        assert same_emb
        assert reports[0] == reports[1]
        assert same_ckpt
