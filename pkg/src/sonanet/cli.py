"""``sonanet`` command line.

Every command prints a human-readable block followed by ``key=value`` lines
that scripts can grep. Figures (PNG) are written next to the text outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config, gradcheck, plots
from .bench import bench
from .data import AugmentConfig, SyntheticDatasetConfig, gen_synthetic, load_dataset, prepare_eval, read_ppm, save_dataset, write_pgm
from .errors import ContractError, NumericError, ShapeError
from .model import backbone_forward, embed, set_mode
from .reid import EmbeddingRecord, evaluate, format_report, read_embeddings, write_embeddings
from .sona import attention_heatmap
from .tensor import Tensor, no_grad
from .train import TrainConfig, format_epoch_log, train

log = logging.getLogger("sonanet")


def _kv(**items) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def cmd_gen(args) -> int:
    cfg = config.load(args.config)
    ds = gen_synthetic(SyntheticDatasetConfig.from_config(cfg))
    out = Path(args.out)
    manifest = save_dataset(ds, out)
    (out / "config.txt").write_text(config.dump(cfg), encoding="utf-8")
    counts = {s: int(np.sum(ds.splits == s)) for s in ("train", "query", "gallery")}
    sys.stdout.write(f"wrote {len(ds)} images to {out}\n\n")
    sys.stdout.write(_kv(images=len(ds), identities=len(np.unique(ds.person_ids)), manifest=manifest, **counts))
    return 0


def _remap(ids: np.ndarray) -> np.ndarray:
    _, inverse = np.unique(ids, return_inverse=True)
    return inverse


def cmd_train(args) -> int:
    cfg = config.load(args.config)
    data = load_dataset(args.data).subset("train")
    if len(data) == 0:
        raise ContractError(f"{args.data} holds no training images")
    data.person_ids = _remap(data.person_ids)
    num_classes = int(data.person_ids.max()) + 1
    mc = config.model_config(cfg, num_classes)
    tc = TrainConfig.from_config(cfg)
    result = train(mc, tc, data)
    out = Path(args.out)
    meta = {
        "config": config.dump(cfg),
        "augment": {"normalize": tc.augment.normalize, "mean": list(tc.augment.mean), "std": list(tc.augment.std)},
        "num_classes": num_classes,
        "steps": len(result.step_log),
    }
    checkpoint.save(out, result.state, meta)
    log_path = out.with_name(out.name + ".log.tsv")
    log_path.write_text(format_epoch_log(result.epoch_log), encoding="utf-8")
    fig = plots.loss_curves(result.epoch_log, out.with_name(out.name + ".loss.png"))
    first, last = result.epoch_log[0], result.epoch_log[-1]
    sys.stdout.write(format_epoch_log(result.epoch_log[-1:]))
    sys.stdout.write("\n")
    sys.stdout.write(_kv(
        checkpoint=out, log=log_path, figure=fig, steps=len(result.step_log),
        initial_total=repr(first["total"]), final_total=repr(last["total"]),
        final_triplet_global=repr(last["triplet_global"]), final_triplet_local=repr(last["triplet_local"]),
    ))
    return 0


def _eval_augment(meta: dict) -> AugmentConfig:
    a = meta.get("augment", {})
    return AugmentConfig(flip=False, normalize=a.get("normalize", True),
                         mean=tuple(a.get("mean", (0.5, 0.5, 0.5))), std=tuple(a.get("std", (0.25, 0.25, 0.25))),
                         cutout=0)


def cmd_embed(args) -> int:
    state, meta = checkpoint.load(args.ckpt)
    ds = load_dataset(args.data)
    if args.split != "all":
        ds = ds.subset(args.split)
    if len(ds) == 0:
        raise ContractError(f"no images in split {args.split!r}")
    images = prepare_eval(ds.images, _eval_augment(meta))
    feats = np.concatenate([embed(state, images[i : i + 32], flip_average=not args.no_flip_avg)
                            for i in range(0, len(images), 32)])
    records = [EmbeddingRecord(int(p), int(c), f) for p, c, f in zip(ds.person_ids, ds.camera_ids, feats)]
    write_embeddings(args.out, records, comment=f"split={args.split} flip_avg={not args.no_flip_avg} dim={feats.shape[1]}")
    sys.stdout.write(_kv(records=len(records), dim=feats.shape[1], out=args.out))
    return 0


def cmd_eval(args) -> int:
    result = evaluate(read_embeddings(args.query), read_embeddings(args.gallery), max_rank=args.max_rank,
                      metric="cosine" if args.cosine else "euclidean")
    sys.stdout.write(format_report(result, ranks=tuple(k for k in (1, 5, 10) if k <= args.max_rank)))
    if args.figure:
        plots.cmc_curve(result.cmc, args.figure, map_value=result.map)
        sys.stdout.write(_kv(figure=args.figure))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.module)
    sys.stdout.write(gradcheck.format_results(results))
    return 0 if all(r.passed for r in results) else 1


def _parse_ref(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected R,C, got {text!r}") from None
    return r, c


def cmd_heatmap(args) -> int:
    state, meta = checkpoint.load(args.ckpt)
    site = args.site or (state.cfg.sona_sites[0] if state.cfg.sona_sites else None)
    if site is None or site not in state.sona:
        raise ContractError(f"checkpoint has no SONA block at {site!r}; available: {sorted(state.sona)}")
    image = read_ppm(args.image)
    cfg = state.cfg
    if image.shape[1:] != (cfg.input_height, cfg.input_width):
        raise ShapeError(f"image is {image.shape[1]}x{image.shape[2]}, model expects {cfg.input_height}x{cfg.input_width}")
    x = Tensor(prepare_eval(image[None], _eval_augment(meta)))
    set_mode(state, "eval")
    with no_grad():
        fmap = backbone_forward(state, x, stop_after=site.replace("after_", ""))
    attn = attention_heatmap(fmap, state.sona[site], state.sona_cfg[site], args.ref)
    out = Path(args.out)
    out.write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in attn) + "\n", encoding="utf-8")
    pgm = out.with_suffix(".pgm")
    write_pgm(pgm, attn)
    png = plots.heatmap(attn, args.ref, out.with_suffix(".png"), image=image)
    top = np.unravel_index(np.argsort(attn, axis=None, kind="stable")[::-1][:3], attn.shape)
    sys.stdout.write(f"attention of {args.ref} at {site}, map {attn.shape[0]}x{attn.shape[1]}\n\n")
    sys.stdout.write(_kv(
        site=site, out=out, pgm=pgm, figure=png, sum=repr(float(attn.sum())),
        top=";".join(f"{r},{c}" for r, c in zip(*top)),
    ))
    return 0


def cmd_bench(args) -> int:
    cfg = config.load(args.config)
    mc = config.model_config(cfg, num_classes=max(cfg["data.num_ids"], 2))
    report = bench(mc, trials=args.trials if args.trials is not None else cfg["bench.trials"],
                   warmup=cfg["bench.warmup"], seed=cfg["model.seed"])
    sys.stdout.write(report.format())
    if args.figure:
        plots.bench_bars(report.with_sona_ms, report.with_sona_std_ms, report.without_sona_ms,
                         report.without_sona_std_ms, args.figure)
        sys.stdout.write(_kv(figure=args.figure))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sonanet", description="SONA-Net re-identification toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic identity dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write flip-averaged embeddings for a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-flip-avg", action="store_true")
    p.add_argument("--split", default="all", choices=("all", "train", "query", "gallery"))
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="CMC and mAP of query embeddings against a gallery")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--max-rank", type=int, default=10)
    p.add_argument("--cosine", action="store_true")
    p.add_argument("--figure", help="write a CMC curve PNG here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", default="all", choices=("all", *gradcheck.GROUPS))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", help="export the SONA attention map of one reference point")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--ref", required=True, type=_parse_ref, help="row,col on the SONA feature map")
    p.add_argument("--out", required=True)
    p.add_argument("--site", choices=("after_stage2", "after_stage3", "after_stage4"))
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("bench", help="time eval-mode forward passes with and without SONA")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--figure", help="write a bar chart PNG here")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, ShapeError, NumericError, config.ConfigError, checkpoint.CheckpointError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
