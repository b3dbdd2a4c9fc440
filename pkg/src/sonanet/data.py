"""Synthetic identity datasets, P x K batch sampling, augmentation and
portable-pixmap I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    num_ids: int = 16
    images_per_id: int = 8
    height: int = 64
    width: int = 32
    cameras: int = 2
    intra_id_noise: float = 0.03
    # 0 turns camera-dependent colour transforms off
    camera_strength: float = 2.0
    # "ids": the first train_ids identities train, the rest are held out.
    # "images": every identity trains on its first half of images and the
    # second half is held out.
    holdout: str = "images"
    train_ids: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.images_per_id < 2:
            raise ContractError("images_per_id must be at least 2 so every id has a positive pair")
        if self.cameras < 2:
            raise ContractError("at least two cameras are needed for cross-camera matching")
        if self.holdout not in ("ids", "images"):
            raise ContractError(f"holdout must be 'ids' or 'images', got {self.holdout!r}")
        if self.holdout == "images" and self.images_per_id < 4:
            raise ContractError("an image holdout needs at least 4 images per identity")
        if self.holdout == "ids" and not 0 <= self.train_ids <= self.num_ids:
            raise ContractError("train_ids must lie in [0, num_ids]")
        if self.intra_id_noise < 0:
            raise ContractError("intra_id_noise must be nonnegative")

    @classmethod
    def from_config(cls, cfg: dict) -> "SyntheticDatasetConfig":
        return cls(
            num_ids=cfg["data.num_ids"],
            images_per_id=cfg["data.images_per_id"],
            height=cfg["data.height"],
            width=cfg["data.width"],
            cameras=cfg["data.cameras"],
            intra_id_noise=cfg["data.noise"],
            camera_strength=cfg["data.camera_strength"],
            holdout=cfg["data.holdout"],
            train_ids=cfg["data.train_ids"],
            seed=cfg["data.seed"],
        )


@dataclass
class Dataset:
    images: np.ndarray  # n x 3 x H x W, values in [0, 1]
    person_ids: np.ndarray
    camera_ids: np.ndarray
    splits: np.ndarray  # "train" | "query" | "gallery"
    paths: list[str] | None = None

    def __len__(self) -> int:
        return len(self.person_ids)

    def subset(self, *splits: str) -> "Dataset":
        keep = np.isin(self.splits, splits)
        paths = None if self.paths is None else [p for p, k in zip(self.paths, keep) if k]
        return Dataset(self.images[keep], self.person_ids[keep], self.camera_ids[keep], self.splits[keep], paths)


# generation ----------------------------------------------------------------------


def _identity_pattern(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Clothing-like colour bands plus a low-frequency texture, 3 x h x w."""
    img = np.empty((3, h, w))
    cuts = np.sort(rng.choice(np.arange(h // 6, h - h // 6), size=2, replace=False))
    bounds = [0, h // 6, *cuts.tolist(), h]
    for top, bottom in zip(bounds[:-1], bounds[1:]):
        img[:, top:bottom, :] = rng.uniform(0.1, 0.9, size=(3, 1, 1))
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.15, size=(3, 1, 1))
        img += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[None]
    return img


def _camera_transforms(rng: np.random.Generator, cameras: int, strength: float) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for _ in range(cameras):
        gain = 1.0 + strength * rng.uniform(-0.15, 0.15, size=(3, 1, 1))
        offset = strength * rng.uniform(-0.08, 0.08, size=(3, 1, 1))
        out.append((gain, offset))
    return out


def _split_of(cfg: SyntheticDatasetConfig, pid: int, j: int) -> str:
    half = cfg.images_per_id // 2
    if cfg.holdout == "ids":
        if pid < cfg.train_ids:
            return "train"
        return "query" if j < half else "gallery"
    if j < half:
        return "train"
    return "query" if j < half + (cfg.images_per_id - half) // 2 else "gallery"


def gen_synthetic(cfg: SyntheticDatasetConfig) -> Dataset:
    """Image = identity pattern -> camera colour transform -> Gaussian noise,
    clipped and quantised to 8 bits so that pixmap round-trips are exact.

    Splits: with ``holdout="ids"`` the first ``train_ids`` identities train
    and each remaining identity puts the first half of its images (cameras
    alternate) in the query set and the rest in the gallery. With
    ``holdout="images"`` every identity trains on its first half of images
    and its held-out images split evenly into queries, then gallery.
    """
    root = np.random.SeedSequence(cfg.seed)
    pat_ss, cam_ss, noise_ss = root.spawn(3)
    cams = _camera_transforms(np.random.default_rng(cam_ss), cfg.cameras, cfg.camera_strength)
    pat_rngs = [np.random.default_rng(s) for s in pat_ss.spawn(cfg.num_ids)]
    noise_rng = np.random.default_rng(noise_ss)

    images, pids, cids, splits = [], [], [], []
    for pid in range(cfg.num_ids):
        base = _identity_pattern(pat_rngs[pid], cfg.height, cfg.width)
        for j in range(cfg.images_per_id):
            cam = j % cfg.cameras
            gain, offset = cams[cam]
            img = base * gain + offset
            if cfg.intra_id_noise > 0:
                img = img + noise_rng.normal(0.0, cfg.intra_id_noise, size=img.shape)
            images.append(np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0)
            pids.append(pid)
            cids.append(cam)
            splits.append(_split_of(cfg, pid, j))
    return Dataset(np.stack(images), np.array(pids), np.array(cids), np.array(splits))


# P x K sampling ----------------------------------------------------------------------


def pk_sample(person_ids, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``P`` distinct identities with ``K`` images each. Identities
    with fewer than ``K`` images are sampled with replacement."""
    person_ids = np.asarray(person_ids)
    ids = np.unique(person_ids)
    if len(ids) < P:
        raise ContractError(f"need {P} identities for a P x K batch, only {len(ids)} available")
    chosen = rng.choice(ids, size=P, replace=False)
    out = []
    for pid in chosen:
        pool = np.flatnonzero(person_ids == pid)
        out.append(rng.choice(pool, size=K, replace=len(pool) < K))
    return np.concatenate(out)


# augmentation -------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    normalize: bool = True
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)
    # side of the cutout square; 0 disables
    cutout: int = 16

    @classmethod
    def from_config(cls, cfg: dict) -> "AugmentConfig":
        cut = cfg["train.cutout"]
        if cut < 0:
            cut = cfg["data.height"] // 4
        return cls(cfg["train.flip"], cfg["train.normalize"], tuple(cfg["train.norm_mean"]),
                   tuple(cfg["train.norm_std"]), cut)


def normalize(image: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return (image - m) / s


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator | None = None, train: bool = True) -> np.ndarray:
    """Train: random horizontal flip, normalisation, one zeroed square.
    Eval: normalisation only. ``image`` is ``3 x H x W``."""
    _, h, w = image.shape
    if cfg.cutout > min(h, w):
        raise ContractError(f"cutout side {cfg.cutout} exceeds image side {min(h, w)}")
    out = image
    if train and cfg.flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if cfg.normalize:
        out = normalize(out, cfg.mean, cfg.std)
    out = np.array(out, dtype=np.float64)
    if train and cfg.cutout > 0:
        s = cfg.cutout
        top = int(rng.integers(0, h - s + 1))
        left = int(rng.integers(0, w - s + 1))
        out[:, top : top + s, left : left + s] = 0.0
    return out


def prepare_eval(images: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return normalize(images, cfg.mean, cfg.std) if cfg.normalize else np.asarray(images, dtype=np.float64)


# pixmap and manifest I/O ------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 pixmap from a ``3 x H x W`` array in [0, 1]."""
    _, h, w = image.shape
    pix = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(buf, 4)
    if magic != b"P6":
        raise ValueError(f"{path}: only binary P6 pixmaps are supported")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit pixmaps are supported")
    pix = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit P5 graymap, linearly rescaled from [min, max] to [0, 255]."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    pix = np.round(scaled * 255.0).astype(np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


MANIFEST = "manifest.tsv"


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = []
    with open(out / MANIFEST, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["path", "person_id", "camera_id", "split"])
        for i in range(len(ds)):
            rel = f"images/{i:05d}_p{ds.person_ids[i]:04d}_c{ds.camera_ids[i]}.ppm"
            write_ppm(out / rel, ds.images[i])
            writer.writerow([rel, int(ds.person_ids[i]), int(ds.camera_ids[i]), ds.splits[i]])
            paths.append(rel)
    ds.paths = paths
    return out / MANIFEST


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    with open(root / MANIFEST, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if not rows:
        raise ValueError(f"{root / MANIFEST} lists no images")
    images = np.stack([read_ppm(root / r["path"]) for r in rows])
    return Dataset(
        images,
        np.array([int(r["person_id"]) for r in rows]),
        np.array([int(r["camera_id"]) for r in rows]),
        np.array([r.get("split") or "gallery" for r in rows]),
        [r["path"] for r in rows],
    )
