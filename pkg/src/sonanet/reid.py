"""Single-query re-identification evaluation (CMC and mAP).

Gallery entries with ``person_id == -1`` are junk and never matched. Gallery
entries sharing both identity and camera with the query are ignored. Queries
left without any true match are skipped and counted.
"""

from __future__ import annotations

import logging
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

log = logging.getLogger(__name__)

JUNK_ID = -1


@dataclass
class EmbeddingRecord:
    person_id: int
    camera_id: int
    feature: np.ndarray


@dataclass
class RankingResult:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray
    skipped: int = 0
    evaluated: int = 0

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self) -> dict[str, float]:
        out = {"map": self.map}
        for k in (1, 5, 10):
            if k <= len(self.cmc):
                out[f"rank{k}"] = float(self.cmc[k - 1])
        out["skipped"] = self.skipped
        return out


def _stack(records: Sequence[EmbeddingRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not records:
        raise ShapeError("empty record set")
    dims = {len(r.feature) for r in records}
    if len(dims) != 1:
        raise ShapeError(f"records carry features of different lengths: {sorted(dims)}")
    feats = np.array([np.asarray(r.feature, dtype=np.float64) for r in records])
    if not np.all(np.isfinite(feats)):
        raise NumericError("non-finite feature value")
    ids = np.array([r.person_id for r in records], dtype=np.int64)
    cams = np.array([r.camera_id for r in records], dtype=np.int64)
    return ids, cams, feats


def pairwise_distances(q: np.ndarray, g: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ShapeError(f"feature lengths differ: {q.shape[1]} vs {g.shape[1]}")
    if metric == "euclidean":
        out = np.empty((q.shape[0], g.shape[0]))
        for i, row in enumerate(q):
            diff = g - row
            out[i] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        return out
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return np.clip(1.0 - qn @ gn.T, 0.0, 2.0)
    raise ValueError(f"unknown metric {metric!r}")


def _exact_ap(flags: np.ndarray) -> Fraction:
    hits = np.flatnonzero(flags)
    if hits.size == 0:
        raise ValueError("average precision is undefined without a true match")
    return sum((Fraction(n + 1, pos + 1) for n, pos in enumerate(hits.tolist())), Fraction(0)) / hits.size


def average_precision(good: Iterable[bool]) -> float:
    """AP of one ranked list of match flags (exclusions already applied).

    Accumulated as an exact rational, so the result is the correctly rounded
    value and does not depend on summation order."""
    return float(_exact_ap(np.asarray(list(good), dtype=bool)))


def evaluate_arrays(
    q_ids, q_cams, q_feats, g_ids, g_cams, g_feats, max_rank: int = 10, metric: str = "euclidean"
) -> RankingResult:
    dist = pairwise_distances(q_feats, g_feats, metric)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    hits_at = np.zeros(max_rank, dtype=np.int64)
    aps = []
    skipped = 0
    for i in range(dist.shape[0]):
        order = np.argsort(dist[i], kind="stable")
        keep = (g_ids[order] != JUNK_ID) & ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        good = (g_ids[order] == q_ids[i])[keep]
        if not good.any():
            skipped += 1
            continue
        first = int(np.argmax(good))
        if first < max_rank:
            hits_at[first] += 1
        aps.append(_exact_ap(good))
    if skipped:
        log.warning("%d of %d queries had no valid gallery match and were skipped", skipped, dist.shape[0])
    n = len(aps)
    if n == 0:
        return RankingResult(np.zeros(max_rank), 0.0, np.zeros(0), skipped, 0)
    cmc = np.cumsum(hits_at) / n
    mean_ap = float(sum(aps, Fraction(0)) / n)
    return RankingResult(cmc, mean_ap, np.array([float(a) for a in aps]), skipped, n)


def evaluate(
    queries: Sequence[EmbeddingRecord],
    gallery: Sequence[EmbeddingRecord],
    max_rank: int = 10,
    metric: str = "euclidean",
) -> RankingResult:
    qi, qc, qf = _stack(queries)
    gi, gc, gf = _stack(gallery)
    return evaluate_arrays(qi, qc, qf, gi, gc, gf, max_rank=max_rank, metric=metric)


# file formats -----------------------------------------------------------------------


def write_embeddings(path, records: Iterable[EmbeddingRecord], comment: str | None = None) -> None:
    """``person_id<TAB>camera_id<TAB>f1,f2,...`` with round-trip float text."""
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        for r in records:
            feats = ",".join(repr(float(v)) for v in r.feature)
            fh.write(f"{int(r.person_id)}\t{int(r.camera_id)}\t{feats}\n")


def read_embeddings(path) -> list[EmbeddingRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        feat = np.array([float(v) for v in parts[2].split(",")])
        out.append(EmbeddingRecord(int(parts[0]), int(parts[1]), feat))
    return out


def format_report(result: RankingResult, ranks: Sequence[int] = (1, 5, 10)) -> str:
    lines = ["metric    value", "--------  ------"]
    lines.append(f"mAP       {result.map:.4f}")
    for k in ranks:
        if k <= len(result.cmc):
            lines.append(f"Rank-{k:<3}  {result.cmc[k - 1]:.4f}")
    lines.append(f"queries   {result.evaluated} evaluated, {result.skipped} skipped")
    lines.append("")
    lines.append(f"map={result.map!r}")
    for k in ranks:
        if k <= len(result.cmc):
            lines.append(f"rank{k}={float(result.cmc[k - 1])!r}")
    lines.append(f"skipped={result.skipped}")
    return "\n".join(lines) + "\n"
