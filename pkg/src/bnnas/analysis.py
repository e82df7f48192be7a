"""Rank-vector stability across epochs and score/accuracy rank correlation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .indicator import score_table, subnet_score
from .space import SpaceConfig, Supernet, sample_uniform
from .trainer import BnSnapshot, TrainConfig, TrainingDiverged, retrain_subnet


@dataclass
class RankVector:
    epoch: int
    ranks: np.ndarray  # (L*N,) ints, block l ranks layer l's candidates (1 = best)


@dataclass
class SimilarityMatrix:
    epochs: list
    values: np.ndarray  # (E, E) in [0, 1]


def rank_block(scores: Sequence[float]) -> np.ndarray:
    """Rank 1 for the highest score; equal scores keep candidate-index order."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def rank_vector(snapshot: BnSnapshot | np.ndarray, epoch: int | None = None) -> RankVector:
    """Concatenate per-layer candidate rankings of a BN snapshot (or an (L, N) score table)."""
    if isinstance(snapshot, BnSnapshot):
        rows = snapshot.gammas
        if not rows or any(len(r) != len(rows[0]) or any(g is None for g in r) for r in rows):
            raise ValueError("snapshot does not cover every (layer, candidate) op")
        table, epoch = snapshot.scores(), snapshot.epoch
    else:
        table = np.asarray(snapshot, dtype=np.float64)
        if table.ndim != 2:
            raise ValueError("score table must be (L, N)")
    return RankVector(epoch if epoch is not None else 0, np.concatenate([rank_block(r) for r in table]))


def similarity_matrix(items: Sequence[BnSnapshot | RankVector]) -> SimilarityMatrix:
    """1 - L2 distance / (largest pairwise distance); all ones if nothing moved."""
    vecs = [it if isinstance(it, RankVector) else rank_vector(it) for it in items]
    if len(vecs) < 2:
        raise ValueError("need at least two snapshots")
    r = np.stack([v.ranks for v in vecs]).astype(np.float64)
    sq = ((r[:, None, :] - r[None, :, :]) ** 2).sum(axis=2)
    d = np.sqrt(sq)
    dmax = d.max()
    sim = np.ones_like(d) if dmax == 0 else 1.0 - d / dmax
    return SimilarityMatrix([v.epoch for v in vecs], sim)


def convergence_epoch(matrix: SimilarityMatrix, window: int, threshold: float, sustained: bool = False):
    """First epoch whose ranking is close to every ranking in the final window.

    Returns the earliest epoch e with similarity >= ``threshold`` to each of
    the last ``window`` epochs, or None. With ``sustained=True`` every epoch
    after e must satisfy the same condition too.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    sim = matrix.values
    n = len(sim)
    ok = (sim[:, max(0, n - window):] >= threshold).all(axis=1)
    if not sustained:
        hits = np.flatnonzero(ok)
        return matrix.epochs[hits[0]] if len(hits) else None
    if not ok[-1]:
        return None
    e = n - 1
    while e > 0 and ok[e - 1]:
        e -= 1
    return matrix.epochs[e]


def kendall_tau(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Tie-corrected Kendall tau-b. Returns None when either input is constant."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    n = len(x)
    if n < 2:
        raise ValueError("kendall_tau needs at least two points")
    iu = np.triu_indices(n, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    n0 = n * (n - 1) // 2
    tied_x = int(np.count_nonzero(sx == 0))
    tied_y = int(np.count_nonzero(sy == 0))
    if tied_x == n0 or tied_y == n0:
        return None
    s = int(np.sum(sx * sy))
    return s / math.sqrt((n0 - tied_x) * (n0 - tied_y))


@dataclass
class CorrelationResult:
    archs: list
    scores: list
    accuracies: list
    tau: float | None


def correlation_study(space: SpaceConfig, supernet: Supernet, train: Dataset, val: Dataset,
                      sample_count: int, retrain_cfg: TrainConfig, seed: int) -> CorrelationResult:
    """Kendall tau between BN subnet scores and from-scratch retrain accuracy.

    Distinct architectures are drawn uniformly; each retrain gets its own
    seed derived from ``seed``.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    total = space.num_candidates ** space.num_layers
    if sample_count > total:
        raise ValueError(f"only {total} distinct architectures exist")
    rng = np.random.default_rng(seed)
    archs: list = []
    seen = set()
    while len(archs) < sample_count:
        a = sample_uniform(space, rng)
        if a not in seen:
            seen.add(a)
            archs.append(a)
    table = score_table(supernet)
    seeds = np.random.SeedSequence(seed).generate_state(sample_count)
    scores, accs = [], []
    for arch, s in zip(archs, seeds):
        try:
            _, acc = retrain_subnet(space, arch, train, val, retrain_cfg, int(s))
        except TrainingDiverged as e:
            raise RuntimeError(f"retraining architecture {arch} failed: {e}") from e
        scores.append(subnet_score(table, arch))
        accs.append(acc)
    return CorrelationResult(archs, scores, accs, kendall_tau(scores, accs))


# ---------------------------------------------------------------- export


def write_matrix_csv(path, matrix: SimilarityMatrix) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch"] + list(matrix.epochs))
        for e, row in zip(matrix.epochs, matrix.values):
            w.writerow([e] + [f"{v:.6f}" for v in row])


def write_pgm(path, matrix: SimilarityMatrix) -> None:
    """8-bit binary PGM; darker pixels mean more similar epochs."""
    pix = np.round(255.0 * (1.0 - np.clip(matrix.values, 0.0, 1.0))).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_correlation_csv(path, result: CorrelationResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arch", "bn_score", "retrain_accuracy"])
        for a, s, acc in zip(result.archs, result.scores, result.accuracies):
            w.writerow([",".join(map(str, a)), repr(s), repr(acc)])
