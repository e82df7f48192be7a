"""BN-based operation and subnet scores, plus the validation-accuracy baseline."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .space import CANDIDATES, Supernet, extract_subnet, forward_path, validate_arch


@dataclass(frozen=True)
class OpScore:
    layer: int
    candidate: int
    value: float


def gamma_score(gamma: np.ndarray) -> float:
    """Mean absolute scaling factor of one BN layer."""
    return float(np.mean(np.abs(gamma.astype(np.float64))))


def op_score(supernet: Supernet, layer: int, candidate: int) -> OpScore:
    n_layers, n_cands = supernet.search_dims
    if not (0 <= layer < n_layers and 0 <= candidate < n_cands):
        raise IndexError(f"op ({layer}, {candidate}) outside {n_layers}x{n_cands} supernet")
    gamma = supernet.ops[layer][candidate].project_bn.gamma
    return OpScore(layer, candidate, gamma_score(gamma))


def score_table(supernet: Supernet) -> np.ndarray:
    """(L, N) float64 matrix of op scores; read-only once built."""
    n_layers, n_cands = supernet.search_dims
    table = np.array([[op_score(supernet, l, n).value for n in range(n_cands)] for l in range(n_layers)])
    table.setflags(write=False)
    return table


def score_table_from_gammas(gammas) -> np.ndarray:
    """Same as :func:`score_table`, from nested per-op gamma vectors."""
    table = np.array([[gamma_score(g) for g in row] for row in gammas])
    table.setflags(write=False)
    return table


def subnet_score(table: np.ndarray, arch: Sequence[int]) -> float:
    """Sum of per-layer op scores along ``arch``, accumulated layer by layer."""
    total = 0.0
    for l, a in enumerate(arch):
        total += float(table[l, a])
    return total


def subnet_scores(table: np.ndarray, archs) -> np.ndarray:
    """Vectorised :func:`subnet_score` for an (M, L) array of architectures."""
    archs = np.asarray(archs, dtype=np.intp)
    vals = table[np.arange(table.shape[0])[None, :], archs]
    total = np.zeros(len(archs))
    for l in range(table.shape[0]):
        total += vals[:, l]
    return total


class BnScorer:
    """Callable scorer backed by a prebuilt score table; no tensor work."""

    def __init__(self, table: np.ndarray):
        self.table = table

    def __call__(self, arch) -> float:
        return subnet_score(self.table, arch)

    def score_many(self, archs) -> np.ndarray:
        return subnet_scores(self.table, archs)


def top1_accuracy(net, arch, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Eval-mode top-1 accuracy of ``net`` restricted to ``arch``."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = 0
    for i in range(0, len(x), batch_size):
        logits, _ = forward_path(net, arch, x[i:i + batch_size], train=False)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i:i + batch_size]))
    return correct / len(x)


def recalibrate_bn(net, arch, x: np.ndarray, batch_size: int = 256, batches: int | None = None) -> None:
    """Re-estimate running statistics of the path from training batches."""
    ops = net.path(arch)
    bns = [net.stem.bn, net.head.bn] + [u.bn for op in ops for u in op.units()]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.running_mean[...] = 0.0
        bn.running_var[...] = 1.0
    try:
        for k, i in enumerate(range(0, len(x), batch_size)):
            if batches is not None and k >= batches:
                break
            for bn in bns:
                bn.momentum = 1.0 / (k + 1)
            forward_path(net, arch, x[i:i + batch_size], train=True)
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m


def acc_indicator(supernet: Supernet, arch, x_val: np.ndarray, y_val: np.ndarray,
                  recalibrate: bool = False, x_train: np.ndarray | None = None) -> float:
    """Validation accuracy of a path with inherited supernet weights."""
    arch = validate_arch(supernet.space, arch)
    if recalibrate:
        if x_train is None:
            raise ValueError("recalibration needs training images")
        sub = extract_subnet(supernet, arch)
        recalibrate_bn(sub, None, x_train)
        return top1_accuracy(sub, None, x_val, y_val)
    return top1_accuracy(supernet, arch, x_val, y_val)


def write_score_table_csv(path, table: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "candidate", "kernel", "expansion", "score"])
        for l in range(table.shape[0]):
            for n in range(table.shape[1]):
                c = CANDIDATES[n]
                w.writerow([l, n, c.kernel, c.expansion, repr(float(table[l, n]))])
