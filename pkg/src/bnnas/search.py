"""Subnet search under a FLOPs constraint: evolutionary, exhaustive and random-5."""

from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .indicator import acc_indicator
from .space import CANDIDATES, SpaceConfig, flops_table, sample_uniform

Scorer = Callable[[tuple], float]


class InfeasibleConstraint(ValueError):
    pass


class SearchStalled(RuntimeError):
    pass


@dataclass
class EaConfig:
    population: int = 50
    iterations: int = 20
    total_samples: int = 1000
    mutation_prob: float = 0.1
    crossover_fraction: float = 0.5
    topk_parents: int = 10
    flops_constraint: float | None = None
    seed: int = 0
    report_topk: int = 5

    def __post_init__(self):
        for name in ("mutation_prob", "crossover_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.population < 1 or self.iterations < 1 or self.topk_parents < 1:
            raise ValueError("population, iterations and topk_parents must be positive")
        if self.population * self.iterations < self.total_samples:
            raise ValueError("population * iterations cannot cover total_samples")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Candidate:
    arch: tuple
    score: float
    flops: int


@dataclass
class SearchReport:
    method: str
    best: tuple
    best_score: float
    best_flops: int
    topk: list[Candidate]
    evaluated_count: int
    unique_count: int
    constraint: float | None
    wall_time: float = field(default=0.0, compare=False)

    def to_text(self) -> str:
        """Deterministic plain-text form (timing is deliberately left out)."""
        lines = [
            f"method: {self.method}",
            f"constraint: {'none' if self.constraint is None else repr(self.constraint)}",
            f"evaluated: {self.evaluated_count}",
            f"unique: {self.unique_count}",
            f"best: {','.join(map(str, self.best))}",
            f"best_ops: {' '.join(str(CANDIDATES[a]) for a in self.best)}",
            f"best_score: {self.best_score!r}",
            f"best_flops: {self.best_flops}",
            "rank\tarch\tops\tscore\tflops",
        ]
        for i, c in enumerate(self.topk):
            ops = " ".join(str(CANDIDATES[a]) for a in c.arch)
            lines.append(f"{i + 1}\t{','.join(map(str, c.arch))}\t{ops}\t{c.score!r}\t{c.flops}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SearchReport":
        head, _, table = text.partition("rank\tarch\tops\tscore\tflops\n")
        kv = dict(line.split(": ", 1) for line in head.strip().splitlines())
        topk = []
        for line in table.strip().splitlines():
            _, arch, _, score, fl = line.split("\t")
            topk.append(Candidate(_parse_arch(arch), float(score), int(fl)))
        return cls(
            method=kv["method"],
            best=_parse_arch(kv["best"]),
            best_score=float(kv["best_score"]),
            best_flops=int(kv["best_flops"]),
            topk=topk,
            evaluated_count=int(kv["evaluated"]),
            unique_count=int(kv["unique"]),
            constraint=None if kv["constraint"] == "none" else float(kv["constraint"]),
        )


def _parse_arch(s: str) -> tuple:
    return tuple(int(v) for v in s.split(","))


def _rank_key(item):
    arch, score = item
    return (-score, arch)


class _Flops:
    def __init__(self, space: SpaceConfig):
        self.table, self.fixed = flops_table(space)
        self.rows = np.arange(space.num_layers)

    def __call__(self, arch) -> int:
        return int(self.fixed + self.table[self.rows, list(arch)].sum())

    def feasible(self, arch, constraint) -> bool:
        return constraint is None or self(arch) < constraint


def _report(method, memo, flops, evaluated, constraint, k, t0) -> SearchReport:
    ranked = sorted(memo.items(), key=_rank_key)
    best, best_score = ranked[0]
    return SearchReport(
        method=method,
        best=best,
        best_score=float(best_score),
        best_flops=flops(best),
        topk=[Candidate(a, float(s), flops(a)) for a, s in ranked[:k]],
        evaluated_count=evaluated,
        unique_count=len(memo),
        constraint=constraint,
        wall_time=time.perf_counter() - t0,
    )


def evolutionary_search(space: SpaceConfig, scorer: Scorer, cfg: EaConfig) -> SearchReport:
    """Maximise ``scorer`` over architectures with FLOPs strictly below the constraint.

    Generation 0 is rejection-sampled uniformly; each later generation mixes
    uniform crossover of two top-k parents with per-gene mutation of one.
    Repeated architectures are scored once but count against the budget.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    fl = _Flops(space)
    constraint = cfg.flops_constraint
    minimal = tuple(int(np.argmin(row)) for row in fl.table)
    if not fl.feasible(minimal, constraint):
        raise InfeasibleConstraint(
            f"smallest architecture needs {fl(minimal)} MACs, constraint is {constraint}")

    n_layers, n_cands = space.num_layers, space.num_candidates
    stall_limit = 10 * cfg.population

    def fill(make, count) -> list:
        out, rejects = [], 0
        while len(out) < count:
            arch = make()
            if fl.feasible(arch, constraint):
                out.append(arch)
                rejects = 0
            else:
                rejects += 1
                if rejects > stall_limit:
                    raise SearchStalled(
                        f"{rejects} consecutive candidates violated the FLOPs constraint "
                        f"{constraint}; try a looser constraint")
        return out

    memo: dict[tuple, float] = {}
    evaluated = 0
    population = fill(lambda: sample_uniform(space, rng), cfg.population)
    for it in range(cfg.iterations):
        budget = cfg.total_samples - evaluated
        if budget <= 0:
            break
        for arch in population[:budget]:
            if arch not in memo:
                memo[arch] = float(scorer(arch))
            evaluated += 1
        if it == cfg.iterations - 1 or evaluated >= cfg.total_samples:
            break
        parents = [a for a, _ in sorted(memo.items(), key=_rank_key)[:cfg.topk_parents]]
        n_cross = int(round(cfg.population * cfg.crossover_fraction))

        def mutate():
            p = parents[rng.integers(len(parents))]
            flip = rng.random(n_layers) < cfg.mutation_prob
            fresh = rng.integers(0, n_cands, size=n_layers)
            return tuple(int(f) if m else g for g, f, m in zip(p, fresh, flip))

        def crossover():
            i, j = rng.choice(len(parents), size=2, replace=len(parents) < 2)
            pick = rng.random(n_layers) < 0.5
            return tuple(a if s else b for a, b, s in zip(parents[i], parents[j], pick))

        population = fill(crossover, n_cross) + fill(mutate, cfg.population - n_cross)

    return _report("evolutionary", memo, fl, evaluated, constraint, cfg.report_topk, t0)


def exhaustive_search(space: SpaceConfig, scorer: Scorer, constraint: float | None = None,
                      cap: int = 10**6, report_topk: int = 5) -> SearchReport:
    """Exact constrained argmax by enumeration; ties go to the smallest index vector."""
    t0 = time.perf_counter()
    n_layers, n_cands = space.num_layers, space.num_candidates
    if n_cands ** n_layers > cap:
        raise ValueError(f"search space has {n_cands ** n_layers} architectures, cap is {cap}")
    fl = _Flops(space)
    memo = {}
    for arch in itertools.product(range(n_cands), repeat=n_layers):
        if fl.feasible(arch, constraint):
            memo[arch] = float(scorer(arch))
    if not memo:
        raise InfeasibleConstraint(f"no architecture satisfies FLOPs < {constraint}")
    return _report("exhaustive", memo, fl, len(memo), constraint, report_topk, t0)


def random_baseline(space: SpaceConfig, evaluator: Scorer, rng: np.random.Generator,
                    constraint: float | None = None, count: int = 5) -> SearchReport:
    """Best of ``count`` uniformly sampled feasible architectures under ``evaluator``.

    ``topk`` lists every sampled architecture, best first.
    """
    t0 = time.perf_counter()
    fl = _Flops(space)
    samples = []
    rejects = 0
    while len(samples) < count:
        arch = sample_uniform(space, rng)
        if fl.feasible(arch, constraint):
            samples.append(arch)
        else:
            rejects += 1
            if rejects > 10 * max(count, 50):
                raise SearchStalled(f"cannot sample under FLOPs constraint {constraint}")
    memo = {}
    for arch in samples:
        if arch not in memo:
            memo[arch] = float(evaluator(arch))
    return _report(f"random{count}", memo, fl, count, constraint, count, t0)


def random5_baseline(space: SpaceConfig, supernet, val, rng: np.random.Generator,
                     constraint: float | None = None) -> SearchReport:
    """Five random subnets ranked by inherited-weight validation accuracy."""
    return random_baseline(space, lambda a: acc_indicator(supernet, a, val.x, val.y), rng, constraint, 5)
