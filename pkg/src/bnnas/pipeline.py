"""End-to-end run: train the supernet, search, retrain, analyze.

Every stage persists its artifacts in the output directory and reads the
previous stage's artifacts back from disk, so stages can be re-run alone.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import analysis, checkpoint, engine
from .data import Dataset, SyntheticSpec, gen_synthetic, load_cifar10_files
from .engine import OptimState
from .indicator import BnScorer, acc_indicator, write_score_table_csv
from .search import EaConfig, SearchReport, evolutionary_search
from .space import CANDIDATES, SpaceConfig, Subnet, Supernet, build_supernet, flops, flops_table
from .trainer import TrainConfig, retrain_subnet, train_supernet

log = logging.getLogger(__name__)

STAGES = ("train", "search", "retrain", "analyze")

CKPT = "supernet.ckpt"
SNAPSHOTS = "snapshots.bin"
REPORT = "search_report.txt"
RETRAIN = "retrain.txt"
MANIFEST = "manifest.txt"
TIMINGS = "timings.txt"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _pick(cls, d: dict | None):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return d


@dataclass
class DataConfig:
    source: str = "synthetic"
    synthetic: dict = field(default_factory=dict)
    paths: list = field(default_factory=list)
    mean: list = field(default_factory=lambda: [0.4914, 0.4822, 0.4465])
    std: list = field(default_factory=lambda: [0.2470, 0.2435, 0.2616])
    limit: int | None = None
    val_fraction: float = 0.2


@dataclass
class AnalysisConfig:
    window: int = 3
    threshold: float = 0.9
    correlation_samples: int = 0
    correlation_epochs: int = 2


@dataclass
class RunConfig:
    seed: int
    out_dir: str = "runs/default"
    stages: list = field(default_factory=lambda: list(STAGES))
    space: SpaceConfig = field(default_factory=SpaceConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: EaConfig = field(default_factory=EaConfig)
    indicator: str = "bn"
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(mode="all_params"))
    retrain_top_k: int = 1
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "seed" not in d:
            raise ConfigError("config must set an explicit integer seed")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(
                seed=int(d["seed"]),
                out_dir=d.get("out_dir", "runs/default"),
                stages=list(d.get("stages", STAGES)),
                space=SpaceConfig.from_dict(d.get("space", {})),
                data=DataConfig(**_pick(DataConfig, d.get("data"))),
                train=TrainConfig(**_pick(TrainConfig, d.get("train"))),
                search=EaConfig(**_pick(EaConfig, d.get("search"))),
                indicator=d.get("indicator", "bn"),
                retrain=TrainConfig(**{"mode": "all_params", **_pick(TrainConfig, d.get("retrain"))}),
                retrain_top_k=int(d.get("retrain_top_k", 1)),
                analysis=AnalysisConfig(**_pick(AnalysisConfig, d.get("analysis"))),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        cfg.validate()
        return cfg

    def validate(self) -> None:
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}; choose from {STAGES}")
        if self.indicator not in ("bn", "acc"):
            raise ConfigError("indicator must be 'bn' or 'acc'")
        if self.data.source == "cifar10":
            if not self.data.paths:
                raise ConfigError("cifar10 source needs data.paths")
            missing = [p for p in self.data.paths if not os.path.exists(p)]
            if missing:
                raise ConfigError(f"missing data files: {missing}")
        elif self.data.source != "synthetic":
            raise ConfigError("data.source must be 'synthetic' or 'cifar10'")
        if self.retrain_top_k < 1:
            raise ConfigError("retrain_top_k must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["space"] = self.space.to_dict()
        return d

    def digest(self) -> str:
        """Hash of everything that affects results (not where or which stages run)."""
        d = self.to_dict()
        del d["out_dir"], d["stages"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    with open(path) as f:
        d = json.load(f)
    if seed is not None:
        d["seed"] = seed
    if out_dir is not None:
        d["out_dir"] = out_dir
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------- helpers


def load_dataset(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train, val) splits; the split depends only on the master seed."""
    dc = cfg.data
    if dc.source == "synthetic":
        spec = SyntheticSpec(**{"num_classes": cfg.space.num_classes, "channels": cfg.space.in_channels,
                                "image_size": cfg.space.image_size, **dc.synthetic})
        data = gen_synthetic(spec, cfg.seed)
    else:
        data = load_cifar10_files(dc.paths, mean=dc.mean, std=dc.std, limit=dc.limit)
    if data.num_classes != cfg.space.num_classes or data.x.shape[1:] != (
            cfg.space.in_channels, cfg.space.image_size, cfg.space.image_size):
        raise ConfigError("dataset shape does not match the space configuration")
    return data.split(dc.val_fraction, cfg.seed)


def _seed(cfg: RunConfig, stage: str) -> int:
    return cfg.seed + 1 + STAGES.index(stage)


def _read_kv(path) -> dict:
    out = {}
    if os.path.exists(path):
        with open(path) as f:
            for line in f:
                if ": " in line:
                    k, v = line.rstrip("\n").split(": ", 1)
                    out[k] = v
    return out


def _write_kv(path, kv: dict) -> None:
    with open(path, "w") as f:
        for k in sorted(kv):
            f.write(f"{k}: {kv[k]}\n")


def _require(path, stage: str, upstream: str):
    if not os.path.exists(path):
        raise StageError(stage, f"missing {os.path.basename(path)}; run the '{upstream}' stage first")
    return path


# ---------------------------------------------------------------- stages


def stage_train(cfg: RunConfig, out: str, splits) -> dict:
    train, _ = splits
    net = build_supernet(cfg.space, cfg.seed)
    state = OptimState(cfg.train.momentum, cfg.train.weight_decay)
    snaps = train_supernet(net, train, cfg.train, np.random.default_rng(_seed(cfg, "train")), state)
    checkpoint.save_checkpoint(os.path.join(out, CKPT), checkpoint.from_network(net, cfg.train.epochs, state))
    checkpoint.save_checkpoint(os.path.join(out, SNAPSHOTS),
                               checkpoint.snapshots_to_checkpoint(snaps, cfg.space.digest()))
    write_score_table_csv(os.path.join(out, "scores.csv"), snaps[-1].scores())
    with open(os.path.join(out, "train_log.csv"), "w") as f:
        f.write("epoch,loss\n")
        for s in snaps[1:]:
            f.write(f"{s.epoch},{s.loss!r}\n")
    return {"train.epochs": cfg.train.epochs, "train.mode": cfg.train.mode, "train.policy": cfg.train.policy,
            "train.final_loss": repr(snaps[-1].loss)}


def load_supernet(cfg: RunConfig, out: str, stage: str) -> Supernet:
    ckpt = checkpoint.load_checkpoint(_require(os.path.join(out, CKPT), stage, "train"), cfg.space.digest())
    net = build_supernet(cfg.space, cfg.seed)
    checkpoint.apply_to_network(ckpt, net)
    return net


def stage_search(cfg: RunConfig, out: str, splits) -> tuple[dict, SearchReport]:
    path = _require(os.path.join(out, CKPT), "search", "train")
    ea = replace(cfg.search, seed=_seed(cfg, "search"))
    engine.reset_counters()
    if cfg.indicator == "bn":
        # only the stored last-BN scaling factors are read
        table = checkpoint.score_table_from_checkpoint(checkpoint.load_checkpoint(path, cfg.space.digest()),
                                                       cfg.space)
        report = evolutionary_search(cfg.space, BnScorer(table), ea)
    else:
        net = load_supernet(cfg, out, "search")
        _, val = splits
        report = evolutionary_search(cfg.space, lambda a: acc_indicator(net, a, val.x, val.y), ea)
    calls = engine.counters["forward_path"] + engine.counters["conv2d_forward"]
    with open(os.path.join(out, REPORT), "w") as f:
        f.write(report.to_text())
    ftab, fixed = flops_table(cfg.space)
    with open(os.path.join(out, "flops.csv"), "w") as f:
        f.write(f"layer,candidate,kernel,expansion,macs\n")
        for l, row in enumerate(ftab):
            for n, v in enumerate(row):
                f.write(f"{l},{n},{CANDIDATES[n].kernel},{CANDIDATES[n].expansion},{v}\n")
        f.write(f"fixed,,,,{fixed}\n")
    kv = {"search.indicator": cfg.indicator, "search.best": ",".join(map(str, report.best)),
          "search.best_score": repr(report.best_score), "search.best_flops": report.best_flops,
          "search.evaluated": report.evaluated_count, "search.engine_calls": calls}
    return kv, report


def stage_retrain(cfg: RunConfig, out: str, splits) -> dict:
    path = _require(os.path.join(out, REPORT), "retrain", "search")
    with open(path) as f:
        report = SearchReport.from_text(f.read())
    train, val = splits
    seed = _seed(cfg, "retrain")
    results = []
    for i, cand in enumerate(report.topk[:cfg.retrain_top_k]):
        net, acc = retrain_subnet(cfg.space, cand.arch, train, val, cfg.retrain, seed + i)
        results.append((cand, acc, net))
    best_i = max(range(len(results)), key=lambda i: (results[i][1], -i))
    cand, acc, net = results[best_i]
    checkpoint.save_checkpoint(os.path.join(out, "subnet.ckpt"), checkpoint.from_network(net, cfg.retrain.epochs))
    with open(os.path.join(out, RETRAIN), "w") as f:
        f.write("arch\tops\tbn_score\tflops\tval_accuracy\n")
        for c, a, _ in results:
            ops = " ".join(str(CANDIDATES[x]) for x in c.arch)
            f.write(f"{','.join(map(str, c.arch))}\t{ops}\t{c.score!r}\t{c.flops}\t{a!r}\n")
    return {"retrain.arch": ",".join(map(str, cand.arch)), "retrain.val_accuracy": repr(acc),
            "retrain.flops": flops(cfg.space, cand.arch).total}


def stage_analyze(cfg: RunConfig, out: str, splits) -> dict:
    ckpt = checkpoint.load_checkpoint(_require(os.path.join(out, SNAPSHOTS), "analyze", "train"),
                                      cfg.space.digest())
    snaps = checkpoint.snapshots_from_checkpoint(ckpt, cfg.space)
    kv = {}
    if len(snaps) >= 2:
        matrix = analysis.similarity_matrix(snaps)
        analysis.write_matrix_csv(os.path.join(out, "similarity.csv"), matrix)
        analysis.write_pgm(os.path.join(out, "similarity.pgm"), matrix)
        conv = analysis.convergence_epoch(matrix, cfg.analysis.window, cfg.analysis.threshold)
        kv["analyze.convergence_epoch"] = "none" if conv is None else conv
    if cfg.analysis.correlation_samples >= 2:
        net = load_supernet(cfg, out, "analyze")
        train, val = splits
        rcfg = replace(cfg.retrain, epochs=cfg.analysis.correlation_epochs,
                       warmup_epochs=min(cfg.retrain.warmup_epochs, cfg.analysis.correlation_epochs - 1))
        res = analysis.correlation_study(cfg.space, net, train, val, cfg.analysis.correlation_samples, rcfg,
                                         _seed(cfg, "analyze"))
        analysis.write_correlation_csv(os.path.join(out, "correlation.csv"), res)
        kv["analyze.kendall_tau"] = "undefined" if res.tau is None else repr(res.tau)
    return kv


def run_pipeline(cfg: RunConfig, stages=None) -> dict:
    """Run the selected stages in canonical order; returns the manifest entries."""
    stages = [s for s in STAGES if s in (stages or cfg.stages)]
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    manifest = _read_kv(os.path.join(out, MANIFEST))
    manifest_digest = manifest.get("config_digest")
    if manifest_digest is not None and manifest_digest != cfg.digest():
        if set(stages) != set(STAGES) or "train" not in stages:
            raise StageError(stages[0], "output directory holds artifacts of a different config")
        manifest = {}
    manifest["config_digest"] = cfg.digest()
    manifest["seed"] = cfg.seed
    splits = load_dataset(cfg)
    timings = {}
    for stage in stages:
        log.info("stage %s", stage)
        t0 = time.perf_counter()
        try:
            if stage == "train":
                kv = stage_train(cfg, out, splits)
            elif stage == "search":
                kv, report = stage_search(cfg, out, splits)
                timings["search.scoring_seconds"] = f"{report.wall_time:.6f}"
            elif stage == "retrain":
                kv = stage_retrain(cfg, out, splits)
            else:
                kv = stage_analyze(cfg, out, splits)
        except StageError:
            raise
        except Exception as e:
            raise StageError(stage, f"{type(e).__name__}: {e}") from e
        timings[f"{stage}.seconds"] = f"{time.perf_counter() - t0:.6f}"
        manifest.update(kv)
        manifest["stages"] = ",".join(s for s in STAGES if s in stages or f"{s}.done" in manifest)
        manifest[f"{stage}.done"] = "yes"
        _write_kv(os.path.join(out, MANIFEST), manifest)
    _write_kv(os.path.join(out, TIMINGS), timings)
    return manifest
