"""Desk-scale semi-supervised comparison: supervised-only vs RCPS and its two ablations.

Every run trains on the same phantom dataset with the same step budget and
is scored on the held-out test split. The four arms differ only in the
unsupervised loss weights:

    sup      alpha = beta = 0, unlabeled data unused
    rp       rectified pseudo loss only (beta = 0)
    bc       contrastive loss only (alpha = 0)
    rcps     both
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .inference import SlidingWindowConfig, evaluate
from .network import NetworkConfig, parameter_hash
from .sampling import SamplingConfig
from .trainer import TrainConfig, fit
from .volume_io import Dataset, PhantomSpec, generate_phantoms

log = logging.getLogger(__name__)

MODES = ("sup", "rp", "bc", "rcps")


@dataclass(frozen=True)
class GainExperiment:
    """Settings of the comparison; defaults are sized for a single CPU core."""

    phantoms: PhantomSpec = field(default_factory=lambda: PhantomSpec(volume_shape=(32, 32, 32)))
    num_labeled: int = 4
    num_unlabeled: int = 36
    num_test: int = 10
    seeds: tuple = (0, 1, 2)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=8, patch_size=(32, 32, 32), sampling=SamplingConfig(num_negatives=100)))
    inference: Optional[SlidingWindowConfig] = None

    def dataset(self) -> Dataset:
        return generate_phantoms(self.phantoms, self.num_labeled, self.num_unlabeled, self.num_test)

    def train_config(self, mode: str, seed: int) -> TrainConfig:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        lw = self.train.loss
        if mode == "rp":
            lw = dataclasses.replace(lw, beta=0.0)
        elif mode == "bc":
            lw = dataclasses.replace(lw, alpha=0.0)
        return dataclasses.replace(self.train, seed=seed, loss=lw, supervised_only=(mode == "sup"))

    def sliding_window(self) -> SlidingWindowConfig:
        return self.inference or SlidingWindowConfig(patch_size=self.train.patch_size)


@dataclass
class RunRecord:
    mode: str
    seed: int
    dsc: float
    hd95: float
    asd: float
    parameter_hash: str
    seconds: float


def run_one(exp: GainExperiment, dataset: Dataset, mode: str, seed: int, run_dir=None) -> RunRecord:
    t0 = time.time()
    cfg = exp.train_config(mode, seed)
    net = dataclasses.replace(exp.network, num_classes=exp.phantoms.num_classes)
    result = fit(dataset, net, cfg, run_dir=run_dir)
    with torch.no_grad():
        table = evaluate(result.model, dataset.test, exp.sliding_window(), num_classes=net.num_classes)
    if run_dir is not None:
        table.write(Path(run_dir) / "metrics.csv")
    o = table.overall()
    rec = RunRecord(mode, seed, o.dsc_mean, o.hd95_mean, o.asd_mean, parameter_hash(result.model),
                    time.time() - t0)
    log.info("%s seed %d: DSC %.2f (%.0fs)", mode, seed, 100 * rec.dsc, rec.seconds)
    return rec


def run_gain_experiment(exp: GainExperiment, modes: Sequence[str] = MODES, out_dir=None) -> list:
    dataset = exp.dataset()
    records = []
    for seed in exp.seeds:
        for mode in modes:
            run_dir = None if out_dir is None else Path(out_dir) / f"{mode}_seed{seed}"
            records.append(run_one(exp, dataset, mode, seed, run_dir))
    if out_dir is not None:
        Path(out_dir, "records.json").write_text(json.dumps([dataclasses.asdict(r) for r in records], indent=2))
    return records


@dataclass
class GainVerdict:
    mean_dsc: dict
    gain_points: float
    ablations_between: dict
    passed: bool


def judge_gain(records: Sequence[RunRecord], min_gain_points: float = 3.0, min_seeds: int = 2) -> GainVerdict:
    """Full method beats baseline by ``min_gain_points`` DSC (x100) on average, and each
    ablation lands between baseline and full method in at least ``min_seeds`` seeds."""
    by = {(r.mode, r.seed): r.dsc for r in records}
    seeds = sorted({r.seed for r in records})
    modes = sorted({r.mode for r in records})
    mean = {m: sum(by[(m, s)] for s in seeds) / len(seeds) for m in modes}
    gain = 100.0 * (mean["rcps"] - mean["sup"])
    between = {}
    for abl in ("rp", "bc"):
        if abl in mean:
            between[abl] = sum(by[("sup", s)] <= by[(abl, s)] <= by[("rcps", s)] for s in seeds)
    passed = gain >= min_gain_points and all(v >= min_seeds for v in between.values()) and len(between) == 2
    return GainVerdict(mean, gain, between, passed)


def desk_scale_experiment() -> GainExperiment:
    """Default phantoms at 32^3 voxels, default loss weights, 100 negatives, 8 epochs.

    Sized so that all twelve runs finish in well under an hour on one CPU core.
    """
    return GainExperiment()
