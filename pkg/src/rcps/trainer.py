"""Training loop: batch assembly, the four-input forward pass, schedules, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch

from .augment import GridDistortConfig, IntensityAugmentConfig, grid_distort, make_views
from .losses import LossReport, LossWeights, rectified_pseudo_loss, seg_loss
from .network import NetworkConfig, UNet3D, build_model, load_checkpoint, save_checkpoint
from .sampling import PseudoLabelGrid, SamplingConfig, bidirectional_contrastive_loss, downsample_pseudo_labels
from .volume_io import Dataset, extract_patch

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "alpha", "beta", "seg", "rp", "bc", "sup_total", "unsup_total", "kl_mean")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``loss.alpha`` and ``loss.beta`` are the plateau values reached by the
    Gaussian warm-up. ``supervised_only`` trains on labeled data with the
    segmentation loss alone but keeps the step budget of the full method.
    """

    epochs: int = 200
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    lr0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    warmup_fraction: float = 0.2
    seed: int = 0
    patch_size: tuple = (64, 64, 64)
    supervised_only: bool = False
    checkpoint_every: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    intensity: IntensityAugmentConfig = field(default_factory=IntensityAugmentConfig)
    distort: GridDistortConfig = field(default_factory=GridDistortConfig)

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch_labeled and batch_unlabeled must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must lie in (0, 1]")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ValueError("patch_size must be 3 positive integers")

    @property
    def alpha_max(self) -> float:
        return self.loss.alpha

    @property
    def beta_max(self) -> float:
        return self.loss.beta

    @property
    def warmup_epochs(self) -> float:
        return self.warmup_fraction * self.epochs


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def poly_lr(step: int, max_steps: int, lr0: float, power: float = 0.9) -> float:
    if not 0 <= step <= max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    return lr0 * (1.0 - step / max_steps) ** power


def gaussian_warmup(epoch: float, warmup_epochs: float, lam_max: float) -> float:
    if warmup_epochs <= 0:
        raise ValueError("warmup_epochs must be positive")
    t = min(max(epoch, 0.0) / warmup_epochs, 1.0)
    return lam_max * math.exp(-5.0 * (1.0 - t) ** 2)


def steps_per_epoch(num_unlabeled: int, batch_unlabeled: int) -> int:
    return math.ceil(num_unlabeled / batch_unlabeled)


@dataclass(frozen=True)
class ScheduleState:
    step: int
    max_steps: int
    steps_per_epoch: int
    cfg: TrainConfig

    @property
    def epoch(self) -> float:
        return self.step / self.steps_per_epoch

    @property
    def lr(self) -> float:
        return poly_lr(self.step, self.max_steps, self.cfg.lr0, self.cfg.poly_power)

    @property
    def alpha(self) -> float:
        if self.cfg.supervised_only:
            return 0.0
        return gaussian_warmup(self.epoch, self.cfg.warmup_epochs, self.cfg.alpha_max)

    @property
    def beta(self) -> float:
        if self.cfg.supervised_only:
            return 0.0
        return gaussian_warmup(self.epoch, self.cfg.warmup_epochs, self.cfg.beta_max)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


class Batch(NamedTuple):
    x_l: torch.Tensor  # (Bl, 1, *P)
    y_l: torch.Tensor  # (Bl, *P)
    x_l1: torch.Tensor
    x_l2: torch.Tensor
    x_u: torch.Tensor
    x_u1: torch.Tensor
    x_u2: torch.Tensor


def batch_indices(step: int, cfg: TrainConfig, n_labeled: int, n_unlabeled: int):
    """Labeled/unlabeled case indices for ``step``; a pure function of (seed, step).

    Unlabeled cases are visited once per epoch in a seeded permutation;
    labeled cases are cycled through successive seeded permutations.
    """
    spe = steps_per_epoch(n_unlabeled, cfg.batch_unlabeled)
    epoch, k = divmod(step, spe)
    perm = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n_unlabeled)
    u_idx = [int(perm[(k * cfg.batch_unlabeled + j) % n_unlabeled]) for j in range(cfg.batch_unlabeled)]
    l_idx = []
    for j in range(cfg.batch_labeled):
        cycle, r = divmod(step * cfg.batch_labeled + j, n_labeled)
        l_idx.append(int(np.random.default_rng([cfg.seed, 0, cycle]).permutation(n_labeled)[r]))
    return l_idx, u_idx


def _prepare(v, y, cfg: TrainConfig, rng):
    pv, py = extract_patch(v, y, cfg.patch_size, rng)
    img, lab = grid_distort(pv.data.astype(np.float32), None if py is None else py.data, cfg.distort, rng)
    v1, v2 = make_views(img, cfg.intensity, rng)
    return img, lab, v1, v2


def assemble_batch(dataset: Dataset, step: int, cfg: TrainConfig) -> Batch:
    """Patch, distort and augment the cases for ``step`` (deterministic given seed and step)."""
    l_idx, u_idx = batch_indices(step, cfg, dataset.num_labeled, max(dataset.num_unlabeled, 1))
    rng = np.random.default_rng([cfg.seed, 2, step])
    lab = [_prepare(*dataset.labeled[i], cfg, rng) for i in l_idx]
    if dataset.num_unlabeled:
        unl = [_prepare(dataset.unlabeled[i], None, cfg, rng) for i in u_idx]
    else:
        unl = lab[: cfg.batch_unlabeled]

    def stack(items, k):
        return torch.from_numpy(np.stack([it[k] for it in items])[:, None].astype(np.float32))

    y_l = torch.from_numpy(np.stack([it[1] for it in lab]).astype(np.int64))
    return Batch(stack(lab, 0), y_l, stack(lab, 2), stack(lab, 3), stack(unl, 0), stack(unl, 2), stack(unl, 3))


# ---------------------------------------------------------------------------
# One optimisation step
# ---------------------------------------------------------------------------


def make_optimizer(model: UNet3D, cfg: TrainConfig) -> torch.optim.SGD:
    """SGD with weight decay on convolution kernels only."""
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.ndim > 1 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.SGD(groups, lr=cfg.lr0, momentum=cfg.momentum)


def _pseudo_grids(u_orig, probs_orig, stride):
    pl = downsample_pseudo_labels(probs_orig, stride)
    # image b draws negatives from image b-1 (cyclically) in the batch
    u_neg = torch.roll(u_orig, 1, dims=0)
    pl_neg = PseudoLabelGrid(torch.roll(pl.classes, 1, 0), torch.roll(pl.confidence, 1, 0))
    return pl, u_neg, pl_neg


def compute_losses(model: UNet3D, batch: Batch, alpha: float, beta: float, cfg: TrainConfig,
                   generator: Optional[torch.Generator] = None):
    """Forward all inputs and return ``(objective, LossReport)``.

    The objective is the supervised total on labeled data plus the
    unsupervised total on unlabeled data.
    """
    if batch.x_l.shape[0] == 0 or (not cfg.supervised_only and batch.x_u.shape[0] == 0):
        raise ValueError("batch must contain labeled and unlabeled patches")
    lw = cfg.loss
    if cfg.supervised_only:
        out = model(batch.x_l, with_embeddings=False)
        seg = seg_loss(out.probs, batch.y_l, lw.epsilon)
        return seg, LossReport(seg=seg.item(), total_supervised=seg.item())

    bl = batch.x_l.shape[0]
    bu = batch.x_u.shape[0]
    out_l = model(batch.x_l)
    if cfg.sampling.detach_negatives:
        with torch.no_grad():
            out_u = model(batch.x_u)
    else:
        out_u = model(batch.x_u)
    views = model(torch.cat([batch.x_l1, batch.x_u1, batch.x_l2, batch.x_u2]))
    n = bl + bu
    p1, p2 = views.probs[:n], views.probs[n:]
    e1, e2 = views.embeddings[:n], views.embeddings[n:]
    logits = torch.cat([out_l.logits, out_u.logits]).detach()
    probs = torch.cat([out_l.probs, out_u.probs]).detach()
    emb = torch.cat([out_l.embeddings, out_u.embeddings])

    seg = seg_loss(out_l.probs, batch.y_l, lw.epsilon)
    parts = {}
    kls = []
    pl, u_neg, pl_neg = _pseudo_grids(emb, probs, model.cfg.embedding_stride)
    for name, sl in (("l", slice(0, bl)), ("u", slice(bl, n))):
        rp, kl = rectified_pseudo_loss(p1[sl], p2[sl], logits[sl], lw.temperature_T, lw.epsilon,
                                       lw.consistency_weight, return_kl=True)
        bc = bidirectional_contrastive_loss(
            e1[sl], e2[sl], u_neg[sl],
            PseudoLabelGrid(pl.classes[sl], pl.confidence[sl]),
            PseudoLabelGrid(pl_neg.classes[sl], pl_neg.confidence[sl]),
            lw.temperature_tau, cfg.sampling.num_negatives, cfg.sampling.anchors_per_image,
            cfg.sampling.detach_negatives, generator,
        )
        parts[name] = (rp, bc)
        kls.append(kl)
    (rp_l, bc_l), (rp_u, bc_u) = parts["l"], parts["u"]
    sup = seg + alpha * rp_l + beta * bc_l
    unsup = alpha * rp_u + beta * bc_u
    report = LossReport(
        seg=seg.item(),
        rectified_pseudo=(0.5 * (rp_l + rp_u)).item(),
        contrastive=(0.5 * (bc_l + bc_u)).item(),
        total_supervised=sup.item(),
        total_unsupervised=unsup.item(),
        uncertainty_mean=(sum(kls) / len(kls)).item(),
    )
    return sup + unsup, report


def train_step(model: UNet3D, optimizer, batch: Batch, alpha: float, beta: float, lr: float,
               cfg: TrainConfig, generator: Optional[torch.Generator] = None) -> LossReport:
    model.train()
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    objective, report = compute_losses(model, batch, alpha, beta, cfg, generator)
    if not torch.isfinite(objective):
        raise FloatingPointError(f"non-finite training objective: {report}")
    objective.backward()
    optimizer.step()
    return report


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    model: UNet3D
    history: list
    checkpoints: list
    log_path: Optional[Path]
    max_steps: int
    steps_per_epoch: int


def _read_log(path: Path, upto_step: int) -> list:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh) if int(row["step"]) < upto_step]


def _write_log(path: Path, rows: list):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def _format_row(row: dict) -> dict:
    return {k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()}


def fit(dataset: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig, run_dir=None,
        resume=None, max_steps_override: Optional[int] = None,
        callback: Optional[Callable[[int, dict], None]] = None) -> FitResult:
    """Run ``epochs * steps_per_epoch`` training steps.

    Writes ``train_log.csv``, ``ckpt_<step>`` every ``checkpoint_every``
    epochs and ``final`` into ``run_dir`` when given. ``resume`` points to a
    checkpoint directory; because batches and schedules depend only on
    (seed, step), the remaining steps reproduce an uninterrupted run.
    ``max_steps_override`` stops early (the schedule horizon is unchanged).
    """
    if dataset.num_labeled < cfg.batch_labeled:
        raise ConfigurationError(f"need >= {cfg.batch_labeled} labeled cases, have {dataset.num_labeled}")
    if not cfg.supervised_only and dataset.num_unlabeled < cfg.batch_unlabeled:
        raise ConfigurationError(f"need >= {cfg.batch_unlabeled} unlabeled cases, have {dataset.num_unlabeled}")
    for v, y in dataset.labeled:
        if y.num_classes != net_cfg.num_classes:
            raise ConfigurationError(f"{v.identifier}: label has {y.num_classes} classes, network {net_cfg.num_classes}")

    # supervised-only keeps the same step budget as the full method
    spe = steps_per_epoch(max(dataset.num_unlabeled, 1), cfg.batch_unlabeled)
    max_steps = cfg.epochs * spe
    stop = max_steps if max_steps_override is None else min(max_steps, max_steps_override)

    start = 0
    if resume is not None:
        model, manifest, state = load_checkpoint(resume, expected=net_cfg)
        optimizer = make_optimizer(model, cfg)
        if "optimizer" in state:
            optimizer.load_state_dict(state["optimizer"])
        start = int(manifest["step"])
    else:
        model = build_model(net_cfg, cfg.seed)
        optimizer = make_optimizer(model, cfg)

    run_dir = Path(run_dir) if run_dir is not None else None
    log_path = None
    history = []
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train_log.csv"
        history = _read_log(log_path, start) if resume is not None else []
        _write_log(log_path, history)
    checkpoints = []
    seeds = {"seed": cfg.seed}

    def checkpoint(name, step):
        if run_dir is not None:
            checkpoints.append(save_checkpoint(run_dir / name, model, step, seeds, optimizer,
                                               {"max_steps": max_steps, "steps_per_epoch": spe}))

    for step in range(start, stop):
        sched = ScheduleState(step, max_steps, spe, cfg)
        batch = assemble_batch(dataset, step, cfg)
        gen = torch.Generator().manual_seed(int(np.random.default_rng([cfg.seed, 3, step]).integers(2**62)))
        report = train_step(model, optimizer, batch, sched.alpha, sched.beta, sched.lr, cfg, gen)
        row = {
            "step": step, "epoch": step // spe, "lr": sched.lr, "alpha": sched.alpha, "beta": sched.beta,
            "seg": report.seg, "rp": report.rectified_pseudo, "bc": report.contrastive,
            "sup_total": report.total_supervised, "unsup_total": report.total_unsupervised,
            "kl_mean": report.uncertainty_mean,
        }
        history.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.DictWriter(fh, fieldnames=LOG_COLUMNS).writerow(_format_row(row))
        if callback is not None:
            callback(step, row)
        done = step + 1
        if cfg.checkpoint_every and done % (cfg.checkpoint_every * spe) == 0 and done < max_steps:
            checkpoint(f"ckpt_{done}", done)
        if step % 20 == 0:
            log.info("step %d/%d lr=%.4g seg=%.4f rp=%.4f bc=%.4f", step, max_steps, sched.lr,
                     report.seg, report.rectified_pseudo, report.contrastive)
    if stop == max_steps:
        checkpoint("final", stop)
    else:
        checkpoint(f"ckpt_{stop}", stop)
    model.eval()
    return FitResult(model, history, checkpoints, log_path, max_steps, spe)
