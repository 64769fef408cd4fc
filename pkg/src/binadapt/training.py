"""Training loops, per-epoch threshold sweeps, and final binarization.

Both trainers are bit-reproducible for a fixed (config, seed, dataset): batch
sampling, weight init, and dropout all draw from dedicated seed streams, and
dropout streams are derived per (epoch, step, pass) so the adversarial
trainer's extra passes never perturb the draws seen by the shared trunk. With
the reversal coefficient pinned to zero the adversarial trainer therefore
reproduces the plain trainer's trunk parameter trajectory bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GraphError, Tensor, adam, backward, forward, optimizer_step, sgd
from .data import Dataset, split_patches
from .metrics import Confusion, confusion, f1
from .models import (
    BinDannConfig,
    Model,
    SaeConfig,
    build_bindann,
    build_sae,
    load_model,
    predict_prob_map,
    save_model,
)

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainedBinarizer",
    "binarize",
    "sweep_threshold",
    "train_sae",
    "train_bindann",
    "history_csv",
    "save_binarizer",
    "load_binarizer",
]

_SEED_INIT = 201
_SEED_SRC = 202
_SEED_TGT = 203
_SEED_DROP = 204


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch: int = 16
    seed: int = 0
    lr: float = 1e-3
    optimizer: str = "adam"
    sweep_step: float = 0.05
    lambda0: float = 0.1
    lambda_increment: float = 0.01
    model: SaeConfig = field(default_factory=SaeConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if not 0.0 < self.sweep_step < 1.0:
            raise ValueError(f"sweep step {self.sweep_step} outside (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    epoch: int
    bin_loss: float
    domain_loss: float | None
    lam: float | None
    val_f1: float
    th_s: float


@dataclass
class TrainedBinarizer:
    """Best-epoch model plus its swept threshold and the training history."""

    model: Model
    th_s: float
    history: list


def binarize(prob_map, th) -> np.ndarray:
    """Boolean mask: probability >= threshold counts as foreground."""
    if not 0.0 < th < 1.0:
        raise ValueError(f"threshold {th} outside (0, 1)")
    return np.asarray(prob_map) >= th


def _sweep_grid(step):
    n = round(1.0 / step)
    if n < 2:
        raise ValueError(f"sweep step {step} leaves no interior thresholds")
    return [i * step for i in range(1, n)]


def _validation_pairs(validation):
    pairs = []
    for item in validation:
        if hasattr(item, "page"):
            if item.gt is None:
                raise ValueError(f"validation page {item.stem!r} has no ground truth")
            pairs.append((item.page, item.gt.mask))
        else:
            pairs.append(item)
    return pairs


def sweep_threshold(model, validation, sweep_step=0.05):
    """Best equidistant threshold over validation pages.

    Confusions are aggregated across all pages per candidate threshold; ties
    resolve to the lowest threshold. Returns (threshold, F1 at it).
    """
    pairs = _validation_pairs(validation)
    if not pairs:
        raise ValueError("validation set is empty")
    maps = [(predict_prob_map(model, page), mask) for page, mask in pairs]
    best_th, best_f1 = None, -1.0
    for th in _sweep_grid(sweep_step):
        total = Confusion()
        for prob, mask in maps:
            total = total + confusion(prob >= th, mask)
        score = f1(total)
        if score > best_f1:
            best_th, best_f1 = th, score
    return best_th, best_f1


def _patch_pool(records, patch, with_gt):
    xs, ys = [], []
    h, w = patch
    for rec in records:
        for p in split_patches(rec.page, h, w).patches:
            xs.append(p[None])
        if with_gt:
            for p in split_patches(rec.gt.mask.astype(np.float64), h, w).patches:
                ys.append(p[None])
    x = np.stack(xs)
    return (x, np.stack(ys)) if with_gt else (x, None)


def _make_optimizer(cfg):
    return adam(cfg.lr) if cfg.optimizer == "adam" else sgd(cfg.lr)


def _snapshot(params):
    return {name: t.data.copy() for name, t in params.items()}


def _restore(model, snap):
    for name, arr in snap.items():
        model.params[name] = Tensor(arr)


def _drop_rng(seed, epoch, step, pass_idx):
    return np.random.default_rng(np.random.SeedSequence([_SEED_DROP, seed, epoch, step, pass_idx]))


def train_sae(source: Dataset, cfg: TrainConfig) -> TrainedBinarizer:
    """Fit the plain binarizer on the labeled source and keep the epoch
    checkpoint with the best validation F1 (at its swept threshold)."""
    train, val = source.train(), source.validation()
    if not train or not val:
        raise ValueError("source needs at least one train and one validation page")
    model = build_sae(cfg.model, np.random.default_rng(np.random.SeedSequence([_SEED_INIT, cfg.seed])))
    opt = _make_optimizer(cfg)
    x_pool, y_pool = _patch_pool(train, cfg.model.patch, with_gt=True)
    sampler = np.random.default_rng(np.random.SeedSequence([_SEED_SRC, cfg.seed]))
    steps = math.ceil(len(x_pool) / cfg.batch)

    history, best = [], None
    for epoch in range(cfg.epochs):
        losses = []
        for step in range(steps):
            idx = sampler.integers(0, len(x_pool), size=cfg.batch)
            out = forward(
                model.graph,
                {"x": x_pool[idx], "gt": y_pool[idx]},
                wanted=("loss",),
                training=True,
                rng=_drop_rng(cfg.seed, epoch, step, 0),
            )
            grads = backward(model.graph, "loss")
            optimizer_step(opt, model.params, grads)
            losses.append(float(out["loss"].data[0]))
        th, score = sweep_threshold(model, val, cfg.sweep_step)
        history.append(EpochStats(epoch, float(np.mean(losses)), None, None, score, th))
        if best is None or score > best[0]:
            best = (score, epoch, th, _snapshot(model.params))

    _restore(model, best[3])
    return TrainedBinarizer(model=model, th_s=best[2], history=history)


def train_bindann(source: Dataset, target: Dataset, cfg: TrainConfig) -> TrainedBinarizer:
    """Adversarial fit: each step draws a labeled source batch and an
    unlabeled target batch. Binarization BCE is computed on the source only;
    domain BCE targets constant all-zero maps for source and all-one maps for
    target patches. The reversal coefficient follows the per-epoch schedule
    and the returned threshold comes from the source validation sweep, as in
    the plain trainer."""
    train, val = source.train(), source.validation()
    if not train or not val:
        raise ValueError("source needs at least one train and one validation page")
    if not target.records:
        raise ValueError("target dataset is empty")

    config = BinDannConfig(sae=cfg.model, lambda0=cfg.lambda0, lambda_increment=cfg.lambda_increment)
    model = build_bindann(config, np.random.default_rng(np.random.SeedSequence([_SEED_INIT, cfg.seed])))
    opt = _make_optimizer(cfg)
    x_pool, y_pool = _patch_pool(train, cfg.model.patch, with_gt=True)
    t_pool, _ = _patch_pool(target.records, cfg.model.patch, with_gt=False)
    sampler = np.random.default_rng(np.random.SeedSequence([_SEED_SRC, cfg.seed]))
    t_sampler = np.random.default_rng(np.random.SeedSequence([_SEED_TGT, cfg.seed]))
    steps = math.ceil(len(x_pool) / cfg.batch)

    batch_hw = (cfg.batch, 1, *cfg.model.patch)
    src_domain = np.zeros(batch_hw)
    tgt_domain = np.ones(batch_hw)

    history, best = [], None
    for epoch in range(cfg.epochs):
        model.set_grl(cfg.lambda0 + cfg.lambda_increment * epoch)
        bin_losses, dom_losses = [], []
        for step in range(steps):
            idx_s = sampler.integers(0, len(x_pool), size=cfg.batch)
            idx_t = t_sampler.integers(0, len(t_pool), size=cfg.batch)

            out_s = forward(
                model.graph,
                {"x": x_pool[idx_s], "gt": y_pool[idx_s], "domain_gt": src_domain},
                wanted=("loss", "bin_loss", "domain_loss"),
                training=True,
                rng=_drop_rng(cfg.seed, epoch, step, 0),
            )
            grads = backward(model.graph, "loss")

            out_t = forward(
                model.graph,
                {"x": t_pool[idx_t], "domain_gt": tgt_domain},
                wanted=("domain_loss",),
                training=True,
                rng=_drop_rng(cfg.seed, epoch, step, 1),
            )
            for name, g in backward(model.graph, "domain_loss").items():
                if name in grads:
                    grads[name] = Tensor(grads[name].data + g.data)
                else:
                    grads[name] = g

            optimizer_step(opt, model.params, grads)
            bin_losses.append(float(out_s["bin_loss"].data[0]))
            dom_losses.append(
                0.5 * (float(out_s["domain_loss"].data[0]) + float(out_t["domain_loss"].data[0]))
            )
        th, score = sweep_threshold(model, val, cfg.sweep_step)
        history.append(
            EpochStats(
                epoch,
                float(np.mean(bin_losses)),
                float(np.mean(dom_losses)),
                cfg.lambda0 + cfg.lambda_increment * epoch,
                score,
                th,
            )
        )
        if best is None or score > best[0]:
            best = (score, epoch, th, _snapshot(model.params))

    _restore(model, best[3])
    return TrainedBinarizer(model=model, th_s=best[2], history=history)


def history_csv(history) -> str:
    lines = ["epoch,bin_loss,domain_loss,lambda,val_f1,th_s"]
    for row in history:
        cells = [
            str(row.epoch),
            repr(row.bin_loss),
            "" if row.domain_loss is None else repr(row.domain_loss),
            "" if row.lam is None else repr(row.lam),
            repr(row.val_f1),
            repr(row.th_s),
        ]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def save_binarizer(path, tb: TrainedBinarizer):
    save_model(path, tb.model, extra={"th_s": tb.th_s})


def load_binarizer(path) -> TrainedBinarizer:
    model, extra = load_model(path)
    if "th_s" not in extra:
        raise GraphError(f"checkpoint {path} has no stored threshold")
    return TrainedBinarizer(model=model, th_s=extra["th_s"], history=[])
