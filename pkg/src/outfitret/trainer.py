"""Mini-batch training: seeded shuffling, Adam, per-epoch cosine annealing."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numgraph as ng
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .dataio import Dataset, collate
from .outfit import total_loss
from .params import HeadParams

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Loss or gradient went non-finite; ``params`` holds the last good state."""

    def __init__(self, message, params: HeadParams | None = None, checkpoint=None):
        super().__init__(message)
        self.params = params
        self.checkpoint = checkpoint


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    """``lr0 * 0.5 * (1 + cos(pi * epoch / total))`` for 0-indexed ``epoch``."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    return max(lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total)), 0.0)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: HeadParams) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)

    def equal(self, other: "AdamState") -> bool:
        return (self.step == other.step
                and all(np.array_equal(self.m[k], other.m[k]) for k in self.m)
                and all(np.array_equal(self.v[k], other.v[k]) for k in self.v)
                and self.m.keys() == other.m.keys())


def adam_step(params: HeadParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[HeadParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, "
                                f"parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise DivergenceError(f"non-finite gradient for parameter {name} ({bad} entries)")
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name], new_m[name], new_v[name] = p, state.m[name], state.v[name]
            continue
        m = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_params[name] = (p - update).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return HeadParams(new_params), AdamState(new_m, new_v, t)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    factor = max_norm / total
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    item: float
    style: float
    outfit: float
    batches: int
    wall_time: float | None


@dataclass
class TrainLog:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    batch_item_losses: list[float] = field(default_factory=list)
    aborted: str | None = None
    final_metrics: dict | None = None

    def records(self) -> list[dict]:
        return [vars(e) for e in self.epochs]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "config", **self.config}, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **vars(rec)}, sort_keys=True) + "\n")
            if self.aborted:
                fh.write(json.dumps({"kind": "abort", "reason": self.aborted}) + "\n")
            if self.final_metrics is not None:
                fh.write(json.dumps({"kind": "final", **self.final_metrics}, sort_keys=True) + "\n")


def batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool = True):
    """Index arrays for one shuffled epoch; a short tail is dropped or padded from the front."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < batch_size:
        if drop_last and len(out) > 1:
            out.pop()
        elif not drop_last and len(out) > 1:
            need = batch_size - len(out[-1])
            out[-1] = np.concatenate([out[-1], order[:need]])
    return out


def train(dataset: Dataset, config: TrainConfig, params: HeadParams | None = None,
          optimizer: AdamState | None = None, log_path=None, checkpoint_dir=None,
          start_epoch: int = 0) -> tuple[HeadParams, TrainLog, AdamState]:
    """Train the head on ``dataset``; returns (params, log, optimizer state)."""
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    hyper = config.hyper
    if dataset.dim != hyper.dim:
        raise TrainingError(f"dataset embedding width {dataset.dim} != configured dim {hyper.dim}")
    if len(dataset) < 2:
        raise TrainingError("contrastive training needs at least 2 samples")
    params = HeadParams.init(hyper) if params is None else params
    state = AdamState.zeros_like(params) if optimizer is None else optimizer
    rng = np.random.default_rng(config.seed)
    # replay shuffles so a resumed run sees the same batch order
    for _ in range(start_epoch):
        rng.permutation(len(dataset))
    tlog = TrainLog(config.to_flat())
    levels = config.levels
    dtype = next(iter(params.arrays.values())).dtype
    bsize = min(config.batch_size, len(dataset))
    last_good = params

    for epoch in range(start_epoch, config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr)
        started = time.perf_counter()
        sums = np.zeros(4)
        idx_batches = batches(len(dataset), bsize, rng, config.drop_last)
        for idx in idx_batches:
            batch = collate([dataset[int(i)] for i in idx], dtype)
            nodes = params.leaves()
            report = total_loss(batch, nodes, hyper, levels)
            if not math.isfinite(report.total):
                tlog.aborted = f"non-finite loss at epoch {epoch}"
                ckpt = _abort_checkpoint(checkpoint_dir, last_good, config)
                if log_path:
                    tlog.write_jsonl(log_path)
                raise DivergenceError(tlog.aborted, last_good, ckpt)
            grads = ng.gradients(report.loss, nodes.values())
            named = {name: grads[node] for name, node in nodes.items()}
            if config.clip_norm:
                named = _clip(named, config.clip_norm)
            try:
                params, state = adam_step(params, named, state, lr)
            except DivergenceError as exc:
                tlog.aborted = str(exc)
                ckpt = _abort_checkpoint(checkpoint_dir, last_good, config)
                raise DivergenceError(str(exc), last_good, ckpt) from None
            last_good = params
            sums += (report.total, report.item, report.style, report.outfit)
            tlog.batch_losses.append(report.total)
            tlog.batch_item_losses.append(report.item)
        nb = max(len(idx_batches), 1)
        wall = None if config.reproducible else round(time.perf_counter() - started, 4)
        rec = EpochRecord(epoch, lr, *(float(x) for x in sums / nb), len(idx_batches), wall)
        tlog.epochs.append(rec)
        log.info("epoch %d lr=%.3g loss=%.4f (item %.4f style %.4f outfit %.4f)",
                 epoch, lr, rec.loss, rec.item, rec.style, rec.outfit)
        if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:03d}.npz", params,
                            config.to_flat(), state, {"epoch": epoch + 1})
    if log_path:
        tlog.write_jsonl(log_path)
    return params, tlog, state


def _abort_checkpoint(checkpoint_dir, params, config):
    if not checkpoint_dir:
        return None
    return save_checkpoint(Path(checkpoint_dir) / "last_good.npz", params, config.to_flat())
