"""Fine-tuning loop: joint L1 over both views, AdamW on the trainable subset, cosine schedule."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence

import torch
import torch.nn as nn

from .common import ViewPair
from .errors import DivergenceError, InvalidConfig, InvalidInput, InvalidShape
from .surgery import Checkpoint, TuningMode, apply_tuning_mode, write_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "loss", "lr", "seconds")


@dataclasses.dataclass
class TrainConfig:
    lr: float = 5e-4
    betas: Sequence[float] = (0.9, 0.99)
    weight_decay: float = 0.0
    iterations: int = 2000
    batch: int = 3
    loss: str = "L1"
    lr_schedule: str = "cosine"
    eta_min: float = 1e-7
    grad_clip: float = 0.0  # 0 disables
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        try:
            self.betas = tuple(float(b) for b in self.betas)
            for name in ("lr", "weight_decay", "eta_min", "grad_clip"):
                setattr(self, name, float(getattr(self, name)))
            for name in ("iterations", "batch", "seed", "log_every", "ckpt_every", "eval_every"):
                value = getattr(self, name)
                if int(value) != value:
                    raise ValueError(f"{name} must be an integer, got {value!r}")
                setattr(self, name, int(value))
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"train: {exc}") from exc
        if not self.lr > 0:
            raise InvalidConfig(f"train.lr must be > 0, got {self.lr}")
        if int(self.iterations) < 0:
            raise InvalidConfig(f"train.iterations must be >= 0, got {self.iterations}")
        if int(self.batch) <= 0:
            raise InvalidConfig(f"train.batch must be > 0, got {self.batch}")
        if self.loss != "L1":
            raise InvalidConfig(f"train.loss: only L1 is supported, got {self.loss!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise InvalidConfig(f"train.lr_schedule must be cosine or constant, got {self.lr_schedule!r}")


def l1_loss(pred: ViewPair, target: ViewPair) -> torch.Tensor:
    """Mean absolute error over every element of both views together."""
    for p, t in zip(pred, target):
        if p.shape != t.shape:
            raise InvalidShape(f"prediction {tuple(p.shape)} vs target {tuple(t.shape)}")
    diff = torch.cat([(p - t).abs().flatten() for p, t in zip(pred, target)])
    return diff.mean()


def lr_at(cfg: TrainConfig, it: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.iterations <= 1:
        return cfg.lr
    progress = min(it, cfg.iterations - 1) / (cfg.iterations - 1)
    return cfg.eta_min + (cfg.lr - cfg.eta_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> Optional[torch.optim.Optimizer]:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        return None
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def train_step(model: nn.Module, batch, optimizer: Optional[torch.optim.Optimizer], iteration: int = 0,
               grad_clip: float = 0.0) -> float:
    """One forward/backward/update. Only parameters held by ``optimizer`` move."""
    lr, hr = batch
    dtype = next(model.parameters()).dtype
    lr = ViewPair(lr[0].to(dtype), lr[1].to(dtype))
    hr = ViewPair(hr[0].to(dtype), hr[1].to(dtype))
    model.train()
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    try:
        with torch.set_grad_enabled(optimizer is not None):
            loss = l1_loss(model(lr.left, lr.right), hr)
    except InvalidInput:
        if all(torch.isfinite(t).all() for t in (*lr, *hr)):
            # finite batch but non-finite activations: the weights have blown up
            raise DivergenceError(iteration, float("nan")) from None
        raise
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(iteration, value)
    if optimizer is not None:
        loss.backward()
        if grad_clip:
            params = [p for g in optimizer.param_groups for p in g["params"]]
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
        optimizer.step()
    return value


@dataclasses.dataclass
class FitResult:
    rows: List[dict]
    checkpoint: Checkpoint
    evals: List[tuple] = dataclasses.field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else float("nan")


def fit(model: nn.Module, batches: Iterable, cfg: TrainConfig, mode=TuningMode.both,
        log_path=None, ckpt_dir=None, config_hash: str = "",
        eval_fn: Optional[Callable[[nn.Module, int], object]] = None,
        apply_mode: bool = True) -> FitResult:
    """Run ``cfg.iterations`` steps; returns the log rows and the final checkpoint.

    ``log_path`` receives an append-only CSV (iter, loss, lr, seconds).
    """
    if apply_mode:
        apply_tuning_mode(model, mode)
    optimizer = make_optimizer(model, cfg)
    rows, evals = [], []
    writer = fh = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
    start = time.perf_counter()
    try:
        it_batches = iter(batches)
        for it in range(int(cfg.iterations)):
            lr_now = lr_at(cfg, it)
            if optimizer is not None:
                for g in optimizer.param_groups:
                    g["lr"] = lr_now
            loss = train_step(model, next(it_batches), optimizer, it, cfg.grad_clip)
            if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
                row = {"iter": it, "loss": loss, "lr": lr_now, "seconds": time.perf_counter() - start}
                rows.append(row)
                if writer is not None:
                    writer.writerow([it, repr(loss), repr(lr_now), f"{row['seconds']:.3f}"])
                    fh.flush()
            if cfg.ckpt_every and ckpt_dir is not None and (it + 1) % cfg.ckpt_every == 0:
                write_checkpoint(Checkpoint.from_model(model, config_hash), Path(ckpt_dir) / f"iter_{it + 1:07d}.ckpt")
            if eval_fn is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                evals.append((it + 1, eval_fn(model, it + 1)))
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return FitResult(rows, Checkpoint.from_model(model, config_hash), evals)


def read_log(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{"iter": int(r["iter"]), "loss": float(r["loss"]), "lr": float(r["lr"]),
                 "seconds": float(r["seconds"])} for r in csv.DictReader(fh)]
