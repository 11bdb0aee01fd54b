"""Seeded, single-writer training loop with best/final checkpointing."""

from __future__ import annotations

import csv
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .metrics import SsimParams, ssim, ssim_torch
from .models import CorrectionNet, save_checkpoint

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "TrainingError",
    "seed_all",
    "compute_loss",
    "batches",
    "predict_samples",
    "validation_ssim",
    "train",
    "dihedral",
]

logger = logging.getLogger(__name__)

LOSSES = ("l1", "l2", "one_minus_ssim")
AUGMENTS = ("none", "dihedral")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "l1"
    optimizer: str = "adam"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    checkpoint_every: int = 0
    num_workers: int = 0
    augment: str = "dihedral"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer != "adam":
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.augment not in AUGMENTS:
            raise ValueError(f"augment must be one of {AUGMENTS}, got {self.augment!r}")
        if self.checkpoint_every < 0 or self.num_workers < 0:
            raise ValueError("checkpoint_every and num_workers must be >= 0")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_ssim: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    deterministic: bool = True

    def append(self, epoch, loss, val, secs):
        self.epochs.append(int(epoch))
        self.train_loss.append(float(loss))
        self.val_ssim.append(float(val))
        self.seconds.append(float(secs))

    def __len__(self):
        return len(self.epochs)

    def write_csv(self, path, append: bool = False) -> None:
        """Loss curve as CSV (epoch, train_loss, val_ssim).

        Wall-clock time goes to a separate ``*.timing.csv`` so the history file
        itself is reproducible byte for byte.
        """
        path = Path(path)
        self._write(path, ("epoch", "train_loss", "val_ssim"),
                    zip(self.epochs, map(repr, self.train_loss), map(repr, self.val_ssim)), append)
        timing = path.with_name(path.stem + ".timing.csv")
        self._write(timing, ("epoch", "seconds"), zip(self.epochs, (f"{s:.3f}" for s in self.seconds)), append)

    @staticmethod
    def _write(path: Path, header, rows, append: bool):
        fresh = not (append and path.exists())
        with open(path, "w" if fresh else "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if fresh:
                w.writerow(header)
            w.writerows(rows)

    @staticmethod
    def read_csv(path) -> "TrainHistory":
        h = TrainHistory()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.append(row["epoch"], row["train_loss"], row["val_ssim"], 0.0)
        return h


class TrainingError(RuntimeError):
    pass


def seed_all(seed: int) -> None:
    """Seed Python, NumPy and torch global streams and pin torch to deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def compute_loss(pred, target, kind: str = "l1", ssim_params: SsimParams = SsimParams()):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if kind == "l1":
        return (pred - target).abs().mean()
    if kind == "l2":
        return ((pred - target) ** 2).mean()
    if kind == "one_minus_ssim":
        return 1.0 - ssim_torch(pred, target, ssim_params).mean()
    raise ValueError(f"unknown loss {kind!r}")


def _stack(samples, dtype=torch.float32):
    x = torch.from_numpy(np.stack([s.corrupted for s in samples])[:, None]).to(dtype)
    p = torch.from_numpy(np.stack([s.priors for s in samples])).to(dtype)
    y = torch.from_numpy(np.stack([s.target for s in samples])[:, None]).to(dtype)
    return x, p, y


def batches(samples, batch_size: int, generator: torch.Generator | None = None):
    """Yield (corrupted, priors, target) tensors; shuffled when a generator is given."""
    n = len(samples)
    order = torch.randperm(n, generator=generator).tolist() if generator is not None else range(n)
    order = list(order)
    for start in range(0, n, batch_size):
        yield _stack([samples[i] for i in order[start:start + batch_size]])


def dihedral(tensors, generator: torch.Generator):
    """Apply one random flip/90-degree rotation per sample, shared across ``tensors``.

    Non-square images only get flips so shapes are preserved.
    """
    n, h, w = tensors[0].shape[0], tensors[0].shape[-2], tensors[0].shape[-1]
    ops = torch.randint(8 if h == w else 4, (n,), generator=generator).tolist()

    def apply(v, op):
        if op & 1:
            v = v.flip(-1)
        if op & 2:
            v = v.flip(-2)
        if op & 4:
            v = v.transpose(-1, -2)
        return v

    return [torch.stack([apply(t[i], op) for i, op in enumerate(ops)]) for t in tensors]


def _model_priors(model: CorrectionNet, p):
    return p if model.cfg.injection != "baseline" else None


@torch.no_grad()
def predict_samples(model: CorrectionNet, samples, batch_size: int = 16) -> list[np.ndarray]:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for x, p, _ in batches(samples, batch_size):
        pred = model(x.to(dtype), _model_priors(model, p.to(dtype)))
        out.extend(pred[:, 0].float().numpy())
    return out


def validation_ssim(model: CorrectionNet, samples, params: SsimParams = SsimParams()) -> float:
    preds = predict_samples(model, samples)
    return float(np.mean([ssim(pr, s.target, params)[0] for pr, s in zip(preds, samples)]))


def _check_channels(model: CorrectionNet, samples, name: str):
    cfg = model.cfg
    need = cfg.n_prior if cfg.injection != "baseline" else None
    for s in samples:
        if need is not None and s.n_prior != need:
            raise TrainingError(f"{name} sample has {s.n_prior} priors, model expects {need}")


def train(model: CorrectionNet, train_set, val_set, cfg: TrainConfig, out_dir=None, *,
          start_epoch: int = 0, optimizer_state=None, best_val: float = -math.inf,
          ssim_params: SsimParams = SsimParams(), meta: dict | None = None):
    """Optimise ``model`` in place.

    ``train_set`` is a list of samples or a callable ``epoch -> list`` (used to
    redraw similar-slice priors each epoch). With ``out_dir`` the best-validation
    and final checkpoints plus ``history.csv`` are written there.

    Returns ``(final_checkpoint_path or None, TrainHistory)``.
    """
    sample_fn = train_set if callable(train_set) else (lambda epoch: train_set)
    if not val_set:
        raise TrainingError("validation set is empty")
    _check_channels(model, val_set, "validation")

    torch.set_num_threads(1)
    seed_all(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    gen = torch.Generator().manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    history = TrainHistory(deterministic=cfg.num_workers == 0)

    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        t0 = time.perf_counter()
        samples = sample_fn(epoch)
        if not samples:
            raise TrainingError("training set is empty")
        _check_channels(model, samples, "training")
        # shuffling stream depends only on (seed, epoch), so resumed runs see the same order
        gen.manual_seed(cfg.seed * 100_003 + epoch)
        model.train()
        total, count = 0.0, 0
        for x, p, y in batches(samples, cfg.batch_size, gen):
            x, p, y = x.to(dtype), p.to(dtype), y.to(dtype)
            if cfg.augment == "dihedral":
                x, p, y = dihedral((x, p, y), gen)
            loss = compute_loss(model(x, _model_priors(model, p)), y, cfg.loss, ssim_params)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {count}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * x.shape[0]
            count += x.shape[0]
        val = validation_ssim(model, val_set, ssim_params)
        history.append(epoch, total / count, val, time.perf_counter() - t0)
        logger.info("epoch %d  loss %.5f  val_ssim %.4f", epoch, total / count, val)

        if out_dir is not None:
            info = {**meta, "epoch": epoch, "val_ssim": val, "train_loss": total / count}
            if val > best_val:
                best_val = val
                save_checkpoint(out_dir / "best.ckpt", model, {**info, "kind": "best"})
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"epoch{epoch:04d}.ckpt", model, info, opt.state_dict())

    final = None
    if out_dir is not None:
        final = out_dir / "final.ckpt"
        save_checkpoint(final, model, {**meta, "epoch": start_epoch + cfg.epochs, "kind": "final",
                                       "val_ssim": history.val_ssim[-1], "best_val_ssim": best_val},
                        opt.state_dict())
        history.write_csv(out_dir / "history.csv", append=start_epoch > 0)
    return final, history
