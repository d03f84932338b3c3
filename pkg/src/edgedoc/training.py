"""Composite detection/localization loss, AdamW, cosine schedule and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .fileio import write_text_atomic
from .layers import ParamBundle
from .model import ModelConfig, forward, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    lambda_mask: float = 3.0
    dice_epsilon: float = 1.0

    def __post_init__(self):
        # lambda 0 is accepted as a diagnostic (total == classification loss)
        if not self.lambda_mask >= 0:
            raise ValueError(f"lambda_mask must be >= 0, got {self.lambda_mask}")
        if not self.dice_epsilon > 0:
            raise ValueError("dice_epsilon must be positive")


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 3e-4
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 1
    eta_min: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.weight_decay < 0 or self.eta_min < 0:
            raise ValueError("weight_decay and eta_min must be non-negative")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_val_loss: float = math.inf
    rng_seed: int = 0


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, step: int, value: float):
        self.epoch, self.step, self.value = epoch, step, value
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")


# ---------------------------------------------------------------------------
# losses


def bce_logits(z: Tensor, y) -> Tensor:
    """Mean binary cross-entropy on logits (stable form)."""
    return T.bce_with_logits(z, y)


def dice_loss(z: Tensor, y, eps: float = 1.0) -> Tensor:
    """Soft Dice on sigmoid(z): 1 - (2 sum(p y) + eps) / (sum p + sum y + eps), batch-averaged."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float32)
    if y.shape != z.shape:
        raise T.ShapeError("dice_loss", z.shape, y.shape)
    axes = tuple(range(1, z.ndim))
    yt = Tensor(y)
    p = T.sigmoid(z)
    inter = T.sum_reduce(T.mul(p, yt), axis=axes)
    num = T.add(T.scale(inter, 2.0), Tensor(eps))
    den = T.add(T.sum_reduce(p, axis=axes), Tensor(y.sum(axis=axes) + np.float32(eps)))
    return T.sub(Tensor(1.0), T.mean_reduce(T.div(num, den)))


def total_loss(cls_logit: Tensor, mask_logit: Tensor, y_cls, y_mask,
               cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, cls_part, mask_part) with total = cls + lambda * mask."""
    cls_part = bce_logits(cls_logit, y_cls)
    mask_part = T.add(bce_logits(mask_logit, y_mask), dice_loss(mask_logit, y_mask, cfg.dice_epsilon))
    total = T.add(cls_part, T.scale(mask_part, cfg.lambda_mask))
    return total, cls_part, mask_part


# ---------------------------------------------------------------------------
# optimizer and schedule


def adamw_step(params: ParamBundle, state: TrainState, lr: float, cfg: OptimConfig) -> None:
    """One decoupled-weight-decay Adam update, in place, using each parameter's ``grad``."""
    b1, b2 = cfg.betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    lr32, wd32, eps32 = np.float32(lr), np.float32(cfg.weight_decay), np.float32(cfg.eps)
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= np.float32(b1)
        m += np.float32(1.0 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1.0 - b2) * (g * g)
        m_hat = m / np.float32(bc1)
        v_hat = v / np.float32(bc2)
        t.data -= lr32 * (m_hat / (np.sqrt(v_hat) + eps32) + wd32 * t.data)


def cosine_lr(epoch: int, cfg: OptimConfig = OptimConfig()) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.eta_min + 0.5 * (cfg.lr0 - cfg.eta_min) * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


# ---------------------------------------------------------------------------
# loop


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    train_cls: float
    train_mask: float
    val_cls: float
    val_mask: float


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "train_cls", "train_mask", "val_cls", "val_mask")


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in HISTORY_FIELDS[1:]])
    return buf.getvalue()


def evaluate_loss(params: ParamBundle, data: Sequence, model_cfg: ModelConfig,
                  loss_cfg: LossConfig) -> tuple[float, float, float]:
    """Mean (total, cls, mask) over ``data`` without gradients, summed in index order."""
    tot = cls = msk = 0.0
    with T.no_grad():
        for x, y_mask, label in data:
            out = forward(params, x[None], model_cfg)
            t, c, m = total_loss(out.cls_logit, out.mask_logit, np.full((1, 1), label, np.float32),
                                 y_mask[None], loss_cfg)
            tot += float(t.data)
            cls += float(c.data)
            msk += float(m.data)
    n = len(data)
    return tot / n, cls / n, msk / n


@dataclass
class TrainResult:
    best_params: ParamBundle
    history: list[EpochRecord]
    best_epoch: int
    state: TrainState


def train(params: ParamBundle, train_set: Sequence, val_set: Sequence, model_cfg: ModelConfig,
          loss_cfg: LossConfig = LossConfig(), optim_cfg: OptimConfig = OptimConfig(),
          seed: int = 0, out_dir: str | Path | None = None) -> TrainResult:
    """Train with batch size 1, keeping the parameters with the lowest validation loss.

    ``train_set`` and ``val_set`` hold ``(x, y_mask, label)`` triples where ``x``
    is 2xHxW and ``y_mask`` is 1xHxW.  When ``out_dir`` is given the best
    checkpoint is written to ``out_dir/best`` whenever validation improves and
    the history CSV to ``out_dir/history.csv`` after each epoch.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    params.requires_grad_(True)
    state = TrainState(rng_seed=seed)
    rng = np.random.default_rng(seed)
    history: list[EpochRecord] = []
    best = params.copy()
    best_epoch = -1

    for epoch in range(optim_cfg.epochs):
        state.epoch = epoch
        lr = cosine_lr(epoch, optim_cfg)
        order = rng.permutation(len(train_set))
        tot = cls = msk = 0.0
        for i in order:
            x, y_mask, label = train_set[i]
            params.zero_grad()
            with T.new_graph():
                out = forward(params, x[None], model_cfg)
                loss, c, m = total_loss(out.cls_logit, out.mask_logit,
                                        np.full((1, 1), label, np.float32), y_mask[None], loss_cfg)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLossError(epoch, state.step, value)
                T.backward(loss)
            adamw_step(params, state, lr, optim_cfg)
            tot += value
            cls += float(c.data)
            msk += float(m.data)
        n = len(train_set)
        val, vcls, vmsk = evaluate_loss(params, val_set, model_cfg, loss_cfg)
        if not math.isfinite(val):
            raise NonFiniteLossError(epoch, state.step, val)
        rec = EpochRecord(epoch, tot / n, val, lr, cls / n, msk / n, vcls, vmsk)
        history.append(rec)
        log.info("epoch %d train %.5f val %.5f lr %.3g", epoch, rec.train_loss, val, lr)
        if val < state.best_val_loss:
            state.best_val_loss = val
            best = params.copy()
            best_epoch = epoch
            if out_dir is not None:
                save_checkpoint(out_dir / "best", best, model_cfg,
                                {"epoch": epoch, "val_loss": repr(val), "seed": seed})
        if out_dir is not None:
            write_text_atomic(out_dir / "history.csv", history_csv(history))
    params.zero_grad()
    return TrainResult(best, history, best_epoch, state)
