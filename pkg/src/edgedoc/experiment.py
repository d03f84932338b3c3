"""Synthetic end-to-end runs shared by the scripts and the acceptance suite."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import model as M
from . import training as TR

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    history: list[TR.EpochRecord]
    best_epoch: int
    report: E.MetricsReport
    renoise_pixel_f1: float
    pixel_f1_by_kind: dict[str, float]
    seconds: float


def infer_records(params, cfg: M.ModelConfig, samples, prepared) -> tuple[list[E.EvalRecord], list[np.ndarray]]:
    records, masks = [], []
    for s, (x, _, _) in zip(samples, prepared):
        score, mask = M.predict(params, x[None], cfg)
        records.append(E.EvalRecord(s.id, s.label, float(np.clip(score[0], 0.0, 1.0))))
        masks.append(mask[0])
    return records, masks


def run_synthetic(out_dir, n_train: int = 200, n_val: int = 60, seed: int = 7,
                  model_cfg: M.ModelConfig = M.TOY, loss_cfg: TR.LossConfig = TR.LossConfig(),
                  optim_cfg: TR.OptimConfig = TR.OptimConfig()) -> ExperimentResult:
    """Generate balanced train/val corpora, train with best-val selection, evaluate on val."""
    t0 = time.time()
    out = Path(out_dir)
    train_m = D.synth_generate(n_train // 2, n_train - n_train // 2, seed, out / "train", "train")
    val_m = D.synth_generate(n_val // 2, n_val - n_val // 2, seed + 1, out / "val", "val")
    size = model_cfg.input_size
    train_s, val_s = D.load_samples(train_m), D.load_samples(val_m)
    train_p, val_p = D.prepare(train_s, size=size), D.prepare(val_s, size=size)
    params = M.build_model(model_cfg, seed)
    res = TR.train(params, train_p, val_p, model_cfg, loss_cfg, optim_cfg, seed, out / "run")
    records, masks = infer_records(res.best_params, model_cfg, val_s, val_p)
    report = E.metrics(records)
    f1s: dict[str, list[float]] = {k: [] for k in D.ATTACK_KINDS}
    for s, (_, y, _), m in zip(val_s, val_p, masks):
        kind = D.attack_kind(s.id)
        if kind is not None:
            f1s[kind].append(E.localization_metrics(m, y[0])[0])
    by_kind = {k: float(np.mean(v)) if v else float("nan") for k, v in f1s.items()}
    return ExperimentResult(res.history, res.best_epoch, report, by_kind["renoise"], by_kind,
                            time.time() - t0)


def run_overfit(out_dir, n: int = 8, seed: int = 11, model_cfg: M.ModelConfig | None = None,
                optim_cfg: TR.OptimConfig = TR.OptimConfig(),
                loss_cfg: TR.LossConfig = TR.LossConfig()) -> TR.TrainResult:
    """Train and validate on the same ``n`` synthetic samples."""
    cfg = model_cfg or dataclasses.replace(M.REDUCED, input_size=(256, 256))
    m = D.synth_generate(n // 2, n - n // 2, seed, Path(out_dir) / "data")
    prepared = D.prepare(D.load_samples(m), size=cfg.input_size)
    params = M.build_model(cfg, seed)
    return TR.train(params, prepared, prepared, cfg, loss_cfg, optim_cfg, seed)
