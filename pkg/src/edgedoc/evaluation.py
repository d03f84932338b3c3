"""Binary detection metrics, ROC export, localization scores and detector fusion."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .fileio import encode_pgm, load_image, write_atomic


class EvalError(ValueError):
    pass


class DegenerateEvalError(EvalError):
    """Both classes are needed (ROC AUC undefined otherwise)."""


class IdMismatchError(EvalError):
    def __init__(self, only_a: set[str], only_b: set[str]):
        self.only_a, self.only_b = only_a, only_b
        super().__init__(f"id sets differ: only in A {sorted(only_a)[:10]}, only in B {sorted(only_b)[:10]}")


@dataclass(frozen=True)
class EvalRecord:
    id: str
    label: int
    score: float
    mask_path: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise EvalError(f"{self.id}: label must be 0 or 1")
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise EvalError(f"{self.id}: score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1_weighted: float
    roc_auc: float
    mcc: float
    threshold: float
    confusion: tuple[int, int, int, int]  # tp, fp, tn, fn

    def table(self, name: str = "model") -> str:
        cols = ("Accuracy", "F1 (weighted)", "Precision", "Recall", "ROC AUC", "MCC")
        vals = (self.accuracy, self.f1_weighted, self.precision, self.recall, self.roc_auc, self.mcc)
        width = max(len(name), 5)
        head = "Model".ljust(width) + "  " + "  ".join(c.rjust(13) for c in cols)
        row = name.ljust(width) + "  " + "  ".join(f"{v:13.2f}" for v in vals)
        return head + "\n" + row

    def key_values(self) -> str:
        tp, fp, tn, fn = self.confusion
        lines = [f"{k}={getattr(self, k)!r}" for k in
                 ("accuracy", "precision", "recall", "f1_weighted", "roc_auc", "mcc", "threshold")]
        lines += [f"tp={tp}", f"fp={fp}", f"tn={tn}", f"fn={fn}"]
        return "\n".join(lines)


def _arrays(records: Sequence[EvalRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise EvalError("no records")
    labels = np.fromiter((r.label for r in records), dtype=np.int64, count=len(records))
    scores = np.fromiter((r.score for r in records), dtype=np.float64, count=len(records))
    return labels, scores


def confusion(records: Sequence[EvalRecord], threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with attack as the positive class; score >= threshold predicts attack."""
    labels, scores = _arrays(records)
    pred = scores >= threshold
    pos = labels == 1
    return (int(np.sum(pred & pos)), int(np.sum(pred & ~pos)),
            int(np.sum(~pred & ~pos)), int(np.sum(~pred & pos)))


def confusion_metrics(tp: int, fp: int, tn: int, fn: int) -> dict[str, float]:
    """Threshold metrics from counts; 0/0 ratios resolve to 0."""
    n = tp + fp + tn + fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1_pos = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    f1_neg = 2 * tn / (2 * tn + fp + fn) if tn + fp + fn else 0.0
    f1w = ((tp + fn) * f1_pos + (tn + fp) * f1_neg) / n
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(denom) if denom else 0.0
    return {"accuracy": (tp + tn) / n, "precision": precision, "recall": recall,
            "f1_weighted": f1w, "mcc": mcc}


def roc_auc(records: Sequence[EvalRecord]) -> tuple[float, list[tuple[float, float, float]]]:
    """Rank-statistic AUC (ties count 1/2) and the ROC curve as (threshold, fpr, tpr).

    The curve starts at (inf, 0, 0) and adds one point per distinct score,
    sweeping thresholds from high to low with the ``>=`` rule.
    """
    labels, scores = _arrays(records)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        missing = "attack (label 1)" if n_pos == 0 else "bonafide (label 0)"
        raise DegenerateEvalError(f"ROC AUC undefined: no {missing} records")

    order = np.argsort(scores, kind="mergesort")
    s_sorted = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(s_sorted):
        j = i
        while j + 1 < len(s_sorted) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    curve = [(math.inf, 0.0, 0.0)]
    desc = order[::-1]
    tp = fp = 0
    k = 0
    while k < len(desc):
        thr = scores[desc[k]]
        while k < len(desc) and scores[desc[k]] == thr:
            if labels[desc[k]] == 1:
                tp += 1
            else:
                fp += 1
            k += 1
        curve.append((float(thr), fp / n_neg, tp / n_pos))
    return float(auc), curve


def trapezoid_auc(curve: Sequence[tuple[float, float, float]]) -> float:
    fpr = np.array([c[1] for c in curve])
    tpr = np.array([c[2] for c in curve])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def metrics(records: Sequence[EvalRecord], threshold: float = 0.5) -> MetricsReport:
    tp, fp, tn, fn = confusion(records, threshold)
    m = confusion_metrics(tp, fp, tn, fn)
    auc, _ = roc_auc(records)
    return MetricsReport(m["accuracy"], m["precision"], m["recall"], m["f1_weighted"], auc, m["mcc"],
                         threshold, (tp, fp, tn, fn))


def localization_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """Pixel F1 and IoU of ``pred_mask >= threshold`` against a binary ground truth."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise EvalError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    p = pred_mask >= threshold
    g = gt_mask > 0
    inter = int(np.sum(p & g))
    n_p, n_g = int(p.sum()), int(g.sum())
    if n_p == 0 and n_g == 0:
        return 1.0, 1.0
    union = n_p + n_g - inter
    return 2.0 * inter / (n_p + n_g), inter / union


# ---------------------------------------------------------------------------
# fusion


def mask_pool(prob: np.ndarray, q: float = 0.99) -> float:
    return float(np.quantile(np.asarray(prob, dtype=np.float64), q))


def load_prob_mask(path: str | Path) -> np.ndarray:
    return load_image(path).astype(np.float64) / 255.0


def composite_score(rec: EvalRecord, alpha: float, load_mask: Callable[[str], np.ndarray]) -> tuple[float, np.ndarray | None]:
    if rec.mask_path is None:
        return rec.score, None
    m = load_mask(rec.mask_path)
    return alpha * rec.score + (1.0 - alpha) * mask_pool(m), m


def fuse(records_a: Sequence[EvalRecord], records_b: Sequence[EvalRecord], w: float = 0.5,
         alpha: float = 0.7, load_mask: Callable[[str], np.ndarray] = load_prob_mask,
         mask_dir: str | Path | None = None) -> list[EvalRecord]:
    """Convex score-level fusion of two detectors, in the order of ``records_a``.

    Each detector contributes ``alpha * score + (1 - alpha) * q99(mask)`` when it
    has a mask, else its score; the fused score is ``w * a + (1 - w) * b``.
    With ``mask_dir`` set and both masks present, the pixelwise w-weighted mask
    is written there as a PGM and referenced by the fused record.
    """
    if not (0.0 <= w <= 1.0 and 0.0 <= alpha <= 1.0):
        raise EvalError("w and alpha must lie in [0, 1]")
    by_b = {r.id: r for r in records_b}
    ids_a = {r.id for r in records_a}
    if ids_a != set(by_b) or len(ids_a) != len(records_a):
        raise IdMismatchError(ids_a - set(by_b), set(by_b) - ids_a)
    out = []
    for ra in records_a:
        rb = by_b[ra.id]
        if ra.label != rb.label:
            raise EvalError(f"{ra.id}: labels disagree between inputs")
        sa, ma = composite_score(ra, alpha, load_mask)
        sb, mb = composite_score(rb, alpha, load_mask)
        fused = w * sa + (1.0 - w) * sb
        # guard the convex-combination bound against rounding
        fused = min(max(fused, min(sa, sb)), max(sa, sb))
        mask_path = None
        if mask_dir is not None and ma is not None and mb is not None:
            if ma.shape != mb.shape:
                raise EvalError(f"{ra.id}: mask shapes differ {ma.shape} vs {mb.shape}")
            fm = w * ma + (1.0 - w) * mb
            mask_path = str(Path(mask_dir) / f"{ra.id}.pgm")
            write_atomic(mask_path, encode_pgm(np.clip(np.rint(fm * 255.0), 0, 255).astype(np.uint8)))
        out.append(replace(ra, score=fused, mask_path=mask_path))
    return out


# ---------------------------------------------------------------------------
# CSV interfaces


def records_to_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    with_mask = any(r.mask_path is not None for r in records)
    wr.writerow(["id", "label", "score"] + (["mask_path"] if with_mask else []))
    for r in records:
        row = [r.id, r.label, repr(float(r.score))]
        if with_mask:
            row.append(r.mask_path or "")
        wr.writerow(row)
    return buf.getvalue()


def read_records(path: str | Path) -> list[EvalRecord]:
    """Parse ``id,label,score[,mask_path]``; relative mask paths resolve against the CSV's folder."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "label", "score"} <= set(reader.fieldnames):
            raise EvalError(f"{path}: header must contain id,label,score")
        out = []
        for row in reader:
            mp = (row.get("mask_path") or "").strip() or None
            if mp is not None and not Path(mp).is_absolute():
                mp = str(path.parent / mp)
            try:
                out.append(EvalRecord(row["id"], int(row["label"]), float(row["score"]), mp))
            except ValueError as exc:
                raise EvalError(f"{path}: bad row {row}: {exc}") from exc
    return out


def roc_csv(curve: Sequence[tuple[float, float, float]]) -> str:
    lines = ["threshold,fpr,tpr"]
    lines += [f"{t!r},{f!r},{p!r}" for t, f, p in curve]
    return "\n".join(lines) + "\n"
