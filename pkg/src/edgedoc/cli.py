"""Command line: synth, train, infer, eval, fuse, roc.

Exit codes: 2 usage, 3 I/O, 4 non-finite loss, 5 checkpoint mismatch,
6 id mismatch in fuse, 7 degenerate evaluation.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import model as M
from . import training as TR
from .fileio import FormatError, encode_pgm, write_atomic, write_text_atomic

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_IDS, EXIT_DEGENERATE = 2, 3, 4, 5, 6, 7
MODEL_PRESETS = {"toy": M.TOY, "reduced": M.REDUCED}

log = logging.getLogger("edgedoc")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Flat, serializable settings for one command; file values < CLI flags."""

    seed: int = 0
    model: str = "toy"
    input_size: int = 256
    epochs: int = 20
    lr: float = 3e-4
    weight_decay: float = 5e-4
    lambda_mask: float = 3.0
    dice_epsilon: float = 1.0
    residual: str = "highpass"
    w: float = 0.5
    alpha: float = 0.7
    threshold: float = 0.5

    @classmethod
    def parse(cls, text: str) -> dict[str, str]:
        out = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise UsageError(f"config line {n}: expected key=value, got {line!r}")
            out[key.strip()] = val.strip()
        return out

    def update(self, values: dict) -> None:
        types = {f.name: f.type for f in fields(self)}
        for key, val in values.items():
            if val is None:
                continue
            if key not in types:
                raise UsageError(f"unknown config key {key!r}")
            conv = {"int": int, "float": float, "str": str}[types[key]]
            try:
                setattr(self, key, conv(val))
            except ValueError:
                raise UsageError(f"bad value for {key}: {val!r}") from None

    def model_config(self) -> M.ModelConfig:
        if self.model not in MODEL_PRESETS:
            raise UsageError(f"model must be one of {sorted(MODEL_PRESETS)}")
        try:
            return dataclasses.replace(MODEL_PRESETS[self.model], input_size=(self.input_size, self.input_size))
        except M.ConfigError as exc:
            raise UsageError(str(exc)) from None

    def validate(self) -> None:
        self.model_config()
        try:
            self.loss_config()
            self.optim_config()
            D.ResidualExtractor.parse(self.residual)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        for name in ("w", "alpha", "threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise UsageError(f"{name} must lie in [0, 1]")

    def loss_config(self) -> TR.LossConfig:
        return TR.LossConfig(self.lambda_mask, self.dice_epsilon)

    def optim_config(self) -> TR.OptimConfig:
        return TR.OptimConfig(lr0=self.lr, weight_decay=self.weight_decay, epochs=self.epochs)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def _resolve_config(args, keys: tuple[str, ...]) -> RunConfig:
    cfg = RunConfig()
    env_seed = os.environ.get("EDGEDOC_SEED")
    if env_seed is not None:
        cfg.update({"seed": env_seed})
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text("utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        cfg.update(RunConfig.parse(text))
    cfg.update({k: getattr(args, k, None) for k in keys})
    cfg.validate()
    return cfg


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.bonafide < 1 or args.attack < 1:
        raise UsageError("--bonafide and --attack must be >= 1")
    seed = args.seed if args.seed is not None else int(os.environ.get("EDGEDOC_SEED", "0"))
    manifest = D.synth_generate(args.bonafide, args.attack, seed, args.out, args.split)
    print(manifest.path)
    for k, v in D.corpus_stats(manifest).items():
        print(f"{k}={v}")
    return 0


def _load_prepared(manifest_path: str, cfg: RunConfig):
    manifest = D.load_manifest(manifest_path)
    samples = D.load_samples(manifest)
    extractor = D.ResidualExtractor.parse(cfg.residual)
    size = (cfg.input_size, cfg.input_size)
    return samples, D.prepare(samples, extractor, size)


TRAIN_KEYS = ("seed", "model", "input_size", "epochs", "lr", "weight_decay", "lambda_mask", "dice_epsilon", "residual")


def cmd_train(args) -> int:
    cfg = _resolve_config(args, TRAIN_KEYS)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return 0
    if not args.train_manifest or not args.val_manifest or not args.out:
        raise UsageError("train needs --train-manifest, --val-manifest and --out")
    model_cfg = cfg.model_config()
    _, train_p = _load_prepared(args.train_manifest, cfg)
    _, val_p = _load_prepared(args.val_manifest, cfg)
    out = _out_dir(args.out)
    write_text_atomic(out / "config.txt", cfg.to_text())
    params = M.build_model(model_cfg, cfg.seed)
    res = TR.train(params, train_p, val_p, model_cfg, cfg.loss_config(), cfg.optim_config(), cfg.seed, out)
    print(f"checkpoint={out / 'best'}")
    print(f"history={out / 'history.csv'}")
    print(f"best_epoch={res.best_epoch} best_val_loss={res.state.best_val_loss!r}")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve_config(args, ("residual",))
    params, model_cfg, _ = M.load_checkpoint(args.checkpoint)
    cfg.input_size = model_cfg.input_size[0]
    samples, prepared = _load_prepared(args.manifest, cfg)
    out = _out_dir(args.out)
    records = []
    for s, (x, _, _) in zip(samples, prepared):
        score, mask = M.predict(params, x[None], model_cfg)
        rel = f"masks/{s.id}.pgm"
        write_atomic(out / rel, encode_pgm(np.clip(np.rint(mask[0] * 255.0), 0, 255).astype(np.uint8)))
        records.append(E.EvalRecord(s.id, s.label, float(np.clip(score[0], 0.0, 1.0)), rel))
    write_text_atomic(out / "records.csv", E.records_to_csv(records))
    print(out / "records.csv")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args, ("threshold",))
    records = E.read_records(args.records)
    loc = None
    if args.manifest:
        manifest = D.load_manifest(args.manifest)
        by_id = {r.id: r for r in manifest.rows}
        missing = [r.id for r in records if r.id not in by_id]
        if missing:
            raise E.IdMismatchError(set(missing), set())
        records = [dataclasses.replace(r, label=by_id[r.id].label) for r in records]
        f1s, ious = [], []
        for r in records:
            if r.mask_path is None:
                continue
            sample = D.load_sample(manifest, r.id)
            pred = E.load_prob_mask(r.mask_path)
            gt = D.resize_nearest(sample.mask, pred.shape)
            f1, iou = E.localization_metrics(pred, gt, cfg.threshold)
            f1s.append(f1)
            ious.append(iou)
        if f1s:
            loc = (float(np.mean(f1s)), float(np.mean(ious)))
    report = E.metrics(records, cfg.threshold)
    _, curve = E.roc_auc(records)
    print(report.table(args.name))
    print(report.key_values())
    if loc is not None:
        print(f"pixel_f1={loc[0]!r}\npixel_iou={loc[1]!r}")
    if args.out:
        out = _out_dir(args.out)
        write_text_atomic(out / "roc.csv", E.roc_csv(curve))
        write_text_atomic(out / "report.txt", report.table(args.name) + "\n" + report.key_values() + "\n")
    return 0


def cmd_fuse(args) -> int:
    cfg = _resolve_config(args, ("w", "alpha"))
    a = E.read_records(args.records_a)
    b = E.read_records(args.records_b)
    out = _out_dir(args.out)
    fused = E.fuse(a, b, cfg.w, cfg.alpha, mask_dir=out / "masks")
    fused = [dataclasses.replace(r, mask_path=os.path.relpath(r.mask_path, out)) if r.mask_path else r
             for r in fused]
    write_text_atomic(out / "records.csv", E.records_to_csv(fused))
    print(out / "records.csv")
    return 0


def cmd_roc(args) -> int:
    records = E.read_records(args.records)
    auc, curve = E.roc_auc(records)
    out = _out_dir(args.out)
    write_text_atomic(out / "roc.csv", E.roc_csv(curve))
    print(f"roc_auc={auc!r}")
    print(out / "roc.csv")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edgedoc", description="EdgeDoc document forgery detection")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic ID-card corpus")
    s.add_argument("--bonafide", type=int, required=True)
    s.add_argument("--attack", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train", choices=("train", "val", "test"))
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train and keep the lowest-validation-loss checkpoint")
    t.add_argument("--train-manifest")
    t.add_argument("--val-manifest")
    t.add_argument("--out")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--model", choices=sorted(MODEL_PRESETS))
    t.add_argument("--input-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--lambda-mask", type=float)
    t.add_argument("--dice-epsilon", type=float)
    t.add_argument("--residual", help="'highpass' or 'file:DIR' of per-id BTF maps")
    t.add_argument("--print-config", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="score a manifest with a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--manifest", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config")
    i.add_argument("--residual")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="metrics report and ROC curve for a records CSV")
    e.add_argument("--records", required=True)
    e.add_argument("--manifest", help="ground-truth manifest (labels and masks)")
    e.add_argument("--threshold", type=float)
    e.add_argument("--config")
    e.add_argument("--name", default="EdgeDoc")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="weighted fusion of two detectors' records")
    f.add_argument("--records-a", required=True)
    f.add_argument("--records-b", required=True)
    f.add_argument("--w", type=float)
    f.add_argument("--alpha", type=float)
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("roc", help="export the ROC curve as CSV")
    r.add_argument("--records", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_roc)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"edgedoc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TR.NonFiniteLossError as exc:
        print(f"edgedoc: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except M.CheckpointError as exc:
        print(f"edgedoc: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except E.IdMismatchError as exc:
        print(f"edgedoc: {exc}", file=sys.stderr)
        return EXIT_IDS
    except E.DegenerateEvalError as exc:
        print(f"edgedoc: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, D.DataError, FormatError, E.EvalError) as exc:
        print(f"edgedoc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
