"""Metrics, mask export, benchmark-table plotting, and the command line.

Subcommands: train, eval, pseudolabel, sweep, plot. Exit codes: 0 success,
2 configuration or usage error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, NumericError, ValidationError

IGNORE_INDEX = 255
METRICS_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Confusion matrix and IoU
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Pixel counts indexed [ground truth, prediction]; mergeable monoid."""

    counts: np.ndarray
    ignore_skipped: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64))

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(counts=self.counts + other.counts,
                               ignore_skipped=self.ignore_skipped + other.ignore_skipped)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


def accumulate(cm: ConfusionMatrix, pred_mask: np.ndarray,
               gt_mask: np.ndarray, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    """Add one image's pixels to the matrix, skipping ignored ground truth."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValidationError(
            f"prediction {pred_mask.shape} and ground truth {gt_mask.shape} differ")
    keep = gt_mask != ignore_index
    cm.ignore_skipped += int((~keep).sum())
    g = gt_mask[keep].astype(np.int64)
    p = pred_mask[keep].astype(np.int64)
    n = cm.num_classes
    if g.size and (g.min() < 0 or g.max() >= n or p.min() < 0 or p.max() >= n):
        raise ValidationError(f"class index out of range for {n} classes")
    cm.counts += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return cm


@dataclass
class IouReport:
    per_class: list[Optional[float]]
    miou: float


def iou_report(cm: ConfusionMatrix) -> IouReport:
    """Per-class intersection over union; classes absent from both prediction
    and ground truth are reported as None and excluded from the mean."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    per_class: list[Optional[float]] = []
    present = []
    for c in range(cm.num_classes):
        if union[c] == 0:
            per_class.append(None)
        else:
            iou = tp[c] / union[c]
            per_class.append(float(iou))
            present.append(iou)
    miou = float(np.mean(present)) if present else 0.0
    return IouReport(per_class=per_class, miou=miou)


# ---------------------------------------------------------------------------
# Mask export
# ---------------------------------------------------------------------------

def voc_palette(num_entries: int = 256) -> list[int]:
    """The standard 21-class palette (bit-reversal colormap), padded to 256."""
    palette = []
    for i in range(num_entries):
        r = g = b = 0
        value = i
        for j in range(8):
            r |= ((value >> 0) & 1) << (7 - j)
            g |= ((value >> 1) & 1) << (7 - j)
            b |= ((value >> 2) & 1) << (7 - j)
            value >>= 3
        palette += [r, g, b]
    return palette


def export_mask(probs: np.ndarray, path: Path | str,
                palette: Optional[list[int]] = None) -> Path:
    """Write the per-pixel argmax of (H, W, N) probabilities as an indexed PNG."""
    probs = np.asarray(probs)
    if palette is None:
        palette = voc_palette()
    if len(palette) < probs.shape[-1] * 3:
        raise ValidationError("palette does not cover all classes")
    labels = probs.argmax(axis=-1).astype(np.uint8)
    im = Image.fromarray(labels, mode="P")
    im.putpalette(palette)
    path = Path(path)
    im.save(path)
    return path


# ---------------------------------------------------------------------------
# Benchmark tables and the label-efficiency plot
# ---------------------------------------------------------------------------

@dataclass
class ResultsRow:
    method: str
    split_fraction: str
    label_count: int
    miou: float


@dataclass
class ResultsTable:
    rows: list[ResultsRow]

    def validate(self) -> None:
        for row in self.rows:
            if row.label_count <= 0:
                raise ValidationError(f"label_count must be positive: {row}")
            if not 0.0 <= row.miou <= 100.0:
                raise ValidationError(f"miou must be in [0, 100]: {row}")

    def methods(self) -> list[str]:
        seen = list(dict.fromkeys(row.method for row in self.rows))
        return seen

    def series(self, method: str) -> list[tuple[int, float]]:
        points = [(r.label_count, r.miou) for r in self.rows if r.method == method]
        return sorted(points)


def load_results_table(path: Path | str) -> ResultsTable:
    rows = []
    with Path(path).open() as handle:
        for record in csv.DictReader(handle):
            rows.append(ResultsRow(method=record["method"],
                                   split_fraction=record["split_fraction"],
                                   label_count=int(record["label_count"]),
                                   miou=float(record["miou"])))
    table = ResultsTable(rows=rows)
    table.validate()
    return table


def bundled_results_path() -> Path:
    return Path(__file__).parent / "data" / "voc_results.csv"


def plot_label_curves(table: ResultsTable, out_path: Path | str) -> tuple[Path, Path]:
    """mIoU versus labeled-image count, one series per method, log-scaled
    label axis. Writes a vector figure plus a sidecar CSV of the plotted data
    so the curves can be regenerated without the plotting code."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    table.validate()
    if not table.rows:
        raise ConfigurationError("results table is empty")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for method in table.methods():
        points = table.series(method)
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o",
                linewidth=2 if method.lower().startswith("semivl") else 1.2,
                label=method)
    ax.set_xscale("log")
    counts = sorted({row.label_count for row in table.rows})
    ax.set_xticks(counts)
    ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
    ax.set_xlabel("labeled images")
    ax.set_ylabel("mIoU (%)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)

    sidecar = out_path.with_suffix(out_path.suffix + ".csv")
    with sidecar.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "split_fraction", "label_count", "miou"])
        for row in table.rows:
            writer.writerow([row.method, row.split_fraction, row.label_count, row.miou])
    return out_path, sidecar


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    from .trainer import fit, load_config
    cfg = load_config(args.config)
    result = fit(cfg, resume=args.resume)
    final = result.history[-1]["miou"] if result.history else float("nan")
    print(f"finished {len(result.records)} steps; last checkpoint "
          f"{result.last_checkpoint}; final mIoU {final:.4f}")
    return 0


def _cmd_eval(args) -> int:
    from . import corpus as corpus_mod
    from .trainer import load_checkpoint_model, sliding_window_infer

    trainer, cfg = load_checkpoint_model(args.checkpoint)
    root = Path(args.root or cfg.root)
    ids = corpus_mod.read_split_file(Path(args.split))
    samples = [corpus_mod.load_sample(root, i, with_mask=True) for i in ids]
    metrics = trainer.evaluate(samples)
    record = {
        "schema": METRICS_SCHEMA_VERSION,
        "checkpoint": str(args.checkpoint),
        "split": str(args.split),
        "num_images": len(samples),
        **metrics,
    }
    line = json.dumps(record)
    print(line)
    if args.out:
        with Path(args.out).open("a") as handle:
            handle.write(line + "\n")
    if args.export_dir:
        export_dir = Path(args.export_dir)
        export_dir.mkdir(parents=True, exist_ok=True)
        window = cfg.eval_window or cfg.crop_size
        for sample in samples:
            probs = sliding_window_infer(trainer.model, sample.image, trainer.text, window)
            export_mask(probs, export_dir / f"{sample.id}.png")
    return 0


def _cmd_pseudolabel(args) -> int:
    from . import corpus as corpus_mod
    from .guidance import load_class_definitions
    from .trainer import Trainer, load_config
    from .vlm import encoder_fingerprint

    cfg = load_config(args.config)
    if args.defs:
        cfg.defs_path = args.defs
    cfg.cache_dir = args.out
    trainer = Trainer(cfg)
    if not trainer.guidance_enabled:
        raise ConfigurationError("guidance disabled (lambda_dc0 = 0 or supervised_only)")
    split = corpus_mod.read_split(Path(cfg.root), cfg.labeled_split, cfg.unlabeled_split)
    _, unlabeled = corpus_mod.load_split(split)
    trainer.prepare_guidance(unlabeled)
    out_dir = Path(args.out)
    if args.export_masks:
        for sample in unlabeled:
            label = trainer.pseudo_labels[sample.id]
            export_mask(label.probs, out_dir / f"{sample.id}_guidance.png")
    print(f"wrote pseudo-labels for {len(unlabeled)} images to {out_dir} "
          f"(encoder {encoder_fingerprint(trainer.frozen_encoder)[:12]})")
    return 0


def _guidance_mask_fraction(cfg, zeta: float) -> float:
    """Fraction of unlabeled pixels whose guidance confidence reaches zeta."""
    from . import corpus as corpus_mod
    from .trainer import Trainer

    trainer = Trainer(cfg)
    split = corpus_mod.read_split(Path(cfg.root), cfg.labeled_split, cfg.unlabeled_split)
    _, unlabeled = corpus_mod.load_split(split)
    trainer.prepare_guidance(unlabeled)
    passing = total = 0
    for sample in unlabeled:
        conf = trainer.pseudo_labels[sample.id].confidence
        passing += int((conf >= zeta).sum())
        total += conf.size
    return passing / total if total else 0.0


def _cmd_sweep(args) -> int:
    from .trainer import fit, load_config

    base_cfg = load_config(args.config)
    if args.param not in ("lambda_dc0", "zeta", "tau"):
        raise ConfigurationError(f"sweep supports loss parameters, got {args.param!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for value in args.values:
        cfg = load_config(args.config)
        setattr(cfg.loss, args.param, value)
        cfg.loss.validate()
        cfg.out_dir = str(out_dir / f"{args.param}_{value:g}")
        entry = {"param": args.param, "value": value}
        if args.dry_run:
            entry["executed"] = False
        else:
            result = fit(cfg)
            entry["executed"] = True
            entry["miou"] = result.history[-1]["miou"] if result.history else None
        if args.param == "zeta":
            entry["guidance_mask_fraction"] = _guidance_mask_fraction(cfg, value)
        results.append(entry)
        print(json.dumps(entry))

    summary = {"param": args.param, "results": results}
    if args.param == "zeta":
        ordered = sorted(results, key=lambda e: e["value"])
        fractions = [e["guidance_mask_fraction"] for e in ordered]
        monotone = all(a >= b for a, b in zip(fractions, fractions[1:]))
        summary["mask_fraction_monotone_nonincreasing"] = monotone
        print(f"guidance mask fraction non-increasing in zeta: {monotone}")
    (out_dir / "sweep_results.json").write_text(json.dumps(summary, indent=2))
    return 0


def _cmd_plot(args) -> int:
    table = load_results_table(args.tables or bundled_results_path())
    figure, sidecar = plot_label_curves(table, args.out)
    print(f"wrote {figure} and {sidecar}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlseg",
                                     description="semi-supervised segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run semi-supervised training")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--root", default=None)
    p.add_argument("--out", default=None, help="append the metrics record to this file")
    p.add_argument("--export-dir", default=None, help="write colorized prediction masks here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pseudolabel", help="precompute frozen-model pseudo-labels")
    p.add_argument("--config", required=True)
    p.add_argument("--defs", default=None, help="class-definition file")
    p.add_argument("--out", required=True)
    p.add_argument("--export-masks", action="store_true")
    p.set_defaults(func=_cmd_pseudolabel)

    p = sub.add_parser("sweep", help="train once per value of a loss parameter")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, nargs="+", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true",
                   help="only compute guidance mask fractions, skip training")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("plot", help="plot mIoU versus label count from a results table")
    p.add_argument("--tables", default=None, help="results CSV (default: bundled numbers)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
