"""Confusion-matrix accounting, per-class IoU / mIoU and report rendering."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # C x C int64, rows = ground truth, cols = prediction
    ignored: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), 0)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray,
               ignore_id: int = 255) -> ConfusionMatrix:
    """Return a new matrix with the pixels of one (pred, gt) pair tallied in."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    n = cm.num_classes
    if (pred == ignore_id).any():
        raise ValueError("prediction contains ignore_id")
    if pred.size and (pred.min() < 0 or pred.max() >= n):
        raise ValueError(f"prediction values outside [0, {n})")
    keep = gt != ignore_id
    g = gt[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= n):
        raise ValueError(f"ground truth values outside [0, {n}) that are not ignore_id")
    counts = np.bincount(g * n + pred[keep].astype(np.int64), minlength=n * n).reshape(n, n)
    return ConfusionMatrix(cm.counts + counts, cm.ignored + int((~keep).sum()))


@dataclass
class EvalReport:
    per_class_iou: List[Optional[float]]  # None marks an undefined class
    miou: float
    num_images: int = 0
    class_names: Optional[List[str]] = None

    def to_dict(self) -> dict:
        return {"per_class_iou": self.per_class_iou, "miou": self.miou,
                "num_images": self.num_images, "class_names": self.class_names}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(list(d["per_class_iou"]), d["miou"], d.get("num_images", 0), d.get("class_names"))


def iou(cm: ConfusionMatrix, num_images: int = 0, class_names=None) -> EvalReport:
    """Per-class IoU; classes absent from both prediction and ground truth are
    undefined and left out of the mean."""
    c = cm.counts.astype(np.int64)
    tp = np.diag(c)
    denom = c.sum(axis=1) + c.sum(axis=0) - tp
    per_class: List[Optional[float]] = [
        float(tp[k] / denom[k]) if denom[k] > 0 else None for k in range(len(tp))]
    defined = [v for v in per_class if v is not None]
    miou = float(sum(defined) / len(defined)) if defined else float("nan")
    return EvalReport(per_class, miou, num_images, list(class_names) if class_names else None)


def evaluate_predictions(pairs, num_classes: int, ignore_id: int = 255, class_names=None) -> EvalReport:
    cm = ConfusionMatrix.empty(num_classes)
    n = 0
    for pred, gt in pairs:
        cm = accumulate(cm, pred, gt, ignore_id)
        n += 1
    return iou(cm, n, class_names)


# ---------------------------------------------------------------------------
# reports

def _fmt(v: Optional[float]) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}"


def format_table(reports: Mapping[str, EvalReport], baseline: Optional[str] = None,
                 reference: Optional[str] = None, per_class: bool = True,
                 delta_names: Optional[Mapping[str, str]] = None, hide: Sequence[str] = ()) -> str:
    """Plain-text table: one row per report, mIoU and optional delta columns.

    ``baseline`` and ``reference`` name rows to subtract; each adds a
    ``delta_<name>`` column (mIoU points). ``delta_names`` maps a row name to
    a shorter column suffix. Reports named in ``hide`` feed delta columns but
    get no row of their own.
    """
    delta_names = delta_names or {}
    names = [n for n in reports if n not in hide]
    first = reports[names[0]]
    class_names = first.class_names or [str(i) for i in range(len(first.per_class_iou))]
    header = ["Component", "mIoU"]
    deltas = [r for r in (baseline, reference) if r is not None and len(reports) > 1]
    for d in deltas:
        if d not in reports:
            raise KeyError(f"delta reference {d!r} is not among the reports")
        header.append(f"delta_{delta_names.get(d, d)}")
    if per_class:
        header += list(class_names)
    rows = [header]
    for name in names:
        r = reports[name]
        row = [name, _fmt(r.miou)]
        for d in deltas:
            row.append(f"{100 * (r.miou - reports[d].miou):+.2f}")
        if per_class:
            row += [_fmt(v) for v in r.per_class_iou]
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for k, row in enumerate(rows):
        lines.append(" | ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                                for i, cell in enumerate(row)).rstrip())
        if k == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def plot_reports(reports: Mapping[str, EvalReport], path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(reports)
    first = reports[names[0]]
    class_names = first.class_names or [str(i) for i in range(len(first.per_class_iou))]
    x = np.arange(len(class_names) + 1)
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(max(6, len(x) * 0.6 * max(1, len(names) / 2)), 3.5))
    for k, name in enumerate(names):
        r = reports[name]
        vals = [v if v is not None else 0.0 for v in r.per_class_iou] + [r.miou]
        ax.bar(x + k * width - 0.4 + width / 2, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(list(class_names) + ["mIoU"], rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def render_report(reports: Mapping[str, EvalReport], out_dir, baseline: Optional[str] = None,
                  reference: Optional[str] = None, plot: bool = True,
                  delta_names: Optional[Mapping[str, str]] = None,
                  hide: Sequence[str] = ()) -> Dict[str, Path]:
    """Write ``report.txt``, ``report.json`` and ``report.png`` to ``out_dir``."""
    if not reports:
        raise ValueError("need at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {"table": out_dir / "report.txt", "json": out_dir / "report.json"}
    files["table"].write_text(format_table(reports, baseline, reference, delta_names=delta_names,
                                           hide=hide))
    doc = {"format_version": 1, "baseline": baseline, "reference": reference,
           "reports": {k: v.to_dict() for k, v in reports.items()}}
    files["json"].write_text(json.dumps(doc, indent=2) + "\n")
    if plot:
        files["plot"] = out_dir / "report.png"
        plot_reports(reports, files["plot"])
    return files
