"""Per-map confusion counts, precision/recall/accuracy and PR sweeps.

Zero denominators score 1.0: an empty prediction on an empty ground truth
is perfect, not undefined.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .labels import CHANNELS, ChangeMaps

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(21))
CSV_NOTE = "# precision=1 when tp+fp=0; recall=1 when tp+fn=0; scores binarized with >= threshold"
CSV_HEADER = "channel,threshold,precision,recall,accuracy"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _as_stack(maps) -> np.ndarray:
    """ChangeMaps, list of ChangeMaps or array -> (n, 4, h, w) array."""
    if isinstance(maps, ChangeMaps):
        return maps.stack()[None]
    if isinstance(maps, (list, tuple)):
        return np.stack([m.stack() if isinstance(m, ChangeMaps) else np.asarray(m) for m in maps])
    maps = np.asarray(maps)
    return maps[None] if maps.ndim == 3 else maps


def confusion_stack(pred, gt) -> list[ConfusionCounts]:
    pred = _as_stack(pred).astype(bool)
    gt = _as_stack(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    axes = (0, 2, 3)
    tp = np.sum(pred & gt, axis=axes)
    fp = np.sum(pred & ~gt, axis=axes)
    fn = np.sum(~pred & gt, axis=axes)
    tn = np.sum(~pred & ~gt, axis=axes)
    return [ConfusionCounts(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(tp, fp, tn, fn)]


def confusion(pred: ChangeMaps, gt: ChangeMaps) -> list[ConfusionCounts]:
    """Counts for each channel in (removed, added, changed, notchanged) order."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction maps {pred.shape} and ground truth {gt.shape} differ")
    return confusion_stack(pred, gt)


def metrics(c: ConfusionCounts) -> tuple[float, float, float]:
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    accuracy = (c.tp + c.tn) / c.total if c.total else 1.0
    return precision, recall, accuracy


@dataclass
class CurvePoint:
    threshold: float
    precision: float
    recall: float
    accuracy: float


@dataclass
class PRCurve:
    points: dict[str, list[CurvePoint]] = field(default_factory=lambda: {c: [] for c in CHANNELS})

    def channel(self, name):
        return self.points[name]


def check_thresholds(thresholds) -> list[float]:
    ts = [float(t) for t in thresholds]
    if any(not 0.0 <= t <= 1.0 for t in ts):
        raise ValueError("thresholds must lie in [0, 1]")
    if any(a >= b for a, b in zip(ts, ts[1:])):
        raise ValueError("thresholds must be strictly increasing")
    return ts


class SweepAccumulator:
    """Sums per-threshold confusion counts over batches of (scores, gt)."""

    def __init__(self, thresholds=DEFAULT_THRESHOLDS):
        self.thresholds = check_thresholds(thresholds)
        self.counts = [[ConfusionCounts()] * 4 for _ in self.thresholds]

    def update(self, scores, gt) -> None:
        scores = _as_stack(scores)
        gt = _as_stack(gt)
        for i, t in enumerate(self.thresholds):
            c = confusion_stack(scores >= t, gt)
            self.counts[i] = [a + b for a, b in zip(self.counts[i], c)]

    def curve(self) -> PRCurve:
        curve = PRCurve()
        for t, counts in zip(self.thresholds, self.counts):
            for name, c in zip(CHANNELS, counts):
                curve.points[name].append(CurvePoint(t, *metrics(c)))
        return curve


def pr_sweep(scores, gt, thresholds=DEFAULT_THRESHOLDS) -> PRCurve:
    """Raw per-channel thresholding (notchanged is not recomputed)."""
    acc = SweepAccumulator(thresholds)
    acc.update(scores, gt)
    return acc.curve()


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def emit_csv(curve: PRCurve, path) -> None:
    lines = [CSV_NOTE, CSV_HEADER]
    for name in CHANNELS:
        for p in curve.points.get(name, []):
            lines.append(f"{name},{p.threshold:g},{_fmt(p.precision)},{_fmt(p.recall)},"
                         f"{_fmt(p.accuracy)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


COLORS = {"removed": "#d62728", "added": "#2ca02c", "changed": "#1f77b4", "notchanged": "#7f7f7f"}


def emit_svg(curve: PRCurve, path, title: str = "precision-recall") -> None:
    """Recall on x, precision on y, unit axes, one polyline per channel."""
    size, margin = 360, 50
    span = size - 2 * margin

    def xy(recall, precision):
        return margin + recall * span, size - margin - precision * span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
             f'<text x="{size / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for i in range(11):
        v = i / 10
        x, _ = xy(v, 0)
        _, y = xy(0, v)
        parts.append(f'<line x1="{x:.1f}" y1="{margin}" x2="{x:.1f}" y2="{size - margin}" '
                     f'stroke="#eee"/>')
        parts.append(f'<line x1="{margin}" y1="{y:.1f}" x2="{size - margin}" y2="{y:.1f}" '
                     f'stroke="#eee"/>')
        if i % 5 == 0:
            parts.append(f'<text x="{x:.1f}" y="{size - margin + 15}" text-anchor="middle" '
                         f'font-size="10">{v:g}</text>')
            parts.append(f'<text x="{margin - 5}" y="{y + 3:.1f}" text-anchor="end" '
                         f'font-size="10">{v:g}</text>')
    parts.append(f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" '
                 f'stroke="black"/>')
    parts.append(f'<text x="{size / 2}" y="{size - 12}" text-anchor="middle" font-size="12">'
                 f'recall</text>')
    parts.append(f'<text x="14" y="{size / 2}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 14 {size / 2})">precision</text>')
    for k, name in enumerate(CHANNELS):
        pts = curve.points.get(name, [])
        color = COLORS[name]
        if pts:
            coords = " ".join("%.2f,%.2f" % xy(p.recall, p.precision) for p in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                         f'stroke-width="1.5"/>')
        ly = margin + 12 + 14 * k
        parts.append(f'<line x1="{margin + 8}" y1="{ly - 4}" x2="{margin + 24}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{margin + 28}" y="{ly}" font-size="11">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
