"""Detection mAP at a minimum IoU and pixel-level foreground F-measure."""
from __future__ import annotations

import csv
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotate import box_union
from .decode import Detection

DEFAULT_IOU = 0.7
DEFAULT_SEG_THRESH = 0.5


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ax1, ay1, ax2, ay2 = (float(v) for v in a[-4:])
    bx1, by1, bx2, by2 = (float(v) for v in b[-4:])
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


@dataclass
class PRCurve:
    recall: list[float] = field(default_factory=list)
    precision: list[float] = field(default_factory=list)
    ap: float = 0.0
    n_gt: int = 0

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall, self.precision))


def match_detections(dets, gts: Mapping, iou_min: float) -> list[bool]:
    """Greedy matching in descending score; each det takes its best unmatched gt.

    ``dets`` are (frame, score, box) triples, ``gts`` maps frame -> boxes.
    Returns true-positive flags in score order (stable for equal scores).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {f: [False] * len(bs) for f, bs in gts.items()}
    flags = []
    for i in order:
        frame, _, box = dets[i]
        best, best_iou = -1, iou_min
        for j, g in enumerate(gts.get(frame, ())):
            if used[frame][j]:
                continue
            v = iou(box, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[frame][best] = True
        flags.append(best >= 0)
    return flags


def _eleven_point(tp_cum: np.ndarray, n_det: np.ndarray, n_gt: int) -> float:
    # rational arithmetic keeps the result independent of summation order
    total = Fraction(0)
    prec = tp_cum / n_det
    for level in range(11):
        # recall >= level/10, compared in integers to avoid float drift
        ok = 10 * tp_cum >= level * n_gt
        if ok.any():
            best = prec[ok].max()
            idx = np.nonzero(ok & (prec == best))[0]
            total += max(Fraction(int(tp_cum[i]), int(n_det[i])) for i in idx)
    return float(total / 11)


def _continuous(recall: np.ndarray, precision: np.ndarray) -> float:
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


def average_precision(dets, gts: Mapping, iou_min: float = DEFAULT_IOU, method: str = "11point") -> PRCurve:
    """Single-class AP. ``dets``: (frame, score, box); ``gts``: frame -> list of boxes."""
    n_gt = sum(len(v) for v in gts.values())
    dets = list(dets)
    if not dets or n_gt == 0:
        return PRCurve(n_gt=n_gt)
    flags = np.asarray(match_detections(dets, gts, iou_min), dtype=np.int64)
    tp_cum = np.cumsum(flags)
    n_det = np.arange(1, len(flags) + 1)
    recall = tp_cum / n_gt
    precision = tp_cum / n_det
    if method == "11point":
        ap = _eleven_point(tp_cum, n_det, n_gt)
    elif method == "continuous":
        ap = _continuous(recall, precision)
    else:
        raise ValueError(f"unknown AP method {method!r}")
    return PRCurve(recall=recall.tolist(), precision=precision.tolist(), ap=ap, n_gt=n_gt)


def mean_average_precision(dets: Mapping[int, Iterable[Detection]], gts: Mapping[int, Iterable],
                           classes: Iterable[int] | None = None, iou_min: float = DEFAULT_IOU,
                           method: str = "11point") -> tuple[float, dict[int, PRCurve]]:
    """Unweighted mean AP over classes present in ``gts`` (frame -> (class, x1, y1, x2, y2))."""
    gt_classes = sorted({int(g[0]) for boxes in gts.values() for g in boxes})
    if classes is not None:
        gt_classes = [c for c in sorted(set(classes)) if c in gt_classes]
    if not gt_classes:
        raise ValueError("no ground-truth objects of any requested class")
    curves = {}
    for c in gt_classes:
        cgts = {f: [g[1:] for g in boxes if int(g[0]) == c] for f, boxes in gts.items()}
        cdets = [(f, d.score, d.box) for f, ds in dets.items() for d in ds if d.class_id == c]
        curves[c] = average_precision(cdets, cgts, iou_min, method)
    return float(np.mean([cv.ap for cv in curves.values()])), curves


def binarize_and_mask(attention: np.ndarray, dets: Iterable[Detection], thresh: float = DEFAULT_SEG_THRESH) -> np.ndarray:
    """Thresholded attention restricted to the union of detected boxes."""
    if not 0 < thresh < 1:
        raise ValueError(f"thresh must lie in (0, 1), got {thresh}")
    att = np.asarray(attention)
    att = att.reshape(att.shape[-2:])
    return (att >= thresh) & box_union([d.box for d in dets], att.shape)


def f_measure(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def write_pr_csv(curves: Mapping[str, PRCurve], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "recall", "precision"])
        for name, cv in curves.items():
            for r, p in cv.points():
                w.writerow([name, f"{r:.6f}", f"{p:.6f}"])


def plot_pr_curves(curves: Mapping[str, PRCurve], path: str | Path, title: str = "Precision / recall") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, cv in curves.items():
        ax.plot(cv.recall, cv.precision, label=f"{name} (AP {cv.ap:.3f})", drawstyle="steps-post")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def pooled_curve(dets: Mapping[int, Iterable[Detection]], gts: Mapping[int, Iterable],
                 iou_min: float = DEFAULT_IOU) -> PRCurve:
    """Class-aware matching pooled across classes into one curve, for plotting."""
    gts = {f: list(b) for f, b in gts.items()}
    flat_dets, flat_gts = [], {}
    for f, boxes in gts.items():
        for c in {int(g[0]) for g in boxes}:
            flat_gts[(f, c)] = [g[1:] for g in boxes if int(g[0]) == c]
    for f, ds in dets.items():
        for d in ds:
            flat_dets.append(((f, d.class_id), d.score, d.box))
    return average_precision(flat_dets, flat_gts, iou_min)
