"""Training losses: segmentation BCE, penalty-reduced focal heatmap loss,
sparse L1 regressions, Gaussian target splatting and the weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-7
WH_WEIGHT = 0.1
SEG_WEIGHT = 1.0


class LossInputError(ValueError):
    pass


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise LossInputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_seg(x: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean binary cross-entropy between predicted probabilities ``x`` and labels ``y``."""
    x = torch.as_tensor(x)
    y = torch.as_tensor(y, dtype=x.dtype)
    _check_shapes(x, y, "bce_seg")
    x = x.clamp(eps, 1 - eps)
    return -(y * torch.log(x) + (1 - y) * torch.log(1 - x)).mean()


def mse_seg(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x)
    y = torch.as_tensor(y, dtype=x.dtype)
    _check_shapes(x, y, "mse_seg")
    return ((x - y) ** 2).mean()


def focal_heatmap(pred: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0,
                  eps: float = EPS) -> torch.Tensor:
    """Penalty-reduced focal loss over all cells, normalized by the object count (min 1)."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    _check_shapes(pred, target, "focal_heatmap")
    p = pred.clamp(eps, 1 - eps)
    pos = target == 1
    pos_term = (1 - p) ** alpha * torch.log(p)
    neg_term = (1 - target) ** beta * p ** alpha * torch.log(1 - p)
    total = torch.where(pos, pos_term, neg_term).sum()
    n_obj = max(int(pos.sum()), 1)
    return -total / n_obj


def l1_sparse(pred_map: torch.Tensor, targets, centers) -> torch.Tensor:
    """Mean absolute error at listed center cells only, over both channels.

    ``pred_map`` is (2, h, w) with ``centers`` as (cy, cx) rows, or
    (B, 2, h, w) with ``centers`` as (b, cy, cx) rows. ``targets`` is (M, 2).
    """
    pred_map = torch.as_tensor(pred_map)
    if pred_map.dim() == 3:
        pred_map = pred_map.unsqueeze(0)
        centers = [(0, *c) for c in np.asarray(centers, dtype=np.int64).reshape(-1, 2).tolist()]
    idx = torch.as_tensor(np.asarray(centers, dtype=np.int64).reshape(-1, 3))
    if idx.shape[0] == 0:
        return pred_map.sum() * 0.0
    bsz, _, h, w = pred_map.shape
    bi, cy, cx = idx[:, 0], idx[:, 1], idx[:, 2]
    if (bi < 0).any() or (bi >= bsz).any() or (cy < 0).any() or (cy >= h).any() or (cx < 0).any() or (cx >= w).any():
        raise LossInputError(f"center index out of bounds for map of shape {tuple(pred_map.shape)}")
    picked = pred_map[bi, :, cy, cx]
    tgt = torch.as_tensor(np.asarray(targets), dtype=pred_map.dtype).reshape(-1, 2)
    return (picked - tgt).abs().mean()


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest corner shift keeping IoU >= ``min_overlap`` (CornerNet's three cases)."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, cy: int, cx: int, radius: int) -> None:
    """Element-wise max of a Gaussian bump into ``heatmap`` (h, w), in place."""
    diameter = 2 * radius + 1
    sigma = diameter / 6
    ys, xs = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    h, w = heatmap.shape
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    left, right = min(cx, radius), min(w - cx, radius + 1)
    region = heatmap[cy - top:cy + bottom, cx - left:cx + right]
    patch = g[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch, out=region)


@dataclass
class Targets:
    heatmap: np.ndarray  # (n_classes, h, w)
    wh: np.ndarray  # (M, 2) width, height in input px
    offset: np.ndarray  # (M, 2) dx, dy in cell units
    centers: np.ndarray  # (M, 2) cy, cx


def splat_targets(boxes, out_shape: tuple[int, int], n_classes: int, stride: int = 4,
                  min_overlap: float = 0.7) -> Targets:
    """Build heatmap, size and offset targets from (class, x1, y1, x2, y2) boxes in input px."""
    oh, ow = out_shape
    img_h, img_w = oh * stride, ow * stride
    heat = np.zeros((n_classes, oh, ow), np.float32)
    wh, off, centers = [], [], []
    for cls, x1, y1, x2, y2 in boxes:
        if x1 < 0 or y1 < 0 or x2 > img_w or y2 > img_h or x2 < x1 or y2 < y1:
            raise LossInputError(f"box {(x1, y1, x2, y2)} outside image {img_w}x{img_h}")
        if not 0 <= cls < n_classes:
            raise LossInputError(f"class id {cls} outside [0, {n_classes})")
        w, h = x2 - x1, y2 - y1
        cx_f, cy_f = (x1 + x2) / 2 / stride, (y1 + y2) / 2 / stride
        cx, cy = min(int(math.floor(cx_f)), ow - 1), min(int(math.floor(cy_f)), oh - 1)
        radius = max(0, int(gaussian_radius(h / stride, w / stride, min_overlap)))
        draw_gaussian(heat[int(cls)], cy, cx, radius)
        wh.append((w, h))
        off.append((cx_f - cx, cy_f - cy))
        centers.append((cy, cx))
    return Targets(heatmap=heat,
                   wh=np.asarray(wh, np.float32).reshape(-1, 2),
                   offset=np.asarray(off, np.float32).reshape(-1, 2),
                   centers=np.asarray(centers, np.int64).reshape(-1, 2))


@dataclass
class LossBreakdown:
    heat: torch.Tensor | float
    off: torch.Tensor | float
    seg: torch.Tensor | float
    wh: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> dict[str, float]:
        out = {}
        for k in ("heat", "off", "seg", "wh", "total"):
            v = getattr(self, k)
            out[k] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def total_loss(heat, off, seg, wh, multitask: bool = True, seg_weight: float = SEG_WEIGHT,
               wh_weight: float = WH_WEIGHT) -> LossBreakdown:
    """Weighted sum heat + off + seg_weight * seg + wh_weight * wh; seg dropped without multitask."""
    for name, v in (("heat", heat), ("off", off), ("seg", seg), ("wh", wh)):
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise LossInputError(f"non-finite {name} loss: {val}")
        if val < 0:
            raise LossInputError(f"negative {name} loss: {val}")
    if not multitask:
        seg = seg * 0.0 if isinstance(seg, torch.Tensor) else 0.0
        tot = heat + off + wh_weight * wh
    elif seg_weight == 1.0:
        tot = heat + off + seg + wh_weight * wh
    else:
        tot = heat + off + seg_weight * seg + wh_weight * wh
    return LossBreakdown(heat=heat, off=off, seg=seg, wh=wh, total=tot)
