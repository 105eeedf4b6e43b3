"""Heatmap peak extraction and box assembly."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.ndimage import maximum_filter

from .net import STRIDE, SpotNet, frames_to_tensor

DEFAULT_K = 100
DEFAULT_SCORE_THRESH = 0.25


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_record(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("class_id")
        return d

    @classmethod
    def from_record(cls, rec: dict) -> "Detection":
        return cls(int(rec["class"]), float(rec["score"]), float(rec["x1"]), float(rec["y1"]),
                   float(rec["x2"]), float(rec["y2"]))


def _as_numpy(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def extract_peaks(heatmap, k: int = DEFAULT_K) -> list[tuple[int, int, int, float]]:
    """Top-k 3x3 local maxima across classes as (class, cy, cx, score).

    A cell is a peak when no 8-neighbour exceeds it, so plateaus keep every
    cell; ties in score go to the top-left-most cell, then the lower class.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    heat = _as_numpy(heatmap).astype(np.float64)
    if heat.ndim == 2:
        heat = heat[None]
    hmax = maximum_filter(heat, size=(1, 3, 3), mode="constant", cval=-np.inf)
    cls, ys, xs = np.nonzero(heat == hmax)
    scores = heat[cls, ys, xs]
    order = np.lexsort((cls, xs, ys, -scores))[:k]
    return [(int(cls[i]), int(ys[i]), int(xs[i]), float(scores[i])) for i in order]


def assemble_boxes(peaks, wh, offset, stride: int = STRIDE, score_thresh: float = DEFAULT_SCORE_THRESH,
                   image_size: tuple[int, int] | None = None) -> list[Detection]:
    """Turn peaks into boxes; ``wh`` and ``offset`` are (2, h, w) maps."""
    wh = _as_numpy(wh)
    offset = _as_numpy(offset)
    if image_size is None:
        image_size = (wh.shape[-2] * stride, wh.shape[-1] * stride)
    img_h, img_w = image_size
    out = []
    for cls, cy, cx, score in peaks:
        if score < score_thresh:
            continue
        w = max(float(wh[0, cy, cx]), 0.0)
        h = max(float(wh[1, cy, cx]), 0.0)
        px = (cx + float(offset[0, cy, cx])) * stride
        py = (cy + float(offset[1, cy, cx])) * stride
        x1 = min(max(px - w / 2, 0.0), img_w)
        x2 = min(max(px + w / 2, 0.0), img_w)
        y1 = min(max(py - h / 2, 0.0), img_h)
        y2 = min(max(py + h / 2, 0.0), img_h)
        if x2 <= x1 or y2 <= y1:
            continue
        out.append(Detection(cls, score, x1, y1, x2, y2))
    return out


@torch.no_grad()
def detect_batch(images: torch.Tensor, model: SpotNet, k: int = DEFAULT_K,
                 score_thresh: float = DEFAULT_SCORE_THRESH,
                 attention_override=None) -> tuple[list[list[Detection]], torch.Tensor]:
    """Detections per image plus the attention maps, for a (B, 3, H, W) batch."""
    was_training = model.training
    model.eval()
    try:
        out = model(images, attention_override=attention_override)
    finally:
        model.train(was_training)
    size = tuple(images.shape[-2:])
    dets = [assemble_boxes(extract_peaks(out.heatmap[i], k), out.wh[i], out.offset[i],
                           score_thresh=score_thresh, image_size=size)
            for i in range(images.shape[0])]
    return dets, out.attention


def detect(image, model: SpotNet, k: int = DEFAULT_K, score_thresh: float = DEFAULT_SCORE_THRESH,
           attention_override=None) -> list[Detection]:
    """Detections for one uint8 (H, W, 3) frame or a (3, H, W) float tensor."""
    if isinstance(image, torch.Tensor):
        batch = image.unsqueeze(0) if image.dim() == 3 else image
    else:
        batch = frames_to_tensor([image])
    return detect_batch(batch, model, k, score_thresh, attention_override)[0][0]


def detections_to_records(per_frame: list[list[Detection]]) -> list[dict]:
    return [{"frame": i, "detections": [d.to_record() for d in dets]} for i, dets in enumerate(per_frame)]


def records_to_detections(records: list[dict]) -> dict[int, list[Detection]]:
    return {int(r["frame"]): [Detection.from_record(d) for d in r["detections"]] for r in records}
