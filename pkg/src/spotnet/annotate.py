"""Semi-supervised foreground labels from motion cues and ground-truth boxes.

Fixed cameras go through an adaptive Gaussian-mixture background model,
moving cameras through dense Farneback flow with the dominant (camera)
motion removed. Either raw mask is then intersected with the frame's
boxes so that only labelled object categories end up as foreground.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .flow import farneback_flow
from .videogen import VideoSequence

_KERNEL = np.ones((3, 3), np.uint8)


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class BgParams:
    n_components: int = 3
    learning_rate: float = 0.01
    # match when |x - mean| < variance_threshold * std
    variance_threshold: float = 2.5
    background_ratio: float = 0.7
    init_variance: float = 15.0 ** 2
    min_variance: float = 4.0
    init_weight: float = 0.05
    warmup_frames: int = 20
    fast_start: bool = False


@dataclass(frozen=True)
class FlowParams:
    mag_threshold: float = 0.8
    pyr_scale: float = 0.5
    levels: int = 3
    winsize: int = 7
    iterations: int = 3
    poly_n: int = 2
    poly_sigma: float = 1.1


def to_gray(frame: np.ndarray) -> np.ndarray:
    if frame.ndim == 2:
        return frame.astype(np.float32)
    return cv2.cvtColor(np.ascontiguousarray(frame), cv2.COLOR_RGB2GRAY).astype(np.float32)


class BgModel:
    """Per-pixel Stauffer-Grimson mixture of ``K`` Gaussians over gray intensity."""

    def __init__(self, first_frame: np.ndarray, params: BgParams = BgParams()):
        self.params = params
        x = to_gray(first_frame)
        k = params.n_components
        h, w = x.shape
        self.mean = np.zeros((h, w, k), np.float64)
        self.var = np.full((h, w, k), params.init_variance, np.float64)
        self.weight = np.zeros((h, w, k), np.float64)
        self.mean[..., 0] = x
        self.weight[..., 0] = 1.0
        self.n_updates = 1

    def _background_components(self) -> np.ndarray:
        # rank by weight / std, take the smallest prefix whose cumulative weight exceeds the ratio
        order = np.argsort(-self.weight / np.sqrt(self.var), axis=-1)
        w_sorted = np.take_along_axis(self.weight, order, axis=-1)
        cum = np.cumsum(w_sorted, axis=-1)
        prev = cum - w_sorted
        in_bg_sorted = prev < self.params.background_ratio
        in_bg = np.zeros_like(in_bg_sorted)
        np.put_along_axis(in_bg, order, in_bg_sorted, axis=-1)
        return in_bg

    def apply(self, frame: np.ndarray) -> np.ndarray:
        """Classify ``frame`` against the current model, then update. Returns bool foreground."""
        p = self.params
        x = to_gray(frame).astype(np.float64)[..., None]
        self.n_updates += 1
        # optional 1/t start; off by default since slow objects get absorbed into the model
        rate = max(p.learning_rate, 1.0 / self.n_updates) if p.fast_start else p.learning_rate

        dist2 = (x - self.mean) ** 2
        match_any = dist2 < (p.variance_threshold ** 2) * self.var
        match_any &= self.weight > 0
        # the best match is the highest-ranked matching component
        score = np.where(match_any, self.weight / np.sqrt(self.var), -np.inf)
        best = np.argmax(score, axis=-1)
        matched = np.isfinite(np.take_along_axis(score, best[..., None], axis=-1))[..., 0]

        in_bg = self._background_components()
        fg = ~(matched & np.take_along_axis(in_bg, best[..., None], axis=-1)[..., 0])

        onehot = np.zeros_like(self.weight, dtype=bool)
        np.put_along_axis(onehot, best[..., None], matched[..., None], axis=-1)
        self.weight = (1 - rate) * self.weight + rate * onehot
        m = onehot
        self.mean = np.where(m, (1 - rate) * self.mean + rate * x, self.mean)
        self.var = np.where(m, (1 - rate) * self.var + rate * (x - self.mean) ** 2, self.var)

        # unmatched pixels replace their least probable component
        miss = ~matched
        if miss.any():
            worst = np.argmin(self.weight / np.sqrt(self.var), axis=-1)
            idx = np.nonzero(miss)
            wk = worst[idx]
            self.mean[idx + (wk,)] = x[idx + (0,)]
            self.var[idx + (wk,)] = p.init_variance
            self.weight[idx + (wk,)] = p.init_weight
        self.weight /= self.weight.sum(axis=-1, keepdims=True)
        np.maximum(self.var, p.min_variance, out=self.var)
        return fg


def _clean(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(np.uint8)
    m = cv2.morphologyEx(m, cv2.MORPH_OPEN, _KERNEL, iterations=1)
    m = cv2.morphologyEx(m, cv2.MORPH_CLOSE, _KERNEL, iterations=1)
    return m.astype(bool)


def bg_subtract_sequence(seq: VideoSequence, params: BgParams = BgParams()) -> list[np.ndarray]:
    """One binary mask per frame; frames before warmup completes are all background."""
    if len(seq) < params.warmup_frames:
        raise AnnotationError(
            f"background subtraction needs at least warmup_frames={params.warmup_frames} frames, got {len(seq)}")
    model = BgModel(seq.frames[0], params)
    h, w = seq.shape
    out = [np.zeros((h, w), bool)]
    for t in range(1, len(seq)):
        fg = model.apply(seq.frames[t])
        out.append(_clean(fg) if t >= params.warmup_frames else np.zeros((h, w), bool))
    return out


def flow_field(frame_t: np.ndarray, frame_t1: np.ndarray, params: FlowParams = FlowParams()) -> np.ndarray:
    """Dense (dx, dy) displacement from ``frame_t`` to ``frame_t1``, shape (H, W, 2)."""
    if frame_t.shape != frame_t1.shape:
        raise AnnotationError(f"frame shapes differ: {frame_t.shape} vs {frame_t1.shape}")
    return farneback_flow(
        to_gray(frame_t), to_gray(frame_t1), levels=params.levels, pyr_scale=params.pyr_scale,
        winsize=params.winsize, iterations=params.iterations, poly_n=params.poly_n,
        poly_sigma=params.poly_sigma)


def residual_magnitude(flow: np.ndarray) -> np.ndarray:
    """Flow magnitude after removing the per-frame median vector (camera motion)."""
    med = np.median(flow.reshape(-1, 2), axis=0)
    return np.linalg.norm(flow - med, axis=-1)


def flow_motion_mask(seq: VideoSequence, mag_threshold: float | None = None,
                     params: FlowParams = FlowParams()) -> list[np.ndarray]:
    if len(seq) < 2:
        raise AnnotationError("flow_motion_mask needs at least 2 frames")
    thr = params.mag_threshold if mag_threshold is None else mag_threshold
    mags = [residual_magnitude(flow_field(seq.frames[t], seq.frames[t + 1], params))
            for t in range(len(seq) - 1)]
    mags.append(mags[-1])
    return [_clean(m > thr) for m in mags]


def box_union(boxes, shape: tuple[int, int]) -> np.ndarray:
    """Pixels whose centers lie inside any box; boxes are (..., x1, y1, x2, y2)."""
    h, w = shape
    out = np.zeros((h, w), bool)
    for b in boxes:
        x1, y1, x2, y2 = (float(v) for v in b[-4:])
        c0 = max(int(np.ceil(x1 - 0.5)), 0)
        c1 = min(int(np.floor(x2 - 0.5)), w - 1)
        r0 = max(int(np.ceil(y1 - 0.5)), 0)
        r1 = min(int(np.floor(y2 - 0.5)), h - 1)
        if c1 >= c0 and r1 >= r0:
            out[r0:r1 + 1, c0:c1 + 1] = True
    return out


def intersect_with_boxes(mask: np.ndarray, boxes) -> np.ndarray:
    return mask.astype(bool) & box_union(boxes, mask.shape[:2])


def annotate_sequence(seq: VideoSequence, mode: str, bg_params: BgParams = BgParams(),
                      flow_params: FlowParams = FlowParams()) -> list[np.ndarray]:
    if mode == "fixed":
        raw = bg_subtract_sequence(seq, bg_params)
    elif mode == "moving":
        raw = flow_motion_mask(seq, params=flow_params)
    else:
        raise AnnotationError(f"mode must be 'fixed' or 'moving', got {mode!r}")
    return [intersect_with_boxes(m, b) for m, b in zip(raw, seq.gt_boxes)]


def subset_violations(masks, gt_boxes) -> int:
    """Count annotated foreground pixels falling outside every ground-truth box."""
    return int(sum((m & ~box_union(b, m.shape)).sum() for m, b in zip(masks, gt_boxes)))


def write_annotations(masks, directory: str | Path, mode: str, bg_params: BgParams,
                      flow_params: FlowParams, extra: dict | None = None) -> list[str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, m in enumerate(masks):
        name = f"annot_{i:06d}.png"
        Image.fromarray(m.astype(np.uint8) * 255).save(d / name)
        names.append(name)
    info = {"mode": mode, "bg_params": asdict(bg_params), "flow_params": asdict(flow_params),
            "n_frames": len(masks)}
    info.update(extra or {})
    (d / "annot_params.json").write_text(json.dumps(info, indent=1))
    return names


def read_annotations(directory: str | Path) -> list[np.ndarray]:
    d = Path(directory)
    n = json.loads((d / "annot_params.json").read_text())["n_frames"]
    return [np.asarray(Image.open(d / f"annot_{i:06d}.png")) > 127 for i in range(n)]
