"""Training loop, checkpointing, evaluation and the attention/multi-task ablation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import annotate as ann
from .decode import DEFAULT_K, DEFAULT_SCORE_THRESH, Detection, detect_batch
from .evalkit import (DEFAULT_IOU, PRCurve, mean_average_precision, plot_pr_curves, pooled_curve,
                      write_pr_csv)
from .losses import LossInputError, bce_seg, focal_heatmap, l1_sparse, mse_seg, splat_targets, total_loss
from .net import STRIDE, ModelConfig, SpotNet, frames_to_tensor, load_checkpoint, save_checkpoint
from .videogen import SceneConfig, VideoSequence, gen_sequence

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("heat", "off", "seg", "wh", "total")
ABLATION_ROWS = (
    ("attention+multitask", True, True),
    ("multitask", False, True),
    ("baseline", False, False),
)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 2.5e-4
    batch_size: int = 4
    n_iters: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    seg_weight: float = 1.0
    wh_weight: float = 0.1
    grad_clip: float = 10.0
    flip_augment: bool = False
    seg_loss: str = "bce"

    def validate(self) -> None:
        self.model.validate()
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.n_iters < 1:
            raise ValueError("batch_size and n_iters must be >= 1")
        if self.seg_loss not in ("bce", "mse"):
            raise ValueError(f"seg_loss must be 'bce' or 'mse', got {self.seg_loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        return cls(model=model, **d)


@dataclass
class DetectionDataset:
    images: torch.Tensor  # (N, 3, H, W) in [0, 1]
    boxes: list[list[tuple]]  # per frame (class, x1, y1, x2, y2)
    masks: torch.Tensor | None = None  # (N, 1, H, W) in {0, 1}
    n_classes: int = 2

    def __post_init__(self):
        if len(self.boxes) != self.images.shape[0]:
            raise ValueError("one box list per image required")
        if self.masks is not None and self.masks.shape[0] != self.images.shape[0]:
            raise ValueError("one mask per image required")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.images.shape[-2:])

    def gt_by_frame(self) -> dict[int, list[tuple]]:
        return {i: list(b) for i, b in enumerate(self.boxes)}

    @classmethod
    def from_sequences(cls, seqs: list[VideoSequence], masks: list[list[np.ndarray]] | None = None,
                       frames: list[int] | None = None, n_classes: int = 2) -> "DetectionDataset":
        imgs, boxes, ms = [], [], []
        for si, seq in enumerate(seqs):
            idx = range(len(seq)) if frames is None else frames
            for t in idx:
                imgs.append(seq.frames[t])
                boxes.append(list(seq.gt_boxes[t]))
                if masks is not None:
                    ms.append(masks[si][t])
        mt = None
        if masks is not None:
            mt = torch.from_numpy(np.stack(ms).astype(np.float32))[:, None]
        return cls(frames_to_tensor(imgs), boxes, mt, n_classes)

    def subset(self, idx) -> "DetectionDataset":
        idx = list(idx)
        return DetectionDataset(self.images[idx], [self.boxes[i] for i in idx],
                                None if self.masks is None else self.masks[idx], self.n_classes)


def synthetic_dataset(scene: SceneConfig = SceneConfig(), frames: list[int] | None = None,
                      annotate_mode: str | None = "auto") -> DetectionDataset:
    """Generate one sequence, annotate it with the matching motion path, keep ``frames``."""
    seq = gen_sequence(scene)
    masks = None
    if annotate_mode is not None:
        mode = annotate_mode if annotate_mode != "auto" else ("fixed" if scene.camera_pan is None else "moving")
        masks = [ann.annotate_sequence(seq, mode)]
    if frames is None:
        start = ann.BgParams().warmup_frames if scene.camera_pan is None else 0
        frames = list(range(start, len(seq)))
    return DetectionDataset.from_sequences([seq], masks, frames)


@dataclass
class _Batch:
    images: torch.Tensor
    masks: torch.Tensor | None
    heatmap: torch.Tensor
    centers: np.ndarray  # (M, 3) b, cy, cx
    wh: np.ndarray
    offset: np.ndarray


def _flip(images, masks, boxes):
    w = images.shape[-1]
    images = images.flip(-1)
    masks = None if masks is None else masks.flip(-1)
    boxes = [[(c, w - x2, y1, w - x1, y2) for c, x1, y1, x2, y2 in bs] for bs in boxes]
    return images, masks, boxes


def make_batch(ds: DetectionDataset, idx, flip: np.ndarray | None = None) -> _Batch:
    idx = list(idx)
    images = ds.images[idx]
    masks = None if ds.masks is None else ds.masks[idx]
    boxes = [ds.boxes[i] for i in idx]
    if flip is not None and flip.any():
        imgs, msk, bxs = [], [], []
        for j in range(len(idx)):
            im, m, b = images[j:j + 1], None if masks is None else masks[j:j + 1], [boxes[j]]
            if flip[j]:
                im, m, b = _flip(im, m, b)
            imgs.append(im)
            msk.append(m)
            bxs.extend(b)
        images = torch.cat(imgs)
        masks = None if masks is None else torch.cat(msk)
        boxes = bxs
    h, w = images.shape[-2:]
    out_shape = (h // STRIDE, w // STRIDE)
    heats, centers, whs, offs = [], [], [], []
    for b, bs in enumerate(boxes):
        t = splat_targets(bs, out_shape, ds.n_classes)
        heats.append(t.heatmap)
        centers.extend((b, cy, cx) for cy, cx in t.centers)
        whs.append(t.wh)
        offs.append(t.offset)
    return _Batch(images, masks, torch.from_numpy(np.stack(heats)),
                  np.asarray(centers, np.int64).reshape(-1, 3),
                  np.concatenate(whs).reshape(-1, 2), np.concatenate(offs).reshape(-1, 2))


def compute_losses(model: SpotNet, batch: _Batch, cfg: TrainConfig):
    out = model(batch.images)
    heat = focal_heatmap(out.heatmap, batch.heatmap)
    off = l1_sparse(out.offset, batch.offset, batch.centers)
    wh = l1_sparse(out.wh, batch.wh, batch.centers)
    if cfg.model.multitask_enabled:
        seg_fn = bce_seg if cfg.seg_loss == "bce" else mse_seg
        seg = seg_fn(out.attention, batch.masks)
    else:
        seg = torch.zeros((), dtype=heat.dtype)
    return total_loss(heat, off, seg, wh, multitask=cfg.model.multitask_enabled,
                      seg_weight=cfg.seg_weight, wh_weight=cfg.wh_weight)


@dataclass
class TrainResult:
    model: SpotNet
    log: list[dict]
    checkpoint: Path | None = None

    def trace(self, column: str = "total") -> np.ndarray:
        return np.asarray([row[column] for row in self.log])


def smoothing_window(n: int) -> int:
    return max(1, min(50, n // 5))


def smoothed_endpoints(trace, window: int | None = None) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` values of a loss trace."""
    trace = np.asarray(trace, dtype=np.float64)
    window = window or smoothing_window(len(trace))
    return float(trace[:window].mean()), float(trace[-window:].mean())


def _write_metrics(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration",) + LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["iteration"]] + [f"{r[c]:.8g}" for c in LOSS_COLUMNS])


def train(dataset: DetectionDataset, cfg: TrainConfig, out_dir: str | Path | None = None,
          progress_every: int = 0) -> TrainResult:
    """Adam on the weighted total loss; deterministic for a fixed seed."""
    cfg.validate()
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if cfg.model.multitask_enabled and dataset.masks is None:
        raise TrainingError("multitask training needs annotation masks but the dataset has none")
    if cfg.model.n_classes != dataset.n_classes:
        raise TrainingError(f"model has {cfg.model.n_classes} classes, dataset {dataset.n_classes}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = SpotNet(cfg.model)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    order: list[int] = []
    ckpt_path = None
    extra = {"train_config": cfg.to_dict()}
    for it in range(1, cfg.n_iters + 1):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(dataset)).tolist())
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        flip = rng.random(len(idx)) < 0.5 if cfg.flip_augment else None
        batch = make_batch(dataset, idx, flip)
        try:
            parts = compute_losses(model, batch, cfg)
        except LossInputError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}; last logged: {rows[-1] if rows else None}") from exc
        if not torch.isfinite(parts.total):
            raise TrainingDiverged(f"iteration {it}: non-finite total loss {parts.as_floats()}")
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        row = {"iteration": it, **parts.as_floats()}
        rows.append(row)
        if progress_every and it % progress_every == 0:
            log.info("iter %d %s", it, " ".join(f"{k}={row[k]:.4f}" for k in LOSS_COLUMNS))
        if out is not None and (it % cfg.checkpoint_every == 0 or it == cfg.n_iters):
            ckpt_path = out / "checkpoint.pt"
            save_checkpoint(ckpt_path, model, extra)
            if it != cfg.n_iters:
                save_checkpoint(out / f"checkpoint_{it:06d}.pt", model, extra)
    model.eval()
    if out is not None:
        _write_metrics(rows, out / "metrics.csv")
    return TrainResult(model, rows, ckpt_path)


@dataclass
class EvalResult:
    map: float
    curves: dict[int, PRCurve]
    pooled: PRCurve
    detections: dict[int, list[Detection]]
    attention: torch.Tensor


def evaluate(model: SpotNet, dataset: DetectionDataset, iou_min: float = DEFAULT_IOU,
             k: int = DEFAULT_K, score_thresh: float = DEFAULT_SCORE_THRESH, batch_size: int = 8) -> EvalResult:
    dets: dict[int, list[Detection]] = {}
    atts = []
    for s in range(0, len(dataset), batch_size):
        d, a = detect_batch(dataset.images[s:s + batch_size], model, k, score_thresh)
        dets.update({s + i: v for i, v in enumerate(d)})
        atts.append(a)
    gts = dataset.gt_by_frame()
    m, curves = mean_average_precision(dets, gts, iou_min=iou_min)
    return EvalResult(m, curves, pooled_curve(dets, gts, iou_min), dets, torch.cat(atts))


@dataclass
class AblationRow:
    name: str
    attention: bool
    multitask: bool
    map: float
    ap_per_class: dict[int, float]
    loss_initial: float
    loss_final: float
    checkpoint: str | None = None

    @property
    def loss_ratio(self) -> float:
        return self.loss_final / self.loss_initial if self.loss_initial else math.inf


@dataclass
class AblationReport:
    rows: list[AblationRow]
    iou_min: float
    eval_frames: int
    curves: dict[str, PRCurve] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iou_min": self.iou_min,
            "eval_frames": self.eval_frames,
            "rows": [{**asdict(r), "loss_ratio": r.loss_ratio} for r in self.rows],
        }

    def table(self) -> str:
        lines = [f"{'Attention':>9} | {'Multi-Task':>10} | mAP@{self.iou_min:g} | loss first->last"]
        for r in self.rows:
            lines.append(f"{'x' if r.attention else '':>9} | {'x' if r.multitask else '':>10} | "
                         f"{100 * r.map:7.2f}% | {r.loss_initial:.3f} -> {r.loss_final:.3f}")
        return "\n".join(lines)


def ablate(train_set: DetectionDataset, eval_set: DetectionDataset, base_cfg: TrainConfig,
           out_dir: str | Path | None = None, iou_min: float = DEFAULT_IOU) -> AblationReport:
    """Train the three attention / multi-task rows with identical seeds and evaluate each."""
    out = Path(out_dir) if out_dir is not None else None
    rows, curves = [], {}
    for name, att, mt in ABLATION_ROWS:
        cfg = replace(base_cfg, model=replace(base_cfg.model, attention_enabled=att, multitask_enabled=mt))
        row_dir = out / name if out is not None else None
        log.info("ablation row %s", name)
        res = train(train_set, cfg, row_dir)
        ev = evaluate(res.model, eval_set, iou_min)
        first, last = smoothed_endpoints(res.trace())
        rows.append(AblationRow(name, att, mt, ev.map, {c: cv.ap for c, cv in ev.curves.items()},
                                first, last, str(res.checkpoint) if res.checkpoint else None))
        curves[name] = ev.pooled
    report = AblationReport(rows, iou_min, len(eval_set), curves)
    if out is not None:
        write_ablation(report, out)
    return report


def write_ablation(report: AblationReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(report.to_dict(), indent=1))
    (out / "ablation.txt").write_text(report.table() + "\n")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "attention", "multitask", "map", "loss_initial", "loss_final", "checkpoint"])
        for r in report.rows:
            w.writerow([r.name, int(r.attention), int(r.multitask), f"{r.map:.6f}",
                        f"{r.loss_initial:.6f}", f"{r.loss_final:.6f}", r.checkpoint or ""])
    write_pr_csv(report.curves, out / "pr_curves.csv")
    plot_pr_curves(report.curves, out / "pr_curves.png", f"Ablation, IoU >= {report.iou_min:g}")


def reload_and_evaluate(checkpoint: str | Path, dataset: DetectionDataset, iou_min: float = DEFAULT_IOU) -> EvalResult:
    model, _ = load_checkpoint(checkpoint)
    return evaluate(model, dataset, iou_min)
