"""Deterministic synthetic traffic-like scenes with exact ground truth.

Every frame comes with tight boxes and the exact set of rendered object
pixels, so the motion annotators and the detector can be scored against
a perfect oracle.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

STRIDE = 4
KIND_TO_CLASS = {"rectangle": 0, "ellipse": 1}
CLASS_NAMES = ("rectangle", "ellipse")


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (128, 128)
    n_objects: int = 3
    object_kinds: tuple[str, ...] = ("rectangle", "ellipse")
    object_speed_range: tuple[float, float] = (1.0, 2.5)
    object_size_range: tuple[int, int] = (14, 30)
    # None for a fixed camera, otherwise (dx, dy) px/frame
    camera_pan: tuple[float, float] | None = None
    background: str = "textured-noise"
    n_frames: int = 40
    noise_sigma: float = 3.0
    seed: int = 0

    @property
    def camera_motion(self) -> str:
        return "none" if self.camera_pan is None else "pan"

    def validate(self) -> None:
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % STRIDE or w % STRIDE:
            raise SceneConfigError(f"image_size {self.image_size} must be positive and divisible by {STRIDE}")
        if self.n_frames < 2:
            raise SceneConfigError(f"n_frames must be >= 2, got {self.n_frames}")
        if self.n_objects < 0:
            raise SceneConfigError(f"n_objects must be >= 0, got {self.n_objects}")
        if not self.object_kinds:
            raise SceneConfigError("object_kinds is empty")
        unknown = set(self.object_kinds) - set(KIND_TO_CLASS)
        if unknown:
            raise SceneConfigError(f"unknown object kinds {sorted(unknown)}")
        lo, hi = self.object_size_range
        if lo < 4 or hi < lo:
            raise SceneConfigError(f"object_size_range {self.object_size_range} must satisfy 4 <= min <= max")
        if hi > min(h, w):
            raise SceneConfigError(f"object_size_range max {hi} exceeds image size {self.image_size}")
        slo, shi = self.object_speed_range
        if slo < 0 or shi < slo:
            raise SceneConfigError(f"object_speed_range {self.object_speed_range} must satisfy 0 <= min <= max")
        if self.background not in ("flat", "textured-noise"):
            raise SceneConfigError(f"background must be 'flat' or 'textured-noise', got {self.background!r}")
        if self.noise_sigma < 0:
            raise SceneConfigError("noise_sigma must be >= 0")
        if self.camera_pan is not None and len(self.camera_pan) != 2:
            raise SceneConfigError("camera_pan must be (dx, dy)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera_motion"] = self.camera_motion
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d.pop("camera_motion", None)
        for key in ("image_size", "object_speed_range", "object_size_range", "object_kinds"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("camera_pan") is not None:
            d["camera_pan"] = tuple(d["camera_pan"])
        return cls(**d)


Box = tuple[int, int, int, int, int]  # class_id, x1, y1, x2, y2 (x2/y2 exclusive)


@dataclass
class VideoSequence:
    frames: list[np.ndarray]
    gt_boxes: list[list[Box]]
    oracle_masks: list[np.ndarray]
    config: SceneConfig | None = None
    name: str = ""

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]


@dataclass
class _Object:
    kind: str
    w: int
    h: int
    x: float
    y: float
    vx: float
    vy: float
    texture: np.ndarray = field(repr=False)


def _background_canvas(cfg: SceneConfig, rng: np.random.Generator, ch: int, cw: int) -> np.ndarray:
    base = rng.uniform(90, 150, size=3)
    if cfg.background == "flat":
        return np.broadcast_to(base, (ch, cw, 3)).astype(np.float32).copy()
    noise = rng.normal(0.0, 1.0, size=(ch, cw, 3)).astype(np.float32)
    noise = cv2.GaussianBlur(noise, (0, 0), sigmaX=2.0)
    noise /= noise.std() + 1e-8
    return base.astype(np.float32) + 28.0 * noise


def _object_texture(rng: np.random.Generator, w: int, h: int, bg_mean: float) -> np.ndarray:
    # dark or bright body so objects always contrast with the mid-gray background
    level = rng.uniform(20, 55) if rng.random() < 0.5 else rng.uniform(195, 235)
    tint = rng.uniform(-15, 15, size=3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    period = rng.uniform(5, 9)
    stripes = 12.0 * np.sin(2 * np.pi * (xx + 0.7 * yy) / period)
    tex = level + tint[None, None, :] + stripes[..., None]
    return tex.astype(np.float32)


def _shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5 - w / 2) / (w / 2)
    v = (yy + 0.5 - h / 2) / (h / 2)
    return u * u + v * v <= 1.0


def _bounce(pos: float, vel: float, extent: int, limit: int) -> tuple[float, float]:
    pos += vel
    hi = limit - extent
    if pos < 0:
        pos, vel = -pos, -vel
    elif pos > hi:
        pos, vel = 2 * hi - pos, -vel
    return min(max(pos, 0.0), float(hi)), vel


def gen_sequence(config: SceneConfig, name: str = "") -> VideoSequence:
    """Render a scene; objects move at constant velocity and bounce off the frame edges."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w = config.image_size
    n = config.n_frames
    pan = config.camera_pan or (0.0, 0.0)
    pad_x = int(np.ceil(abs(pan[0]) * (n - 1)))
    pad_y = int(np.ceil(abs(pan[1]) * (n - 1)))
    canvas = _background_canvas(config, rng, h + pad_y, w + pad_x)
    bg_mean = float(canvas.mean())

    kinds = sorted(config.object_kinds)
    objects = []
    for _ in range(config.n_objects):
        kind = kinds[int(rng.integers(len(kinds)))]
        ow = int(rng.integers(config.object_size_range[0], config.object_size_range[1] + 1))
        oh = int(rng.integers(config.object_size_range[0], config.object_size_range[1] + 1))
        speed = rng.uniform(*config.object_speed_range)
        angle = rng.uniform(0, 2 * np.pi)
        objects.append(_Object(
            kind=kind, w=ow, h=oh,
            x=float(rng.uniform(0, w - ow)), y=float(rng.uniform(0, h - oh)),
            vx=float(speed * np.cos(angle)), vy=float(speed * np.sin(angle)),
            texture=_object_texture(rng, ow, oh, bg_mean),
        ))

    frames, boxes, masks = [], [], []
    for t in range(n):
        ox = int(round(t * pan[0])) if pan[0] >= 0 else pad_x + int(round(t * pan[0]))
        oy = int(round(t * pan[1])) if pan[1] >= 0 else pad_y + int(round(t * pan[1]))
        img = canvas[oy:oy + h, ox:ox + w].copy()
        oracle = np.zeros((h, w), dtype=bool)
        frame_boxes = []
        for obj in objects:
            if t > 0:
                obj.x, obj.vx = _bounce(obj.x, obj.vx, obj.w, w)
                obj.y, obj.vy = _bounce(obj.y, obj.vy, obj.h, h)
            x0, y0 = int(round(obj.x)), int(round(obj.y))
            shape = _shape_mask(obj.kind, obj.w, obj.h)
            region = img[y0:y0 + obj.h, x0:x0 + obj.w]
            region[shape] = obj.texture[shape]
            oracle[y0:y0 + obj.h, x0:x0 + obj.w] |= shape
            ys, xs = np.nonzero(shape)
            frame_boxes.append((KIND_TO_CLASS[obj.kind],
                                x0 + int(xs.min()), y0 + int(ys.min()),
                                x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1))
        if config.noise_sigma > 0:
            img = img + rng.normal(0.0, config.noise_sigma, size=img.shape).astype(np.float32)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        boxes.append(frame_boxes)
        masks.append(oracle)
    return VideoSequence(frames=frames, gt_boxes=boxes, oracle_masks=masks, config=config, name=name)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def boxes_to_records(gt_boxes: list[list[Box]]) -> list[dict]:
    return [
        {"frame": i, "objects": [{"class": c, "x1": x1, "y1": y1, "x2": x2, "y2": y2}
                                 for c, x1, y1, x2, y2 in frame]}
        for i, frame in enumerate(gt_boxes)
    ]


def records_to_boxes(records: list[dict]) -> list[list[Box]]:
    out: list[list[Box]] = [[] for _ in range(len(records))]
    for rec in records:
        out[rec["frame"]] = [(o["class"], o["x1"], o["y1"], o["x2"], o["y2"]) for o in rec["objects"]]
    return out


def write_sequence(seq: VideoSequence, directory: str | Path) -> dict:
    """Write frames, oracle masks, gt.json and the sequence.json manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (frame, mask) in enumerate(zip(seq.frames, seq.oracle_masks)):
        fpath = d / f"frame_{i:06d}.png"
        mpath = d / f"mask_{i:06d}.png"
        Image.fromarray(frame).save(fpath)
        Image.fromarray(mask.astype(np.uint8) * 255).save(mpath)
        entries.append({"frame": i, "image": fpath.name, "mask": mpath.name,
                        "image_sha256": _sha256(fpath), "mask_sha256": _sha256(mpath)})
    gt_path = d / "gt.json"
    gt_path.write_text(json.dumps(boxes_to_records(seq.gt_boxes), indent=1))
    manifest = {
        "name": seq.name or d.name,
        "n_frames": len(seq),
        "image_size": list(seq.shape),
        "config": seq.config.to_dict() if seq.config else None,
        "gt": gt_path.name,
        "gt_sha256": _sha256(gt_path),
        "frames": entries,
    }
    (d / "sequence.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_sequence(directory: str | Path) -> VideoSequence:
    d = Path(directory)
    manifest = json.loads((d / "sequence.json").read_text())
    frames, masks = [], []
    for entry in manifest["frames"]:
        frames.append(np.asarray(Image.open(d / entry["image"])))
        mpath = d / entry["mask"]
        masks.append(np.asarray(Image.open(mpath)) > 127 if mpath.exists() else None)
    boxes = records_to_boxes(json.loads((d / manifest["gt"]).read_text()))
    cfg = SceneConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    return VideoSequence(frames=frames, gt_boxes=boxes, oracle_masks=masks, config=cfg,
                         name=manifest.get("name", d.name))
