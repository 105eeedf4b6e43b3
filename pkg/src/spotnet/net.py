"""Stacked-hourglass keypoint detector with a segmentation head used as attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

STRIDE = 4
CHECKPOINT_FORMAT = "spotnet-checkpoint"
CHECKPOINT_VERSION = 1
# initial heatmap probability of 0.1
HEATMAP_PRIOR_BIAS = -math.log((1 - 0.1) / 0.1)


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_stacks: int = 2
    base_channels: int = 32
    n_classes: int = 2
    attention_enabled: bool = True
    multitask_enabled: bool = True
    hourglass_depth: int = 4

    def validate(self) -> None:
        if self.n_stacks < 1:
            raise ModelConfigError(f"n_stacks must be >= 1, got {self.n_stacks}")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ModelConfigError(f"base_channels must be a positive multiple of 4, got {self.base_channels}")
        if self.n_classes < 1:
            raise ModelConfigError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.hourglass_depth < 1:
            raise ModelConfigError(f"hourglass_depth must be >= 1, got {self.hourglass_depth}")
        if self.attention_enabled and not self.multitask_enabled:
            raise ModelConfigError("attention_enabled requires multitask_enabled")

    @property
    def name(self) -> str:
        if self.attention_enabled:
            return "attention+multitask"
        return "multitask" if self.multitask_enabled else "baseline"


@dataclass
class NetworkOutput:
    attention: torch.Tensor  # (B, 1, H, W) in (0, 1)
    heatmap: torch.Tensor  # (B, n_classes, H/4, W/4) in (0, 1)
    wh: torch.Tensor  # (B, 2, H/4, W/4) width, height in input px
    offset: torch.Tensor  # (B, 2, H/4, W/4) dx, dy in cell units
    seg_logits: torch.Tensor | None = None


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch // 4) or 1, ch)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1):
        super().__init__(nn.Conv2d(cin, cout, k, stride, k // 2, bias=False), _norm(cout), nn.ReLU(inplace=True))


class Residual(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _norm(cout)
        self.skip = (nn.Identity() if stride == 1 and cin == cout else
                     nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout)))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + self.skip(x))


class Hourglass(nn.Module):
    def __init__(self, depth: int, ch: int):
        super().__init__()
        self.up1 = Residual(ch, ch)
        self.low1 = Residual(ch, ch)
        self.low2 = Hourglass(depth - 1, ch) if depth > 1 else Residual(ch, ch)
        self.low3 = Residual(ch, ch)

    def forward(self, x):
        up1 = self.up1(x)
        low = self.low3(self.low2(self.low1(F.max_pool2d(x, 2))))
        return up1 + F.interpolate(low, scale_factor=2, mode="nearest")


class Backbone(nn.Module):
    """Stride-4 stem followed by ``n_stacks`` hourglass modules; returns the last stack's features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.base_channels
        self.depth = cfg.hourglass_depth
        self.stem = nn.Sequential(ConvNormAct(3, ch // 2, k=7, stride=2), Residual(ch // 2, ch, stride=2))
        self.hourglasses = nn.ModuleList(Hourglass(cfg.hourglass_depth, ch) for _ in range(cfg.n_stacks))
        self.out_convs = nn.ModuleList(ConvNormAct(ch, ch) for _ in range(cfg.n_stacks))
        self.inter_x = nn.ModuleList(nn.Sequential(nn.Conv2d(ch, ch, 1, bias=False), _norm(ch))
                                     for _ in range(cfg.n_stacks - 1))
        self.inter_f = nn.ModuleList(nn.Sequential(nn.Conv2d(ch, ch, 1, bias=False), _norm(ch))
                                     for _ in range(cfg.n_stacks - 1))
        self.inter_res = nn.ModuleList(Residual(ch, ch) for _ in range(cfg.n_stacks - 1))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        unit = STRIDE * 2 ** self.depth
        if h % unit or w % unit:
            raise ValueError(f"input size {h}x{w} must be divisible by {unit} (stride {STRIDE}, hourglass depth {self.depth})")
        x = self.stem(image)
        feat = x
        for i, (hg, out_conv) in enumerate(zip(self.hourglasses, self.out_convs)):
            feat = out_conv(hg(x))
            if i < len(self.inter_res):
                x = self.inter_res[i](F.relu(self.inter_x[i](x) + self.inter_f[i](feat)))
        return feat


class SegHead(nn.Module):
    """Three 3x3 convs with 2x bilinear upsampling before the 2nd and 3rd; one output channel."""

    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch // 2, 3, padding=1)
        self.conv3 = nn.Conv2d(ch // 2, 1, 3, padding=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(f))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.relu(self.conv2(x))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv3(x)


def _head(ch: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(ch, out, 1))


def apply_attention(features: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Multiply every feature channel by the 4x4-average-pooled attention map."""
    if attention.dim() != 4 or attention.shape[1] != 1:
        raise ValueError(f"attention must be (B, 1, H, W), got {tuple(attention.shape)}")
    h, w = features.shape[-2:]
    if attention.shape[-2:] != (h * STRIDE, w * STRIDE) or attention.shape[0] not in (1, features.shape[0]):
        raise ValueError(f"attention {tuple(attention.shape)} does not match features {tuple(features.shape)}")
    return features * F.avg_pool2d(attention, STRIDE)


class SpotNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.base_channels
        self.backbone = Backbone(cfg)
        self.seg = SegHead(ch) if cfg.multitask_enabled else None
        self.heat_head = _head(ch, cfg.n_classes)
        self.wh_head = _head(ch, 2)
        self.off_head = _head(ch, 2)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.constant_(self.heat_head[-1].bias, HEATMAP_PRIOR_BIAS)
        for head in (self.heat_head, self.wh_head, self.off_head):
            nn.init.normal_(head[-1].weight, std=0.01)
        if self.seg is not None:
            nn.init.normal_(self.seg.conv3.weight, std=0.01)

    def backbone_forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.backbone(image)

    def seg_head(self, features: torch.Tensor) -> torch.Tensor:
        """Attention map in (0, 1) at input resolution."""
        return torch.sigmoid(self.seg(features))

    def detect_heads(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return torch.sigmoid(self.heat_head(features)), self.wh_head(features), self.off_head(features)

    def forward(self, image: torch.Tensor, attention_override: float | torch.Tensor | None = None) -> NetworkOutput:
        """``attention_override`` replaces the seg-head output (e.g. 1.0 for saturated logits)."""
        f = self.backbone(image)
        b, _, h, w = image.shape
        seg_logits = None
        if self.cfg.multitask_enabled:
            seg_logits = self.seg(f)
            att = torch.sigmoid(seg_logits)
        else:
            att = torch.full((b, 1, h, w), 0.5, dtype=f.dtype, device=f.device)
        if attention_override is not None:
            att = torch.as_tensor(attention_override, dtype=f.dtype, device=f.device).expand(b, 1, h, w)
        if self.cfg.attention_enabled:
            f = apply_attention(f, att)
        heat, wh, off = self.detect_heads(f)
        return NetworkOutput(attention=att, heatmap=heat, wh=wh, offset=off, seg_logits=seg_logits)


def frames_to_tensor(frames) -> torch.Tensor:
    """uint8 (H, W, 3) frames -> float (B, 3, H, W) in [0, 1]."""
    arr = np.stack([np.asarray(f) for f in frames]).astype(np.float32) / 255.0
    if arr.ndim == 3:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def save_checkpoint(path: str | Path, model: SpotNet, extra: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)


def load_checkpoint(path: str | Path) -> tuple[SpotNet, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a spotnet checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')} (expected {CHECKPOINT_VERSION})")
    model = SpotNet(ModelConfig(**ckpt["model_config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt.get("extra", {})
