"""Recorded, invertible clip augmentations and the cyclic-sequence construction.

A record is an ordered list of transforms. Geometric members (horizontal flip,
crop-resize, temporal reverse) have exact inverses on the pixel grid, so a
localization map predicted on the augmented view can be mapped back onto the
original view. Photometric jitter only touches pixel values and is skipped
when inverting.

Localization maps are torch tensors with time, height and width as the last
three axes; any leading axes are treated as batch dimensions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import Clip

GEOMETRIC = ("hflip", "crop", "treverse")
KINDS = GEOMETRIC + ("photometric",)
FULL_FRAME = (0.0, 0.0, 1.0, 1.0)


@dataclass
class AugRecord:
    transforms: list[tuple[str, dict]] = field(default_factory=list)
    strength: str = "weak"

    def __post_init__(self):
        for kind, params in self.transforms:
            if kind not in KINDS:
                raise ValueError(f"unknown transform kind {kind!r}")
            if kind == "crop":
                x0, y0, x1, y1 = params["box"]
                if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                    raise ValueError(f"degenerate crop box {params['box']}")

    def to_json(self) -> str:
        return json.dumps({"transforms": [{"kind": k, "params": p} for k, p in self.transforms],
                           "strength": self.strength}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugRecord":
        doc = json.loads(text)
        transforms = []
        for t in doc["transforms"]:
            params = dict(t["params"])
            if "box" in params:
                params["box"] = tuple(params["box"])
            transforms.append((t["kind"], params))
        return cls(transforms, doc["strength"])

    @property
    def kinds(self) -> list[str]:
        return [k for k, _ in self.transforms]


IDENTITY = AugRecord([], "weak")


def _sample_crop(rng, min_area):
    # redraw the aspect ratio until both sides fit; a square always does
    area = rng.uniform(min_area, 1.0)
    w = h = math.sqrt(area)
    for _ in range(10):
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw, ch = math.sqrt(area * ratio), math.sqrt(area / ratio)
        if cw <= 1.0 and ch <= 1.0:
            w, h = cw, ch
            break
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return (float(x0), float(y0), float(x0 + w), float(y0 + h))


def sample_augmentation(strength: str, rng: np.random.Generator, min_crop_area: float = 0.8) -> AugRecord:
    """Draw a record: flip (p=0.5) and crop-resize; strong adds jitter and temporal reverse."""
    if strength not in ("weak", "strong"):
        raise ValueError(f"strength must be 'weak' or 'strong', got {strength!r}")
    transforms = []
    if rng.random() < 0.5:
        transforms.append(("hflip", {}))
    transforms.append(("crop", {"box": _sample_crop(rng, min_crop_area)}))
    if strength == "strong":
        transforms.append(("photometric", {
            "brightness": float(rng.uniform(-0.2, 0.2)),
            "contrast": float(rng.uniform(0.7, 1.3)),
            "saturation": float(rng.uniform(0.7, 1.3)),
        }))
        if rng.random() < 0.5:
            transforms.append(("treverse", {}))
    return AugRecord(transforms, strength)


# ---------------------------------------------------------------------------
# resampling on (..., T, H, W) tensors


def _axis_grid(lo, hi, n, inverse, dtype):
    """Sample positions (grid_sample's normalized units) for one axis.

    Forward: output pixel ``j`` of the augmented view looks at original
    position ``lo + (j + 0.5) / n * (hi - lo)``. Inverse: original pixel ``k``
    looks at augmented position ``((k + 0.5) / n - lo) / (hi - lo)``.
    """
    centers = (torch.arange(n, dtype=dtype) + 0.5) / n
    pos = (centers - lo) / (hi - lo) if inverse else lo + centers * (hi - lo)
    return pos * 2.0 - 1.0


def _crop_resample(x: torch.Tensor, box, inverse: bool) -> torch.Tensor:
    if tuple(box) == FULL_FRAME:
        return x
    x0, y0, x1, y1 = box
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    flat = x.reshape(1, -1, h, w)
    gx = _axis_grid(x0, x1, w, inverse, x.dtype)
    gy = _axis_grid(y0, y1, h, inverse, x.dtype)
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1)[None]
    out = F.grid_sample(flat, grid, mode="bilinear", padding_mode="border", align_corners=False)
    out = out.reshape(*lead, h, w)
    if inverse:
        out = out * _inside_crop(box, h, w, x.dtype)
    return out


def _inside_crop(box, h, w, dtype=torch.float64) -> torch.Tensor:
    x0, y0, x1, y1 = box
    cy = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    cx = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    inside = ((cy >= y0) & (cy <= y1))[:, None] & ((cx >= x0) & (cx <= x1))[None, :]
    return inside.to(dtype)


def _geometric(x: torch.Tensor, record: AugRecord, inverse: bool) -> torch.Tensor:
    steps = reversed(record.transforms) if inverse else record.transforms
    for kind, params in steps:
        if kind == "hflip":
            x = torch.flip(x, dims=(-1,))
        elif kind == "treverse":
            x = torch.flip(x, dims=(-3,))
        elif kind == "crop":
            x = _crop_resample(x, params["box"], inverse)
        elif kind != "photometric":
            raise ValueError(f"transform {kind!r} has no inverse")
    return x


def apply_to_localization(loc: torch.Tensor, record: AugRecord) -> torch.Tensor:
    """Map an original-view localization map onto the augmented view's grid."""
    return _geometric(loc, record, inverse=False)


def invert_on_localization(loc: torch.Tensor, record: AugRecord) -> torch.Tensor:
    """Bring an augmented-view map back onto the original grid.

    Geometric steps are undone in reverse order. Pixels outside the crop
    window have no prediction and are filled with 0; see :func:`validity_mask`.
    """
    return _geometric(loc, record, inverse=True)


def validity_mask(record: AugRecord, shape) -> torch.Tensor:
    """Boolean (T, H, W) mask of original-grid pixels covered by the augmented view."""
    t, h, w = shape[-3:]
    ones = torch.ones((t, h, w), dtype=torch.float64)
    return invert_on_localization(ones, record) > 0.5


# ---------------------------------------------------------------------------
# clips


def _photometric(frames: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    out = np.clip(frames + brightness, 0.0, 1.0)
    mean = out.mean(axis=(1, 2, 3), keepdims=True)
    out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
    if out.shape[-1] == 3:
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = gray[..., None] + (out - gray[..., None]) * saturation
    return np.clip(out, 0.0, 1.0)


def apply_to_clip(clip: Clip, record: AugRecord) -> Clip:
    """Build the second view. Frame indices stay those of the source clip."""
    frames = clip.pixels
    for kind, params in record.transforms:
        if kind == "photometric":
            frames = _photometric(frames, params["brightness"], params["contrast"], params["saturation"])
            continue
        # channels go in front so the geometric helpers see (C, T, H, W)
        x = torch.from_numpy(np.ascontiguousarray(frames.transpose(3, 0, 1, 2)))
        x = _geometric(x, AugRecord([(kind, params)], record.strength), inverse=False)
        frames = x.numpy().transpose(1, 2, 3, 0)
    return Clip(np.clip(frames, 0.0, 1.0), clip.video_id, list(clip.frame_indices), clip.fps)


def build_cyclic_sequence(loc_orig: torch.Tensor, loc_aug_inverted: torch.Tensor) -> torch.Tensor:
    """``[o1 .. on, g(n-1) .. g2]``: the original view followed by the flipped second view.

    The flipped second view loses its two junction frames, so walking the
    2n-2 frames in a loop never repeats a time step at either seam.
    """
    if loc_orig.shape != loc_aug_inverted.shape:
        raise ValueError(f"shape mismatch: {tuple(loc_orig.shape)} vs {tuple(loc_aug_inverted.shape)}")
    flipped = torch.flip(loc_aug_inverted, dims=(-3,))
    return torch.cat([loc_orig, flipped[..., 1:-1, :, :]], dim=-3)
