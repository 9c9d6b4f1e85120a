"""On-disk formats, the synthetic moving-shapes generator, splits and batch sampling.

Layout of a dataset root::

    annotations.json
    videos/<video_id>.stv
    masks/<video_id>/<frame>.stv      (mask mode only)
    split.json                        (optional)

Clip containers are ``b"STV1"`` followed by little-endian uint32 ``T, H, W, C``
and a ``T*H*W*C`` uint8 payload in frame-major, row-major order.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

MAGIC = b"STV1"
_HEADER = struct.Struct("<4I")

# deterministic motion patterns, indexed by class id
PATTERNS = (
    "translate-right",
    "translate-down",
    "diagonal",
    "oscillate",
    "circular",
    "translate-left",
    "translate-up",
    "anti-diagonal",
    "oscillate-vertical",
    "circular-ccw",
)
SHAPES = ("square", "circle", "triangle")


class DatasetError(ValueError):
    """Raised when a dataset root or one of its records is invalid."""


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Clip:
    pixels: np.ndarray  # T x H x W x C, float in [0, 1]
    video_id: str
    frame_indices: list[int]
    fps: float = 25.0

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"clip pixels must be T x H x W x C, got shape {self.pixels.shape}")
        if self.pixels.shape[0] < 2:
            raise ValueError("a clip needs at least two frames")
        if len(self.frame_indices) != self.pixels.shape[0]:
            raise ValueError("frame_indices length does not match the clip length")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise ValueError("frame_indices must be strictly increasing")
        if self.frame_indices[0] < 0:
            raise ValueError("frame indices must be non-negative")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("clip pixels must lie in [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class Annotation:
    video_id: str
    class_id: int
    per_frame: dict  # frame index -> (x1, y1, x2, y2) or H x W bool mask
    trimmed: bool = True
    action_interval: tuple[int, int] | None = None


@dataclass
class DatasetIndex:
    root: Path | None
    class_names: list[str]
    annotation_mode: str
    annotations: dict[str, Annotation]
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    val_ids: list[str] = field(default_factory=list)
    video_shapes: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)
    video_paths: dict[str, Path] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise DatasetError(f"ids both labeled and unlabeled: {sorted(overlap)[:5]}")
        for vid in self.labeled_ids:
            if vid not in self.annotations:
                raise DatasetError(f"labeled video {vid!r} has no annotation")
        if self.annotation_mode not in ("box", "mask"):
            raise DatasetError(f"unknown annotation mode {self.annotation_mode!r}")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def train_ids(self) -> list[str]:
        return sorted(self.labeled_ids + self.unlabeled_ids)

    def load_video(self, video_id: str) -> np.ndarray:
        return read_container(self.video_paths[video_id])


@dataclass
class MixedBatch:
    """Shuffled batch; unlabeled items carry ``None`` in place of an annotation."""

    items: list[tuple[Clip, Annotation | None]]

    @property
    def labeled(self) -> list[tuple[Clip, Annotation]]:
        return [(c, a) for c, a in self.items if a is not None]

    @property
    def unlabeled(self) -> list[Clip]:
        return [c for c, a in self.items if a is None]

    def __len__(self):
        return len(self.items)


# ---------------------------------------------------------------------------
# containers


def write_container(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim != 4:
        raise ValueError("container payload must be a 4-d uint8 array")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(*array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def read_container_header(path) -> tuple[int, int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(4 + _HEADER.size)
    if len(head) != 4 + _HEADER.size or head[:4] != MAGIC:
        raise DatasetError(f"{path}: malformed container header")
    return _HEADER.unpack(head[4:])


def read_container(path) -> np.ndarray:
    """Return the raw uint8 payload as a T x H x W x C array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + _HEADER.size or raw[:4] != MAGIC:
        raise DatasetError(f"{path}: malformed container header")
    shape = _HEADER.unpack(raw[4 : 4 + _HEADER.size])
    payload = raw[4 + _HEADER.size :]
    if len(payload) != math.prod(shape):
        raise DatasetError(f"{path}: payload size {len(payload)} does not match header {shape}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


# ---------------------------------------------------------------------------
# synthetic generator


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Binary ``size x size`` stencil of a geometric shape."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        r = size / 2.0
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if kind == "triangle":
        # apex at top centre, base on the bottom row
        half = (yy / size) * (size / 2.0)
        return np.abs(xx - size / 2.0) <= half + 0.5
    raise ValueError(f"unknown shape {kind!r}")


def trajectory(pattern: str, num_frames: int, origin, velocity: int = 1, amplitude: float = 0.0,
               period: float = 8.0, phase: float = 0.0) -> np.ndarray:
    """Integer top-left positions ``(x, y)`` of the actor for ``num_frames`` steps.

    Linear patterns move ``velocity`` pixels per frame from ``origin``; periodic
    patterns move around ``origin`` (the centre of the oscillation/orbit).
    """
    t = np.arange(num_frames, dtype=np.float64)
    x0, y0 = origin
    ang = 2.0 * np.pi * t / period + phase
    if pattern == "translate-right":
        xy = (x0 + velocity * t, np.full_like(t, y0))
    elif pattern == "translate-left":
        xy = (x0 - velocity * t, np.full_like(t, y0))
    elif pattern == "translate-down":
        xy = (np.full_like(t, x0), y0 + velocity * t)
    elif pattern == "translate-up":
        xy = (np.full_like(t, x0), y0 - velocity * t)
    elif pattern == "diagonal":
        xy = (x0 + velocity * t, y0 + velocity * t)
    elif pattern == "anti-diagonal":
        xy = (x0 + velocity * t, y0 - velocity * t)
    elif pattern == "oscillate":
        xy = (x0 + amplitude * np.sin(ang), np.full_like(t, y0))
    elif pattern == "oscillate-vertical":
        xy = (np.full_like(t, x0), y0 + amplitude * np.sin(ang))
    elif pattern == "circular":
        xy = (x0 + amplitude * np.cos(ang), y0 + amplitude * np.sin(ang))
    elif pattern == "circular-ccw":
        xy = (x0 + amplitude * np.cos(ang), y0 - amplitude * np.sin(ang))
    else:
        raise ValueError(f"unknown motion pattern {pattern!r}")
    return np.rint(np.stack(xy, axis=1)).astype(np.int64)


def _plan_motion(pattern, length, size, height, width, rng):
    """Pick origin/velocity/amplitude so that the whole path stays inside the frame."""
    span_x, span_y = width - size, height - size
    steps = max(length - 1, 1)
    if pattern.startswith("translate") or pattern.endswith("diagonal"):
        moves_x = pattern in ("translate-right", "translate-left", "diagonal", "anti-diagonal")
        moves_y = pattern in ("translate-down", "translate-up", "diagonal", "anti-diagonal")
        limit = min(span_x if moves_x else 10**9, span_y if moves_y else 10**9)
        vmax = min(3, limit // steps)
        if vmax < 1:
            raise DatasetError(
                f"invalid geometry: a {size}px shape cannot travel {steps} frames at 1px/frame "
                f"inside a {width}x{height} frame")
        v = int(rng.integers(1, vmax + 1))
        travel = v * steps
        lo_x = travel if pattern == "translate-left" else 0
        hi_x = span_x - (travel if pattern in ("translate-right", "diagonal", "anti-diagonal") else 0)
        lo_y = travel if pattern in ("translate-up", "anti-diagonal") else 0
        hi_y = span_y - (travel if pattern in ("translate-down", "diagonal") else 0)
        x0 = int(rng.integers(lo_x, hi_x + 1))
        y0 = int(rng.integers(lo_y, hi_y + 1))
        return dict(origin=(x0, y0), velocity=v)
    amp = float(rng.uniform(0.18, 0.28) * min(width, height))
    amp = min(amp, span_x / 2.0, span_y / 2.0)
    if amp < 2.0:
        raise DatasetError(f"invalid geometry: no room for periodic motion of a {size}px shape "
                           f"in a {width}x{height} frame")
    horizontal = pattern in ("oscillate", "circular", "circular-ccw")
    vertical = pattern in ("oscillate-vertical", "circular", "circular-ccw")
    ax, ay = (amp if horizontal else 0.0), (amp if vertical else 0.0)
    x0 = float(rng.uniform(ax, span_x - ax))
    y0 = float(rng.uniform(ay, span_y - ay))
    period = float(rng.uniform(7.0, 10.0))
    return dict(origin=(x0, y0), amplitude=amp, period=period, phase=float(rng.uniform(0, 2 * np.pi)))


def _texture(rng, height, width, channels):
    coarse = rng.uniform(0.15, 0.65, size=(channels, 1, 8, 8))
    tex = F.interpolate(torch.from_numpy(coarse), size=(height, width), mode="bilinear",
                        align_corners=False)
    return tex[:, 0].numpy().transpose(1, 2, 0)


def _render_video(rng, pattern, frames, height, width, channels, size, interval, distractors):
    bg = _texture(rng, height, width, channels)
    video = np.repeat(bg[None], frames, axis=0)
    # static distractors look like actors but never move
    for _ in range(distractors):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        dsize = int(rng.integers(max(3, size - 3), size + 2))
        dsize = min(dsize, height, width)
        stencil = shape_mask(kind, dsize)
        x = int(rng.integers(0, width - dsize + 1))
        y = int(rng.integers(0, height - dsize + 1))
        color = rng.uniform(0.0, 1.0, size=channels)
        video[:, y:y + dsize, x:x + dsize][:, stencil] = color

    kind = SHAPES[int(rng.integers(len(SHAPES)))]
    stencil = shape_mask(kind, size)
    color = rng.uniform(0.0, 1.0, size=channels)
    a, b = interval
    plan = _plan_motion(pattern, b - a, size, height, width, rng)
    path = trajectory(pattern, b - a, **plan)
    boxes = {}
    masks = {}
    for k, (x, y) in enumerate(path):
        t = a + k
        video[t, y:y + size, x:x + size][stencil] = color
        m = np.zeros((height, width), dtype=bool)
        m[y:y + size, x:x + size] = stencil
        ys, xs = np.nonzero(m)
        boxes[t] = [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]
        masks[t] = m
    video = video + rng.normal(0.0, 0.03, size=video.shape)
    pixels = np.rint(np.clip(video, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, boxes, masks


def generate_synthetic_dataset(root, num_videos: int, classes: int, frames_per_video: int,
                               height: int, width: int, untrimmed_fraction: float = 0.0,
                               seed: int = 0, val_fraction: float = 0.2, mode: str = "box",
                               shape_size: int | None = None, distractors: int = 2,
                               channels: int = 3) -> DatasetIndex:
    """Write a moving-shapes dataset to ``root`` and return its index.

    Each class is one motion pattern from :data:`PATTERNS`; every video shows a
    single textured-background scene with one moving actor and a few static
    look-alike distractors. Untrimmed videos only show the actor on a
    sub-interval and have no annotation entries outside it.
    """
    if classes < 2 or classes > len(PATTERNS):
        raise DatasetError(f"classes must be in [2, {len(PATTERNS)}], got {classes}")
    if frames_per_video < 8:
        raise DatasetError("frames_per_video must be at least 8")
    if not 0.0 <= untrimmed_fraction <= 1.0:
        raise DatasetError("untrimmed_fraction must lie in [0, 1]")
    if mode not in ("box", "mask"):
        raise DatasetError(f"unknown annotation mode {mode!r}")
    if shape_size is None:
        shape_size = max(3, int(round(0.19 * min(height, width))))
    if shape_size >= min(height, width):
        raise DatasetError(f"invalid geometry: shape size {shape_size} does not fit a "
                           f"{width}x{height} frame")

    root = Path(root)
    rng = np.random.default_rng(seed)
    class_of = [i % classes for i in range(num_videos)]
    n_untrimmed = int(math.floor(untrimmed_fraction * num_videos + 0.5))
    untrimmed = set(rng.permutation(num_videos)[:n_untrimmed].tolist())
    val = set()
    for c in range(classes):
        members = [i for i in range(num_videos) if class_of[i] == c]
        n_val = int(math.floor(val_fraction * len(members) + 0.5))
        val.update(rng.permutation(members)[:n_val].tolist())

    records = []
    for i in range(num_videos):
        vid = f"vid_{i:04d}"
        vrng = np.random.default_rng([seed, i])
        if i in untrimmed:
            length = int(round(vrng.uniform(0.6, 0.85) * frames_per_video))
            length = min(max(length, 2), frames_per_video - 1)
            start = int(vrng.integers(0, frames_per_video - length + 1))
            interval = (start, start + length)
        else:
            interval = (0, frames_per_video)
        pixels, boxes, masks = _render_video(
            vrng, PATTERNS[class_of[i]], frames_per_video, height, width, channels,
            shape_size, interval, distractors)
        write_container(root / "videos" / f"{vid}.stv", pixels)
        if mode == "box":
            frames = {str(t): boxes[t] for t in sorted(boxes)}
        else:
            frames = {}
            for t in sorted(masks):
                rel = f"masks/{vid}/{t:04d}.stv"
                write_container(root / rel, (masks[t][None, :, :, None] * 255).astype(np.uint8))
                frames[str(t)] = rel
        records.append({
            "id": vid,
            "class_id": class_of[i],
            "trimmed": i not in untrimmed,
            "action_interval": list(interval),
            "subset": "val" if i in val else "train",
            "frames": frames,
        })

    doc = {"class_names": list(PATTERNS[:classes]), "mode": mode, "videos": records}
    (root / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return load_dataset(root)


# ---------------------------------------------------------------------------
# loading and validation


def _validate_box(box, vid, frame, height, width):
    if not (isinstance(box, (list, tuple)) and len(box) == 4):
        raise DatasetError(f"video {vid!r} frame {frame}: box must be [x1, y1, x2, y2]")
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise DatasetError(f"video {vid!r} frame {frame}: degenerate box {list(box)}")
    if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
        raise DatasetError(f"video {vid!r} frame {frame}: box {list(box)} outside "
                           f"{width}x{height} frame")
    return tuple(float(v) for v in box)


def load_dataset(root) -> DatasetIndex:
    """Parse and validate ``annotations.json`` plus every referenced container.

    The returned index marks every training video as labeled; use
    :func:`split_labeled` to carve out the unlabeled subset.
    """
    root = Path(root)
    ann_path = root / "annotations.json"
    if not ann_path.exists():
        raise DatasetError(f"{root}: missing annotations.json")
    try:
        doc = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{ann_path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or not {"class_names", "mode", "videos"} <= doc.keys():
        raise DatasetError(f"{ann_path}: malformed header, expected class_names, mode, videos")
    class_names = list(doc["class_names"])
    mode = doc["mode"]
    if mode not in ("box", "mask"):
        raise DatasetError(f"{ann_path}: malformed header, unknown mode {mode!r}")

    annotations, shapes, paths = {}, {}, {}
    train, val = [], []
    for rec in doc["videos"]:
        vid = rec.get("id")
        if vid is None:
            raise DatasetError(f"{ann_path}: video record without id")
        if vid in annotations:
            raise DatasetError(f"duplicate video_id {vid!r}")
        class_id = rec.get("class_id")
        if not isinstance(class_id, int) or not 0 <= class_id < len(class_names):
            raise DatasetError(f"video {vid!r}: class_id {class_id!r} out of range")
        vpath = root / rec.get("path", f"videos/{vid}.stv")
        if not vpath.exists():
            raise DatasetError(f"video {vid!r}: missing container {vpath}")
        shape = read_container_header(vpath)
        n_frames, height, width, _ = shape
        per_frame = {}
        for key, value in rec.get("frames", {}).items():
            frame = int(key)
            if not 0 <= frame < n_frames:
                raise DatasetError(f"video {vid!r} frame {frame}: beyond video length {n_frames}")
            if mode == "box":
                per_frame[frame] = _validate_box(value, vid, frame, height, width)
            else:
                if not isinstance(value, str):
                    raise DatasetError(f"video {vid!r} frame {frame}: mask mode expects a path")
                mpath = root / value
                if not mpath.exists():
                    raise DatasetError(f"video {vid!r} frame {frame}: missing container {mpath}")
                mask = read_container(mpath)
                if mask.shape != (1, height, width, 1):
                    raise DatasetError(f"video {vid!r} frame {frame}: mask shape {mask.shape} "
                                       f"does not match video frames")
                per_frame[frame] = mask[0, :, :, 0] > 127
        trimmed = bool(rec.get("trimmed", True))
        if trimmed and len(per_frame) != n_frames:
            missing = sorted(set(range(n_frames)) - per_frame.keys())
            raise DatasetError(f"video {vid!r} is trimmed but frame {missing[0]} has no annotation")
        interval = rec.get("action_interval")
        annotations[vid] = Annotation(vid, class_id, dict(sorted(per_frame.items())), trimmed,
                                      tuple(interval) if interval is not None else None)
        shapes[vid] = shape
        paths[vid] = vpath
        (val if rec.get("subset", "train") == "val" else train).append(vid)

    return DatasetIndex(root, class_names, mode, annotations, sorted(train), [], sorted(val),
                        shapes, paths)


# ---------------------------------------------------------------------------
# splits


def split_labeled(index: DatasetIndex, labeled_fraction: float, seed: int) -> DatasetIndex:
    """Per-class stratified labeled/unlabeled split of the training ids."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    rng = np.random.default_rng(seed)
    labeled, unlabeled = [], []
    for c in range(index.class_count):
        members = sorted(v for v in index.train_ids if index.annotations[v].class_id == c)
        if not members:
            continue
        n_lab = int(math.floor(labeled_fraction * len(members) + 0.5))
        if n_lab == 0:
            raise DatasetError(f"labeled_fraction {labeled_fraction} leaves class "
                               f"{index.class_names[c]!r} without labeled videos")
        order = rng.permutation(len(members))
        labeled += [members[j] for j in order[:n_lab]]
        unlabeled += [members[j] for j in order[n_lab:]]
    return replace(index, labeled_ids=sorted(labeled), unlabeled_ids=sorted(unlabeled))


def limit_unlabeled(index: DatasetIndex, multiple: float, seed: int) -> DatasetIndex:
    """Keep ``multiple x |labeled|`` unlabeled videos.

    Subsets for increasing multiples are nested (prefixes of one seeded permutation).
    """
    keep = int(round(multiple * len(index.labeled_ids)))
    if keep < 1:
        raise ValueError("multiple leaves no unlabeled videos")
    pool = sorted(index.unlabeled_ids)
    order = np.random.default_rng(seed).permutation(len(pool))
    chosen = sorted(pool[j] for j in order[:keep])
    return replace(index, unlabeled_ids=chosen)


def save_split(index: DatasetIndex, path, seed: int, labeled_fraction: float) -> None:
    doc = {"seed": seed, "labeled_fraction": labeled_fraction,
           "labeled_ids": sorted(index.labeled_ids), "unlabeled_ids": sorted(index.unlabeled_ids)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_split(index: DatasetIndex, path) -> DatasetIndex:
    doc = json.loads(Path(path).read_text())
    known = set(index.train_ids)
    for vid in doc["labeled_ids"] + doc["unlabeled_ids"]:
        if vid not in known:
            raise DatasetError(f"{path}: split references unknown training video {vid!r}")
    return replace(index, labeled_ids=list(doc["labeled_ids"]),
                   unlabeled_ids=list(doc["unlabeled_ids"]))


# ---------------------------------------------------------------------------
# clips and targets


def _resize_frames(frames: np.ndarray, resolution) -> np.ndarray:
    """Bilinear resize of a T x H x W x C float stack."""
    x = torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2)))
    x = F.interpolate(x, size=tuple(resolution), mode="bilinear", align_corners=False)
    return x.numpy().transpose(0, 2, 3, 1).clip(0.0, 1.0)


def extract_clip(video: np.ndarray, start: int, num_frames: int = 8, skip: int = 2,
                 resolution=None, video_id: str = "", fps: float = 25.0) -> Clip:
    """Take ``num_frames`` frames ``skip`` apart starting at ``start``."""
    last = start + (num_frames - 1) * skip
    if start < 0 or last >= len(video):
        raise ValueError(f"video {video_id!r} of length {len(video)} cannot supply "
                         f"{num_frames} frames from {start} with skip {skip}")
    indices = list(range(start, last + 1, skip))
    frames = np.asarray(video[indices])
    frames = frames.astype(np.float64) / 255.0 if frames.dtype == np.uint8 else frames.astype(np.float64)
    if resolution is not None and tuple(resolution) != frames.shape[1:3]:
        frames = _resize_frames(frames, resolution)
    return Clip(frames, video_id, indices, fps)


def rasterize(annotation: Annotation | None, frame_indices, source_hw, out_hw=None) -> np.ndarray:
    """Binary T x H x W target; boxes are filled, frames without entries are empty."""
    src_h, src_w = source_hw
    out_h, out_w = out_hw if out_hw is not None else source_hw
    target = np.zeros((len(frame_indices), out_h, out_w), dtype=np.float64)
    if annotation is None:
        return target
    cy = (np.arange(out_h) + 0.5) * (src_h / out_h)
    cx = (np.arange(out_w) + 0.5) * (src_w / out_w)
    for k, frame in enumerate(frame_indices):
        region = annotation.per_frame.get(frame)
        if region is None:
            continue
        if isinstance(region, np.ndarray):
            rows = np.minimum((cy).astype(int), src_h - 1)
            cols = np.minimum((cx).astype(int), src_w - 1)
            target[k] = region[np.ix_(rows, cols)]
        else:
            x1, y1, x2, y2 = region
            target[k] = np.outer((cy >= y1) & (cy < y2), (cx >= x1) & (cx < x2))
    return target


# ---------------------------------------------------------------------------
# sampling


class MixedBatchSampler:
    """Draws shuffled batches of B/2 labeled and B/2 unlabeled clips.

    Each subset is cycled independently and reshuffled whenever it is
    exhausted; clip starts are uniform over the valid range. All randomness
    comes from one generator so the full state fits in :meth:`state_dict`.
    """

    def __init__(self, index: DatasetIndex, batch_size: int = 8, seed: int = 0,
                 supervised: bool = False, num_frames: int = 8, skip: int = 2,
                 resolution=None, cache: dict | None = None):
        if batch_size % 2 and not supervised:
            raise ValueError("batch_size must be even for mixed batches")
        if not index.labeled_ids:
            raise DatasetError("no labeled videos to sample from")
        if not supervised and not index.unlabeled_ids:
            raise DatasetError("unlabeled subset is empty; use supervised mode")
        self.index = index
        self.batch_size = batch_size
        self.supervised = supervised
        self.num_frames = num_frames
        self.skip = skip
        self.resolution = resolution
        self.cache = {} if cache is None else cache
        self.rng = np.random.default_rng(seed)
        self._pools = {"labeled": list(index.labeled_ids), "unlabeled": list(index.unlabeled_ids)}
        self._order = {k: [] for k in self._pools}
        self._cursor = {k: 0 for k in self._pools}

    def _video(self, vid):
        if vid not in self.cache:
            self.cache[vid] = self.index.load_video(vid)
        return self.cache[vid]

    def _draw(self, pool, count):
        out = []
        for _ in range(count):
            if self._cursor[pool] >= len(self._order[pool]):
                self._order[pool] = self.rng.permutation(len(self._pools[pool])).tolist()
                self._cursor[pool] = 0
            out.append(self._pools[pool][self._order[pool][self._cursor[pool]]])
            self._cursor[pool] += 1
        return out

    def _clip(self, vid):
        video = self._video(vid)
        n_starts = len(video) - (self.num_frames - 1) * self.skip
        if n_starts < 1:
            raise DatasetError(f"video {vid!r} is too short for {self.num_frames}x{self.skip} clips")
        start = int(self.rng.integers(n_starts))
        return extract_clip(video, start, self.num_frames, self.skip, self.resolution, vid)

    def sample_mixed_batch(self) -> MixedBatch:
        n_lab = self.batch_size if self.supervised else self.batch_size // 2
        items = [(self._clip(v), self.index.annotations[v]) for v in self._draw("labeled", n_lab)]
        if not self.supervised:
            items += [(self._clip(v), None)
                      for v in self._draw("unlabeled", self.batch_size - n_lab)]
        order = self.rng.permutation(len(items))
        return MixedBatch([items[j] for j in order])

    __next__ = sample_mixed_batch

    def __iter__(self):
        return self

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": {k: list(v) for k, v in self._order.items()},
                "cursor": dict(self._cursor)}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._order = {k: list(v) for k, v in state["order"].items()}
        self._cursor = dict(state["cursor"])
