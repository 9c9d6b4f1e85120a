"""Frame- and video-level detection metrics.

Regions are either boxes ``(x1, y1, x2, y2)`` in pixel coordinates with
exclusive right/bottom edges, or boolean H x W masks.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

THRESHOLDS = (0.2, 0.5)


@dataclass
class Detection:
    video_id: str
    frame_index: int
    class_id: int
    score: float
    region: object


@dataclass
class Tube:
    """Per-frame regions of one video-level detection.

    The tube spans ``[min(regions), max(regions)]``; frames inside the span
    without a region count as empty.
    """

    video_id: str
    class_id: int
    score: float
    regions: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.regions:
            raise ValueError("a tube needs at least one frame")
        self.regions = dict(sorted(self.regions.items()))

    @property
    def span(self) -> tuple[int, int]:
        frames = list(self.regions)
        return frames[0], frames[-1]


def _is_mask(region) -> bool:
    return isinstance(region, np.ndarray) and region.ndim == 2


def iou(region_a, region_b) -> float:
    """Intersection over union of two boxes or two masks; 0 when both are empty."""
    if region_a is None or region_b is None:
        return 0.0
    mask_a, mask_b = _is_mask(region_a), _is_mask(region_b)
    if mask_a != mask_b:
        raise ValueError("cannot compare a box with a mask")
    if mask_a:
        inter = np.logical_and(region_a, region_b).sum()
        union = np.logical_or(region_a, region_b).sum()
        return float(inter / union) if union else 0.0
    ax1, ay1, ax2, ay2 = region_a
    bx1, by1, bx2, by2 = region_b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union) if union > 0 else 0.0


def tube_iou(tube_a: Tube, tube_b: Tube) -> float:
    """Temporal IoU of the spans times the mean spatial IoU over their overlap."""
    a0, a1 = tube_a.span
    b0, b1 = tube_b.span
    lo, hi = max(a0, b0), min(a1, b1)
    if hi < lo:
        return 0.0
    union = max(a1, b1) - min(a0, b0) + 1
    temporal = (hi - lo + 1) / union
    spatial = np.mean([iou(tube_a.regions.get(t), tube_b.regions.get(t)) for t in range(lo, hi + 1)])
    return float(temporal * spatial)


def map_to_detections(loc, class_scores, threshold: float = 0.5, video_id: str = "",
                      frame_indices=None, mode: str = "box"):
    """Turn a localization map into per-frame detections and one tube.

    Each frame keeps the largest 8-connected component above ``threshold``.
    All detections carry the video-level argmax class and its score.
    """
    loc = np.asarray(loc)
    scores = np.asarray(class_scores, dtype=np.float64)
    if frame_indices is None:
        frame_indices = list(range(loc.shape[0]))
    class_id = int(np.argmax(scores))
    score = float(scores[class_id])
    structure = np.ones((3, 3), dtype=bool)
    detections = []
    for frame, plane in zip(frame_indices, loc):
        labels, count = ndimage.label(plane >= threshold, structure=structure)
        if count == 0:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        component = labels == (int(np.argmax(sizes)) + 1)
        if mode == "mask":
            region = component
        else:
            ys, xs = np.nonzero(component)
            region = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        detections.append(Detection(video_id, int(frame), class_id, score, region))
    tube = None
    if detections:
        tube = Tube(video_id, class_id, score, {d.frame_index: d.region for d in detections})
    return detections, tube


def _match(ranked, gt_by_key, iou_fn, iou_threshold):
    """Greedy matching in rank order; returns TP flags and the number of GT matched."""
    used = {key: [False] * len(regions) for key, regions in gt_by_key.items()}
    flags = []
    for key, region in ranked:
        best, best_j = -1.0, -1
        for j, gt_region in enumerate(gt_by_key.get(key, ())):
            if used[key][j]:
                continue
            overlap = iou_fn(region, gt_region)
            if overlap > best:
                best, best_j = overlap, j
        hit = best_j >= 0 and best >= iou_threshold
        if hit:
            used[key][best_j] = True
        flags.append(hit)
    return flags


def ap_from_flags(flags, num_gt: int) -> float:
    """All-point AP (area under the precision envelope) from ranked TP flags."""
    if num_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = np.concatenate([[0.0], tp / num_gt])
    precision = np.concatenate([[0.0], tp / (tp + fp)])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * envelope[1:]))


def average_precision(detections, ground_truth, iou_threshold: float, iou_fn=iou) -> float:
    """AP for one class.

    ``detections`` is a list of ``(key, score, region)``; ``ground_truth`` maps
    a key (frame or video identity) to a list of regions. Detections are
    ranked by descending score, ties kept in input order.
    """
    num_gt = sum(len(v) for v in ground_truth.values())
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    ranked = [(detections[i][0], detections[i][2]) for i in order]
    flags = _match(ranked, ground_truth, iou_fn, iou_threshold)
    return ap_from_flags(flags, num_gt)


def _check_class(class_id, num_classes):
    if not 0 <= class_id < num_classes:
        raise ValueError(f"unknown class id {class_id} (taxonomy has {num_classes} classes)")


def _mean_ap(det_by_class, gt_by_class, num_classes, threshold, iou_fn):
    per_class, counts = {}, {"tp": 0, "fp": 0, "missed": 0}
    for c in range(num_classes):
        gt = gt_by_class.get(c, {})
        num_gt = sum(len(v) for v in gt.values())
        dets = det_by_class.get(c, [])
        order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
        flags = _match([(dets[i][0], dets[i][2]) for i in order], gt, iou_fn, threshold)
        counts["tp"] += sum(flags)
        counts["fp"] += len(flags) - sum(flags)
        counts["missed"] += num_gt - sum(flags)
        if num_gt:
            per_class[c] = ap_from_flags(flags, num_gt)
    value = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return value, per_class, counts


def f_map(detections, ground_truth, num_classes: int, thresholds=THRESHOLDS) -> dict:
    """Frame-level mAP.

    ``detections`` and ``ground_truth`` are lists of :class:`Detection`
    (ground-truth scores are ignored). Returns ``{threshold: (mAP, per_class, counts)}``.
    """
    det_by_class, gt_by_class = defaultdict(list), defaultdict(lambda: defaultdict(list))
    for d in detections:
        _check_class(d.class_id, num_classes)
        det_by_class[d.class_id].append(((d.video_id, d.frame_index), d.score, d.region))
    for g in ground_truth:
        _check_class(g.class_id, num_classes)
        gt_by_class[g.class_id][(g.video_id, g.frame_index)].append(g.region)
    return {t: _mean_ap(det_by_class, gt_by_class, num_classes, t, iou) for t in thresholds}


def v_map(tubes, ground_truth_tubes, num_classes: int, thresholds=THRESHOLDS) -> dict:
    """Video-level mAP over tubes matched with :func:`tube_iou`."""
    det_by_class, gt_by_class = defaultdict(list), defaultdict(lambda: defaultdict(list))
    for tube in tubes:
        _check_class(tube.class_id, num_classes)
        det_by_class[tube.class_id].append((tube.video_id, tube.score, tube))
    for tube in ground_truth_tubes:
        _check_class(tube.class_id, num_classes)
        gt_by_class[tube.class_id][tube.video_id].append(tube)
    return {t: _mean_ap(det_by_class, gt_by_class, num_classes, t, tube_iou) for t in thresholds}


def ground_truth_from_annotation(annotation, frames=None):
    """Per-frame GT detections and the GT tube of one annotated video."""
    frames = set(annotation.per_frame) if frames is None else set(frames)
    regions = {t: r for t, r in annotation.per_frame.items() if t in frames}
    dets = [Detection(annotation.video_id, t, annotation.class_id, 1.0, r) for t, r in regions.items()]
    tube = Tube(annotation.video_id, annotation.class_id, 1.0, regions) if regions else None
    return dets, tube


def metrics_report(detections, gt_detections, tubes, gt_tubes, num_classes: int,
                   thresholds=THRESHOLDS) -> dict:
    """Assemble the JSON-serializable metrics report."""
    frame = f_map(detections, gt_detections, num_classes, thresholds)
    video = v_map(tubes, gt_tubes, num_classes, thresholds)
    report = {"counts": {}}
    for t in thresholds:
        key = f"iou_{t}"
        report[key] = {
            "f_map": frame[t][0],
            "v_map": video[t][0],
            "per_class": {
                "f_map": {str(c): ap for c, ap in frame[t][1].items()},
                "v_map": {str(c): ap for c, ap in video[t][1].items()},
            },
        }
        report["counts"][key] = {"frame": frame[t][2], "video": video[t][2]}
    return report
