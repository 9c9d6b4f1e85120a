"""Semi-supervised training loop, evaluation pass and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .augment import IDENTITY, apply_to_clip, invert_on_localization, sample_augmentation, validity_mask
from .dataio import (DatasetIndex, MixedBatch, MixedBatchSampler, extract_clip, limit_unlabeled,
                     load_dataset, load_split, rasterize, save_split, split_labeled)
from .evalkit import ground_truth_from_annotation, map_to_detections, metrics_report
from .losses import (MODES, LossWeights, bce_dice_loss, coherence_loss, coherence_mask,
                     gradient_mask, gradient_smoothness_loss, jsd_consistency, l2_consistency,
                     margin_loss, total_loss)
from .model import ActionDetector, ModelConfig, clips_to_tensor, init_params
from .schedule import PlateauPolicy, PlateauScheduler, RampSchedule, rampup_w

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class RampSettings:
    length: int | None = None  # epochs; None means `fraction` of the run
    fraction: float = 0.5
    w_max: float = 1.0


@dataclass
class TrainConfig:
    mode: str = "semi-var"
    epochs: int = 100
    batch_size: int = 8
    frames: int = 8
    skip: int = 2
    resolution: int = 64
    lr: float = 1e-4
    lambda_: float = 0.1
    lambda1: float = 0.3
    lambda2: float = 0.7
    coherence_window: int = 2
    labeled_fraction: float = 0.2
    unlabeled_multiple: float | None = None
    seed: int = 0
    aug_strength: str = "strong"
    both_variant: str = "var"
    dtype: str = "float32"
    det_threshold: float = 0.5
    eval_every: int = 1
    ramp: RampSettings = field(default_factory=RampSettings)
    plateau: PlateauPolicy = field(default_factory=PlateauPolicy)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.both_variant not in ("var", "grad"):
            raise ValueError("both_variant must be 'var' or 'grad'")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if self.aug_strength not in ("weak", "strong"):
            raise ValueError("aug_strength must be 'weak' or 'strong'")
        if min(self.lambda_, self.lambda1, self.lambda2) < 0:
            raise ValueError("loss weights must be non-negative")

    # flat dotted-key view used by config files, --set overrides and hashing

    def to_flat(self) -> dict:
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            key = "lambda" if f.name == "lambda_" else f.name
            if dataclasses.is_dataclass(value):
                for sub, v in dataclasses.asdict(value).items():
                    flat[f"{key}.{sub}"] = v
            else:
                flat[key] = value
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        base = cls().to_flat()
        unknown = sorted(set(flat) - set(base))
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**base, **flat}
        top, nested = {}, {"ramp": {}, "plateau": {}, "model": {}}
        for key, value in merged.items():
            if "." in key:
                group, sub = key.split(".", 1)
                nested[group][sub] = value
            else:
                top["lambda_" if key == "lambda" else key] = value
        return cls(ramp=RampSettings(**nested["ramp"]), plateau=PlateauPolicy(**nested["plateau"]),
                   model=ModelConfig(**nested["model"]), **top)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        return TrainConfig.from_flat({**self.to_flat(), **overrides})

    def digest(self) -> str:
        return config_hash(self.to_flat())


def config_hash(flat: dict) -> str:
    return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()


def parse_override(text: str, base: TrainConfig):
    """Parse ``key=value`` using the type of the existing key."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    flat = base.to_flat()
    if key not in flat:
        raise KeyError(f"unknown config key {key!r}")
    current = flat[key]
    if isinstance(current, bool):
        value = raw.lower() in ("1", "true", "yes")
    elif isinstance(current, int):
        value = int(raw)
    elif isinstance(current, float):
        value = float(raw)
    elif isinstance(current, list) or raw.startswith("["):
        value = json.loads(raw)
    elif current is None:
        value = None if raw.lower() in ("none", "null") else json.loads(raw)
    else:
        value = raw
    return key, value


def configure_determinism() -> bool:
    """Honour ``STSSL_DETERMINISTIC=1``: single thread, deterministic kernels."""
    if os.environ.get("STSSL_DETERMINISTIC", "0") == "1":
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        return True
    return False


# ---------------------------------------------------------------------------
# one step


def prepare_batch(batch: MixedBatch, config: TrainConfig, aug_rng, records=None,
                  source_hw: dict | None = None) -> dict:
    """Second views, tensors and targets for a mixed batch.

    ``source_hw`` maps video ids to the stored frame size, which the
    annotation coordinates refer to; clips default to their own size.
    """
    source_hw = source_hw or {}
    dtype = DTYPES[config.dtype]
    clips = [c for c, _ in batch.items]
    if records is None:
        if config.mode == "supervised":
            records = [IDENTITY] * len(clips)
        else:
            records = [sample_augmentation(config.aug_strength, aug_rng) for _ in clips]
    aug = [apply_to_clip(c, r) for c, r in zip(clips, records)]
    labels = torch.tensor([a.class_id if a is not None else -1 for _, a in batch.items])
    targets = []
    for clip, ann in batch.items:
        src = source_hw.get(clip.video_id, clip.pixels.shape[1:3])
        targets.append(rasterize(ann, clip.frame_indices, src, clip.pixels.shape[1:3]))
    return {
        "x": clips_to_tensor(clips, dtype),
        "x_aug": clips_to_tensor(aug, dtype),
        "records": records,
        "labels": labels,
        "is_labeled": labels >= 0,
        "targets": torch.from_numpy(np.stack(targets)).to(dtype),
    }


def compute_losses(model: ActionDetector, prepared: dict, config: TrainConfig, w: float,
                   masks: dict | None = None):
    """Forward both views and assemble the objective for ``config.mode``.

    Returns ``(total, breakdown, masks)``. Passing ``masks`` from an earlier
    call reuses those attention masks instead of rebuilding them, which is
    how finite-difference checks hold the (detached) masks fixed.
    """
    mode = config.mode
    x, lab = prepared["x"], prepared["is_labeled"]
    masks = {} if masks is None else dict(masks)
    weights = LossWeights(config.lambda_, config.lambda1, config.lambda2, w)
    if mode == "supervised":
        out = model(x[lab])
        sup_cls = margin_loss(out.class_scores, prepared["labels"][lab])
        sup_loc = bce_dice_loss(out.loc, prepared["targets"][lab])
        total, breakdown = total_loss(sup_cls, sup_loc, None, None, weights, mode)
        return total, breakdown, masks

    b = x.shape[0]
    out = model(torch.cat([x, prepared["x_aug"]]))
    scores, pen, loc = out.class_scores[:b], out.penultimate, out.loc
    loc_o, loc_a = loc[:b], loc[b:]
    inv = torch.stack([invert_on_localization(loc_a[i], r) for i, r in enumerate(prepared["records"])])
    valid = torch.stack([validity_mask(r, loc_o.shape[1:]) for r in prepared["records"]])

    if lab.any():
        sup_cls = margin_loss(scores[lab], prepared["labels"][lab])
        sup_loc = bce_dice_loss(loc_o[lab], prepared["targets"][lab])
    else:
        sup_cls = sup_loc = torch.zeros((), dtype=x.dtype)

    cc = jsd_consistency(pen[:b], pen[b:])
    variant = {"semi-lc": "l2", "semi-var": "var", "semi-grad": "grad",
               "semi-both": config.both_variant}.get(mode)
    if variant == "l2":
        lc = l2_consistency(loc_o, inv, valid)
    elif variant == "var":
        if "var" not in masks:
            masks["var"] = coherence_mask(loc_o, inv, config.coherence_window)
        lc = coherence_loss(loc_o, inv, valid, masks["var"], w)
    elif variant == "grad":
        if "grad" not in masks:
            masks["grad"] = gradient_mask(loc_o)
        lc = gradient_smoothness_loss(loc_o, inv, valid, masks["grad"])
    else:
        lc = None
    total, breakdown = total_loss(sup_cls, sup_loc, cc, lc, weights, mode)
    return total, breakdown, masks


def train_step(model, optimizer, batch: MixedBatch, config: TrainConfig, step_index: int, w: float,
               aug_rng, records=None, source_hw: dict | None = None) -> dict:
    """One optimizer update. Returns the loss breakdown with the step index."""
    model.train()
    prepared = prepare_batch(batch, config, aug_rng, records, source_hw)
    total, breakdown, _ = compute_losses(model, prepared, config, w)
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss at step {step_index}: {breakdown}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return {"step": step_index, **breakdown}


# ---------------------------------------------------------------------------
# evaluation


def _windows(length: int, frames: int, skip: int):
    """Clip start positions covering every frame of a video once (where possible)."""
    starts = []
    for r in range(skip):
        seq = list(range(r, length, skip))
        if len(seq) < frames:
            continue
        firsts = list(range(0, len(seq) - frames + 1, frames))
        if firsts[-1] + frames < len(seq):
            firsts.append(len(seq) - frames)
        starts += [seq[i] for i in firsts]
    return starts


@torch.no_grad()
def predict_video(model, video: np.ndarray, config: TrainConfig):
    """Per-frame localization at source resolution and averaged class scores."""
    model.eval()
    dtype = DTYPES[config.dtype]
    res = (config.resolution, config.resolution)
    starts = _windows(len(video), config.frames, config.skip)
    clips = [extract_clip(video, s, config.frames, config.skip, res) for s in starts]
    out = model(clips_to_tensor(clips, dtype))
    loc = out.loc
    if tuple(loc.shape[-2:]) != tuple(video.shape[1:3]):
        loc = F.interpolate(loc, size=tuple(video.shape[1:3]), mode="bilinear", align_corners=False)
    frames = {}
    for clip, maps in zip(clips, loc.double().numpy()):
        for t, plane in zip(clip.frame_indices, maps):
            frames.setdefault(t, plane)
    return dict(sorted(frames.items())), out.class_scores.double().mean(0).numpy()


def evaluate(model, index: DatasetIndex, video_ids, config: TrainConfig, cache=None) -> dict:
    """Metrics report for the given videos."""
    cache = {} if cache is None else cache
    dets, gts, tubes, gt_tubes = [], [], [], []
    for vid in video_ids:
        if vid not in cache:
            cache[vid] = index.load_video(vid)
        frames, scores = predict_video(model, cache[vid], config)
        loc = np.stack(list(frames.values()))
        d, tube = map_to_detections(loc, scores, config.det_threshold, vid, list(frames),
                                    index.annotation_mode)
        dets += d
        if tube is not None:
            tubes.append(tube)
        g, gt_tube = ground_truth_from_annotation(index.annotations[vid])
        gts += g
        if gt_tube is not None:
            gt_tubes.append(gt_tube)
    return metrics_report(dets, gts, tubes, gt_tubes, index.class_count)


# ---------------------------------------------------------------------------
# checkpoints


def _pack_tensors(tensors: dict) -> bytes:
    header, chunks, offset = {}, [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        header[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset,
                        "nbytes": arr.nbytes}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def _unpack_tensors(blob: bytes) -> dict:
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + n])
    body = blob[8 + n:]
    out = {}
    for name, meta in header.items():
        raw = body[meta["offset"]:meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])
        out[name] = torch.from_numpy(arr.copy())
    return out


def save_checkpoint(directory, model, optimizer, config: TrainConfig, epoch: int, extra: dict | None = None):
    """Write ``params.bin``, ``optim.bin`` and ``manifest.json`` to ``directory``."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    params = _pack_tensors(model.state_dict())
    (tmp / "params.bin").write_bytes(params)
    buf = io.BytesIO()
    torch.save(optimizer.state_dict() if optimizer is not None else {}, buf)
    (tmp / "optim.bin").write_bytes(buf.getvalue())
    flat = config.to_flat()
    manifest = {
        "epoch": epoch,
        "config": flat,
        "config_hash": config_hash(flat),
        "seed": config.seed,
        "code_version": __version__,
        "params_sha256": hashlib.sha256(params).hexdigest(),
        **(extra or {}),
    }
    manifest.setdefault("rng_states", {})
    manifest.setdefault("best_metric", None)
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    return directory


def load_checkpoint(directory, expected: TrainConfig | None = None, allow_mismatch: bool = False) -> dict:
    """Read and verify a checkpoint directory.

    Returns ``{"params", "optim", "manifest", "config"}``. Raises
    :class:`CheckpointError` on a tampered manifest, corrupt parameters, or a
    configuration differing from ``expected`` (model fields always, other
    fields unless ``allow_mismatch``).
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / "params.bin").read_bytes()
        optim_blob = (directory / "optim.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{directory}: unreadable checkpoint ({exc})") from exc
    if manifest.get("config_hash") != config_hash(manifest.get("config", {})):
        raise CheckpointError(f"{directory}: manifest config hash does not match its config")
    if manifest.get("params_sha256") != hashlib.sha256(blob).hexdigest():
        raise CheckpointError(f"{directory}: params.bin does not match the manifest hash")
    config = TrainConfig.from_flat(manifest["config"])
    if expected is not None:
        want, have = expected.to_flat(), manifest["config"]
        diff = sorted(k for k in want if want[k] != have.get(k))
        model_diff = [k for k in diff if k.startswith("model.")]
        if model_diff:
            raise CheckpointError(f"model config mismatch on field {model_diff[0]}: "
                                  f"checkpoint has {have.get(model_diff[0])!r}, "
                                  f"expected {want[model_diff[0]]!r}")
        if diff and not allow_mismatch:
            raise CheckpointError(f"config hash mismatch on resume (fields: {', '.join(diff)}); "
                                  f"pass allow_mismatch to override")
    optim = torch.load(io.BytesIO(optim_blob), weights_only=False)
    return {"params": _unpack_tensors(blob), "optim": optim, "manifest": manifest, "config": config}


def model_from_checkpoint(directory, expected: TrainConfig | None = None):
    state = load_checkpoint(directory, expected)
    config = state["config"]
    model = ActionDetector(config.model).to(DTYPES[config.dtype])
    model.load_state_dict(state["params"])
    return model, config


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    out_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path | None
    train_log: Path
    eval_log: Path
    final_report: dict | None
    model: ActionDetector


def prepare_index(config: TrainConfig, data_root, split_path=None) -> DatasetIndex:
    index = load_dataset(data_root)
    if split_path is not None and Path(split_path).exists():
        index = load_split(index, split_path)
    else:
        index = split_labeled(index, config.labeled_fraction, config.seed)
    if config.unlabeled_multiple is not None and config.mode != "supervised":
        index = limit_unlabeled(index, config.unlabeled_multiple, config.seed)
    return index


def _model_config(config: TrainConfig, index: DatasetIndex) -> ModelConfig:
    return dataclasses.replace(config.model, num_classes=index.class_count,
                               output_size=[config.frames, config.resolution, config.resolution])


def _truncate(path: Path, lines: int):
    if path.exists():
        kept = path.read_text().splitlines(keepends=True)[:lines]
        path.write_text("".join(kept))


def fit(config: TrainConfig, data_root, out_dir, resume: bool = False, split_path=None,
        stop_after_epoch: int | None = None, allow_mismatch: bool = False) -> FitResult:
    """Train for ``config.epochs`` epochs, evaluating and checkpointing every epoch.

    One epoch is ``ceil((N_labeled + N_unlabeled) / batch_size)`` steps in every
    mode, so modes see the same number of updates. With ``resume`` the run
    continues from ``out_dir/checkpoints/last``. ``stop_after_epoch`` ends the
    run early as if interrupted.
    """
    configure_determinism()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = prepare_index(config, data_root, split_path)
    config = dataclasses.replace(config, model=_model_config(config, index))
    dtype = DTYPES[config.dtype]
    save_split(index, out_dir / "split.json", config.seed, config.labeled_fraction)
    (out_dir / "config.json").write_text(json.dumps(config.to_flat(), indent=1, sort_keys=True) + "\n")

    model = init_params(config.model, config.seed, dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    supervised = config.mode == "supervised"
    cache = {}
    sampler = MixedBatchSampler(index, config.batch_size, seed=config.seed + 1, supervised=supervised,
                                num_frames=config.frames, skip=config.skip,
                                resolution=(config.resolution, config.resolution), cache=cache)
    aug_rng = np.random.default_rng([config.seed, 2])
    scheduler = PlateauScheduler(config.lr, config.plateau)
    ramp = RampSchedule(config.ramp.length or max(1, round(config.ramp.fraction * config.epochs)),
                        config.ramp.w_max)
    # supervised runs take as many steps as the matching semi-supervised run
    n_train = len(index.labeled_ids) + len(index.unlabeled_ids)
    steps_per_epoch = math.ceil(n_train / config.batch_size)

    source_hw = {vid: tuple(shape[1:3]) for vid, shape in index.video_shapes.items()}
    ckpt_root = out_dir / "checkpoints"
    train_log, eval_log = out_dir / "train_log.jsonl", out_dir / "eval_log.jsonl"
    start_epoch, best_metric, step = 0, None, 0
    if resume:
        state = load_checkpoint(ckpt_root / "last", config, allow_mismatch)
        model.load_state_dict(state["params"])
        optimizer.load_state_dict(state["optim"])
        man = state["manifest"]
        start_epoch, best_metric, step = man["epoch"], man["best_metric"], man["step"]
        sampler.load_state_dict(man["rng_states"]["sampler"])
        aug_rng.bit_generator.state = man["rng_states"]["aug"]
        scheduler.load_state_dict(man["scheduler"])
        _truncate(train_log, man["log_lines"]["train"])
        _truncate(eval_log, man["log_lines"]["eval"])
    else:
        for path in (train_log, eval_log):
            path.write_text("")
        save_checkpoint(ckpt_root / "last", model, optimizer, config, 0, _extras(
            0, sampler, aug_rng, scheduler, best_metric, train_log, eval_log))

    report = None
    val_ids = index.val_ids
    for epoch in range(start_epoch, config.epochs):
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
        w = rampup_w(epoch, ramp)
        for group in optimizer.param_groups:
            group["lr"] = scheduler.lr
        totals = []
        with open(train_log, "a") as fh:
            for _ in range(steps_per_epoch):
                rec = train_step(model, optimizer, sampler.sample_mixed_batch(), config, step, w, aug_rng,
                                 source_hw=source_hw)
                rec.update(epoch=epoch, lr=scheduler.lr)
                fh.write(json.dumps(rec) + "\n")
                totals.append(rec["total"])
                step += 1
        epoch_loss = float(np.mean(totals))
        scheduler.step(epoch_loss)
        record = {"epoch": epoch, "train_loss": epoch_loss, "w": w, "lr": scheduler.lr}
        if val_ids and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            report = evaluate(model, index, val_ids, config, cache)
            record.update({
                "f_map@0.2": report["iou_0.2"]["f_map"], "f_map@0.5": report["iou_0.5"]["f_map"],
                "v_map@0.2": report["iou_0.2"]["v_map"], "v_map@0.5": report["iou_0.5"]["v_map"],
            })
        with open(eval_log, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        log.info("epoch %d loss %.4f %s", epoch, epoch_loss,
                 {k: round(v, 4) for k, v in record.items() if k.startswith(("f_map", "v_map"))})
        improved = "f_map@0.5" in record and (best_metric is None or record["f_map@0.5"] > best_metric)
        if improved:
            best_metric = record["f_map@0.5"]
        extras = _extras(step, sampler, aug_rng, scheduler, best_metric, train_log, eval_log)
        extras["metrics_tail"] = [record]
        save_checkpoint(ckpt_root / "last", model, optimizer, config, epoch + 1, extras)
        if improved:
            save_checkpoint(ckpt_root / "best", model, optimizer, config, epoch + 1, extras)
        if report is not None:
            (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")

    best = ckpt_root / "best"
    return FitResult(out_dir, ckpt_root / "last", best if best.exists() else None, train_log,
                     eval_log, report, model)


def _extras(step, sampler, aug_rng, scheduler, best_metric, train_log, eval_log):
    def count(path):
        return len(path.read_text().splitlines()) if path.exists() else 0

    return {
        "step": step,
        "rng_states": {"sampler": sampler.state_dict(), "aug": aug_rng.bit_generator.state},
        "scheduler": scheduler.state_dict(),
        "best_metric": best_metric,
        "log_lines": {"train": count(train_log), "eval": count(eval_log)},
    }
