"""``stssl`` command line: synth, train, eval, sweep, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .dataio import DatasetError, generate_synthetic_dataset, load_dataset
from .evalkit import Detection, Tube, ground_truth_from_annotation, map_to_detections, metrics_report
from .losses import MODES
from .trainer import (CheckpointError, NonFiniteLossError, TrainConfig, evaluate, fit,
                      model_from_checkpoint, parse_override, predict_video)

log = logging.getLogger("stssl")

METRIC_KEYS = ("f_map@0.2", "f_map@0.5", "v_map@0.2", "v_map@0.5")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _csv(cast):
    def parse(text):
        try:
            return [cast(x) for x in text.split(",") if x]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from exc
    return h, w


# ---------------------------------------------------------------------------
# configuration


def build_config(args) -> TrainConfig:
    """Defaults, then the config file, then ``--set``, then explicit flags."""
    config = TrainConfig()
    if getattr(args, "config", None):
        try:
            flat = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        config = config.with_overrides(flat)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        try:
            key, value = parse_override(item, config)
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc).strip("'\"")) from exc
        overrides[key] = value
    flags = {"mode": "mode", "labeled_frac": "labeled_fraction", "epochs": "epochs",
             "seed": "seed", "lr": "lr", "batch_size": "batch_size"}
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    try:
        return config.with_overrides(overrides)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    if out.exists() and args.force:
        import shutil
        shutil.rmtree(out)
    h, w = args.size
    index = generate_synthetic_dataset(out, args.videos, args.classes, args.frames, h, w,
                                       untrimmed_fraction=args.untrimmed_frac, seed=args.seed,
                                       val_fraction=args.val_frac, mode=args.annotation)
    anns = index.annotations.values()
    untrimmed = sum(not a.trimmed for a in anns)
    print(f"videos: {len(index.annotations)} (train {len(index.train_ids)}, val {len(index.val_ids)})")
    print(f"classes: {index.class_count} ({', '.join(index.class_names)})")
    print(f"trimmed: {len(index.annotations) - untrimmed}  untrimmed: {untrimmed}")
    return 0


def _print_table(report: dict):
    print(f"{'IoU':>5} {'f-mAP':>8} {'v-mAP':>8}")
    for thr in ("0.2", "0.5"):
        entry = report[f"iou_{thr}"]
        print(f"{thr:>5} {entry['f_map']:8.4f} {entry['v_map']:8.4f}")


def cmd_train(args) -> int:
    config = build_config(args)
    result = fit(config, args.data, args.out, resume=args.resume, split_path=args.split,
                 allow_mismatch=args.allow_mismatch)
    if result.final_report is not None:
        _print_table(result.final_report)
    print(f"checkpoint: {result.last_checkpoint}")
    return 0


def _region_to_json(region):
    if isinstance(region, np.ndarray):
        ys, xs = np.nonzero(region)
        return {"mask_shape": list(region.shape), "pixels": np.stack([ys, xs], 1).tolist()}
    return [int(v) for v in region]


def _region_from_json(value):
    if isinstance(value, dict):
        mask = np.zeros(value["mask_shape"], dtype=bool)
        pix = np.asarray(value["pixels"], dtype=int).reshape(-1, 2)
        mask[pix[:, 0], pix[:, 1]] = True
        return mask
    return tuple(value)


def load_predictions(path, num_classes: int):
    """Read a prediction dump: ``{"videos": {id: {"class_id", "score", "frames": {t: region}}}}``."""
    try:
        doc = json.loads(Path(path).read_text())
        dets, tubes = [], []
        for vid, entry in doc["videos"].items():
            regions = {int(t): _region_from_json(r) for t, r in entry["frames"].items()}
            c, s = int(entry["class_id"]), float(entry["score"])
            if not 0 <= c < num_classes:
                raise ValueError(f"video {vid}: class id {c} outside the {num_classes}-class taxonomy")
            dets += [Detection(vid, t, c, s, r) for t, r in regions.items()]
            if regions:
                tubes.append(Tube(vid, c, s, regions))
    except (OSError, AttributeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed prediction dump {path}: {exc}") from exc
    return dets, tubes


def _subset(index, which):
    return {"val": index.val_ids, "train": index.train_ids,
            "all": sorted(index.annotations)}[which]


def cmd_eval(args) -> int:
    index = load_dataset(args.data)
    ids = _subset(index, args.subset)
    if args.predictions:
        dets, tubes = load_predictions(args.predictions, index.class_count)
        wanted = set(ids)
        dets = [d for d in dets if d.video_id in wanted]
        tubes = [t for t in tubes if t.video_id in wanted]
        gts, gt_tubes = [], []
        for vid in ids:
            g, tube = ground_truth_from_annotation(index.annotations[vid])
            gts += g
            gt_tubes += [tube] if tube is not None else []
        report = metrics_report(dets, gts, tubes, gt_tubes, index.class_count)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        expected = build_config(args) if (args.config or args.set) else None
        model, config = model_from_checkpoint(args.checkpoint, expected)
        if config.model.num_classes != index.class_count:
            raise CheckpointError(f"checkpoint predicts {config.model.num_classes} classes but the "
                                  f"dataset has {index.class_count}")
        report = evaluate(model, index, ids, config)
        if args.dump_predictions:
            dump = {"videos": {}}
            for vid in ids:
                frames, scores = predict_video(model, index.load_video(vid), config)
                d, _ = map_to_detections(np.stack(list(frames.values())), scores, config.det_threshold,
                                         vid, list(frames), index.annotation_mode)
                c = int(np.argmax(scores))
                dump["videos"][vid] = {"class_id": c, "score": float(scores[c]),
                                       "frames": {str(x.frame_index): _region_to_json(x.region) for x in d}}
            Path(args.dump_predictions).write_text(json.dumps(dump) + "\n")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    _print_table(report)
    return 0


def _flat_metrics(report: dict) -> dict:
    return {f"{kind}@{t}": report[f"iou_{t}"][kind] for t in ("0.2", "0.5") for kind in ("f_map", "v_map")}


def _sweep_job(job):
    config, data, out = job
    result = fit(TrainConfig.from_flat(config), data, out)
    return _flat_metrics(result.final_report)


def run_sweep(base: TrainConfig, data, out_dir, modes, seeds, fractions=None, multiples=None,
              jobs: int = 1) -> dict:
    """Train every (mode, value, seed) combination and summarize final metrics."""
    out_dir = Path(out_dir)
    if multiples:
        axis, values = "unlabeled_multiple", list(multiples)
    else:
        axis, values = "labeled_fraction", list(fractions or [base.labeled_fraction])
    plan = []
    for mode in modes:
        for value in values:
            for seed in seeds:
                cfg = base.with_overrides({"mode": mode, axis: value, "seed": seed})
                run = out_dir / f"{mode}_{axis}{value}_seed{seed}"
                plan.append(((mode, value, seed), (cfg.to_flat(), str(data), str(run))))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_job, [job for _, job in plan]))
    else:
        results = [_sweep_job(job) for _, job in plan]
    entries = []
    for mode in modes:
        for value in values:
            runs = [(key[2], res) for (key, _), res in zip(plan, results) if key[:2] == (mode, value)]
            entry = {"mode": mode, axis: value, "seeds": [s for s, _ in runs]}
            for metric in METRIC_KEYS:
                vals = [res[metric] for _, res in runs]
                entry[metric] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": vals}
            entries.append(entry)
    report = {"axis": axis, "entries": entries}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep_report.json").write_text(json.dumps(report, indent=1) + "\n")
    return report


def cmd_sweep(args) -> int:
    base = build_config(args)
    if args.fractions and args.unlabeled_multiples:
        raise UsageError("sweep either --fractions or --unlabeled-multiples, not both")
    report = run_sweep(base, args.data, args.out, args.modes, args.seeds, args.fractions,
                       args.unlabeled_multiples, args.jobs)
    axis = report["axis"]
    for e in report["entries"]:
        print(f"{e['mode']:>11} {axis}={e[axis]:<6} f-mAP@0.5 {e['f_map@0.5']['mean']:.4f} "
              f"v-mAP@0.5 {e['v_map@0.5']['mean']:.4f}")
    return 0


def _read_sweep(path):
    try:
        doc = json.loads(Path(path).read_text())
        axis = doc["axis"]
        return axis, [(e["mode"], float(e[axis]), e) for e in doc["entries"]]
    except (OSError, KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"malformed report {path}: {exc}") from exc


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series, axis = {}, None
    for path in args.reports:
        axis, rows = _read_sweep(path)
        for mode, value, entry in rows:
            if args.metric not in entry:
                raise UsageError(f"malformed report {path}: no metric {args.metric}")
            series.setdefault(mode, []).append((value, entry[args.metric]["mean"], entry[args.metric]["std"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode, points in series.items():
        points.sort()
        xs, ys, es = zip(*points)
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=mode)
    ax.set_xlabel(axis.replace("_", " "))
    ax.set_ylabel(args.metric)
    ax.legend()
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    print(f"wrote {args.out} ({len(series)} series)")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p, training=True):
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    if training:
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--labeled-frac", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stssl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic moving-shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=250)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=_size, default=(64, 64), help="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--untrimmed-frac", type=float, default=0.0)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--annotation", choices=("box", "mask"), default="box")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", help="split.json to use instead of drawing one")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--allow-mismatch", action="store_true",
                   help="resume even if non-model config keys changed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a prediction dump")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--subset", choices=("val", "train", "all"), default="val")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--dump-predictions", help="also write the checkpoint's predictions here")
    _add_config_flags(p, training=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train across labeled fractions or unlabeled amounts")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", type=_csv(str), default=["supervised", "semi-var"])
    p.add_argument("--seeds", type=_csv(int), default=[0, 1, 2])
    p.add_argument("--fractions", type=_csv(float))
    p.add_argument("--unlabeled-multiples", type=_csv(float))
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="plot sweep reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--metric", default="v_map@0.5", choices=METRIC_KEYS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "modes", None):
        bad = [m for m in args.modes if m not in MODES]
        if bad:
            parser.error(f"unknown mode(s): {', '.join(bad)}")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stssl: error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, NonFiniteLossError, OSError, ValueError, KeyError) as exc:
        print(f"stssl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
