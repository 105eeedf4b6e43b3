"""``spotnet`` command line: data generation, annotation, training, ablation, detection, evaluation.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

log = logging.getLogger("spotnet")


class UsageError(Exception):
    pass


def _load_config(path: str | None, required: bool) -> dict:
    if path is None:
        if required:
            raise UsageError("--config is required for this command")
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def _opt(args, cfg: dict, name: str, default=None):
    """Flag value if given, else config value, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def _hash_inputs(config_path: str | None, inputs: list[Path]) -> str:
    h = hashlib.sha256()
    files = []
    if config_path:
        files.append(Path(config_path))
    for p in inputs:
        if p.is_dir():
            files.extend(sorted(f for f in p.iterdir() if f.suffix == ".json"))
        elif p.is_file():
            files.append(p)
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _write_manifest(out: Path, args, resolved: dict, inputs: list[Path]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": list(getattr(args, "argv", sys.argv[1:])),
        "config_path": args.config,
        "seed": resolved.get("seed"),
        "out_dir": str(out),
        "resolved": resolved,
        "input_hash": _hash_inputs(args.config, inputs),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, default=str))


def _set_threads() -> None:
    n = os.environ.get("SPOTNET_NUM_THREADS")
    if n:
        import torch
        torch.set_num_threads(max(1, int(n)))


# commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .videogen import SceneConfig, gen_sequence, write_sequence

    cfg = _load_config(args.config, required=True)
    out = Path(_opt(args, cfg, "out", "data"))
    seed = int(_opt(args, cfg, "seed", 0))
    specs = cfg.get("sequences") or [{"name": "seq_000", "scene": cfg.get("scene", {})}]
    written = []
    for i, spec in enumerate(specs):
        scene = dict(spec.get("scene", {}))
        if args.seed is not None or "seed" not in scene:
            scene["seed"] = seed + i
        sc = SceneConfig.from_dict(scene)
        name = spec.get("name", f"seq_{i:03d}")
        seq = gen_sequence(sc, name=name)
        write_sequence(seq, out / name)
        written.append({"name": name, "scene": sc.to_dict()})
        print(f"wrote {out / name} ({len(seq)} frames, camera {sc.camera_motion})")
    _write_manifest(out, args, {"seed": seed, "sequences": written}, [])
    return 0


def cmd_annotate(args) -> int:
    from . import annotate as ann
    from .videogen import read_sequence

    cfg = _load_config(args.config, required=False)
    seq_dir = Path(args.seq_dir)
    mode = _opt(args, cfg, "mode")
    if mode not in ("fixed", "moving"):
        raise UsageError("--mode must be 'fixed' or 'moving'")
    out = Path(_opt(args, cfg, "out", str(seq_dir)))
    seq = read_sequence(seq_dir)
    if seq.config is not None:
        expected = "fixed" if seq.config.camera_motion == "none" else "moving"
        if expected != mode:
            print(f"warning: mode {mode!r} but sequence manifest says camera_motion="
                  f"{seq.config.camera_motion!r} (expected mode {expected!r})", file=sys.stderr)
    bg = ann.BgParams(**cfg.get("bg_params", {}))
    fp = ann.FlowParams(**cfg.get("flow_params", {}))
    masks = ann.annotate_sequence(seq, mode, bg, fp)
    violations = ann.subset_violations(masks, seq.gt_boxes)
    report = {"subset_violations": violations, "subset_ok": violations == 0,
              "foreground_rate": float(np.mean([m.mean() for m in masks]))}
    if all(m is not None for m in seq.oracle_masks):
        start = bg.warmup_frames if mode == "fixed" else 0
        ious = []
        for m, o in zip(masks[start:], seq.oracle_masks[start:]):
            u = (m | o).sum()
            ious.append(1.0 if u == 0 else float((m & o).sum() / u))
        report["mean_iou_vs_oracle"] = float(np.mean(ious)) if ious else None
    ann.write_annotations(masks, out, mode, bg, fp, extra={"report": report, "sequence": str(seq_dir)})
    print(f"wrote {len(masks)} masks to {out}")
    print(f"subset invariant: {'OK' if violations == 0 else 'VIOLATED'} ({violations} pixels outside boxes)")
    if report.get("mean_iou_vs_oracle") is not None:
        print(f"mean IoU vs oracle: {report['mean_iou_vs_oracle']:.4f}")
    _write_manifest(out, args, {"mode": mode, "seq_dir": str(seq_dir), **report}, [seq_dir])
    return 0 if violations == 0 else 1


def _dataset_from_config(data: dict, seed: int):
    """Returns (train_set, eval_set) from sequence dirs or an inline synthetic scene."""
    from . import annotate as ann
    from .trainer import DetectionDataset
    from .videogen import SceneConfig, gen_sequence, read_sequence

    train_frames = data.get("train_frames")
    eval_frames = data.get("eval_frames")
    seqs, masks = [], []
    if "scene" in data:
        scene = dict(data["scene"])
        scene.setdefault("seed", seed)
        sc = SceneConfig.from_dict(scene)
        seq = gen_sequence(sc)
        mode = "fixed" if sc.camera_pan is None else "moving"
        seqs.append(seq)
        masks.append(ann.annotate_sequence(seq, mode))
    for d in data.get("sequences", []):
        seq = read_sequence(d)
        seqs.append(seq)
        annot = Path(data.get("annotations_dir", d))
        if (annot / "annot_params.json").exists():
            masks.append(ann.read_annotations(annot))
        else:
            masks.append(None)
    if not seqs:
        raise UsageError("config 'data' needs 'scene' or 'sequences'")
    use_masks = masks if all(m is not None for m in masks) else None

    def rng(fr):
        return None if fr is None else list(range(fr[0], fr[1]))
    train_set = DetectionDataset.from_sequences(seqs, use_masks, rng(train_frames))
    eval_set = DetectionDataset.from_sequences(seqs, use_masks, rng(eval_frames)) if eval_frames else None
    return train_set, eval_set


def _train_config(cfg: dict, seed: int, n_iters):
    from .trainer import TrainConfig

    tc = dict(cfg.get("train", {}))
    tc["seed"] = seed
    if n_iters is not None:
        tc["n_iters"] = n_iters
    return TrainConfig.from_dict(tc)


def cmd_train(args) -> int:
    from .trainer import evaluate, train

    cfg = _load_config(args.config, required=True)
    seed = int(_opt(args, cfg, "seed", 0))
    out = Path(_opt(args, cfg, "out", "runs/train"))
    tcfg = _train_config(cfg, seed, args.iters)
    train_set, eval_set = _dataset_from_config(cfg.get("data", {}), seed)
    res = train(train_set, tcfg, out, progress_every=max(1, tcfg.n_iters // 20))
    summary = {"seed": seed, "train_config": tcfg.to_dict(), "checkpoint": str(res.checkpoint),
               "final_loss": res.log[-1]}
    ev = evaluate(res.model, eval_set or train_set)
    summary["map"] = ev.map
    print(f"checkpoint {res.checkpoint}")
    print(f"mAP@0.7 on {'eval' if eval_set else 'train'} frames: {ev.map:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    _write_manifest(out, args, summary, [Path(s) for s in cfg.get("data", {}).get("sequences", [])])
    return 0


def cmd_ablate(args) -> int:
    from .trainer import ablate

    cfg = _load_config(args.config, required=True)
    seed = int(_opt(args, cfg, "seed", 0))
    out = Path(_opt(args, cfg, "out", "runs/ablate"))
    tcfg = _train_config(cfg, seed, args.iters)
    train_set, eval_set = _dataset_from_config(cfg.get("data", {}), seed)
    if eval_set is None:
        raise UsageError("ablation needs data.eval_frames (held-out frames)")
    report = ablate(train_set, eval_set, tcfg, out, iou_min=float(cfg.get("iou_min", 0.7)))
    print(report.table())
    print(f"wrote {out / 'ablation.json'}, {out / 'ablation.csv'}, {out / 'pr_curves.csv'}, {out / 'pr_curves.png'}")
    _write_manifest(out, args, {"seed": seed, "train_config": tcfg.to_dict(), **report.to_dict()},
                    [Path(s) for s in cfg.get("data", {}).get("sequences", [])])
    return 0


def cmd_detect(args) -> int:
    from .decode import detect_batch, detections_to_records
    from .net import frames_to_tensor, load_checkpoint
    from .videogen import read_sequence

    cfg = _load_config(args.config, required=False)
    ckpt = _opt(args, cfg, "checkpoint")
    seq_dir = _opt(args, cfg, "seq_dir")
    if not ckpt or not seq_dir:
        raise UsageError("detect needs --checkpoint and a sequence directory")
    out = Path(_opt(args, cfg, "out", "runs/detect"))
    k = int(_opt(args, cfg, "k", 100))
    thr = float(_opt(args, cfg, "score_thresh", 0.25))
    model, _ = load_checkpoint(ckpt)
    seq = read_sequence(seq_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_frame = []
    for s in range(0, len(seq), 8):
        dets, att = detect_batch(frames_to_tensor(seq.frames[s:s + 8]), model, k, thr)
        per_frame.extend(dets)
        for i in range(att.shape[0]):
            a = (att[i, 0].numpy() * 255).round().astype(np.uint8)
            Image.fromarray(a).save(out / f"att_{s + i:06d}.png")
    (out / "detections.json").write_text(json.dumps(detections_to_records(per_frame), indent=1))
    print(f"wrote detections for {len(per_frame)} frames to {out / 'detections.json'}")
    _write_manifest(out, args, {"checkpoint": ckpt, "seq_dir": seq_dir, "k": k, "score_thresh": thr},
                    [Path(seq_dir), Path(ckpt)])
    return 0


def cmd_eval_det(args) -> int:
    from .decode import records_to_detections
    from .evalkit import mean_average_precision, plot_pr_curves, write_pr_csv
    from .videogen import records_to_boxes

    cfg = _load_config(args.config, required=False)
    det_path = _opt(args, cfg, "detections")
    gt_path = _opt(args, cfg, "gt")
    if not det_path or not gt_path:
        raise UsageError("eval-det needs --detections and --gt")
    iou_min = float(_opt(args, cfg, "iou", 0.7))
    method = _opt(args, cfg, "ap_method", "11point")
    dets = records_to_detections(json.loads(Path(det_path).read_text()))
    gts = dict(enumerate(records_to_boxes(json.loads(Path(gt_path).read_text()))))
    m, curves = mean_average_precision(dets, gts, iou_min=iou_min, method=method)
    print(f"mAP@{iou_min:g} {m:.4f}")
    for c, cv in curves.items():
        print(f"  class {c}: AP {cv.ap:.4f} ({cv.n_gt} gt)")
    out = Path(_opt(args, cfg, "out") or Path(det_path).parent)
    out.mkdir(parents=True, exist_ok=True)
    named = {f"class_{c}": cv for c, cv in curves.items()}
    write_pr_csv(named, out / "pr_curve.csv")
    plot_pr_curves(named, out / "pr_curve.png")
    metrics = {"iou_min": iou_min, "method": method, "map": m, "ap": {str(c): cv.ap for c, cv in curves.items()}}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    _write_manifest(out, args, metrics, [Path(det_path), Path(gt_path)])
    return 0


def cmd_eval_seg(args) -> int:
    from .decode import records_to_detections
    from .evalkit import binarize_and_mask, f_measure

    cfg = _load_config(args.config, required=False)
    det_path = _opt(args, cfg, "detections")
    att_dir = _opt(args, cfg, "attention_dir")
    gt_dir = _opt(args, cfg, "gt_masks")
    if not det_path or not att_dir or not gt_dir:
        raise UsageError("eval-seg needs --detections, --attention-dir and --gt-masks")
    thresh = float(_opt(args, cfg, "thresh", 0.5))
    prefix = _opt(args, cfg, "mask_prefix", "mask_")
    dets = records_to_detections(json.loads(Path(det_path).read_text()))
    rows = []
    for frame in sorted(dets):
        gt_file = Path(gt_dir) / f"{prefix}{frame:06d}.png"
        att_file = Path(att_dir) / f"att_{frame:06d}.png"
        if not gt_file.exists() or not att_file.exists():
            continue
        att = np.asarray(Image.open(att_file)).astype(np.float64) / 255.0
        gt = np.asarray(Image.open(gt_file)) > 127
        pred = binarize_and_mask(att, dets[frame], thresh)
        rows.append(f_measure(pred, gt))
    if not rows:
        raise RuntimeError("no frames with both an attention map and a ground-truth mask")
    p, r, f = (float(np.mean(c)) for c in zip(*rows))
    print(f"frames {len(rows)}  precision {p:.4f}  recall {r:.4f}  F-measure {f:.4f}")
    out = Path(_opt(args, cfg, "out") or Path(det_path).parent)
    metrics = {"frames": len(rows), "precision": p, "recall": r, "f_measure": f, "thresh": thresh}
    out.mkdir(parents=True, exist_ok=True)
    (out / "seg_metrics.json").write_text(json.dumps(metrics, indent=1))
    _write_manifest(out, args, metrics, [Path(det_path)])
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "detect": cmd_detect,
    "eval-det": cmd_eval_det,
    "eval-seg": cmd_eval_seg,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spotnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML config file; flags override its keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    common(sub.add_parser("gen-data", help="render synthetic sequences"), config_required=True)
    sp = common(sub.add_parser("annotate", help="semi-supervised masks for one sequence"))
    sp.add_argument("seq_dir")
    sp.add_argument("--mode", choices=("fixed", "moving"))
    for name in ("train", "ablate"):
        sp = common(sub.add_parser(name), config_required=True)
        sp.add_argument("--iters", type=int, help="override train.n_iters")
    sp = common(sub.add_parser("detect", help="run a checkpoint over a sequence"))
    sp.add_argument("seq_dir", nargs="?")
    sp.add_argument("--checkpoint")
    sp.add_argument("--k", type=int)
    sp.add_argument("--score-thresh", dest="score_thresh", type=float)
    sp = common(sub.add_parser("eval-det", help="mAP of detection records against gt.json"))
    sp.add_argument("--detections")
    sp.add_argument("--gt")
    sp.add_argument("--iou", type=float)
    sp.add_argument("--ap-method", dest="ap_method", choices=("11point", "continuous"))
    sp = common(sub.add_parser("eval-seg", help="foreground F-measure of attention maps"))
    sp.add_argument("--detections")
    sp.add_argument("--attention-dir", dest="attention_dir")
    sp.add_argument("--gt-masks", dest="gt_masks")
    sp.add_argument("--thresh", type=float)
    sp.add_argument("--mask-prefix", dest="mask_prefix")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    _set_threads()
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spotnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"spotnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
