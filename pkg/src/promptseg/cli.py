"""Batch command-line interface.

Every subcommand is a thin composition of module operations: preprocess,
segment, segment-video, evaluate, train, finetune, hitl-round,
hitl-select, serve, report.  Runtime failures print a machine-readable
JSON error to stderr and exit nonzero; --seed pins all randomness.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import hitl, metrics, training, volume_io
from .model import PromptableNet, ModelConfig, load_checkpoint, save_checkpoint
from .preprocess import enforce_axial_spacing, get_preset, percentile_normalize, window_ct
from .propagate import segment_3d, segment_video
from .volume import (
    NORMALIZED_0_255,
    BoundingBox2D,
    BoundingBox3D,
    LabelMask,
    SliceRange,
    VoxelGrid,
)


class CliError(RuntimeError):
    def __init__(self, message, code="error"):
        super().__init__(message)
        self.code = code


def parse_box(text) -> BoundingBox2D:
    """Box syntax: z=<slice>,<xmin>,<ymin>,<xmax>,<ymax>."""
    try:
        z_part, *rest = text.split(",")
        if not z_part.startswith("z="):
            raise ValueError
        coords = [int(v) for v in rest]
        if len(coords) != 4:
            raise ValueError
        return BoundingBox2D(int(z_part[2:]), *coords)
    except ValueError:
        raise CliError(f"bad box {text!r}; expected z=<slice>,<xmin>,<ymin>,<xmax>,<ymax>",
                       "bad_box") from None


def parse_range(text) -> SliceRange:
    """Inclusive range syntax: top:bottom."""
    try:
        top, bottom = text.split(":")
        return SliceRange(int(top), int(bottom))
    except ValueError:
        raise CliError(f"bad range {text!r}; expected top:bottom", "bad_range") from None


def load_volume(path) -> VoxelGrid:
    path = Path(path)
    if path.suffix == ".nii":
        return volume_io.read_nifti1(path.read_bytes())
    return volume_io.load_interchange(path)


def load_normalized_volume(path) -> VoxelGrid:
    grid = load_volume(path)
    if grid.intensity_kind == NORMALIZED_0_255:
        return grid
    values = grid.values
    if values.min() >= 0.0 and values.max() <= 255.0:
        return VoxelGrid(values, grid.spacing, NORMALIZED_0_255)
    raise CliError(
        f"{path} is not normalized; run `promptseg preprocess` first", "not_normalized"
    )


def load_mask(path) -> LabelMask:
    return volume_io.read_nifti1_mask(Path(path).read_bytes())


def _load_manifest(path):
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}: {exc.msg}", "bad_manifest") from None
    if not isinstance(entries, list):
        raise CliError(f"{path}: manifest must be a JSON list", "bad_manifest")
    for i, entry in enumerate(entries):
        for key in ("volume_path", "mask_path"):
            if key not in entry:
                raise CliError(f"{path}: entry {i} missing {key!r}", "bad_manifest")
    return entries


def _load_training_samples(manifest_path):
    entries = _load_manifest(manifest_path)
    base = Path(manifest_path).parent
    cases = []
    for entry in entries:
        grid = load_normalized_volume(base / entry["volume_path"])
        mask = load_mask(base / entry["mask_path"])
        cases.append((grid, mask, entry.get("modality", "CT")))
    object_id = None
    samples = training.samples_from_cases(cases, object_id)
    for sample, entry in zip(samples, entries):
        sample.case_id = entry.get("case_id", entry["volume_path"])
    return samples


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args):
    grid = load_volume(args.volume)
    if args.percentile:
        out = percentile_normalize(grid)
    elif args.preset:
        out = window_ct(grid, get_preset(args.preset))
    else:
        raise CliError("choose --preset or --percentile", "bad_request")
    if args.mask and args.enforce_spacing:
        mask = load_mask(args.mask)
        out, mask = enforce_axial_spacing(out, mask)
        Path(args.mask_out or args.mask).write_bytes(volume_io.write_nifti1_mask(mask))
    Path(args.out).write_bytes(volume_io.write_nifti1(out))
    print(json.dumps({"out": args.out, "dims": list(out.dims), "kind": out.intensity_kind}))
    return 0


def _load_plan(path):
    base = Path(path).parent
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}: {exc.msg}", "bad_plan") from None
    refined = {
        int(z): load_mask(base / ref).labels[int(z)]
        for z, ref in doc.get("refined_masks", {}).items()
    }
    from .propagate import PropagationPlan

    return PropagationPlan.from_json_dict(doc, refined_masks=refined)


def cmd_segment(args):
    volume = load_normalized_volume(args.volume)
    model = load_checkpoint(args.model)
    if args.plan:
        plan = _load_plan(args.plan)
        box, slice_range, refined = plan.box, plan.slice_range, plan.refined_masks
        if box is None:
            raise CliError("plan has no box prompt", "bad_plan")
    else:
        if not args.box:
            raise CliError("provide --box or --plan", "bad_request")
        box = parse_box(args.box)
        slice_range = parse_range(args.range) if args.range else None
        refined = None
    if slice_range is None:
        slice_range = SliceRange(0, volume.dims[2] - 1)
    result = segment_3d(volume, box, slice_range, model, refined_masks=refined)
    Path(args.out).write_bytes(volume_io.write_nifti1_mask(result.mask))
    payload = {"out": args.out, "voxels": int(result.mask.labels.sum()),
               "empty_prompt_mask": result.empty_prompt_mask}
    if args.ref:
        ref = load_mask(args.ref)
        payload["dsc"] = metrics.dsc(result.mask.binary(), ref.binary())
        payload["nsd"] = metrics.nsd(result.mask.binary(), ref.binary(),
                                     spacing=result.mask.spacing, tolerance_mm=args.tolerance)
    print(json.dumps(payload))
    return 0


def cmd_segment_video(args):
    clip = load_normalized_volume(args.clip)
    model = load_checkpoint(args.model)
    box = parse_box(args.box)
    results = segment_video(clip, {1: box}, model=model)
    mask = results[1].mask
    Path(args.out).write_bytes(volume_io.write_nifti1_mask(mask))
    payload = {"out": args.out, "frames": clip.dims[2], "voxels": int(mask.labels.sum())}
    if args.ref:
        ref = load_mask(args.ref)
        report = metrics.video_metrics(mask.binary(), ref.binary())
        payload["dsc"] = report.dsc
        payload["nsd"] = report.nsd
    print(json.dumps(payload))
    return 0


def _evaluate_case(pred_path, ref_path, tolerance, spacing_from_header):
    pred = load_mask(pred_path)
    ref = load_mask(ref_path)
    spacing = pred.spacing if spacing_from_header else (1.0, 1.0, 1.0)
    return {
        "case_id": Path(pred_path).stem,
        "target": "mask",
        "dsc": metrics.dsc(pred.binary(), ref.binary()),
        "nsd": metrics.nsd(pred.binary(), ref.binary(), spacing=spacing, tolerance_mm=tolerance),
    }


def cmd_evaluate(args):
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    if pred_dir.is_dir():
        pairs = []
        for pred_path in sorted(pred_dir.glob("*.nii")):
            ref_path = ref_dir / pred_path.name
            if not ref_path.exists():
                raise CliError(f"no reference for {pred_path.name}", "missing_ref")
            pairs.append((pred_path, ref_path))
    else:
        pairs = [(pred_dir, ref_dir)]
    if not pairs:
        raise CliError("no prediction files found", "empty_input")

    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(
                pool.map(
                    _evaluate_case,
                    [p for p, _ in pairs],
                    [r for _, r in pairs],
                    [args.tolerance] * len(pairs),
                    [args.spacing_from_header] * len(pairs),
                )
            )
    else:
        rows = [_evaluate_case(p, r, args.tolerance, args.spacing_from_header) for p, r in pairs]

    summary = metrics.summarize_scores(rows)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "target", "dsc", "nsd"])
        for row in rows:
            writer.writerow([row["case_id"], row["target"], f"{row['dsc']:.6f}", f"{row['nsd']:.6f}"])
        writer.writerow([])
        writer.writerow(["median", "", f"{summary['dsc']['median']:.6f}", f"{summary['nsd']['median']:.6f}"])
        writer.writerow([
            "iqr", "",
            f"{summary['dsc']['iqr_low']:.6f}-{summary['dsc']['iqr_high']:.6f}",
            f"{summary['nsd']['iqr_low']:.6f}-{summary['nsd']['iqr_high']:.6f}",
        ])
    print(json.dumps(summary))
    return 0


def _train_config_from_args(args, **overrides):
    kwargs = dict(seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        kwargs["epochs"] = args.epochs
    if getattr(args, "lr_encoder", None) is not None:
        kwargs["lr_encoder"] = args.lr_encoder
    if getattr(args, "lr_other", None) is not None:
        kwargs["lr_other"] = args.lr_other
    kwargs.update(overrides)
    return training.TrainConfig(**kwargs)


def cmd_train(args):
    samples = _load_training_samples(args.manifest)
    if args.model:
        model = load_checkpoint(args.model)
    else:
        model = PromptableNet(ModelConfig(input_size=args.input_size), seed=args.seed)
    config = _train_config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    training.train(model, samples, config,
                   checkpoint_dir=out_dir if args.checkpoint_every_epoch else None,
                   log_path=out_dir / "loss_log.csv")
    final = out_dir / "final.ckpt"
    checkpoint_id = save_checkpoint(model, final)
    print(json.dumps({"checkpoint": str(final), "checkpoint_id": checkpoint_id,
                      "epochs": config.epochs, "param_count": model.param_count()}))
    return 0


def cmd_finetune(args):
    samples = _load_training_samples(args.manifest)
    model = load_checkpoint(args.model)
    config = _train_config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    training.fine_tune(model, samples, args.round_index, config,
                       checkpoint_dir=out_dir, log_path=out_dir / "loss_log.csv")
    final = out_dir / "final.ckpt"
    checkpoint_id = save_checkpoint(model, final)
    print(json.dumps({"checkpoint": str(final), "checkpoint_id": checkpoint_id,
                      "round": args.round_index,
                      "epochs": training.ROUND_EPOCHS[args.round_index]}))
    return 0


def cmd_hitl_round(args):
    entries = _load_manifest(args.manifest)
    base = Path(args.manifest).parent
    model = load_checkpoint(args.model)
    volumes, prompts, truths = {}, {}, {}
    for i, entry in enumerate(entries):
        case_id = entry.get("case_id", f"case{i:03d}")
        volumes[case_id] = load_normalized_volume(base / entry["volume_path"])
        truths[case_id] = load_mask(base / entry["mask_path"])
        if "box" not in entry:
            raise CliError(f"manifest entry {i} missing 'box'", "bad_manifest")
        prompts[case_id] = parse_box(entry["box"])
    annotation_round = hitl.AnnotationRound(
        round_index=args.round_index,
        case_ids=sorted(volumes),
        model_checkpoint_ref=model.checkpoint_id,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    event_log = hitl.EventLog(out_dir / "events.jsonl")
    oracle = hitl.GroundTruthOracle(truths)
    masks = hitl.run_round(annotation_round, volumes, prompts, model, oracle, event_log)
    for case_id, mask in masks.items():
        (out_dir / f"{case_id}.nii").write_bytes(volume_io.write_nifti1_mask(mask))
    report = hitl.round_report([annotation_round])
    hitl.write_round_report(report, csv_path=out_dir / "round.csv",
                            json_path=out_dir / "round.json")
    print(json.dumps({"cases": len(masks), "out_dir": str(out_dir)}))
    return 0


def cmd_hitl_select(args):
    entries = _load_manifest(args.manifest)
    base = Path(args.manifest).parent
    model = load_checkpoint(args.model)
    volumes, boxes3d, boxes2d, patients = {}, {}, {}, {}
    for i, entry in enumerate(entries):
        case_id = entry.get("case_id", f"case{i:03d}")
        volumes[case_id] = load_normalized_volume(base / entry["volume_path"])
        b = entry.get("box3d")
        if b is None or len(b) != 6:
            raise CliError(f"manifest entry {i} needs box3d [x0,y0,x1,y1,z0,z1]", "bad_manifest")
        boxes3d[case_id] = BoundingBox3D(*[int(v) for v in b])
        boxes2d[case_id] = {
            int(z): parse_box(text) for z, text in entry.get("boxes2d", {}).items()
        }
        patients[case_id] = entry.get("patient", case_id)
    records, selected = hitl.select_hard_cases(volumes, boxes3d, boxes2d, model, patients)
    out = {
        "selected": selected,
        "records": [
            {"case_id": r.case_id, "dsc_between_modes": r.dsc_between_modes, "selected": r.selected}
            for r in records
        ],
    }
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2))
    print(json.dumps(out))
    return 0


def cmd_serve(args):
    import logging

    import uvicorn

    from .server import create_app

    logging.basicConfig(level=logging.INFO, format="%(message)s")  # JSON-lines request log
    app = create_app(
        model_path=args.model,
        cache_capacity=args.cache_capacity,
        max_upload_bytes=args.max_upload_mb * 1024 * 1024,
        cache_miss=args.cache_miss,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_report(args):
    reports = [json.loads(Path(p).read_text()) for p in args.round_json]
    rows = [row for rep in reports for row in rep["rounds"]]
    rows.sort(key=lambda r: r["round"])
    cumulative = 0
    for row in rows:
        cumulative += row["cases"]
        row["cumulative_cases"] = cumulative
    merged = {"rounds": rows, "warnings": sum((rep.get("warnings", []) for rep in reports), [])}
    if args.out:
        hitl.write_round_report(merged, csv_path=args.out)
    print(json.dumps(merged))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="Promptable 3D medical image and video segmentation toolbox",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize a volume (CT window or percentiles)")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["brain", "abdomen", "bone", "lung", "mediastinum"])
    p.add_argument("--percentile-normalize", dest="percentile", action="store_true")
    p.add_argument("--mask")
    p.add_argument("--mask-out")
    p.add_argument("--enforce-spacing", action="store_true",
                   help="resample out-of-plane spacing below 3mm up to 3mm")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("segment", help="box-prompted bidirectional 3D segmentation")
    p.add_argument("--volume", required=True)
    p.add_argument("--box", help="z=<slice>,<xmin>,<ymin>,<xmax>,<ymax>")
    p.add_argument("--range", help="top:bottom inclusive slice range")
    p.add_argument("--plan", help="propagation plan JSON (alternative to --box/--range)")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ref", help="reference mask; prints DSC/NSD when given")
    p.add_argument("--tolerance", type=float, default=2.0)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("segment-video", help="first-frame prompted video segmentation")
    p.add_argument("--clip", required=True)
    p.add_argument("--box", required=True, help="z=0,<xmin>,<ymin>,<xmax>,<ymax>")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ref")
    p.set_defaults(func=cmd_segment_video)

    p = sub.add_parser("evaluate", help="DSC/NSD over prediction/reference pairs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True, help="per-case CSV with median/IQR summary rows")
    p.add_argument("--tolerance", type=float, default=2.0)
    p.add_argument("--spacing-from-header", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train", help="train on a manifest of volume/mask pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model", help="resume from a checkpoint")
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-encoder", type=float)
    p.add_argument("--lr-other", type=float)
    p.add_argument("--checkpoint-every-epoch", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="round-schedule fine-tuning at halved lr")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--round-index", type=int, choices=[2, 3], required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lr-encoder", type=float)
    p.add_argument("--lr-other", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("hitl-round", help="run one scripted annotation round")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--round-index", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_hitl_round)

    p = sub.add_parser("hitl-select", help="dual-prompt disagreement case selection")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_hitl_select)

    p = sub.add_parser("serve", help="run the annotation HTTP server")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--cache-capacity", type=int, default=4)
    p.add_argument("--max-upload-mb", type=int, default=64)
    p.add_argument("--cache-miss", choices=["recompute", "gone"], default="recompute")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="merge per-round reports into one CSV")
    p.add_argument("round_json", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "detail": str(exc)}), file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
