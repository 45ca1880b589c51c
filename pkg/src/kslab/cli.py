"""Command-line front end.

Subcommands cover the single stages (``phantom gen``, ``corrupt``,
``detect``, ``correct``, ``segment``) and the orchestrated flows (``run``,
``sweep``, ``report``). ``run`` and ``sweep`` read a JSON config file and
apply any command-line flag on top of it. Exit codes: 0 on success, 2 on
validation problems (bad flags, config, or inputs), 3 when more than 10% of
a run's cases fail, 1 on a runtime abort such as a diverging correction.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .artefacts import CorruptionSpec, PhaseGenSpec, corrupt_kspace, derive_seed, synthesize_phase
from .core import ValidationError, fft2, ifft2, magnitude
from .correction import CorrectionConfig, DivergenceError, correct
from .detection import load_detector, predict_line_probs, threshold_mask, extract_line_features
from .io import load_sequence, save_sequence
from .metrics import REPORT_COLUMNS
from .phantom import DEFAULT_SPEC, TINY_SPEC, generate_corpus
from .pipeline import LossWeights, RunConfig, SWEEP_AXES, run_pipeline, sweep
from .segmentation import load_segmenter, segment

__all__ = ["main"]

_TEMPLATES = {"default": DEFAULT_SPEC, "tiny": TINY_SPEC}

_TOP_KEYS = {
    "dataset_root",
    "out_dir",
    "master_seed",
    "corrupt",
    "corruption",
    "phase",
    "correction",
    "weights",
    "mask_source",
    "detector",
    "segmenter",
    "detector_threshold",
    "detector_epochs",
    "segmenter_epochs",
    "lambda_values",
    "z_values",
    "j_sigma_values",
}


def _check_keys(mapping, allowed, where):
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ValidationError("unknown %s key(s): %s" % (where, ", ".join(unknown)))


def _load_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError("no config file at %s" % path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError("config %s is not valid JSON: %s" % (path, exc)) from exc
    if not isinstance(data, dict):
        raise ValidationError("config %s must hold a JSON object" % path)
    _check_keys(data, _TOP_KEYS, "config")
    return data


def _pick(flag_value, data, key, fallback):
    if flag_value is not None:
        return flag_value
    return data.get(key, fallback)


def _build_run_config(args):
    data = _load_config_file(args.config) if args.config else {}

    corr_d = dict(data.get("corruption") or {})
    _check_keys(corr_d, ("z", "offset_sigma"), "corruption")
    phase_d = dict(data.get("phase") or {})
    _check_keys(phase_d, ("noise_sigma", "lowpass_keep", "lowpass_taper_sigma"), "phase")
    fix_d = dict(data.get("correction") or {})
    _check_keys(
        fix_d, ("iterations", "temporal_weight", "spatial_tv_weight", "step_size"), "correction"
    )
    weights_d = dict(data.get("weights") or {})
    _check_keys(weights_d, ("lambda", "lambda_weight", "gamma"), "weights")

    corrupt_on = bool(data.get("corrupt", True))
    if args.no_corrupt:
        corrupt_on = False
    if args.z is not None:
        corr_d["z"] = args.z
    if args.j_sigma is not None:
        corr_d["offset_sigma"] = args.j_sigma
    corruption = CorruptionSpec(**corr_d) if corrupt_on else None

    if args.dc_iterations is not None:
        fix_d["iterations"] = args.dc_iterations
    if args.temporal_weight is not None:
        fix_d["temporal_weight"] = args.temporal_weight
    if args.tv_weight is not None:
        fix_d["spatial_tv_weight"] = args.tv_weight
    if args.step_size is not None:
        fix_d["step_size"] = args.step_size

    lam = weights_d.pop("lambda", None)
    if lam is not None:
        weights_d.setdefault("lambda_weight", lam)
    if args.lambda_weight is not None:
        weights_d["lambda_weight"] = args.lambda_weight
    if args.gamma is not None:
        weights_d["gamma"] = args.gamma

    detector = _pick(args.detector, data, "detector", "train")
    if args.train_detector:
        detector = "train"
    segmenter = _pick(args.seg_model, data, "segmenter", "train")
    if args.train_segmenter:
        segmenter = "train"

    dataset_root = _pick(args.dataset, data, "dataset_root", "")
    if not dataset_root:
        raise ValidationError("a dataset root is required (config dataset_root or --dataset)")
    out_dir = _pick(args.out, data, "out_dir", "")
    if not out_dir:
        raise ValidationError("an output directory is required (config out_dir or --out)")

    kwargs = dict(
        dataset_root=str(dataset_root),
        out_dir=str(out_dir),
        master_seed=int(_pick(args.seed, data, "master_seed", 0)),
        corruption=corruption,
        phase=PhaseGenSpec(**phase_d),
        correction=CorrectionConfig(**fix_d),
        weights=LossWeights(**weights_d),
        mask_source=str(_pick(args.mask_source, data, "mask_source", "oracle")),
        detector=str(detector),
        segmenter=str(segmenter),
        detector_threshold=float(
            _pick(args.detector_threshold, data, "detector_threshold", 0.5)
        ),
        detector_epochs=int(_pick(args.detector_epochs, data, "detector_epochs", 200)),
        segmenter_epochs=int(_pick(args.segmenter_epochs, data, "segmenter_epochs", 300)),
    )
    for key in ("lambda_values", "z_values", "j_sigma_values"):
        if key in data:
            kwargs[key] = tuple(data[key])
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError("bad run config: %s" % exc) from exc


def _load_mask(stem, seq_shape):
    mask = load_sequence(stem)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if mask.shape != seq_shape[:2]:
        raise ValidationError(
            "mask shape %s does not match sequence lines %s" % (mask.shape, seq_shape[:2])
        )
    return mask


def _cmd_phantom(args):
    if args.phantom_cmd != "gen":
        raise ValidationError("unknown phantom subcommand %r" % args.phantom_cmd)
    template = _TEMPLATES[args.template]
    manifest = generate_corpus(args.n, template, args.seed, args.out)
    print(
        "wrote %d phantom case(s) (%dx%dx%d) under %s"
        % (manifest["n"], *manifest["shape"], args.out)
    )
    return 0


def _cmd_corrupt(args):
    frames = load_sequence(args.image).astype(np.float64)
    phase = PhaseGenSpec(
        noise_sigma=args.noise_sigma,
        lowpass_keep=args.lowpass_keep,
        lowpass_taper_sigma=args.taper_sigma,
        rng_seed=args.seed,
    )
    ks = fft2(synthesize_phase(frames, phase))
    spec = CorruptionSpec(z=args.z, offset_sigma=args.j_sigma, rng_seed=derive_seed(args.seed, 1))
    acquired, record = corrupt_kspace(ks, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sequence(out / "acquired", acquired, "c64")
    save_sequence(out / "corrupted", magnitude(ifft2(acquired)), "f32")
    save_sequence(out / "mask", record.mask()[:, :, None], "u8")
    (out / "record.json").write_text(record.to_json() + "\n")
    print(
        "corrupted %d of %d lines (z=%d) -> %s"
        % (len(record.entries), ks.shape[0] * ks.shape[1], args.z, out)
    )
    return 0


def _cmd_detect(args):
    ks = load_sequence(args.kspace)
    model = load_detector(args.model)
    probs = predict_line_probs(model, extract_line_features(ks))
    mask = threshold_mask(probs, args.detector_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sequence(out / "probs", probs[:, :, None], "f32")
    save_sequence(out / "mask", mask[:, :, None], "u8")
    print("flagged %d of %d lines -> %s" % (int(mask.sum()), mask.size, out))
    return 0


def _cmd_correct(args):
    ks = load_sequence(args.kspace)
    mask = _load_mask(args.mask, ks.shape)
    cfg = CorrectionConfig(
        iterations=args.dc_iterations,
        temporal_weight=args.temporal_weight,
        spatial_tv_weight=args.tv_weight,
        step_size=args.step_size,
    )
    result = correct(ks, mask, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sequence(out / "corrected", result.corrected, "c64")
    save_sequence(out / "corrected_mag", magnitude(result.corrected), "f32")
    with open(out / "residuals.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("iteration", "residual", "objective"))
        for k, (res, obj) in enumerate(
            zip(result.per_iteration_residuals, result.energy_trace)
        ):
            writer.writerow((str(k + 1), repr(float(res)), repr(float(obj))))
    (out / "summary.json").write_text(
        json.dumps(
            {
                "iterations": cfg.iterations,
                "step_size_used": result.step_size_used,
                "energy_flag": result.energy_flag,
            },
            sort_keys=True,
        )
        + "\n"
    )
    print(
        "corrected %d flagged lines in %d iteration(s) -> %s"
        % (int(np.sum(mask != 0)), cfg.iterations, out)
    )
    return 0


def _cmd_segment(args):
    frames = load_sequence(args.image).astype(np.float64)
    model = load_segmenter(args.model)
    _, labels = segment(model, frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sequence(out / "labels", labels, "u8")
    counts = np.bincount(labels.ravel(), minlength=4)
    print(
        "segmented %d frame(s); class pixels bg=%d lv=%d myo=%d rv=%d -> %s"
        % (labels.shape[0], *counts[:4], out)
    )
    return 0


def _cmd_run(args):
    summary = run_pipeline(_build_run_config(args))
    for case in summary["cases"]:
        line = "%s: %s" % (case["id"], case["status"])
        if case["status"] == "failed":
            line += " (%s)" % case["error"]
        print(line)
    print(
        "run complete: %d case(s), %d failed -> %s"
        % (summary["n_cases"], summary["n_failed"], summary["aggregate_csv"])
    )
    return summary["exit_code"]


def _parse_values(text, axis):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValidationError("--values must list at least one number")
    try:
        if axis == "z":
            return tuple(int(p) for p in parts)
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ValidationError("bad --values for axis %s: %s" % (axis, exc)) from exc


def _cmd_sweep(args):
    values = _parse_values(args.values, args.axis) if args.values else None
    result = sweep(_build_run_config(args), args.axis, values)
    print(
        "swept %s over %d value(s) -> %s"
        % (result["axis"], len(result["values"]), result["csv"])
    )
    return result["exit_code"]


def _cmd_report(args):
    csv_path = Path(args.run_dir) / "aggregate.csv"
    if not csv_path.is_file():
        raise ValidationError("no aggregate.csv under %s" % args.run_dir)
    numeric = [c for c in REPORT_COLUMNS if c not in ("run_id", "stage")]
    sums = {}
    counts = {}
    with open(csv_path, newline="") as fh:
        for record in csv.DictReader(fh):
            stage = record["stage"]
            acc = sums.setdefault(stage, dict.fromkeys(numeric, 0.0))
            for column in numeric:
                cell = record[column]
                acc[column] += float(cell) if cell else float("nan")
            counts[stage] = counts.get(stage, 0) + 1
    if not counts:
        raise ValidationError("aggregate.csv under %s has no rows" % args.run_dir)

    out_path = Path(args.out) if args.out else Path(args.run_dir) / "summary.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "n"] + ["mean_%s" % c for c in numeric])
        for stage in sorted(counts):
            n = counts[stage]
            writer.writerow(
                [stage, str(n)] + [repr(sums[stage][c] / n) for c in numeric]
            )
    for stage in sorted(counts):
        n = counts[stage]
        cells = ", ".join(
            "%s=%.4g" % (c, sums[stage][c] / n)
            for c in ("mae", "psnr", "ssim", "dice_lv", "dice_myo", "dice_rv")
        )
        print("%s (n=%d): %s" % (stage, n, cells))
    print("wrote %s" % out_path)
    return 0


def _add_run_flags(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--dataset", help="corpus root (overrides config dataset_root)")
    parser.add_argument("--out", help="output directory (overrides config out_dir)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--mask-source", choices=("oracle", "detector"))
    parser.add_argument("--z", type=int, help="corruption factor: one line in z")
    parser.add_argument("--j-sigma", type=float, help="donor-frame offset sigma")
    parser.add_argument(
        "--no-corrupt", action="store_true", help="disable corruption (clean acquisition)"
    )
    parser.add_argument("--lambda", dest="lambda_weight", type=float, help="total-loss blend")
    parser.add_argument("--gamma", type=float, help="correction-loss blend")
    parser.add_argument("--dc-iterations", type=int, help="correction iterations")
    parser.add_argument("--temporal-weight", type=float, help="temporal quadratic weight")
    parser.add_argument("--tv-weight", type=float, help="spatial smoothed-TV weight")
    parser.add_argument("--step-size", type=float, help="correction gradient step")
    parser.add_argument("--detector-threshold", type=float, help="line-probability cut")
    parser.add_argument("--detector", help="detector checkpoint stem")
    parser.add_argument(
        "--train-detector", action="store_true", help="train the detector on the corpus"
    )
    parser.add_argument("--seg-model", help="segmenter checkpoint stem")
    parser.add_argument(
        "--train-segmenter", action="store_true", help="train the segmenter on the corpus"
    )
    parser.add_argument("--detector-epochs", type=int, help="detector training epochs")
    parser.add_argument("--segmenter-epochs", type=int, help="segmenter training epochs")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kslab",
        description="synthetic cine k-space corruption, detection, correction, and segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_phantom = sub.add_parser("phantom", help="phantom corpus tools")
    phantom_sub = p_phantom.add_subparsers(dest="phantom_cmd", required=True)
    p_gen = phantom_sub.add_parser("gen", help="write a jittered phantom corpus")
    p_gen.add_argument("--out", required=True, help="corpus root directory")
    p_gen.add_argument("--n", type=int, default=40, help="number of cases")
    p_gen.add_argument("--template", choices=sorted(_TEMPLATES), default="default")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=_cmd_phantom)

    p_corrupt = sub.add_parser("corrupt", help="synthesize phase and corrupt one sequence")
    p_corrupt.add_argument("--image", required=True, help="magnitude sequence stem")
    p_corrupt.add_argument("--out", required=True)
    p_corrupt.add_argument("--z", type=int, default=8)
    p_corrupt.add_argument("--j-sigma", type=float, default=3.0)
    p_corrupt.add_argument("--seed", type=int, default=0)
    p_corrupt.add_argument("--noise-sigma", type=float, default=0.01)
    p_corrupt.add_argument("--lowpass-keep", type=float, default=0.125)
    p_corrupt.add_argument("--taper-sigma", type=float, default=4.0)
    p_corrupt.set_defaults(func=_cmd_corrupt)

    p_detect = sub.add_parser("detect", help="flag corrupted lines in a k-space sequence")
    p_detect.add_argument("--kspace", required=True, help="k-space sequence stem")
    p_detect.add_argument("--model", required=True, help="detector checkpoint stem")
    p_detect.add_argument("--out", required=True)
    p_detect.add_argument("--detector-threshold", type=float, default=0.5)
    p_detect.set_defaults(func=_cmd_detect)

    p_correct = sub.add_parser("correct", help="data-consistent iterative correction")
    p_correct.add_argument("--kspace", required=True, help="acquired k-space stem")
    p_correct.add_argument("--mask", required=True, help="line-mask stem")
    p_correct.add_argument("--out", required=True)
    p_correct.add_argument("--dc-iterations", type=int, default=10)
    p_correct.add_argument("--temporal-weight", type=float, default=1.0)
    p_correct.add_argument("--tv-weight", type=float, default=0.05)
    p_correct.add_argument("--step-size", type=float, default=0.5)
    p_correct.set_defaults(func=_cmd_correct)

    p_segment = sub.add_parser("segment", help="per-pixel class labels for a sequence")
    p_segment.add_argument("--image", required=True, help="magnitude sequence stem")
    p_segment.add_argument("--model", required=True, help="segmenter checkpoint stem")
    p_segment.add_argument("--out", required=True)
    p_segment.set_defaults(func=_cmd_segment)

    p_run = sub.add_parser("run", help="full pipeline over a corpus test split")
    _add_run_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="repeat a run across one axis")
    _add_run_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", help="comma-separated axis values")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_report = sub.add_parser("report", help="summarize a run's aggregate CSV")
    p_report.add_argument("--run-dir", required=True)
    p_report.add_argument("--out", help="summary CSV path")
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
