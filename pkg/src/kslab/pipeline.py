"""End-to-end orchestration: phantom corpus -> phase synthesis -> corruption
-> line detection -> data-consistent correction -> segmentation -> metrics.

A run consumes the test split of an on-disk corpus, processes every case
independently with per-case seeds derived from one master seed, and writes a
deterministic bundle: per-case artefacts (corrected sequence, line mask,
label map, difference image), one aggregate metrics CSV, one loss CSV, one
residual-trace CSV, and a JSON manifest. Reruns with an identical config and
seed reproduce every output byte for byte. ``sweep`` repeats a run across one
swept axis and distills the per-value means into a tidy CSV.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .artefacts import (
    CorruptionSpec,
    PhaseGenSpec,
    corrupt_kspace,
    derive_seed,
    synthesize_phase,
)
from .core import ValidationError, fft2, ifft2, magnitude
from .correction import CorrectionConfig, correct, correction_loss
from .detection import (
    detection_loss,
    extract_line_features,
    load_detector,
    predict_line_probs,
    save_detector,
    threshold_mask,
    train_detector,
)
from .io import load_sequence, save_sequence
from .metrics import (
    REPORT_COLUMNS,
    assemble_report,
    mae,
    psnr,
    sharpness_index,
    ssim,
)
from .phantom import load_manifest
from .segmentation import (
    dice,
    load_segmenter,
    save_segmenter,
    segment,
    segmentation_loss,
    train_segmenter,
)

__all__ = [
    "LossWeights",
    "RunConfig",
    "total_loss",
    "run_pipeline",
    "sweep",
    "SWEEP_AXES",
    "LOSS_COLUMNS",
    "RESIDUAL_COLUMNS",
    "SWEEP_COLUMNS",
]

LOSS_COLUMNS = (
    "run_id",
    "l_detection",
    "l_reconstruction",
    "l_correction",
    "l_segmentation",
    "l_total",
)
RESIDUAL_COLUMNS = ("run_id", "iteration", "residual")
SWEEP_COLUMNS = (
    "axis",
    "value",
    "mean_ssim",
    "mean_dice_lv",
    "mean_dice_myo",
    "mean_dice_rv",
    "mean_ssim_corrupted",
)
SWEEP_AXES = ("lambda", "z", "j_sigma")

# fixed sub-stream tags so every consumer of the master seed draws from its
# own independent stream: (master, TAG, case index) for per-case streams,
# (master, TAG) for the two training streams
_PHASE_TAG = 11
_CORRUPT_TAG = 23
_DETECTOR_TAG = 31
_SEGMENTER_TAG = 37

_TRAIN = "train"


@dataclass(frozen=True)
class LossWeights:
    """Blend weights: lambda_weight mixes correction into the total loss,
    gamma mixes detection into the correction loss; both lie in [0, 1]."""

    lambda_weight: float = 0.8
    gamma: float = 0.3

    def __post_init__(self):
        for name in ("lambda_weight", "gamma"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValidationError("%s must lie in [0, 1]" % name)


def total_loss(seg_loss, corr_loss, weights):
    """(1 - lambda) * segmentation loss + lambda * correction loss."""
    if not isinstance(weights, LossWeights):
        raise ValidationError("weights must be a LossWeights instance")
    lam = weights.lambda_weight
    return float((1.0 - lam) * float(seg_loss) + lam * float(corr_loss))


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run depends on.

    ``corruption=None`` selects the uncorrupted mode: acquisition equals the
    clean k-space, the oracle mask is empty, and the corrected output equals
    the input reconstruction exactly. ``detector``/``segmenter`` name either
    a checkpoint stem or the literal string "train", in which case the model
    is trained on the corpus train split and checkpointed under the run's
    output directory.
    """

    dataset_root: str
    out_dir: str
    master_seed: int = 0
    corruption: CorruptionSpec | None = field(default_factory=CorruptionSpec)
    phase: PhaseGenSpec = field(default_factory=PhaseGenSpec)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    mask_source: str = "oracle"
    detector: str = _TRAIN
    segmenter: str = _TRAIN
    detector_threshold: float = 0.5
    detector_epochs: int = 200
    segmenter_epochs: int = 300
    lambda_values: tuple = tuple(i / 20 for i in range(21))
    z_values: tuple = (2, 4, 8, 16, 32)
    j_sigma_values: tuple = (1.0, 3.0, 5.0, 7.0, 9.0)

    def __post_init__(self):
        for name in ("dataset_root", "out_dir", "detector", "segmenter"):
            v = getattr(self, name)
            if not (isinstance(v, str) and v):
                raise ValidationError("%s must be a non-empty string" % name)
        if not isinstance(self.master_seed, (int, np.integer)) or self.master_seed < 0:
            raise ValidationError("master_seed must be a non-negative integer")
        if self.corruption is not None and not isinstance(self.corruption, CorruptionSpec):
            raise ValidationError("corruption must be a CorruptionSpec or None")
        if not isinstance(self.phase, PhaseGenSpec):
            raise ValidationError("phase must be a PhaseGenSpec")
        if not isinstance(self.correction, CorrectionConfig):
            raise ValidationError("correction must be a CorrectionConfig")
        if not isinstance(self.weights, LossWeights):
            raise ValidationError("weights must be a LossWeights")
        if self.mask_source not in ("oracle", "detector"):
            raise ValidationError("mask_source must be 'oracle' or 'detector'")
        if not (0.0 < self.detector_threshold < 1.0):
            raise ValidationError("detector_threshold must lie strictly inside (0, 1)")
        for name in ("detector_epochs", "segmenter_epochs"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and v >= 0):
                raise ValidationError("%s must be a non-negative integer" % name)
        for name in ("lambda_values", "z_values", "j_sigma_values"):
            if not isinstance(getattr(self, name), tuple):
                raise ValidationError("%s must be a tuple" % name)


def _config_hash(cfg):
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _n_workers(n_cases):
    raw = os.environ.get("KSLAB_THREADS", "").strip()
    try:
        cap = int(raw) if raw else 1
    except ValueError:
        raise ValidationError("KSLAB_THREADS must be an integer, got %r" % raw)
    return max(1, min(cap, n_cases))


def _entries(cfg, split):
    manifest = load_manifest(cfg.dataset_root)
    picked = [
        (i, entry)
        for i, entry in enumerate(manifest["cases"])
        if entry["split"] == split
    ]
    if not picked:
        raise ValidationError(
            "corpus %s has no cases in the %r split" % (cfg.dataset_root, split)
        )
    return picked


def _load_case(root, entry):
    image = load_sequence(Path(root) / entry["image"]).astype(np.float64)
    labels = load_sequence(Path(root) / entry["labels"])
    return image, labels


def _acquire(cfg, index, frames):
    """Synthesize phase and (optionally) corrupt one case; returns the clean
    k-space, the acquired k-space, and the oracle corruption mask."""
    phase = replace(cfg.phase, rng_seed=derive_seed(cfg.master_seed, _PHASE_TAG, index))
    ks = fft2(synthesize_phase(frames, phase))
    if cfg.corruption is None:
        oracle = np.zeros(ks.shape[:2], dtype=np.uint8)
        return ks, ks, oracle
    sub = replace(
        cfg.corruption, rng_seed=derive_seed(cfg.master_seed, _CORRUPT_TAG, index)
    )
    acquired, record = corrupt_kspace(ks, sub)
    return ks, acquired, record.mask()


def _prepare_models(cfg, models_dir):
    """Load or train the detector and segmenter.

    Training consumes the corpus train split: the detector fits corrupted
    line features against oracle masks; the segmenter fits oracle-mask
    corrected reconstructions against the truth label maps, mirroring the
    data each model sees at evaluation time.
    """
    want_train = _TRAIN in (cfg.detector, cfg.segmenter)
    if want_train:
        models_dir.mkdir(parents=True, exist_ok=True)
        train_cases = _entries(cfg, "train")

    if cfg.detector == _TRAIN:
        corpus = []
        for index, entry in train_cases:
            frames, _ = _load_case(cfg.dataset_root, entry)
            _, acquired, oracle = _acquire(cfg, index, frames)
            corpus.append((extract_line_features(acquired), oracle))
        det_model, _ = train_detector(
            corpus,
            epochs=cfg.detector_epochs,
            rng_seed=derive_seed(cfg.master_seed, _DETECTOR_TAG),
        )
        save_detector(models_dir / "detector", det_model)
        det_path = str(models_dir / "detector")
    else:
        det_model = load_detector(cfg.detector)
        det_path = cfg.detector

    if cfg.segmenter == _TRAIN:
        corpus = []
        for index, entry in train_cases:
            frames, labels = _load_case(cfg.dataset_root, entry)
            _, acquired, oracle = _acquire(cfg, index, frames)
            result = correct(acquired, oracle, cfg.correction)
            corpus.append((magnitude(result.corrected), labels))
        seg_model, _ = train_segmenter(
            corpus,
            epochs=cfg.segmenter_epochs,
            rng_seed=derive_seed(cfg.master_seed, _SEGMENTER_TAG),
        )
        save_segmenter(models_dir / "segmenter", seg_model)
        seg_path = str(models_dir / "segmenter")
    else:
        seg_model = load_segmenter(cfg.segmenter)
        seg_path = cfg.segmenter
    return det_model, seg_model, det_path, seg_path


def _process_case(cfg, det_model, seg_model, index, entry, case_dir, cfg_hash):
    """Run one test case end to end; returns (report rows, loss row,
    residual rows)."""
    case_id = entry["id"]
    frames, truth = _load_case(cfg.dataset_root, entry)
    ks, acquired, oracle = _acquire(cfg, index, frames)
    clean_ref = magnitude(ifft2(ks))
    if cfg.corruption is None:
        z_val, j_val = 0, 0.0
    else:
        z_val, j_val = cfg.corruption.z, cfg.corruption.offset_sigma

    line_probs = predict_line_probs(det_model, extract_line_features(acquired))
    detected = threshold_mask(line_probs, cfg.detector_threshold)
    # with corruption disabled the repair stage must be a strict no-op, so
    # the empty oracle mask overrides even a false-positive detector
    if cfg.mask_source == "oracle" or cfg.corruption is None:
        mask_used = oracle
    else:
        mask_used = detected

    corrupted_img = magnitude(ifft2(acquired))
    result = correct(acquired, mask_used, cfg.correction)
    corrected_img = magnitude(result.corrected)

    rows = []
    seg_loss = None
    corrected_labels = None
    for stage, img in (("corrupted", corrupted_img), ("corrected", corrected_img)):
        probs, labels = segment(seg_model, img)
        scores = tuple(dice(labels, truth, c) for c in (1, 2, 3))
        rows.append(
            assemble_report(
                case_id,
                stage,
                z_val,
                j_val,
                cfg.weights.lambda_weight,
                mae(img, clean_ref),
                psnr(img, clean_ref),
                ssim(img, clean_ref),
                sharpness_index(img),
                dice=scores,
                config_hash=cfg_hash,
            )
        )
        if stage == "corrected":
            seg_loss = segmentation_loss(probs, truth)
            corrected_labels = labels

    l_det = detection_loss(line_probs, oracle)
    l_rec = float(np.mean((corrected_img - clean_ref) ** 2))
    l_corr = correction_loss(
        corrected_img, clean_ref, line_probs, oracle, cfg.weights.gamma
    )
    l_tot = total_loss(seg_loss, l_corr, cfg.weights)
    losses = (case_id, l_det, l_rec, l_corr, seg_loss, l_tot)

    diff = np.abs(corrected_img - clean_ref)
    peak = float(diff.max())
    if peak > 0.0:
        diff = diff / peak
    case_dir.mkdir(parents=True, exist_ok=True)
    save_sequence(case_dir / "corrected", result.corrected, "c64")
    save_sequence(case_dir / "mask", mask_used[:, :, None], "u8")
    save_sequence(case_dir / "labels", corrected_labels, "u8")
    save_sequence(case_dir / "difference", diff, "f32")

    residuals = [
        (case_id, k + 1, r) for k, r in enumerate(result.per_iteration_residuals)
    ]
    return rows, losses, residuals


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def _float_cells(values):
    return [v if isinstance(v, str) else repr(float(v)) for v in values]


def run_pipeline(cfg):
    """Process every test-split case and write the run bundle under
    ``cfg.out_dir``.

    Case failures are recorded in the run manifest and do not stop the run;
    the summary's exit_code is 3 when more than 10% of cases fail, else 0.
    Returns the summary dict (also persisted as run_manifest.json).
    """
    if not isinstance(cfg, RunConfig):
        raise ValidationError("cfg must be a RunConfig")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = _config_hash(cfg)

    test_cases = _entries(cfg, "test")
    det_model, seg_model, det_path, seg_path = _prepare_models(cfg, out_dir / "models")

    def worker(item):
        index, entry = item
        case_dir = out_dir / "cases" / entry["id"]
        try:
            return entry["id"], _process_case(
                cfg, det_model, seg_model, index, entry, case_dir, cfg_hash
            ), None
        except Exception as exc:  # noqa: BLE001 - failures are per-case data
            return entry["id"], None, "%s: %s" % (type(exc).__name__, exc)

    workers = _n_workers(len(test_cases))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(worker, test_cases))
    else:
        outcomes = [worker(item) for item in test_cases]

    report_rows = []
    loss_rows = []
    residual_rows = []
    case_status = []
    for case_id, payload, error in outcomes:
        if error is None:
            rows, losses, residuals = payload
            report_rows.extend(rows)
            loss_rows.append(losses)
            residual_rows.extend(residuals)
            case_status.append({"id": case_id, "status": "ok"})
        else:
            case_status.append({"id": case_id, "status": "failed", "error": error})

    report_rows.sort(key=lambda r: (r.run_id, r.stage))
    loss_rows.sort(key=lambda r: r[0])
    residual_rows.sort(key=lambda r: (r[0], r[1]))

    _write_csv(out_dir / "aggregate.csv", REPORT_COLUMNS, [r.to_row() for r in report_rows])
    _write_csv(
        out_dir / "losses.csv",
        LOSS_COLUMNS,
        [[row[0]] + _float_cells(row[1:]) for row in loss_rows],
    )
    _write_csv(
        out_dir / "residuals.csv",
        RESIDUAL_COLUMNS,
        [[case_id, str(it), repr(float(res))] for case_id, it, res in residual_rows],
    )

    n_failed = sum(1 for c in case_status if c["status"] == "failed")
    summary = {
        "config": asdict(cfg),
        "config_hash": cfg_hash,
        "detector": det_path,
        "segmenter": seg_path,
        "cases": case_status,
        "n_cases": len(test_cases),
        "n_failed": n_failed,
        "exit_code": 3 if n_failed > 0.10 * len(test_cases) else 0,
        "aggregate_csv": str(out_dir / "aggregate.csv"),
        "losses_csv": str(out_dir / "losses.csv"),
        "residuals_csv": str(out_dir / "residuals.csv"),
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(summary, sort_keys=True, separators=(",", ":"), default=str) + "\n"
    )
    return summary


def _apply_axis(cfg, axis, value, out_dir):
    if axis == "lambda":
        v = float(value)
        return replace(cfg, weights=replace(cfg.weights, lambda_weight=v), out_dir=out_dir)
    if cfg.corruption is None:
        raise ValidationError("cannot sweep %r with corruption disabled" % axis)
    if axis == "z":
        if not (isinstance(value, (int, np.integer)) and value >= 1):
            raise ValidationError("z values must be integers >= 1")
        return replace(cfg, corruption=replace(cfg.corruption, z=int(value)), out_dir=out_dir)
    if axis == "j_sigma":
        return replace(
            cfg,
            corruption=replace(cfg.corruption, offset_sigma=float(value)),
            out_dir=out_dir,
        )
    raise ValidationError("axis must be one of %s" % (SWEEP_AXES,))


def _stage_means(csv_path):
    """Per-stage means of ssim and the dice columns from one aggregate CSV."""
    sums = {}
    counts = {}
    with open(csv_path, newline="") as fh:
        for record in csv.DictReader(fh):
            stage = record["stage"]
            acc = sums.setdefault(stage, [0.0, 0.0, 0.0, 0.0])
            for slot, column in enumerate(("ssim", "dice_lv", "dice_myo", "dice_rv")):
                acc[slot] += float(record[column])
            counts[stage] = counts.get(stage, 0) + 1
    means = {}
    for stage, acc in sums.items():
        means[stage] = [v / counts[stage] for v in acc]
    return means


def sweep(cfg, axis, values=None):
    """One full run per axis value, all sharing ``cfg.master_seed``.

    The models are prepared once from the base config and reused across
    values, so the sweep isolates the axis effect. Writes the per-value runs
    under ``<out_dir>/runs/`` and distills <out_dir>/sweep_<axis>.csv with
    one row per value: corrected-stage mean SSIM and mean Dice per class,
    plus the corrupted-stage mean SSIM. Returns the summary dict.
    """
    if not isinstance(cfg, RunConfig):
        raise ValidationError("cfg must be a RunConfig")
    if axis not in SWEEP_AXES:
        raise ValidationError("axis must be one of %s" % (SWEEP_AXES,))
    if values is None:
        values = {
            "lambda": cfg.lambda_values,
            "z": cfg.z_values,
            "j_sigma": cfg.j_sigma_values,
        }[axis]
    values = tuple(values)
    if not values:
        raise ValidationError("sweep values must be non-empty")
    if axis == "lambda":
        for v in values:
            if not (0.0 <= float(v) <= 1.0):
                raise ValidationError("lambda values must lie in [0, 1]")
    if axis == "j_sigma":
        for v in values:
            if not float(v) > 0.0:
                raise ValidationError("j_sigma values must be > 0")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    det_model, seg_model, det_path, seg_path = _prepare_models(cfg, out_dir / "models")
    base = replace(cfg, detector=det_path, segmenter=seg_path)

    rows = []
    run_summaries = []
    for pos, value in enumerate(values):
        sub_dir = out_dir / "runs" / ("%s_%02d" % (axis, pos))
        sub_cfg = _apply_axis(base, axis, value, str(sub_dir))
        summary = run_pipeline(sub_cfg)
        run_summaries.append(summary)
        means = _stage_means(summary["aggregate_csv"])
        corrected = means.get("corrected", [float("nan")] * 4)
        corrupted = means.get("corrupted", [float("nan")] * 4)
        rows.append(
            [axis, repr(float(value))]
            + _float_cells(corrected)
            + [repr(float(corrupted[0]))]
        )

    csv_path = out_dir / ("sweep_%s.csv" % axis)
    _write_csv(csv_path, SWEEP_COLUMNS, rows)
    result = {
        "axis": axis,
        "values": [float(v) for v in values],
        "csv": str(csv_path),
        "exit_code": max((s["exit_code"] for s in run_summaries), default=0),
        "runs": run_summaries,
    }
    (out_dir / ("sweep_%s.json" % axis)).write_text(
        json.dumps(
            {k: v for k, v in result.items() if k != "runs"},
            sort_keys=True,
            separators=(",", ":"),
        )
        + "\n"
    )
    return result
