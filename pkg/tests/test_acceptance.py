"""Acceptance gate: the twelve evaluation criteria, each with its pinned
tolerance and runtime budget and one printed verdict line.

Run `pytest tests/test_acceptance.py -v -s` to see the verdict lines as they
complete (without -s pytest shows them only on failure). The whole gate is
CPU-only; the segmenter-trainability criterion dominates the runtime.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from kslab.artefacts import (
    CorruptionSpec,
    PhaseGenSpec,
    corrupt_kspace,
    derive_seed,
    severity_sweep,
    synthesize_phase,
)
from kslab.cli import main as cli_main
from kslab.core import fft2, ifft2, magnitude
from kslab.correction import correct, correction_loss, hard_data_consistency
from kslab.detection import (
    N_FEATURES,
    detection_gradients,
    detection_loss,
    init_detector,
    predict_line_probs,
    threshold_mask,
    train_detector,
)
from kslab.metrics import psnr, sharpness_index, ssim
from kslab.phantom import (
    DEFAULT_SPEC,
    TINY_SPEC,
    case_spec,
    generate_corpus,
    generate_phantom,
    split_of,
)
from kslab.pipeline import LossWeights, RunConfig, run_pipeline, total_loss
from kslab.segmentation import (
    dice,
    init_segmenter,
    segment,
    segmentation_gradients,
    segmentation_loss,
    train_segmenter,
)


def _verdict(number, label, ok, detail):
    state = "PASS" if ok else "FAIL"
    print("[criterion %02d] %s - %s: %s" % (number, state, label, detail))


def _bits(arr):
    return np.ascontiguousarray(arr).view(np.uint64)


@pytest.fixture(scope="module")
def run_corpus(tmp_path_factory):
    """Small on-disk corpus shared by the two full-pipeline criteria."""
    root = tmp_path_factory.mktemp("acceptance") / "corpus"
    generate_corpus(10, TINY_SPEC, 321, root)
    return root


def test_criterion_01_fft_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    worst_round_trip = 0.0
    worst_parseval = 0.0
    for k in range(100):
        if k % 10 == 0:
            shape = (25, 176, 132)
        else:
            shape = (
                int(rng.integers(1, 6)),
                int(rng.integers(4, 49)),
                int(rng.integers(4, 49)),
            )
        x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        ks = fft2(x)
        back = ifft2(ks)
        worst_round_trip = max(worst_round_trip, float(np.max(np.abs(back - x))))
        energy_img = float(np.sum(np.abs(x) ** 2))
        energy_ks = float(np.sum(np.abs(ks) ** 2))
        worst_parseval = max(worst_parseval, abs(energy_ks - energy_img) / energy_img)
    elapsed = time.perf_counter() - t0
    ok = worst_round_trip < 1e-8 and worst_parseval < 1e-8 and elapsed < 10.0
    _verdict(
        1,
        "FFT fidelity",
        ok,
        "100 sequences: max round-trip inf-norm %.2e (< 1e-8), max Parseval "
        "rel %.2e (< 1e-8), %.1f s (< 10 s)" % (worst_round_trip, worst_parseval, elapsed),
    )
    assert ok


def test_criterion_02_corruption_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    t_frames, h, w = 8, 176, 16
    seeds_checked = 0
    for z in (2, 4, 8, 16, 32):
        for s in range(20):
            ks = rng.standard_normal((t_frames, h, w)) + 1j * rng.standard_normal(
                (t_frames, h, w)
            )
            spec = CorruptionSpec(z=z, offset_sigma=3.0, rng_seed=1000 * z + s)
            corrupted, record = corrupt_kspace(ks, spec)
            mask = record.mask()
            for t in range(t_frames):
                listed = sorted(l for (vt, l, _) in record.entries if vt == t)
                first = listed[0]
                assert first < z
                oracle = list(range(first, h, z))
                assert listed == oracle, "frame %d lines differ from enumeration" % t
                assert int(mask[t].sum()) == len(oracle)
            clean_rows = mask == 0
            assert np.array_equal(
                _bits(corrupted[clean_rows]), _bits(ks[clean_rows])
            ), "an unlisted line changed bits"
            seeds_checked += 1
    elapsed = time.perf_counter() - t0
    ok = seeds_checked == 100 and elapsed < 30.0
    _verdict(
        2,
        "corruption exactness",
        ok,
        "z in {2,4,8,16,32} on 176 lines, %d corruptions: counts match the "
        "enumeration oracle, unlisted lines bit-identical, %.1f s (< 30 s)"
        % (seeds_checked, elapsed),
    )
    assert ok


def test_criterion_03_hard_data_consistency():
    t0 = time.perf_counter()
    rng = np.random.default_rng(30)
    cases = 0
    for trial in range(30):
        t_frames = int(rng.integers(1, 5))
        h = int(rng.integers(4, 24))
        w = int(rng.integers(4, 24))
        estimate = rng.standard_normal((t_frames, h, w)) + 1j * rng.standard_normal(
            (t_frames, h, w)
        )
        acquired = rng.standard_normal((t_frames, h, w)) + 1j * rng.standard_normal(
            (t_frames, h, w)
        )
        if trial == 0:
            mask = np.zeros((t_frames, h), dtype=np.uint8)
        elif trial == 1:
            mask = np.ones((t_frames, h), dtype=np.uint8)
        else:
            mask = (rng.uniform(size=(t_frames, h)) < 0.3).astype(np.uint8)
        spliced = hard_data_consistency(estimate, acquired, mask)
        oracle = np.empty_like(estimate)
        for t in range(t_frames):
            for l in range(h):
                oracle[t, l] = estimate[t, l] if mask[t, l] else acquired[t, l]
        assert np.array_equal(_bits(spliced), _bits(oracle))
        again = hard_data_consistency(spliced, acquired, mask)
        assert np.array_equal(_bits(again), _bits(spliced))
        cases += 1
    elapsed = time.perf_counter() - t0
    ok = cases == 30 and elapsed < 5.0
    _verdict(
        3,
        "hard data consistency",
        ok,
        "%d random splices bit-exact vs the per-line oracle, projection "
        "idempotent bit-exactly, %.1f s (< 5 s)" % (cases, elapsed),
    )
    assert ok


def test_criterion_04_correction_efficacy():
    t0 = time.perf_counter()
    improved = 0
    ssim_deltas = []
    n_cases = 50
    for i in range(200, 200 + n_cases):
        spec = case_spec(DEFAULT_SPEC, 2026, i)
        frames, _ = generate_phantom(spec)
        phase = PhaseGenSpec(rng_seed=derive_seed(2026, 11, i))
        ks = fft2(synthesize_phase(frames, phase))
        clean = magnitude(ifft2(ks))
        corruption = CorruptionSpec(rng_seed=derive_seed(2026, 23, i))
        acquired, record = corrupt_kspace(ks, corruption)
        corrupted = magnitude(ifft2(acquired))
        result = correct(acquired, record.mask())
        corrected = magnitude(result.corrected)
        improved += int(psnr(corrected, clean) > psnr(corrupted, clean))
        ssim_deltas.append(ssim(corrected, clean) - ssim(corrupted, clean))
    elapsed = time.perf_counter() - t0
    mean_delta = float(np.mean(ssim_deltas))
    ok = improved >= 0.90 * n_cases and mean_delta >= 0.02 and elapsed < 300.0
    _verdict(
        4,
        "correction efficacy",
        ok,
        "50 default-geometry phantoms, oracle masks, default config: PSNR "
        "improved on %d/50 (need >= 45), mean SSIM delta %+.4f (need >= "
        "+0.02), %.0f s (< 300 s)" % (improved, mean_delta, elapsed),
    )
    assert ok


def test_criterion_05_no_harm_on_clean_inputs(run_corpus, tmp_path):
    cfg = RunConfig(
        dataset_root=str(run_corpus),
        out_dir=str(tmp_path / "clean_run"),
        master_seed=5,
        corruption=None,
        detector_epochs=0,
        segmenter_epochs=0,
    )
    summary = run_pipeline(cfg)
    lines = Path(summary["aggregate_csv"]).read_text().splitlines()
    header = lines[0].split(",")
    col = {name: header.index(name) for name in header}
    rows = [line.split(",") for line in lines[1:]]
    exact = all(
        row[col["mae"]] == "0.0" and row[col["ssim"]] == "1.0" for row in rows
    )
    ok = exact and summary["exit_code"] == 0 and len(rows) == 4
    _verdict(
        5,
        "no-harm on clean inputs",
        ok,
        "zero-corruption pipeline over %d cases: every stage row reports "
        "mae exactly 0.0 and ssim exactly 1.0" % summary["n_cases"],
    )
    assert ok


def test_criterion_06_gradient_checks():
    # relative error is taken per tensor over the probed entries,
    # norm-against-norm, so a single near-zero weight cannot inflate the
    # ratio with finite-difference roundoff
    t0 = time.perf_counter()
    step = 1e-5
    worst = 0.0
    tensors_checked = 0

    def tensor_rel(loss_fn, grads, params, picks_per_tensor, rng):
        nonlocal worst, tensors_checked
        for name, tensor in params.items():
            flat = tensor.reshape(-1)
            if picks_per_tensor is None or flat.size <= picks_per_tensor:
                picks = np.arange(flat.size)
            else:
                picks = rng.choice(flat.size, size=picks_per_tensor, replace=False)
            numeric = np.zeros(len(picks))
            for j, idx in enumerate(picks):
                keep = flat[idx]
                flat[idx] = keep + step
                up = loss_fn()
                flat[idx] = keep - step
                down = loss_fn()
                flat[idx] = keep
                numeric[j] = (up - down) / (2 * step)
            analytic = grads[name].reshape(-1)[picks]
            denom = max(float(np.linalg.norm(numeric)), 1e-12)
            worst = max(worst, float(np.linalg.norm(analytic - numeric)) / denom)
            tensors_checked += 1

    rng = np.random.default_rng(60)
    feats = rng.normal(size=(2, 8, N_FEATURES))
    line_labels = rng.integers(0, 2, size=(2, 8)).astype(np.uint8)
    det_model = init_detector(3)
    _, det_grads = detection_gradients(det_model, feats, line_labels)
    tensor_rel(
        lambda: detection_gradients(det_model, feats, line_labels)[0],
        det_grads,
        det_model.params(),
        None,
        rng,
    )

    imgs = rng.uniform(0.05, 0.95, size=(2, 8, 8))
    seg_labels = rng.integers(0, 4, size=(2, 8, 8))
    seg_model = init_segmenter(5)
    _, seg_grads = segmentation_gradients(seg_model, imgs, seg_labels)
    tensor_rel(
        lambda: segmentation_gradients(seg_model, imgs, seg_labels)[0],
        seg_grads,
        seg_model.params(),
        20,
        rng,
    )

    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and tensors_checked == 16 and elapsed < 60.0
    _verdict(
        6,
        "gradient checks",
        ok,
        "central differences at 8x8, T=2: all 4 detector tensors in full and "
        "all 12 segmenter tensors (20 sampled entries each), %d tensors "
        "total: worst per-tensor rel err %.2e (< 1e-4), %.1f s (< 60 s)"
        % (tensors_checked, worst, elapsed),
    )
    assert ok


def test_criterion_07_detector_trainability():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    corpus = []
    for _ in range(40):
        labels = rng.integers(0, 2, size=(4, 16)).astype(np.uint8)
        feats = rng.normal(0.0, 0.3, size=(4, 16, N_FEATURES))
        feats[:, :, 0] = labels * 2.0 - 1.0 + rng.normal(0.0, 0.1, size=(4, 16))
        corpus.append((feats, labels))
    model, _ = train_detector(corpus[:30], epochs=600, rng_seed=6)
    hits = 0
    total = 0
    for feats, labels in corpus[30:]:
        pred = threshold_mask(predict_line_probs(model, feats), 0.5)
        hits += int((pred == labels).sum())
        total += labels.size
    accuracy = hits / total
    elapsed = time.perf_counter() - t0
    ok = accuracy >= 0.95 and elapsed < 120.0
    _verdict(
        7,
        "detector trainability",
        ok,
        "separable line-feature corpus, 30 train / 10 held-out sequences: "
        "held-out accuracy %.4f (need >= 0.95), %.0f s (< 120 s)"
        % (accuracy, elapsed),
    )
    assert ok


def test_criterion_08_segmenter_trainability():
    t0 = time.perf_counter()
    cases = [generate_phantom(case_spec(TINY_SPEC, 4242, i)) for i in range(40)]
    train_pairs = [cases[i] for i in range(40) if split_of(i, 40) == "train"]
    held_idx = [i for i in range(40) if split_of(i, 40) == "test"]
    model, _ = train_segmenter(train_pairs, epochs=300, rng_seed=0)

    held_dice = {1: [], 2: [], 3: []}
    for i in held_idx:
        frames, truth = cases[i]
        _, labels = segment(model, frames)
        for c in (1, 2, 3):
            held_dice[c].append(dice(labels, truth, c))
    means = {c: float(np.mean(held_dice[c])) for c in (1, 2, 3)}
    trained_ok = means[1] >= 0.90 and means[2] >= 0.80 and means[3] >= 0.80

    corrupted_dice = {1: [], 2: [], 3: []}
    corrected_dice = {1: [], 2: [], 3: []}
    for i in held_idx:
        frames, truth = cases[i]
        phase = PhaseGenSpec(rng_seed=derive_seed(4242, 11, i))
        ks = fft2(synthesize_phase(frames, phase))
        spec = CorruptionSpec(z=2, offset_sigma=3.0, rng_seed=derive_seed(4242, 23, i))
        acquired, record = corrupt_kspace(ks, spec)
        _, corrupted_labels = segment(model, magnitude(ifft2(acquired)))
        result = correct(acquired, record.mask())
        _, corrected_labels = segment(model, magnitude(result.corrected))
        for c in (1, 2, 3):
            corrupted_dice[c].append(dice(corrupted_labels, truth, c))
            corrected_dice[c].append(dice(corrected_labels, truth, c))
    gains = {
        c: float(np.mean(corrected_dice[c])) - float(np.mean(corrupted_dice[c]))
        for c in (1, 2, 3)
    }
    direction_ok = all(gain > 0.0 for gain in gains.values())

    elapsed = time.perf_counter() - t0
    ok = trained_ok and direction_ok and elapsed < 600.0
    _verdict(
        8,
        "segmenter trainability",
        ok,
        "40-case 32x32 corpus, 300 epochs: held-out mean Dice LV %.4f (>= "
        "0.90), Myo %.4f (>= 0.80), RV %.4f (>= 0.80); corrected-vs-corrupted "
        "mean Dice gains LV %+.4f, Myo %+.4f, RV %+.4f (all > 0); %.0f s "
        "(< 600 s)"
        % (means[1], means[2], means[3], gains[1], gains[2], gains[3], elapsed),
    )
    assert ok


def test_criterion_09_loss_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(90)

    probs = np.full((3, 8), 0.5)
    line_labels = rng.integers(0, 2, size=(3, 8)).astype(np.uint8)
    det_at_half = detection_loss(probs, line_labels)
    ln2_ok = abs(det_at_half - math.log(2.0)) < 1e-12

    seg_probs = np.full((2, 4, 4, 4), 0.25)
    seg_labels = rng.integers(0, 4, size=(2, 4, 4))
    seg_uniform = segmentation_loss(seg_probs, seg_labels)
    ln4_ok = abs(seg_uniform - math.log(4.0)) < 1e-12

    recon = rng.uniform(size=(2, 4, 4))
    target = rng.uniform(size=(2, 4, 4))
    lp = rng.uniform(0.05, 0.95, size=(2, 4))
    lk = rng.integers(0, 2, size=(2, 4)).astype(np.uint8)
    mse = float(np.mean((recon - target) ** 2))
    gamma_ok = (
        correction_loss(recon, target, lp, lk, gamma=0.0) == mse
        and correction_loss(recon, target, lp, lk, gamma=1.0) == detection_loss(lp, lk)
    )

    seg_val, corr_val = 1.3863, 0.21493
    lambda_ok = (
        total_loss(seg_val, corr_val, LossWeights(lambda_weight=0.0)) == seg_val
        and total_loss(seg_val, corr_val, LossWeights(lambda_weight=1.0)) == corr_val
    )
    spot_ok = abs(
        total_loss(seg_val, corr_val, LossWeights(lambda_weight=0.8)) - 0.449204
    ) < 1e-12

    elapsed = time.perf_counter() - t0
    ok = ln2_ok and ln4_ok and gamma_ok and lambda_ok and spot_ok and elapsed < 1.0
    _verdict(
        9,
        "loss algebra",
        ok,
        "detection at p=0.5 == ln 2 (err %.1e), uniform segmentation == ln 4 "
        "(err %.1e), gamma/lambda in {0,1} identities exact, blended spot "
        "0.449204 holds at 1e-12, %.2f s (< 1 s)"
        % (abs(det_at_half - math.log(2.0)), abs(seg_uniform - math.log(4.0)), elapsed),
    )
    assert ok


def test_criterion_10_severity_monotonicity():
    t0 = time.perf_counter()
    z_order = (32, 16, 8, 4, 2)
    n_seq = 20
    by_z = {z: [] for z in z_order}
    for i in range(n_seq):
        spec = case_spec(DEFAULT_SPEC, 31, i)
        frames, _ = generate_phantom(spec)
        phase = PhaseGenSpec(rng_seed=derive_seed(31, 11, i))
        ks = fft2(synthesize_phase(frames, phase))
        clean = magnitude(ifft2(ks))
        base = CorruptionSpec(rng_seed=derive_seed(31, 23, i))
        for z, corrupted, _ in severity_sweep(ks, z_order, base):
            by_z[z].append(ssim(magnitude(ifft2(corrupted)), clean))
    means = [float(np.mean(by_z[z])) for z in z_order]
    violations = [
        later - earlier for earlier, later in zip(means, means[1:]) if later > earlier
    ]
    elapsed = time.perf_counter() - t0
    ok = (
        len(violations) <= 1
        and all(v <= 0.005 for v in violations)
        and elapsed < 180.0
    )
    _verdict(
        10,
        "severity monotonicity",
        ok,
        "mean corrupted SSIM over %d sequences for z=32..2: %s; %d adjacent "
        "violation(s) (allow <= 1 of <= 0.005), %.0f s (< 180 s)"
        % (n_seq, ", ".join("%.4f" % m for m in means), len(violations), elapsed),
    )
    assert ok


def test_criterion_11_sharpness_ordering():
    t0 = time.perf_counter()
    ordered = 0
    n_pairs = 20
    for i in range(n_pairs):
        frames, _ = generate_phantom(case_spec(TINY_SPEC, 77, i))
        blurred = gaussian_filter(frames, sigma=(0.0, 1.5, 1.5))
        if sharpness_index(frames) > sharpness_index(blurred):
            ordered += 1
    probe, _ = generate_phantom(case_spec(TINY_SPEC, 77, 0))
    deterministic = sharpness_index(probe) == sharpness_index(probe)
    elapsed = time.perf_counter() - t0
    ok = ordered == n_pairs and deterministic and elapsed < 60.0
    _verdict(
        11,
        "sharpness ordering",
        ok,
        "SI(sharp) > SI(blurred) on %d/%d phantom pairs; repeated evaluation "
        "bit-identical: %s; %.0f s (< 60 s)"
        % (ordered, n_pairs, deterministic, elapsed),
    )
    assert ok


def test_criterion_12_run_determinism(run_corpus, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(
        """
        {
          "dataset_root": %r,
          "out_dir": "placeholder",
          "master_seed": 7,
          "mask_source": "detector",
          "detector_epochs": 60,
          "segmenter_epochs": 40,
          "corruption": {"z": 8, "offset_sigma": 3.0}
        }
        """.replace("%r", '"%s"' % run_corpus)
    )
    out_a = tmp_path / "run_a"
    out_b = tmp_path / "run_b"
    code_a = cli_main(["run", "--config", str(cfg_path), "--out", str(out_a)])
    code_b = cli_main(["run", "--config", str(cfg_path), "--out", str(out_b)])
    bytes_a = (out_a / "aggregate.csv").read_bytes()
    bytes_b = (out_b / "aggregate.csv").read_bytes()
    ok = code_a == 0 and code_b == 0 and bytes_a == bytes_b and len(bytes_a) > 0
    _verdict(
        12,
        "run determinism",
        ok,
        "two `run` invocations with identical config+seed (training "
        "included): aggregate CSVs byte-identical (%d bytes)" % len(bytes_a),
    )
    assert ok
