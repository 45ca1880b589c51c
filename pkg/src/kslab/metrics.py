"""Image-quality metrics: MAE, PSNR, windowed SSIM, and a no-reference
sharpness index, plus assembly of per-run report rows.

All metrics are pure functions of their inputs; the sharpness index uses a
call-local seeded generator, so concurrent evaluation is safe.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.stats import norm

from .core import ValidationError, as_image_sequence
from .kernels import tv_aniso

__all__ = [
    "mae",
    "psnr",
    "ssim",
    "sharpness_index",
    "MetricsReport",
    "assemble_report",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = (
    "run_id",
    "stage",
    "z",
    "j_sigma",
    "lambda",
    "mae",
    "psnr",
    "ssim",
    "si",
    "dice_lv",
    "dice_myo",
    "dice_rv",
)


def _pair(x, y):
    x = as_image_sequence(x, name="first image sequence")
    y = as_image_sequence(y, name="second image sequence")
    if x.shape != y.shape:
        raise ValidationError(
            "image sequences must share a shape, got %s vs %s" % (x.shape, y.shape)
        )
    return x, y


def mae(x, y):
    """Mean absolute difference over all T*H*W pixels."""
    x, y = _pair(x, y)
    return float(np.mean(np.abs(x - y)))


def psnr(x, y):
    """Peak signal-to-noise ratio in dB, with the peak read from the
    ground-truth sequence x. Identical inputs return +inf."""
    x, y = _pair(x, y)
    peak = float(x.max())
    if peak == 0.0:
        raise ValidationError("ground-truth maximum is zero; PSNR undefined")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(20.0 * np.log10(peak) - 10.0 * np.log10(mse))


def _gaussian_window(size, sigma):
    half = size // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim(x, y, window_size=11, window_sigma=1.5, dynamic_range=1.0):
    """Mean structural similarity with a normalized Gaussian window.

    Local statistics come from separable correlation with symmetric boundary
    padding; covariance is E[xy] - E[x]E[y], which makes ssim(x, x) == 1.0
    exactly (numerator and denominator are computed identically then).
    """
    x, y = _pair(x, y)
    _, h, w = x.shape
    if window_size > h or window_size > w:
        raise ValidationError("SSIM window exceeds the image extent")
    g = _gaussian_window(window_size, window_sigma)

    def smooth(a):
        a = correlate1d(a, g, axis=-2, mode="reflect")
        return correlate1d(a, g, axis=-1, mode="reflect")

    mu_x = smooth(x)
    mu_y = smooth(y)
    cov_xy = smooth(x * y) - mu_x * mu_y
    var_x = smooth(x * x) - mu_x * mu_x
    var_y = smooth(y * y) - mu_y * mu_y

    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def sharpness_index(x, n_surrogates=64, rng_seed=0):
    """No-reference sharpness: per frame, the upper-tail improbability of the
    frame's total variation under its own phase-randomized surrogate ensemble,
    in -log10 units; frames averaged.

    Surrogates keep the frame's Fourier magnitudes and take their phases from
    the transform of white noise; every frame reuses the same seeded noise
    stream, which keeps the score invariant to frame reordering. A constant
    frame has a degenerate ensemble and scores 0 with a warning.
    """
    x = as_image_sequence(x, name="image sequence")
    if n_surrogates < 2:
        raise ValidationError("surrogate ensemble needs at least 2 members")
    vals = []
    degenerate = False
    for t in range(x.shape[0]):
        frame = x[t]
        spectrum_mag = np.abs(np.fft.fft2(frame))
        rng = np.random.default_rng(rng_seed)
        tvs = np.empty(n_surrogates, dtype=np.float64)
        for k in range(n_surrogates):
            wn = np.fft.fft2(rng.standard_normal(frame.shape))
            mag = np.abs(wn)
            phase = np.where(mag == 0.0, 1.0 + 0.0j, wn / np.where(mag == 0.0, 1.0, mag))
            tvs[k] = tv_aniso(np.fft.ifft2(spectrum_mag * phase).real)
        mu = tvs.mean()
        sigma = tvs.std(ddof=0)
        if sigma == 0.0:
            degenerate = True
            vals.append(0.0)
            continue
        zscore = (mu - tv_aniso(frame)) / sigma
        vals.append(float(-norm.logsf(zscore) / np.log(10.0)))
    if degenerate:
        warnings.warn(
            "constant frame: sharpness index degenerate, scored 0", RuntimeWarning
        )
    return float(np.mean(vals))


@dataclass(frozen=True)
class MetricsReport:
    """One evaluated stage of one run; maps 1:1 onto a report CSV row."""

    run_id: str
    stage: str
    z: int
    j_sigma: float
    lambda_weight: float
    mae: float
    psnr: float
    ssim: float
    si: float
    dice_lv: float = None
    dice_myo: float = None
    dice_rv: float = None
    config_hash: str = ""

    def to_row(self):
        """Column values as strings, in REPORT_COLUMNS order. Floats use
        repr() for shortest exact round-trip; absent dice cells are empty."""
        cells = [
            self.run_id,
            self.stage,
            str(int(self.z)),
            repr(float(self.j_sigma)),
            repr(float(self.lambda_weight)),
            repr(float(self.mae)),
            repr(float(self.psnr)),
            repr(float(self.ssim)),
            repr(float(self.si)),
        ]
        for v in (self.dice_lv, self.dice_myo, self.dice_rv):
            cells.append("" if v is None else repr(float(v)))
        return cells


def assemble_report(
    run_id,
    stage,
    z,
    j_sigma,
    lambda_weight,
    mae_value,
    psnr_value,
    ssim_value,
    si_value,
    dice=None,
    config_hash="",
):
    """Bundle metric values plus run metadata, enforcing range invariants.

    dice, when given, is a (lv, myo, rv) triple; omitted dice leaves those
    report fields absent.
    """
    if mae_value < 0:
        raise ValidationError("mae must be >= 0")
    if not (-1.0 <= ssim_value <= 1.0):
        raise ValidationError("ssim must lie in [-1, 1]")
    dice_lv = dice_myo = dice_rv = None
    if dice is not None:
        dice_lv, dice_myo, dice_rv = (float(v) for v in dice)
        for v in (dice_lv, dice_myo, dice_rv):
            if not (0.0 <= v <= 1.0):
                raise ValidationError("dice must lie in [0, 1]")
    return MetricsReport(
        run_id=str(run_id),
        stage=str(stage),
        z=int(z),
        j_sigma=float(j_sigma),
        lambda_weight=float(lambda_weight),
        mae=float(mae_value),
        psnr=float(psnr_value),
        ssim=float(ssim_value),
        si=float(si_value),
        dice_lv=dice_lv,
        dice_myo=dice_myo,
        dice_rv=dice_rv,
        config_hash=str(config_hash),
    )
