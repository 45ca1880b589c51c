"""Parametric beating-heart phantom with pixel-exact ground-truth labels.

Short-axis-like geometry: a circular LV blood pool whose radius follows a
cosine systole/diastole cycle, a constant-thickness myocardial annulus, and
an RV crescent carved from an ellipse abutting the septum. Intensities are
per-class bases plus Gaussian texture plus a smooth seeded bias field whose
amplitude is tied to the texture level (2 * texture_sigma), so texture_sigma
= 0 degrades to an exactly piecewise-constant image.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import ValidationError
from .io import save_sequence

__all__ = [
    "PhantomSpec",
    "DEFAULT_SPEC",
    "TINY_SPEC",
    "lv_radius",
    "generate_phantom",
    "case_spec",
    "split_of",
    "generate_corpus",
    "load_manifest",
]

CLASS_NAMES = ("background", "lv", "myo", "rv")

# outermost structure pixel must stay >= MARGIN pixels from the frame edge
MARGIN = 2


@dataclass(frozen=True)
class PhantomSpec:
    t: int = 25
    h: int = 176
    w: int = 132
    lv_center: tuple = (88.0, 78.0)
    rv_center: tuple = (88.0, 40.0)
    lv_radius_range: tuple = (14.0, 22.0)  # (systole, diastole) in pixels
    myo_thickness: float = 7.0
    rv_axes: tuple = (30.0, 24.0)  # ellipse semi-axes (y, x)
    contraction_phase: float = 0.35  # fraction of the cycle at peak systole
    intensities: tuple = (0.15, 0.95, 0.45, 0.70)  # base per class id 0..3
    texture_sigma: float = 0.03
    rng_seed: int = 0


DEFAULT_SPEC = PhantomSpec()

# small and fast; too few frames for the smooth-contraction property, which
# is asserted at default geometry
TINY_SPEC = PhantomSpec(
    t=8,
    h=32,
    w=32,
    lv_center=(16.0, 19.0),
    rv_center=(16.0, 8.0),
    lv_radius_range=(4.0, 6.0),
    myo_thickness=2.0,
    rv_axes=(7.0, 5.5),
    texture_sigma=0.02,
)


def validate_spec(spec):
    if spec.t < 1 or spec.h < 4 or spec.w < 4:
        raise ValidationError("phantom dims must satisfy T >= 1, H, W >= 4")
    r_sys, r_dia = spec.lv_radius_range
    if not (0 < r_sys <= r_dia):
        raise ValidationError("lv radius range must satisfy 0 < systole <= diastole")
    if not (spec.myo_thickness > 0):
        raise ValidationError("myo_thickness must be > 0")
    ay, ax = spec.rv_axes
    if not (ay > 0 and ax > 0):
        raise ValidationError("rv_axes must be positive")
    if not (0.0 <= spec.contraction_phase < 1.0):
        raise ValidationError("contraction_phase must be in [0, 1)")
    if len(spec.intensities) != 4 or any(not (0.0 <= v <= 1.0) for v in spec.intensities):
        raise ValidationError("intensities must be four values in [0, 1]")
    if spec.texture_sigma < 0:
        raise ValidationError("texture_sigma must be >= 0")

    cy, cx = spec.lv_center
    rr = r_dia + spec.myo_thickness
    rcy, rcx = spec.rv_center
    lo = MARGIN
    for val, lim, what in [
        (cy - rr, 0, "lv annulus top"),
        (cx - rr, 0, "lv annulus left"),
        (rcy - ay, 0, "rv ellipse top"),
        (rcx - ax, 0, "rv ellipse left"),
    ]:
        if val < lo:
            raise ValidationError("geometry overflow: %s outside margin" % what)
    for val, lim, what in [
        (cy + rr, spec.h - 1, "lv annulus bottom"),
        (cx + rr, spec.w - 1, "lv annulus right"),
        (rcy + ay, spec.h - 1, "rv ellipse bottom"),
        (rcx + ax, spec.w - 1, "rv ellipse right"),
    ]:
        if val > lim - lo:
            raise ValidationError("geometry overflow: %s outside margin" % what)
    return spec


def lv_radius(spec, t):
    """Blood-pool radius at frame t: cosine cycle, minimum at the
    contraction-phase fraction of the cycle."""
    r_sys, r_dia = spec.lv_radius_range
    phase = 2.0 * np.pi * (t / spec.t - spec.contraction_phase)
    return r_dia - (r_dia - r_sys) * (1.0 + np.cos(phase)) / 2.0


def generate_phantom(spec):
    """Render (ImageSequence, SegmentationMap) for one phantom.

    Labels: 0 background, 1 LV pool, 2 myocardium, 3 RV crescent. Labels are
    exact by construction; the image is clipped to [0, 1].
    """
    validate_spec(spec)
    rng = np.random.default_rng(spec.rng_seed)
    h, w = spec.h, spec.w
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    bias_amp = 2.0 * spec.texture_sigma
    bcy = rng.uniform(0, h)
    bcx = rng.uniform(0, w)
    bsig = 0.6 * max(h, w)
    bias = bias_amp * np.exp(-((yy - bcy) ** 2 + (xx - bcx) ** 2) / (2.0 * bsig**2))

    cy, cx = spec.lv_center
    rcy, rcx = spec.rv_center
    ay, ax = spec.rv_axes
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    in_ellipse = ((yy - rcy) / ay) ** 2 + ((xx - rcx) / ax) ** 2 <= 1.0

    base = np.asarray(spec.intensities, dtype=np.float64)
    images = np.empty((spec.t, h, w), dtype=np.float64)
    labels = np.empty((spec.t, h, w), dtype=np.uint8)
    for t in range(spec.t):
        r = lv_radius(spec, t)
        lv = d2 <= r * r
        myo = (d2 <= (r + spec.myo_thickness) ** 2) & ~lv
        rv = in_ellipse & ~lv & ~myo
        lab = np.zeros((h, w), dtype=np.uint8)
        lab[lv] = 1
        lab[myo] = 2
        lab[rv] = 3
        labels[t] = lab

        img = base[lab]
        if spec.texture_sigma > 0:
            img = img + rng.normal(0.0, spec.texture_sigma, size=(h, w))
        img = img + bias
        images[t] = np.clip(img, 0.0, 1.0)

        present = np.bincount(lab.ravel(), minlength=4) > 0
        if not present.all():
            missing = [CLASS_NAMES[i] for i in range(4) if not present[i]]
            raise ValidationError(
                "degenerate geometry: class(es) %s empty in frame %d" % (missing, t)
            )
    return images, labels


def _fit(spec):
    """Clamp a jittered spec toward geometric validity.

    Shrinks radii to fit the frame, pulls centers inside the margin box, and
    keeps the RV ellipse extending past the annulus so the crescent survives.
    """
    h, w = spec.h, spec.w
    # clamp strictly inside the feasible box: clamping exactly onto the
    # boundary can fail the margin check by one rounding ulp
    # ((MARGIN + ax) - ax may round below MARGIN)
    eps = 1e-6
    r_sys, r_dia = spec.lv_radius_range
    th = spec.myo_thickness
    if r_sys > r_dia:
        r_sys = r_dia * 0.9
    rr = r_dia + th
    rr_max = (min(h, w) - 1 - 2 * MARGIN) / 2.0 - eps
    if rr > rr_max:
        scale = rr_max / rr
        r_sys, r_dia, th = r_sys * scale, r_dia * scale, th * scale
        rr = r_dia + th
    cy = float(np.clip(spec.lv_center[0], MARGIN + rr + eps, h - 1 - MARGIN - rr - eps))
    cx = float(np.clip(spec.lv_center[1], MARGIN + rr + eps, w - 1 - MARGIN - rr - eps))

    ay, ax = spec.rv_axes
    ay = min(ay, (h - 1 - 2 * MARGIN) / 2.0 - eps)
    ax = min(ax, (w - 1 - 2 * MARGIN) / 2.0 - eps)
    rcy = float(np.clip(spec.rv_center[0], MARGIN + ay + eps, h - 1 - MARGIN - ay - eps))
    # the ellipse should reach at least 1 px past the annulus on the far
    # side; the frame bound wins if the two conflict, and the per-frame
    # class-presence check in generate_phantom is the final arbiter
    rcx = min(spec.rv_center[1], cx - rr - 1.0 + ax)
    rcx = float(np.clip(rcx, MARGIN + ax + eps, w - 1 - MARGIN - ax - eps))

    return validate_spec(
        replace(
            spec,
            lv_radius_range=(r_sys, r_dia),
            myo_thickness=th,
            lv_center=(cy, cx),
            rv_center=(rcy, rcx),
            rv_axes=(ay, ax),
        )
    )


def _jitter(spec, rng):
    """Randomize a template: radii (and thickness/axes) +-20%, centers +-5 px,
    intensities +-0.1; then clamp toward validity."""
    r_sys, r_dia = spec.lv_radius_range
    r_sys *= 1.0 + rng.uniform(-0.2, 0.2)
    r_dia *= 1.0 + rng.uniform(-0.2, 0.2)
    th = spec.myo_thickness * (1.0 + rng.uniform(-0.2, 0.2))
    ay = spec.rv_axes[0] * (1.0 + rng.uniform(-0.2, 0.2))
    ax = spec.rv_axes[1] * (1.0 + rng.uniform(-0.2, 0.2))
    cy = spec.lv_center[0] + rng.uniform(-5.0, 5.0)
    cx = spec.lv_center[1] + rng.uniform(-5.0, 5.0)
    rcy = spec.rv_center[0] + rng.uniform(-5.0, 5.0)
    rcx = spec.rv_center[1] + rng.uniform(-5.0, 5.0)
    vals = tuple(
        float(np.clip(v + rng.uniform(-0.1, 0.1), 0.0, 1.0)) for v in spec.intensities
    )
    jittered = replace(
        spec,
        lv_radius_range=(min(r_sys, r_dia), max(r_sys, r_dia)),
        myo_thickness=th,
        rv_axes=(ay, ax),
        lv_center=(cy, cx),
        rv_center=(rcy, rcx),
        intensities=vals,
    )
    return _fit(jittered)


def split_of(i, n):
    n_train = int(np.floor(0.6 * n))
    n_val = int(np.floor(0.2 * n))
    if i < n_train:
        return "train"
    if i < n_train + n_val:
        return "val"
    return "test"


def case_spec(template, seed, i):
    """Deterministic jittered spec for corpus case i under a master seed."""
    rng = np.random.default_rng([seed, i])
    spec_i = _jitter(template, rng)
    return replace(spec_i, rng_seed=int(rng.integers(2**62)))


def generate_corpus(n, template, seed, root):
    """Write n jittered phantoms under root with a deterministic manifest.

    Layout: <root>/manifest.json and <root>/case_%04d/{image,labels}.{json,bin};
    split 60/20/20 train/val/test by case index. Per-case RNG streams derive
    from (seed, index), so cases are order-independent.
    """
    if n < 1:
        raise ValidationError("corpus size must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(n):
        spec_i = case_spec(template, seed, i)
        images, labels = generate_phantom(spec_i)
        name = "case_%04d" % i
        case_dir = root / name
        case_dir.mkdir(exist_ok=True)
        save_sequence(case_dir / "image", images, "f32")
        save_sequence(case_dir / "labels", labels, "u8")
        cases.append(
            {
                "id": name,
                "split": split_of(i, n),
                "image": "%s/image" % name,
                "labels": "%s/labels" % name,
                "rng_seed": spec_i.rng_seed,
            }
        )
    manifest = {
        "n": n,
        "seed": int(seed),
        "shape": [template.t, template.h, template.w],
        "cases": cases,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )
    return manifest


def load_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise ValidationError("no manifest at %s" % path)
    return json.loads(path.read_text())
