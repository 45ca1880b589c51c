"""Synthetic phase generation and mistriggering artefact injection.

Mistriggering is simulated in k-space: for each frame, one in ``z`` Cartesian
lines is replaced by the same line from another temporal frame, the donor
frame drawn from a Gaussian offset around the victim. Magnitude-only inputs
first receive a smooth synthetic phase so the k-space is realistically
complex.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from .core import ValidationError, as_image_sequence, as_sequence, fft2, ifft2

__all__ = [
    "PhaseGenSpec",
    "CorruptionSpec",
    "CorruptionRecord",
    "synthesize_phase",
    "corrupt_kspace",
    "severity_sweep",
]


@dataclass(frozen=True)
class PhaseGenSpec:
    """Parameters of the synthetic-phase recipe.

    noise_sigma is a fraction of the image maximum; lowpass_keep the fraction
    of central k-space rows kept at full amplitude; lowpass_taper_sigma the
    Gaussian taper width (in rows) outside the kept band.
    """

    noise_sigma: float = 0.01
    lowpass_keep: float = 0.125
    lowpass_taper_sigma: float = 4.0
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.noise_sigma >= 0.0):
            raise ValidationError("noise_sigma must be >= 0")
        if not (0.0 < self.lowpass_keep <= 1.0):
            raise ValidationError("lowpass_keep must be in (0, 1]")
        if not (self.lowpass_taper_sigma > 0.0):
            raise ValidationError("lowpass_taper_sigma must be > 0")


@dataclass(frozen=True)
class CorruptionSpec:
    """1-in-z line corruption with Gaussian donor-frame offsets."""

    z: int = 8
    offset_sigma: float = 3.0
    rng_seed: int = 0

    def __post_init__(self):
        if not (isinstance(self.z, (int, np.integer)) and self.z >= 1):
            raise ValidationError("z must be an integer >= 1")
        if not (self.offset_sigma > 0.0):
            raise ValidationError("offset_sigma must be > 0")


@dataclass
class CorruptionRecord:
    """Every replacement performed: (victim frame t, line l, donor frame s)."""

    z: int
    offset_sigma: float
    seed: int
    entries: list
    t_frames: int
    n_lines: int

    def mask(self):
        """Derived (T, H) line mask: 1 on every corrupted line."""
        m = np.zeros((self.t_frames, self.n_lines), dtype=np.uint8)
        for t, l, _ in self.entries:
            m[t, l] = 1
        return m

    def to_json(self):
        return json.dumps(
            {
                "z": self.z,
                "offset_sigma": self.offset_sigma,
                "seed": self.seed,
                "entries": [[int(t), int(l), int(s)] for t, l, s in self.entries],
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text, t_frames, n_lines):
        d = json.loads(text)
        return cls(
            z=d["z"],
            offset_sigma=d["offset_sigma"],
            seed=d["seed"],
            entries=[tuple(e) for e in d["entries"]],
            t_frames=t_frames,
            n_lines=n_lines,
        )


def _lowpass_weights(h, keep, taper_sigma):
    """Per-row filter: 1 on the central ceil(keep*h) rows, Gaussian falloff
    outside, as a function of distance to the nearest kept row."""
    k = int(np.ceil(keep * h))
    start = (h - k) // 2
    rows = np.arange(h)
    dist = np.maximum(start - rows, rows - (start + k - 1))
    dist = np.maximum(dist, 0)
    return np.exp(-(dist.astype(np.float64) ** 2) / (2.0 * taper_sigma**2))


def _apply_phase_exact(mag, phi):
    """Construct re + i*im with modulus bitwise equal to mag.

    Builds the larger quadrature component directly and derives the smaller
    from the exact complement (mag - |a|)(mag + |a|), then nudges the smaller
    component by ulps until hypot lands on mag. Intended domain: normalized
    magnitudes in [0, 1]; converges in a sweep or two there.
    """
    c, s = np.cos(phi), np.sin(phi)
    swap = np.abs(s) > np.abs(c)
    bigu = np.where(swap, s, c)
    smallu = np.where(swap, c, s)
    a = mag * bigu
    comp = (mag - np.abs(a)) * (mag + np.abs(a))
    b = np.copysign(np.sqrt(np.maximum(comp, 0.0)), smallu)
    for _ in range(64):
        h = np.hypot(a, b)
        bad = h != mag
        if not bad.any():
            break
        ab, bb, tb = a[bad], b[bad], mag[bad]
        grow = np.hypot(ab, bb) < tb
        sel = np.abs(bb) <= np.abs(ab)
        for arr, which in ((bb, sel), (ab, ~sel)):
            v = arr[which]
            arr[which] = np.nextafter(v, np.where(grow[which] == (v >= 0), np.inf, -np.inf))
        a[bad], b[bad] = ab, bb
    else:
        raise FloatingPointError("modulus enforcement did not converge in 64 sweeps")
    re = np.where(swap, b, a)
    im = np.where(swap, a, b)
    return re, im


def synthesize_phase(img, spec):
    """Attach a smooth synthetic phase to a magnitude image.

    The phase field is the per-pixel angle of ifft2(lowpass(fft2(img + n)))
    with n ~ N(0, (noise_sigma * max(img))^2) and a central-row low-pass.
    The output's modulus equals img bitwise.
    """
    img = as_image_sequence(img, unit_range=True, name="magnitude image")
    t, h, w = img.shape
    weights = _lowpass_weights(h, spec.lowpass_keep, spec.lowpass_taper_sigma)

    if spec.noise_sigma == 0.0 and np.all(weights == 1.0):
        # identity filter on a nonnegative image: the phase is exactly the
        # input's own angle, i.e. zero; skip the fft round trip entirely
        return img.astype(np.complex128)

    noisy = img
    if spec.noise_sigma > 0.0:
        rng = np.random.default_rng(spec.rng_seed)
        scale = spec.noise_sigma * img.max()
        noisy = img + rng.normal(0.0, scale, size=img.shape)
    if not np.all(np.isfinite(noisy)):
        raise ValidationError("noise_sigma produced non-finite values")

    low = ifft2(fft2(noisy) * weights[None, :, None])
    phi = np.arctan2(low.imag, low.real)
    re, im = _apply_phase_exact(img, phi)
    return re + 1j * im


def corrupt_kspace(ks, spec):
    """Replace 1-in-z lines per frame with donor lines from other frames.

    Per frame, the corrupted set is {l : l = r (mod z)} with r uniform in
    [0, z); each corrupted line's donor frame is clamp(round(t + j), 0, T-1)
    with j ~ N(0, offset_sigma^2), redrawn while the donor equals the victim.
    Donor lines always come from the input, so replacements never cascade.
    Returns the corrupted k-space and the full replacement record.
    """
    ks = as_sequence(ks, name="k-space sequence")
    t_frames, h, _ = ks.shape
    if t_frames < 2:
        raise ValidationError("no donor frame: corruption needs T >= 2")
    z = int(spec.z)
    rng = np.random.default_rng(spec.rng_seed)
    out = ks.copy()
    entries = []
    for t in range(t_frames):
        r = int(rng.integers(z))
        for l in range(r, h, z):
            while True:
                j = rng.normal(0.0, spec.offset_sigma)
                s = int(np.clip(int(np.rint(t + j)), 0, t_frames - 1))
                if s != t:
                    break
            out[t, l, :] = ks[s, l, :]
            entries.append((t, l, s))
    record = CorruptionRecord(
        z=z,
        offset_sigma=float(spec.offset_sigma),
        seed=int(spec.rng_seed),
        entries=entries,
        t_frames=t_frames,
        n_lines=h,
    )
    return out, record


def derive_seed(*keys):
    """Deterministic 62-bit child seed from a tuple of integer keys."""
    return int(np.random.default_rng(list(keys)).integers(2**62))


def severity_sweep(ks, z_values, spec):
    """One independent corruption per z, each with a per-z derived seed."""
    if not len(z_values):
        raise ValidationError("z_values must be non-empty")
    out = []
    for z in z_values:
        sub = replace(spec, z=int(z), rng_seed=derive_seed(spec.rng_seed, int(z)))
        corrupted, record = corrupt_kspace(ks, sub)
        out.append((int(z), corrupted, record))
    return out
