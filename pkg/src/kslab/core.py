"""Shared tensor conventions: cine stacks, centered orthonormal FFTs, and the
Cartesian line axis every other module relies on.

Sequences are plain numpy arrays shaped (T, H, W). Phase-encode lines run
along the H axis (rows); ``LINE_AXIS`` pins that convention package-wide.
All internal computation is float64/complex128; file containers downcast on
save (see :mod:`kslab.io`).
"""

import numpy as np

# k-space lines are rows: axis 1 of a (T, H, W) stack.
LINE_AXIS = 1
SPATIAL_AXES = (-2, -1)

# Smallest legal spatial extent.
MIN_HW = 4


class ValidationError(ValueError):
    """An input violated a shape or value contract."""


def as_sequence(frames, name="sequence"):
    """Validate a (T, H, W) stack: 3 dims, T >= 1, H and W >= 4, all finite.

    Returns the input as an ndarray without copying when possible.
    """
    arr = np.asarray(frames)
    if arr.ndim != 3:
        raise ValidationError(
            "%s must be 3-d (T, H, W), got shape %s" % (name, (arr.shape,))
        )
    t, h, w = arr.shape
    if t < 1 or h < MIN_HW or w < MIN_HW:
        raise ValidationError(
            "%s needs T >= 1 and H, W >= %d, got %s" % (name, MIN_HW, (arr.shape,))
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError("%s contains non-finite values" % name)
    return arr


def as_image_sequence(frames, unit_range=False, name="image sequence"):
    """Validate a real (T, H, W) stack, optionally enforcing values in [0, 1]."""
    arr = as_sequence(frames, name=name)
    if np.iscomplexobj(arr):
        raise ValidationError("%s must be real-valued" % name)
    arr = arr.astype(np.float64, copy=False)
    if unit_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError("%s values must lie in [0, 1]" % name)
    return arr


def validate_line_mask(mask, seq_shape):
    """Check a (T, H) binary line mask against a sequence's (T, H, W) shape.

    Convention: 1 marks a corrupted line, 0 a clean one.
    """
    arr = np.asarray(mask)
    want = (seq_shape[0], seq_shape[1])
    if arr.shape != want:
        raise ValidationError(
            "line mask shape %s does not match sequence lines %s" % (arr.shape, want)
        )
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError("line mask entries must be 0 or 1")
    return arr.astype(np.uint8, copy=False)


def fft2(frames):
    """Per-frame centered 2-D DFT with orthonormal scaling.

    The DC coefficient lands at index (H//2, W//2), so the low-frequency
    band is contiguous around the array center. Orthonormal scaling makes
    the transform energy-preserving (Parseval) up to rounding.
    """
    arr = as_sequence(frames).astype(np.complex128, copy=False)
    shifted = np.fft.ifftshift(arr, axes=SPATIAL_AXES)
    ks = np.fft.fft2(shifted, axes=SPATIAL_AXES, norm="ortho")
    return np.fft.fftshift(ks, axes=SPATIAL_AXES)


def ifft2(coeffs):
    """Exact inverse of :func:`fft2` under the same centering and scaling."""
    arr = as_sequence(coeffs, name="k-space sequence").astype(np.complex128, copy=False)
    shifted = np.fft.ifftshift(arr, axes=SPATIAL_AXES)
    img = np.fft.ifft2(shifted, axes=SPATIAL_AXES, norm="ortho")
    return np.fft.fftshift(img, axes=SPATIAL_AXES)


def magnitude(seq):
    """Per-pixel complex modulus as a float64 array.

    Computed as hypot(re, im) rather than complex abs: the platform's hypot
    rounds the true modulus correctly, which the phase-synthesis guarantee
    of bit-exact magnitude preservation relies on. Real input passes through
    as its absolute value.
    """
    arr = np.asarray(seq)
    re = np.asarray(arr.real, dtype=np.float64)
    im = np.asarray(arr.imag, dtype=np.float64)
    return np.hypot(re, im)
