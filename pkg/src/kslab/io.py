"""Flat-file containers: a small JSON header next to a raw little-endian
binary payload.

Two payload kinds share the pattern. Sequences are (T, H, W) arrays with
dtype code "f32", "c64" (interleaved re, im float32 pairs), or "u8"; model
checkpoints are an ordered list of named f32 tensors concatenated into one
payload. Writes are deterministic byte-for-byte for identical inputs.
"""

import json
from pathlib import Path

import numpy as np

from .core import ValidationError

SEQUENCE_DTYPES = {
    "f32": np.dtype("<f4"),
    "c64": np.dtype("<c8"),
    "u8": np.dtype("u1"),
}

_HEADER_KW = dict(sort_keys=True, separators=(",", ":"))


def _write_header(stem, header):
    Path(str(stem) + ".json").write_text(json.dumps(header, **_HEADER_KW) + "\n")


def _read_header(stem):
    path = Path(str(stem) + ".json")
    if not path.is_file():
        raise ValidationError("missing header file %s" % path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError("unreadable header %s: %s" % (path, e))


def _normalized_stem(stem):
    """Allow loaders to take either the bare stem or one of its two
    component filenames; trimming happens only when the literal stem has no
    header but the trimmed one does."""
    s = str(stem)
    if not Path(s + ".json").is_file() and (s.endswith(".bin") or s.endswith(".json")):
        trimmed = s.rsplit(".", 1)[0]
        if Path(trimmed + ".json").is_file():
            return trimmed
    return s


def save_sequence(stem, arr, dtype):
    """Write ``stem.json`` + ``stem.bin`` holding a (T, H, W) array.

    dtype is the container code ("f32", "c64", "u8"); the array is cast to
    it on write. Returns the header dict.
    """
    if dtype not in SEQUENCE_DTYPES:
        raise ValidationError("unknown container dtype %r" % (dtype,))
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValidationError("sequence payload must be 3-d, got shape %s" % (arr.shape,))
    if dtype != "c64" and np.iscomplexobj(arr):
        raise ValidationError("complex data requires dtype 'c64'")
    payload = np.ascontiguousarray(arr.astype(SEQUENCE_DTYPES[dtype]))
    header = {
        "dtype": dtype,
        "shape": [int(n) for n in arr.shape],
        "layout": "row-major",
        "endianness": "little",
    }
    Path(str(stem) + ".bin").write_bytes(payload.tobytes())
    _write_header(stem, header)
    return header


def load_sequence(stem):
    """Read ``stem.json`` + ``stem.bin``; returns the array in container dtype.

    Also accepts either component filename in place of the stem.
    Round-trips written files bit-exactly.
    """
    stem = _normalized_stem(stem)
    header = _read_header(stem)
    for key, want in (("layout", "row-major"), ("endianness", "little")):
        if header.get(key) != want:
            raise ValidationError("unsupported %s %r in %s.json" % (key, header.get(key), stem))
    code = header.get("dtype")
    if code not in SEQUENCE_DTYPES:
        raise ValidationError("unknown container dtype %r in %s.json" % (code, stem))
    shape = header.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(n, int) for n in shape)):
        raise ValidationError("bad shape field %r in %s.json" % (shape, stem))
    raw = Path(str(stem) + ".bin").read_bytes()
    dt = SEQUENCE_DTYPES[code]
    want_bytes = int(np.prod(shape)) * dt.itemsize
    if len(raw) != want_bytes:
        raise ValidationError(
            "payload %s.bin is %d bytes, header implies %d" % (stem, len(raw), want_bytes)
        )
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def save_model(stem, tensors):
    """Write a checkpoint: named tensors as one f32 payload plus a header.

    ``tensors`` is a dict mapping name -> array; insertion order is the
    payload order and is preserved on load.
    """
    names = list(tensors)
    entries = []
    chunks = []
    for name in names:
        arr = np.asarray(tensors[name])
        entries.append({"name": name, "shape": [int(n) for n in arr.shape]})
        chunks.append(np.ascontiguousarray(arr.astype("<f4")).ravel())
    payload = np.concatenate(chunks) if chunks else np.empty(0, dtype="<f4")
    header = {
        "dtype": "f32",
        "layout": "row-major",
        "endianness": "little",
        "tensors": entries,
    }
    Path(str(stem) + ".bin").write_bytes(payload.tobytes())
    _write_header(stem, header)
    return header


def load_model(stem):
    """Read a checkpoint written by :func:`save_model`.

    Also accepts either component filename in place of the stem. Returns an
    ordered dict of name -> float64 array (training and inference run in
    float64; storage is f32).
    """
    stem = _normalized_stem(stem)
    header = _read_header(stem)
    if header.get("dtype") != "f32":
        raise ValidationError("model container must be f32, got %r" % (header.get("dtype"),))
    entries = header.get("tensors")
    if not isinstance(entries, list):
        raise ValidationError("model header %s.json lacks a tensor list" % stem)
    raw = Path(str(stem) + ".bin").read_bytes()
    flat = np.frombuffer(raw, dtype="<f4")
    out = {}
    offset = 0
    for entry in entries:
        name, shape = entry["name"], entry["shape"]
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise ValidationError("model payload %s.bin shorter than header implies" % stem)
        out[name] = flat[offset : offset + size].astype(np.float64).reshape(shape)
        offset += size
    if offset != flat.size:
        raise ValidationError("model payload %s.bin longer than header implies" % stem)
    return out
