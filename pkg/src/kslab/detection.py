"""Per-line corruption detector: fixed line statistics feeding a small
two-layer perceptron, thresholded into a binary line mask.

Six features per (frame, line): magnitude energy, log-energy, max magnitude,
L1 complex difference to the previous and next frame's same line (clamped at
the sequence ends), and the normalized line index. Features are standardized
per sequence so the detector transfers across corruption severities.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import ValidationError, as_sequence, validate_line_mask
from .io import load_model, save_model
from .optim import Adam, TrainingError

__all__ = [
    "N_FEATURES",
    "DetectionModel",
    "extract_line_features",
    "init_detector",
    "predict_line_probs",
    "threshold_mask",
    "detection_loss",
    "detection_gradients",
    "train_detector",
    "save_detector",
    "load_detector",
]

N_FEATURES = 6
HIDDEN = 16
CLAMP_EPS = 1e-7
LOG_EPS = 1e-12


@dataclass
class DetectionModel:
    w1: np.ndarray  # (F, 16)
    b1: np.ndarray  # (16,)
    w2: np.ndarray  # (16, 1)
    b2: np.ndarray  # (1,)

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def validate(self):
        shapes = {
            "w1": (N_FEATURES, HIDDEN),
            "b1": (HIDDEN,),
            "w2": (HIDDEN, 1),
            "b2": (1,),
        }
        for name, arr in self.params().items():
            if arr.shape != shapes[name]:
                raise ValidationError(
                    "detector tensor %s has shape %s, expected %s"
                    % (name, arr.shape, shapes[name])
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError("detector tensor %s is not finite" % name)
        return self


def extract_line_features(ks):
    """Deterministic (T, H, 6) feature tensor, standardized per feature over
    the whole sequence; a zero-variance feature is left at exactly 0."""
    ks = as_sequence(ks, name="k-space sequence")
    t, h, _ = ks.shape
    mag = np.abs(ks)
    energy = (mag**2).sum(axis=2)
    feats = np.empty((t, h, N_FEATURES), dtype=np.float64)
    feats[:, :, 0] = energy
    feats[:, :, 1] = np.log(energy + LOG_EPS)
    feats[:, :, 2] = mag.max(axis=2)
    prev_idx = np.maximum(np.arange(t) - 1, 0)
    next_idx = np.minimum(np.arange(t) + 1, t - 1)
    feats[:, :, 3] = np.abs(ks - ks[prev_idx]).sum(axis=2)
    feats[:, :, 4] = np.abs(ks - ks[next_idx]).sum(axis=2)
    feats[:, :, 5] = np.arange(h, dtype=np.float64) / (h - 1) if h > 1 else 0.0

    flat = feats.reshape(-1, N_FEATURES)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    out = np.zeros_like(flat)
    live = std > 0
    out[:, live] = (flat[:, live] - mean[live]) / std[live]
    return out.reshape(t, h, N_FEATURES)


def init_detector(rng_seed=0):
    """All four tensors drawn from a zero-mean unit-variance Gaussian."""
    rng = np.random.default_rng(rng_seed)
    return DetectionModel(
        w1=rng.normal(size=(N_FEATURES, HIDDEN)),
        b1=rng.normal(size=(HIDDEN,)),
        w2=rng.normal(size=(HIDDEN, 1)),
        b2=rng.normal(size=(1,)),
    ).validate()


def _forward(model, flat_feats):
    z1 = flat_feats @ model.w1 + model.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ model.w2 + model.b2
    return z1, a1, z2, expit(z2)


def predict_line_probs(model, feats):
    """Elementwise sigmoid(W2 . relu(W1 f + b1) + b2) over every line."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[2] != N_FEATURES:
        raise ValidationError("features must have shape (T, H, %d)" % N_FEATURES)
    model.validate()
    t, h, _ = feats.shape
    _, _, _, p = _forward(model, feats.reshape(-1, N_FEATURES))
    return p.reshape(t, h)


def threshold_mask(probs, threshold=0.5):
    """Binary line mask via probs >= threshold; threshold strictly inside
    (0, 1)."""
    probs = np.asarray(probs, dtype=np.float64)
    if not (0.0 < threshold < 1.0):
        raise ValidationError("threshold must lie strictly inside (0, 1)")
    return (probs >= threshold).astype(np.uint8)


def _clamped(probs):
    return np.clip(probs, CLAMP_EPS, 1.0 - CLAMP_EPS)


def detection_loss(probs, labels):
    """Mean binary cross-entropy over all T*H lines, probabilities clamped
    to [1e-7, 1 - 1e-7]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValidationError("probabilities and labels must share a shape")
    k = labels.astype(np.float64)
    p = _clamped(probs)
    return float(-np.mean(k * np.log(p) + (1.0 - k) * np.log1p(-p)))


def detection_gradients(model, feats, labels):
    """Loss and analytic gradients for every model tensor.

    The output-layer gradient accounts for the probability clamp exactly:
    lines whose raw sigmoid falls outside the clamp contribute zero gradient,
    because the clamped loss is locally constant there.
    """
    feats = np.asarray(feats, dtype=np.float64)
    t, h, _ = feats.shape
    flat = feats.reshape(-1, N_FEATURES)
    k = np.asarray(labels).astype(np.float64).reshape(-1, 1)
    if k.shape[0] != flat.shape[0]:
        raise ValidationError("features and labels disagree on line count")

    z1, a1, z2, p_raw = _forward(model, flat)
    p = _clamped(p_raw)
    n = float(flat.shape[0])
    loss = float(-np.mean(k * np.log(p) + (1.0 - k) * np.log1p(-p)))

    inside = (p_raw > CLAMP_EPS) & (p_raw < 1.0 - CLAMP_EPS)
    dz2 = np.where(inside, p_raw - k, 0.0) / n
    grads = {
        "w2": a1.T @ dz2,
        "b2": dz2.sum(axis=0),
    }
    da1 = dz2 @ model.w2.T
    dz1 = da1 * (z1 > 0.0)
    grads["w1"] = flat.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def train_detector(corpus, epochs=200, lr=5e-4, batch=10, rng_seed=0):
    """Train a fresh detector on (features, labels) pairs.

    Sequences are shuffled each epoch with a seeded generator and consumed in
    batches; one Adam step per batch on the batch's pooled lines. Returns the
    model and the per-epoch mean batch loss. A non-finite loss aborts.
    """
    if not corpus:
        raise ValidationError("training corpus must be non-empty")
    if epochs < 0 or batch < 1:
        raise ValidationError("epochs must be >= 0 and batch >= 1")
    pairs = []
    for feats, labels in corpus:
        feats = np.asarray(feats, dtype=np.float64)
        mask = validate_line_mask(labels, (feats.shape[0], feats.shape[1], 1))
        pairs.append((feats, mask))

    model = init_detector(rng_seed)
    opt = Adam(model.params(), lr=lr)
    rng = np.random.default_rng([rng_seed, 1])
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for lo in range(0, len(order), batch):
            chunk = order[lo : lo + batch]
            feats = np.concatenate([pairs[i][0].reshape(-1, N_FEATURES) for i in chunk])
            labels = np.concatenate([pairs[i][1].reshape(-1) for i in chunk])
            loss, grads = detection_gradients(
                model, feats[None], labels[None]
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    "detector loss became non-finite at epoch %d" % epoch
                )
            opt.step(grads)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return model, trace


def save_detector(stem, model):
    save_model(stem, model.validate().params())


def load_detector(stem):
    tensors = load_model(stem)
    try:
        model = DetectionModel(
            w1=tensors["w1"], b1=tensors["b1"], w2=tensors["w2"], b2=tensors["b2"]
        )
    except KeyError as exc:
        raise ValidationError("detector payload is missing tensor %s" % exc)
    return model.validate()
