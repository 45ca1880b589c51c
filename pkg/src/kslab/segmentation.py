"""Per-pixel 4-class segmentation with a miniature encoder-decoder.

Two downsampling stages (3x3 conv + rectifier + 2x2 max-pool), a bottleneck
conv, and two upsampling stages (nearest-neighbor upsample, skip
concatenation, 3x3 conv) feed a 1x1 conv that emits one logit per class.
Channel widths are (8, 16, 32, 16, 8). Convolutions are stride-1 with
same-padding, run as patch-matrix products so the heavy lifting stays in
BLAS; gradients are analytic through every layer.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ValidationError, as_image_sequence
from .io import load_model, save_model
from .kernels import maxpool2_bwd, maxpool2_fwd, upsample2_bwd, upsample2_fwd
from .optim import Adam, TrainingError

__all__ = [
    "N_CLASSES",
    "CLASS_NAMES",
    "SegModel",
    "init_segmenter",
    "segment",
    "segmentation_loss",
    "segmentation_gradients",
    "dice",
    "train_segmenter",
    "save_segmenter",
    "load_segmenter",
]

N_CLASSES = 4
CLASS_NAMES = ("background", "lv", "myo", "rv")

# probabilities are clamped here before the log in the loss
CLAMP_EPS = 1e-7

_SHAPES = {
    "enc1_w": (8, 1, 3, 3),
    "enc1_b": (8,),
    "enc2_w": (16, 8, 3, 3),
    "enc2_b": (16,),
    "mid_w": (32, 16, 3, 3),
    "mid_b": (32,),
    "dec2_w": (16, 48, 3, 3),
    "dec2_b": (16,),
    "dec1_w": (8, 24, 3, 3),
    "dec1_b": (8,),
    "head_w": (4, 8),
    "head_b": (4,),
}


@dataclass
class SegModel:
    enc1_w: np.ndarray
    enc1_b: np.ndarray
    enc2_w: np.ndarray
    enc2_b: np.ndarray
    mid_w: np.ndarray
    mid_b: np.ndarray
    dec2_w: np.ndarray
    dec2_b: np.ndarray
    dec1_w: np.ndarray
    dec1_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def params(self):
        """Live parameter tensors keyed by name, in a fixed order."""
        return {name: getattr(self, name) for name in _SHAPES}

    def validate(self):
        for name, shape in _SHAPES.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValidationError(
                    "segmenter tensor %s must have shape %s, got %s"
                    % (name, shape, arr.shape)
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError("segmenter tensor %s is not finite" % name)
        return self


def init_segmenter(rng_seed=0):
    """Zero-mean Gaussian weights scaled by 1/sqrt(fan-in); zero biases.

    The plain unit-variance draw used for the 2-layer detector saturates a
    6-conv stack (logits overflow the softmax), so conv weights here shrink
    with the patch fan-in, the standard cure for depth.
    """
    rng = np.random.default_rng(rng_seed)
    fields = {}
    for name, shape in _SHAPES.items():
        if name.endswith("_b"):
            fields[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            fields[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return SegModel(**fields).validate()


def _im2col3(x):
    """3x3 same-padding patches of (N, C, H, W) as a (N*H*W, C*9) matrix."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.ascontiguousarray(
        win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    )


def _conv3(x, w, b=None):
    """Stride-1 same-padding 3x3 convolution; returns output and patches."""
    n, _, h, wd = x.shape
    cols = _im2col3(x)
    out = cols @ w.reshape(w.shape[0], -1).T
    if b is not None:
        out += b
    return out.reshape(n, h, wd, w.shape[0]).transpose(0, 3, 1, 2), cols


def _conv3_bwd(cols, dy, w):
    """Weight, bias, and input gradients for one _conv3 application."""
    cout = dy.shape[1]
    dymat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1).reshape(-1, cout))
    dw = (cols.T @ dymat).T.reshape(w.shape)
    db = dymat.sum(axis=0)
    # input gradient = same-conv of dy with the spatially flipped kernel,
    # input and output channels swapped
    wrot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = _conv3(dy, wrot)
    return dw, db, dx


def _relu(z):
    return np.maximum(z, 0.0)


def _forward(model, x):
    """Logits plus every intermediate needed for the backward pass."""
    z1, cols1 = _conv3(x, model.enc1_w, model.enc1_b)
    a1 = _relu(z1)
    p1, i1 = maxpool2_fwd(a1)

    z2, cols2 = _conv3(p1, model.enc2_w, model.enc2_b)
    a2 = _relu(z2)
    p2, i2 = maxpool2_fwd(a2)

    z3, cols3 = _conv3(p2, model.mid_w, model.mid_b)
    a3 = _relu(z3)

    c2 = np.concatenate([upsample2_fwd(a3), a2], axis=1)
    z4, cols4 = _conv3(c2, model.dec2_w, model.dec2_b)
    a4 = _relu(z4)

    c1 = np.concatenate([upsample2_fwd(a4), a1], axis=1)
    z5, cols5 = _conv3(c1, model.dec1_w, model.dec1_b)
    a5 = _relu(z5)

    logits = np.einsum("nchw,oc->nohw", a5, model.head_w)
    logits += model.head_b[:, None, None]
    cache = (z1, i1, z2, i2, z3, z4, z5, a5, cols1, cols2, cols3, cols4, cols5)
    return logits, cache


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _backward(model, dlogits, cache):
    z1, i1, z2, i2, z3, z4, z5, a5, cols1, cols2, cols3, cols4, cols5 = cache
    grads = {}
    grads["head_w"] = np.einsum("nchw,nohw->oc", a5, dlogits)
    grads["head_b"] = dlogits.sum(axis=(0, 2, 3))
    da5 = np.einsum("nohw,oc->nchw", dlogits, model.head_w)

    dz5 = da5 * (z5 > 0)
    grads["dec1_w"], grads["dec1_b"], dc1 = _conv3_bwd(cols5, dz5, model.dec1_w)
    da4 = upsample2_bwd(dc1[:, :16])
    da1_skip = dc1[:, 16:]

    dz4 = da4 * (z4 > 0)
    grads["dec2_w"], grads["dec2_b"], dc2 = _conv3_bwd(cols4, dz4, model.dec2_w)
    da3 = upsample2_bwd(dc2[:, :32])
    da2_skip = dc2[:, 32:]

    dz3 = da3 * (z3 > 0)
    grads["mid_w"], grads["mid_b"], dp2 = _conv3_bwd(cols3, dz3, model.mid_w)

    da2 = maxpool2_bwd(dp2, i2) + da2_skip
    dz2 = da2 * (z2 > 0)
    grads["enc2_w"], grads["enc2_b"], dp1 = _conv3_bwd(cols2, dz2, model.enc2_w)

    da1 = maxpool2_bwd(dp1, i1) + da1_skip
    dz1 = da1 * (z1 > 0)
    grads["enc1_w"], grads["enc1_b"], _ = _conv3_bwd(cols1, dz1, model.enc1_w)
    return grads


def _check_dims(h, w):
    if h % 4 != 0 or w % 4 != 0:
        raise ValidationError(
            "image height and width must be multiples of 4 (two pooling "
            "stages); pad the image to a multiple of 4 first"
        )


def segment(model, img, chunk=4):
    """Per-pixel class probabilities and the argmax label map.

    Frames are processed in chunks to bound the patch-matrix memory. Label
    ties go to the lower class index (first maximum).
    """
    model.validate()
    frames = as_image_sequence(img, name="magnitude image")
    t_n, h, w = frames.shape
    _check_dims(h, w)
    probs = np.empty((t_n, h, w, N_CLASSES))
    labels = np.empty((t_n, h, w), dtype=np.uint8)
    for lo in range(0, t_n, chunk):
        x = frames[lo : lo + chunk][:, None]
        logits, _ = _forward(model, x)
        p = _softmax(logits)
        probs[lo : lo + chunk] = p.transpose(0, 2, 3, 1)
        labels[lo : lo + chunk] = p.argmax(axis=1).astype(np.uint8)
    return probs, labels


def _validate_labels(truth, shape):
    labels = np.asarray(truth)
    if labels.shape != shape:
        raise ValidationError(
            "label map shape %s does not match %s" % (labels.shape, shape)
        )
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
        if not np.array_equal(labels, np.asarray(truth)):
            raise ValidationError("label map must hold integers")
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise ValidationError("labels must lie in {0, 1, 2, 3}")
    return labels.astype(np.int64)


def segmentation_loss(probs, truth):
    """Mean over pixels of -log p(true class), probabilities clamped at 1e-7."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim < 2 or p.shape[-1] != N_CLASSES:
        raise ValidationError("probabilities must have a trailing axis of 4")
    labels = _validate_labels(truth, p.shape[:-1])
    p_true = np.take_along_axis(p, labels[..., None], axis=-1)[..., 0]
    return float(-np.mean(np.log(np.maximum(p_true, CLAMP_EPS))))


def segmentation_gradients(model, imgs, truth):
    """Loss and analytic gradients for every model tensor.

    The gradient honors the loss clamp exactly: a pixel whose true-class
    probability sits at the clamp contributes a constant to the loss and
    therefore zero gradient.
    """
    frames = as_image_sequence(imgs, name="training frames")
    _check_dims(frames.shape[1], frames.shape[2])
    labels = _validate_labels(truth, frames.shape)
    logits, cache = _forward(model, frames[:, None])
    probs = _softmax(logits)

    flat_labels = labels[:, None]
    p_true = np.take_along_axis(probs, flat_labels, axis=1)[:, 0]
    loss = float(-np.mean(np.log(np.maximum(p_true, CLAMP_EPS))))

    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, flat_labels, 1.0, axis=1)
    live = (p_true > CLAMP_EPS)[:, None]
    dlogits = np.where(live, probs - onehot, 0.0) / labels.size
    return loss, _backward(model, dlogits, cache)


def dice(pred, truth, class_id):
    """Overlap coefficient 2|A∩B| / (|A|+|B|) for one class over all frames.

    Both masks empty counts as perfect agreement (1.0).
    """
    if not isinstance(class_id, (int, np.integer)) or not 0 <= class_id < N_CLASSES:
        raise ValidationError("class_id must be one of 0, 1, 2, 3")
    a = np.asarray(pred)
    b = np.asarray(truth)
    if a.shape != b.shape:
        raise ValidationError("prediction and truth label maps must share a shape")
    in_a = a == class_id
    in_b = b == class_id
    denom = int(in_a.sum()) + int(in_b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((in_a & in_b).sum()) / denom


def train_segmenter(corpus, epochs=300, lr=5e-4, batch=10, rng_seed=0):
    """Train a fresh segmenter on (image sequence, label map) pairs.

    Sequences are shuffled each epoch with a seeded generator and consumed
    in batches; one Adam step per batch on the batch's pooled frames.
    Returns the model and the per-epoch mean batch loss. A non-finite loss
    aborts.
    """
    if not corpus:
        raise ValidationError("training corpus must be non-empty")
    if epochs < 0 or batch < 1:
        raise ValidationError("epochs must be >= 0 and batch >= 1")
    pairs = []
    for img, truth in corpus:
        frames = as_image_sequence(img, name="training image")
        _check_dims(frames.shape[1], frames.shape[2])
        pairs.append((frames, _validate_labels(truth, frames.shape)))

    model = init_segmenter(rng_seed)
    opt = Adam(model.params(), lr=lr)
    rng = np.random.default_rng([rng_seed, 1])
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for lo in range(0, len(order), batch):
            chunk = order[lo : lo + batch]
            frames = np.concatenate([pairs[i][0] for i in chunk])
            labels = np.concatenate([pairs[i][1] for i in chunk])
            loss, grads = segmentation_gradients(model, frames, labels)
            if not np.isfinite(loss):
                raise TrainingError(
                    "segmenter loss became non-finite at epoch %d" % epoch
                )
            opt.step(grads)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return model, trace


def save_segmenter(stem, model):
    save_model(stem, model.validate().params())


def load_segmenter(stem):
    tensors = load_model(stem)
    missing = set(_SHAPES) - set(tensors)
    if missing:
        raise ValidationError(
            "segmenter checkpoint is missing tensors: %s" % sorted(missing)
        )
    return SegModel(**{name: tensors[name] for name in _SHAPES}).validate()
