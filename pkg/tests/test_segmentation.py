"""Encoder-decoder segmentation: forward pass, loss, gradients, training."""

import math

import numpy as np
import pytest

from kslab.core import ValidationError
from kslab.optim import TrainingError
from kslab.segmentation import (
    CLASS_NAMES,
    N_CLASSES,
    SegModel,
    dice,
    init_segmenter,
    load_segmenter,
    save_segmenter,
    segment,
    segmentation_gradients,
    segmentation_loss,
    train_segmenter,
)


def zero_model():
    return SegModel(**{k: np.zeros_like(v) for k, v in init_segmenter(0).params().items()})


def random_case(seed, shape=(2, 8, 8)):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 1.0, size=shape)
    truth = rng.integers(0, N_CLASSES, size=shape)
    return img, truth


def blob_case(seed, t=2, h=32, w=32):
    """Constant-intensity class blobs; separable by intensity alone."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cy, cx = rng.uniform(0.3 * h, 0.65 * h), rng.uniform(0.4 * w, 0.65 * w)
    r = rng.uniform(0.09 * h, 0.15 * h)
    ring = max(2.0, 0.08 * h)
    lv = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    myo = ((yy - cy) ** 2 + (xx - cx) ** 2 <= (r + ring) ** 2) & ~lv
    bh, bw = max(4, h // 4), max(3, w // 6)
    sy = int(rng.uniform(1, h - bh - 1))
    sx = int(rng.uniform(1, max(2, w // 8)))
    rv = np.zeros((h, w), bool)
    rv[sy : sy + bh, sx : sx + bw] = True
    rv &= ~(lv | myo)
    lab = np.zeros((h, w), np.uint8)
    lab[lv], lab[myo], lab[rv] = 1, 2, 3
    base = np.array([0.1, 0.9, 0.5, 0.7])
    return base[lab][None].repeat(t, 0), lab[None].repeat(t, 0)


# ---------------------------------------------------------------- oracle

def conv3_naive(x, w, b):
    n, ci, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for o in range(w.shape[0]):
        acc = np.zeros((n, h, wd))
        for c in range(ci):
            for dy in range(3):
                for dx in range(3):
                    acc += w[o, c, dy, dx] * xp[:, c, dy : dy + h, dx : dx + wd]
        out[:, o] = acc + b[o]
    return out


def pool_naive(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(2, 3))
    return out


def upsample_naive(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            out[:, :, i, j] = x[:, :, i // 2, j // 2]
    return out


def forward_naive(m, img):
    x = img[:, None]
    a1 = np.maximum(conv3_naive(x, m.enc1_w, m.enc1_b), 0.0)
    a2 = np.maximum(conv3_naive(pool_naive(a1), m.enc2_w, m.enc2_b), 0.0)
    a3 = np.maximum(conv3_naive(pool_naive(a2), m.mid_w, m.mid_b), 0.0)
    c2 = np.concatenate([upsample_naive(a3), a2], axis=1)
    a4 = np.maximum(conv3_naive(c2, m.dec2_w, m.dec2_b), 0.0)
    c1 = np.concatenate([upsample_naive(a4), a1], axis=1)
    a5 = np.maximum(conv3_naive(c1, m.dec1_w, m.dec1_b), 0.0)
    logits = np.einsum("nchw,oc->nohw", a5, m.head_w) + m.head_b[:, None, None]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.transpose(0, 2, 3, 1), probs.argmax(axis=1).astype(np.uint8)


# ---------------------------------------------------------------- forward

class TestSegment:
    def test_zero_model_uniform_probs_and_background(self):
        img, _ = random_case(0)
        probs, labels = segment(zero_model(), img)
        assert np.all(probs == 0.25)
        assert np.all(labels == 0)

    def test_probs_sum_to_one(self):
        img, _ = random_case(1)
        probs, _ = segment(init_segmenter(1), img)
        assert probs.min() >= 0.0
        assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-6

    def test_matches_naive_oracle(self):
        img, _ = random_case(2)
        model = init_segmenter(2)
        probs, labels = segment(model, img)
        oprobs, olabels = forward_naive(model, img)
        assert np.abs(probs - oprobs).max() < 1e-10
        assert np.array_equal(labels, olabels)

    def test_ties_break_toward_lower_class(self):
        model = zero_model()
        model.head_b[:] = [0.0, 3.0, 3.0, 1.0]
        img, _ = random_case(3)
        _, labels = segment(model, img)
        assert np.all(labels == 1)

    def test_argmax_invariant_to_positive_logit_scale(self):
        img, _ = random_case(4)
        model = init_segmenter(4)
        _, labels = segment(model, img)
        scaled = SegModel(**{k: v.copy() for k, v in model.params().items()})
        scaled.head_w *= 3.7
        scaled.head_b *= 3.7
        _, labels2 = segment(scaled, img)
        assert np.array_equal(labels, labels2)

    def test_softmax_shift_invariance(self):
        img, _ = random_case(5)
        model = init_segmenter(5)
        probs, _ = segment(model, img)
        shifted = SegModel(**{k: v.copy() for k, v in model.params().items()})
        shifted.head_b += 5.0
        probs2, _ = segment(shifted, img)
        assert np.abs(probs - probs2).max() < 1e-10

    def test_chunking_consistent(self):
        img, _ = random_case(6, shape=(5, 8, 8))
        model = init_segmenter(6)
        p1, l1 = segment(model, img, chunk=1)
        p2, l2 = segment(model, img, chunk=8)
        assert np.allclose(p1, p2, atol=1e-12)
        assert np.array_equal(l1, l2)

    def test_dims_not_multiple_of_four_rejected(self):
        model = init_segmenter(0)
        for shape in ((2, 10, 12), (2, 12, 10)):
            with pytest.raises(ValidationError, match="multiple"):
                segment(model, np.zeros(shape))

    def test_bad_input_rejected(self):
        with pytest.raises(ValidationError):
            segment(init_segmenter(0), np.zeros((8, 8)))


# ------------------------------------------------------------------ loss

class TestSegmentationLoss:
    def test_one_hot_correct_is_zero(self):
        truth = np.array([[[1, 2], [0, 3]]])
        probs = np.zeros((1, 2, 2, 4))
        np.put_along_axis(probs, truth[..., None], 1.0, axis=-1)
        assert segmentation_loss(probs, truth) == 0.0

    def test_uniform_probs_ln4(self):
        probs = np.full((2, 4, 4, 4), 0.25)
        truth = np.random.default_rng(0).integers(0, 4, (2, 4, 4))
        assert segmentation_loss(probs, truth) == pytest.approx(math.log(4.0), abs=1e-12)

    def test_single_pixel_point_seven(self):
        probs = np.array([0.1, 0.7, 0.1, 0.1]).reshape(1, 1, 1, 4)
        truth = np.array([[[1]]])
        assert segmentation_loss(probs, truth) == pytest.approx(-math.log(0.7), abs=1e-12)

    def test_clamp_floor(self):
        probs = np.zeros((1, 1, 1, 4))
        probs[..., 0] = 1.0
        truth = np.array([[[2]]])
        assert segmentation_loss(probs, truth) == pytest.approx(-math.log(1e-7), rel=1e-12)

    def test_label_out_of_range_rejected(self):
        probs = np.full((1, 2, 2, 4), 0.25)
        for bad in (-1, 4):
            truth = np.full((1, 2, 2), bad)
            with pytest.raises(ValidationError):
                segmentation_loss(probs, truth)

    def test_shape_mismatch_rejected(self):
        probs = np.full((1, 2, 2, 4), 0.25)
        with pytest.raises(ValidationError):
            segmentation_loss(probs, np.zeros((1, 2, 3), dtype=int))
        with pytest.raises(ValidationError):
            segmentation_loss(np.full((1, 2, 2, 3), 1 / 3), np.zeros((1, 2, 2), dtype=int))


# ------------------------------------------------------------- gradients

class TestGradients:
    def test_matches_finite_differences_every_tensor(self):
        img, truth = random_case(7)
        model = init_segmenter(3)
        _, grads = segmentation_gradients(model, img, truth)
        h = 1e-5
        rng = np.random.default_rng(11)
        for name, p in model.params().items():
            flat = p.reshape(-1)
            picks = rng.choice(flat.size, size=min(20, flat.size), replace=False)
            for ix in picks:
                orig = flat[ix]
                flat[ix] = orig + h
                lp, _ = segmentation_gradients(model, img, truth)
                flat[ix] = orig - h
                lm, _ = segmentation_gradients(model, img, truth)
                flat[ix] = orig
                num = (lp - lm) / (2 * h)
                got = grads[name].reshape(-1)[ix]
                denom = max(abs(num), abs(got), 1e-8)
                assert abs(got - num) / denom < 1e-4, name

    def test_loss_value_matches_public_path(self):
        img, truth = random_case(8)
        model = init_segmenter(8)
        loss, _ = segmentation_gradients(model, img, truth)
        probs, _ = segment(model, img)
        assert loss == pytest.approx(segmentation_loss(probs, truth), abs=1e-12)

    def test_clamped_pixels_contribute_zero_gradient(self):
        # with every true-class probability below the clamp the loss is a
        # constant, so every gradient must vanish identically
        model = zero_model()
        model.head_b[:] = [60.0, 0.0, 0.0, 0.0]
        img, _ = random_case(9)
        truth = np.ones(img.shape, dtype=np.int64)
        loss, grads = segmentation_gradients(model, img, truth)
        assert loss == pytest.approx(-math.log(1e-7), rel=1e-12)
        for name, g in grads.items():
            assert np.all(g == 0.0), name


# ----------------------------------------------------------------- dice

class TestDice:
    def test_identical_is_one(self):
        _, truth = random_case(10)
        for c in range(4):
            assert dice(truth, truth, c) == 1.0

    def test_disjoint_is_zero(self):
        a = np.zeros((1, 4, 4), dtype=int)
        b = np.zeros((1, 4, 4), dtype=int)
        a[0, :2] = 1
        b[0, 2:] = 1
        assert dice(a, b, 1) == 0.0

    def test_hand_count(self):
        a = np.zeros((1, 4, 4), dtype=int)
        b = np.zeros((1, 4, 4), dtype=int)
        a[0, 0, :4] = 3
        b[0, 0, 2:] = 3
        b[0, 1, :2] = 3
        assert dice(a, b, 3) == pytest.approx(2 * 2 / (4 + 4), abs=1e-15)

    def test_both_empty_is_one(self):
        a = np.zeros((1, 4, 4), dtype=int)
        assert dice(a, a, 2) == 1.0

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(12)
        a = rng.integers(0, 4, (2, 6, 6))
        b = rng.integers(0, 4, (2, 6, 6))
        for c in range(4):
            d = dice(a, b, c)
            assert d == dice(b, a, c)
            assert 0.0 <= d <= 1.0

    def test_unknown_class_rejected(self):
        a = np.zeros((1, 4, 4), dtype=int)
        for bad in (-1, 4, 1.5):
            with pytest.raises(ValidationError):
                dice(a, a, bad)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            dice(np.zeros((1, 4, 4), dtype=int), np.zeros((1, 4, 5), dtype=int), 1)


# -------------------------------------------------------------- training

class TestTraining:
    def test_intensity_blobs_reach_high_dice(self):
        corpus = [blob_case(s) for s in range(6)]
        model, trace = train_segmenter(corpus, epochs=300, rng_seed=0)
        assert trace[-1] < trace[0]
        for cid in (1, 2, 3):
            vals = [dice(segment(model, f)[1], l, cid) for f, l in corpus]
            assert min(vals) >= 0.95, CLASS_NAMES[cid]

    def test_zero_epochs_returns_initialized_model(self):
        corpus = [blob_case(0, h=16, w=16)]
        model, trace = train_segmenter(corpus, epochs=0, rng_seed=17)
        assert trace == []
        ref = init_segmenter(17)
        for name, p in model.params().items():
            assert np.array_equal(p, ref.params()[name])

    def test_seed_determinism(self):
        corpus = [blob_case(s, h=16, w=16) for s in range(3)]
        m1, t1 = train_segmenter(corpus, epochs=3, rng_seed=5)
        m2, t2 = train_segmenter(corpus, epochs=3, rng_seed=5)
        assert t1 == t2
        for name, p in m1.params().items():
            assert np.array_equal(p, m2.params()[name])

    def test_non_finite_loss_aborts(self):
        corpus = [blob_case(0, h=16, w=16)]
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingError):
                train_segmenter(corpus, epochs=3, lr=1e308, rng_seed=0)

    def test_bad_corpus_rejected(self):
        with pytest.raises(ValidationError):
            train_segmenter([], epochs=1)
        img, truth = blob_case(0, h=16, w=16)
        with pytest.raises(ValidationError):
            train_segmenter([(img, truth)], epochs=-1)
        with pytest.raises(ValidationError):
            train_segmenter([(img, truth)], epochs=1, batch=0)
        with pytest.raises(ValidationError):
            train_segmenter([(img, truth[:, :8])], epochs=1)
        with pytest.raises(ValidationError):
            train_segmenter([(img[:, :10], truth[:, :10])], epochs=1)


# ----------------------------------------------------------- persistence

class TestPersistence:
    def test_roundtrip(self, tmp_path):
        model = init_segmenter(21)
        stem = str(tmp_path / "seg")
        save_segmenter(stem, model)
        loaded = load_segmenter(stem)
        for name, p in model.params().items():
            assert np.allclose(loaded.params()[name], p, atol=1e-6)
        img, _ = random_case(13)
        probs_a, _ = segment(model, img)
        probs_b, _ = segment(loaded, img)
        assert np.abs(probs_a - probs_b).max() < 1e-4

    def test_missing_tensor_rejected(self, tmp_path):
        from kslab.io import save_model

        model = init_segmenter(0)
        partial = dict(list(model.params().items())[:5])
        stem = str(tmp_path / "bad")
        save_model(stem, partial)
        with pytest.raises(ValidationError, match="missing"):
            load_segmenter(stem)
