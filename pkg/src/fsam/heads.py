"""Adversary detector, forgery detector, mask decoder, and training losses.

The adversary detector is a small strided conv net over raw pixels ending in
a projection feature (used by the triplet term) and a score.  The forgery
detector pools the image embedding through a two-layer MLP.  The mask
decoder upsamples the embedding back to image resolution with conv +
bilinear stages.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .layers import Linear, conv2d, global_avg_pool, resize
from .params import ParamSet
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    matmul,
    power,
    relu,
    reshape,
    sigmoid,
    sqrt,
    tlog,
    tmean,
    tsum,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadsConfig:
    adv_channels: tuple = (16, 32, 64, 128)
    adv_feature_dim: int = 128          # P
    forgery_hidden: int = 128
    decoder_channels: tuple = (64, 32, 16, 8)


def init_head_params(enc_dim: int, seed: int, params: ParamSet,
                     cfg: HeadsConfig = HeadsConfig(), dtype=np.float32) -> ParamSet:
    def conv_w(name, cout, cin, k, group):
        gen = rng.stream(seed, "init", name)
        std = math.sqrt(2.0 / (cin * k * k))
        params.add(name, Tensor((gen.standard_normal((cout, cin, k, k)) * std).astype(dtype),
                                ), group)
        params.add(name.replace("weight", "bias"), Tensor(np.zeros(cout, dtype=dtype)), group)

    def fc_w(name, d_in, d_out, group):
        gen = rng.stream(seed, "init", name)
        std = math.sqrt(2.0 / (d_in + d_out))
        params.add(name, Tensor((gen.standard_normal((d_in, d_out)) * std).astype(dtype)), group)
        params.add(name.replace("weight", "bias"), Tensor(np.zeros(d_out, dtype=dtype)), group)

    cin = 3
    for i, cout in enumerate(cfg.adv_channels):
        conv_w(f"adv.c{i}.weight", cout, cin, 3, "adv_detector")
        cin = cout
    fc_w("adv.proj.weight", cfg.adv_channels[-1], cfg.adv_feature_dim, "adv_detector")
    fc_w("adv.head.weight", cfg.adv_feature_dim, 1, "adv_detector")

    fc_w("df.fc1.weight", enc_dim, cfg.forgery_hidden, "forgery_detector")
    fc_w("df.fc2.weight", cfg.forgery_hidden, 1, "forgery_detector")

    cin = enc_dim
    for i, cout in enumerate(cfg.decoder_channels):
        conv_w(f"dm.c{i}.weight", cout, cin, 3, "mask_decoder")
        cin = cout
    conv_w("dm.out.weight", 1, cin, 1, "mask_decoder")
    return params


class AdversaryDetector:
    """Strided conv backbone -> projection feature f -> score in (0, 1)."""

    def __init__(self, params: ParamSet, cfg: HeadsConfig = HeadsConfig()):
        self.convs = [
            (params.tensor(f"adv.c{i}.weight"), params.tensor(f"adv.c{i}.bias"))
            for i in range(len(cfg.adv_channels))
        ]
        self.proj = Linear(params.tensor("adv.proj.weight"), params.tensor("adv.proj.bias"))
        self.head = Linear(params.tensor("adv.head.weight"), params.tensor("adv.head.bias"))

    def __call__(self, images: Tensor):
        x = images
        for w, b in self.convs:
            x = relu(conv2d(x, w, b, stride=2, padding=1))
        f = self.proj(global_avg_pool(x))
        logit = self.head(f)
        score = sigmoid(reshape(logit, (logit.shape[0],)))
        return score, f


def adversary_score(detector: AdversaryDetector, images: Tensor):
    """Score S_a in (0,1) plus the projection feature f."""
    return detector(images)


def gate_from_score(score) -> np.ndarray:
    """G = 1(S > 0.5); exactly 0.5 routes as clean (strict inequality)."""
    arr = score.data if isinstance(score, Tensor) else np.asarray(score)
    return (arr > 0.5).astype(np.int64)


class ForgeryDetector:
    """Global average pool -> linear -> relu -> linear -> sigmoid."""

    def __init__(self, params: ParamSet):
        self.fc1 = Linear(params.tensor("df.fc1.weight"), params.tensor("df.fc1.bias"))
        self.fc2 = Linear(params.tensor("df.fc2.weight"), params.tensor("df.fc2.bias"))

    def __call__(self, embedding: Tensor) -> Tensor:
        pooled = global_avg_pool(embedding)
        logit = self.fc2(relu(self.fc1(pooled)))
        return sigmoid(reshape(logit, (logit.shape[0],)))


class MaskDecoder:
    """Conv + bilinear-upsample stack from embedding resolution to H x W.

    The 3x3 convs run at half resolution or below (the last upsample sits
    after the final 3x3), which keeps the decoder cheap at image size."""

    def __init__(self, params: ParamSet, image_size: int,
                 cfg: HeadsConfig = HeadsConfig()):
        self.image_size = image_size
        self.convs = [
            (params.tensor(f"dm.c{i}.weight"), params.tensor(f"dm.c{i}.bias"))
            for i in range(len(cfg.decoder_channels))
        ]
        self.out = (params.tensor("dm.out.weight"), params.tensor("dm.out.bias"))

    def __call__(self, embedding: Tensor) -> Tensor:
        x = embedding
        size = x.shape[-1]
        for i, (w, b) in enumerate(self.convs):
            x = relu(conv2d(x, w, b, stride=1, padding=1))
            last = i == len(self.convs) - 1
            if not last and size * 2 < self.image_size:
                size *= 2
                x = resize(x, size, size, "bilinear")
            elif last and size < self.image_size:
                size = self.image_size
                x = resize(x, size, size, "bilinear")
        x = sigmoid(conv2d(x, *self.out))
        batch = x.shape[0]
        return reshape(x, (batch, self.image_size, self.image_size))


# ---- losses ----------------------------------------------------------------


def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions must already live in (0, 1)."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype.type))
    return tmean(-(t * tlog(pred) + (1.0 - t) * tlog(1.0 - pred)))


def triplet_loss(f_anchor: Tensor, f_positive: Tensor, f_negative: Tensor,
                 margin: float = 1.0) -> Tensor:
    """max(0, ||fa-fp||^2 - ||fa-fn||^2 + margin), squared euclidean.

    Vector inputs give a scalar; batched [N, P] inputs give per-triplet values.
    """
    if not (f_anchor.shape == f_positive.shape == f_negative.shape):
        raise DimensionError(
            f"triplet features must share a shape, got {f_anchor.shape}, "
            f"{f_positive.shape}, {f_negative.shape}"
        )
    if margin <= 0:
        raise ContractError(f"margin must be positive, got {margin}")
    d_ap = tsum(power(f_anchor - f_positive, 2), axes=-1)
    d_an = tsum(power(f_anchor - f_negative, 2), axes=-1)
    return relu(d_ap - d_an + margin)


def _selection_matrix(indices, batch, dtype) -> Tensor:
    sel = np.zeros((len(indices), batch), dtype=dtype)
    sel[np.arange(len(indices)), indices] = 1.0
    return Tensor(sel)


def adversary_detector_loss(scores: Tensor, features: Tensor, labels, gen,
                            margin: float = 1.0, triplet_weight: float = 0.5):
    """BCE over the adversary score plus weighted mean triplet loss.

    Anchor/positive share a type, the negative comes from the opposite type;
    one uniformly-drawn triplet per anchor.  With a single class in the batch
    the triplet term is skipped with a logged warning.
    """
    labels = np.asarray(labels)
    total = bce(scores, labels.astype(np.float64 if scores.dtype == np.float64 else np.float32))
    parts = {"bce": total.item(), "triplet": 0.0}

    by_class = {0: np.flatnonzero(labels == 0), 1: np.flatnonzero(labels == 1)}
    if len(by_class[0]) == 0 or len(by_class[1]) == 0:
        log.warning("adversary batch contains a single class; triplet term skipped")
        return total, parts

    anchors, positives, negatives = [], [], []
    batch = len(labels)
    for i in range(batch):
        same = by_class[int(labels[i])]
        same = same[same != i]
        if len(same) == 0:
            continue
        opposite = by_class[1 - int(labels[i])]
        anchors.append(i)
        positives.append(int(gen.choice(same)))
        negatives.append(int(gen.choice(opposite)))
    if anchors:
        fa = matmul(_selection_matrix(anchors, batch, features.dtype), features)
        fp = matmul(_selection_matrix(positives, batch, features.dtype), features)
        fn = matmul(_selection_matrix(negatives, batch, features.dtype), features)
        trip = tmean(triplet_loss(fa, fp, fn, margin))
        parts["triplet"] = trip.item()
        total = total + triplet_weight * trip
    return total, parts


def dice_loss(pred_masks: Tensor, gt_masks, smoothing: float = 1.0) -> Tensor:
    """1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), per image then averaged."""
    batch = pred_masks.shape[0]
    p = reshape(pred_masks, (batch, -1))
    g = Tensor(np.asarray(gt_masks, dtype=pred_masks.dtype.type).reshape(batch, -1))
    inter = tsum(p * g, axes=-1)
    denom = tsum(p, axes=-1) + tsum(g, axes=-1) + smoothing
    return tmean(1.0 - (2.0 * inter + smoothing) / denom)


def localization_detection_loss(scores: Tensor, pred_masks: Tensor, labels, gt_masks,
                                weights=(1.0, 0.7, 0.3), smoothing: float = 1.0):
    """Weighted image-level BCE + dice + pixel-level BCE."""
    labels = np.asarray(labels)
    gt = np.asarray(gt_masks)
    if not np.isin(gt, (0, 1)).all():
        raise ContractError("ground-truth mask must be binary")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("forgery label must be 0 or 1")
    det = bce(scores, labels)
    dice = dice_loss(pred_masks, gt, smoothing)
    pix = bce(pred_masks, gt)
    total = weights[0] * det + weights[1] * dice + weights[2] * pix
    return total, {"bce": det.item(), "dice": dice.item(), "pixel_bce": pix.item()}


def alignment_loss(taps_adv, taps_clean) -> Tensor:
    """Sum over taps of elementwise-mean l2 plus (1 - cosine) on flattened,
    l2-normalized features; the clean taps are treated as constants."""
    if len(taps_adv) != len(taps_clean):
        raise ContractError(
            f"tap counts differ: {len(taps_adv)} vs {len(taps_clean)}"
        )
    total = None
    for a, c in zip(taps_adv, taps_clean):
        c = c.detach()
        if a.shape != c.shape:
            raise ContractError(f"tap shapes differ: {a.shape} vs {c.shape}")
        diff = a - c
        l2 = tmean(diff * diff)
        batch = a.shape[0] if a.ndim > 1 else 1
        a2 = reshape(a, (batch, -1))
        c2 = reshape(c, (batch, -1))
        dot = tsum(a2 * c2, axes=-1)
        cos = dot / sqrt(tsum(a2 * a2, axes=-1) * tsum(c2 * c2, axes=-1))
        term = l2 + tmean(1.0 - cos)
        total = term if total is None else total + term
    return total
