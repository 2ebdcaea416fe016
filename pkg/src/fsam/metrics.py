"""Image-level accuracy, pixel-level permute F1, and evaluation report grids.

Metrics follow the strict-threshold convention: a score counts as positive
only above 0.5.  Permute F1 takes the better of the predicted mask and its
complement, with the empty-mask conventions fixed here (both empty: 1.0;
exactly one empty and no rescue: 0.0).  Pixel metrics are computed per
image and macro-averaged.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, craft, upstream_encoder
from .data import DISTORTION_GRIDS, distort
from .model import Model, Prediction, predict
from .tensor import ContractError, DimensionError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_scores(cls, scores, labels, threshold: float = 0.5) -> "ConfusionCounts":
        scores = np.asarray(scores)
        labels = np.asarray(labels).astype(bool)
        pred = scores > threshold
        return cls(
            tp=int(np.sum(pred & labels)),
            fp=int(np.sum(pred & ~labels)),
            tn=int(np.sum(~pred & ~labels)),
            fn=int(np.sum(~pred & labels)),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of correct thresholded decisions (strict > for positive)."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ContractError("accuracy of an empty batch is undefined")
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    counts = ConfusionCounts.from_scores(scores, labels, threshold)
    return (counts.tp + counts.tn) / counts.total


def _binary_f1(pred: np.ndarray, gt: np.ndarray) -> float:
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    if tp + fp + fn == 0:
        return 1.0  # both masks empty
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def permute_f1(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """max(F1(pred, gt), F1(1-pred, gt)) after binarizing pred at 0.5."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise DimensionError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    pred = pred_mask > 0.5
    gt = gt_mask.astype(bool)
    return max(_binary_f1(pred, gt), _binary_f1(~pred, gt))


# ---- model evaluation ----------------------------------------------------------


@dataclass
class EvalResult:
    f1: float                  # macro over images
    detection_acc: float
    per_image_f1: list
    prediction: Prediction


def evaluate(model: Model, pixels: np.ndarray, masks: np.ndarray, labels: np.ndarray,
             gate_mode="auto", batch_size: int = 32) -> EvalResult:
    pred = predict(model, pixels, gate_mode=gate_mode, batch_size=batch_size)
    per_image = [permute_f1(pred.masks[i], masks[i]) for i in range(len(labels))]
    return EvalResult(
        f1=float(np.mean(per_image)),
        detection_acc=accuracy(pred.forgery_scores, labels),
        per_image_f1=per_image,
        prediction=pred,
    )


# ---- report grids ----------------------------------------------------------------


ATTACK_GRID = tuple((m, e) for m in ("mifgsm", "fgsm") for e in (8, 12))


@dataclass
class EvalReport:
    config_hash: str
    gate_mode: str
    conditions: list = field(default_factory=list)  # dicts: condition, params, metrics

    def add(self, condition: str, metrics: dict, **extra):
        self.conditions.append({"condition": condition, **extra, "metrics": metrics})

    def clean_metric(self, name: str) -> float:
        for row in self.conditions:
            if row["condition"] == "clean":
                return row["metrics"][name]
        raise ContractError("report has no clean row")

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "gate_mode": self.gate_mode,
                "conditions": self.conditions}

    def csv_rows(self) -> list:
        rows = [("condition", "metric", "value")]
        for entry in self.conditions:
            for metric in sorted(entry["metrics"]):
                rows.append((entry["condition"], metric, repr(entry["metrics"][metric])))
        return rows

    def write(self, out_dir, stem: str | None = None) -> dict:
        os.makedirs(out_dir, exist_ok=True)
        stem = stem or f"eval_{self.config_hash[:12]}"
        csv_path = os.path.join(out_dir, f"{stem}.csv")
        with open(csv_path, "w") as fh:
            for row in self.csv_rows():
                fh.write(",".join(row) + "\n")
        json_path = os.path.join(out_dir, f"{stem}.json")
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return {"csv": csv_path, "json": json_path}


def default_sweep() -> dict:
    return {
        "attacks": [{"method": m, "epsilon": e} for m, e in ATTACK_GRID],
        "distortions": [
            {"kind": kind, "level": level}
            for kind in sorted(DISTORTION_GRIDS)
            for level in DISTORTION_GRIDS[kind]
        ],
    }


def validate_sweep(sweep: dict):
    valid_kinds = sorted(DISTORTION_GRIDS)
    for entry in sweep.get("distortions", []):
        if entry.get("kind") not in valid_kinds:
            raise ContractError(
                f"unknown distortion kind {entry.get('kind')!r}; valid kinds: {valid_kinds}"
            )
    for entry in sweep.get("attacks", []):
        if entry.get("method") not in ("mifgsm", "fgsm"):
            raise ContractError(
                f"unknown attack method {entry.get('method')!r}; valid: ['fgsm', 'mifgsm']"
            )


def _attack_condition_pixels(samples_pixels, model: Model, method: str, epsilon: int,
                             attack_cache: dict | None = None,
                             batch_size: int = 16) -> np.ndarray:
    key = (method, epsilon)
    if attack_cache is not None and key in attack_cache:
        return attack_cache[key]
    frozen = model.params.copy()
    frozen.set_trainable([])
    encode_fn = upstream_encoder(model.enc_cfg, frozen)
    spec = AttackSpec(method, epsilon=epsilon)
    out = np.empty_like(samples_pixels)
    for start in range(0, len(samples_pixels), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples_pixels)))
        pairs = craft(samples_pixels[idx], encode_fn, spec)
        out[idx] = np.stack([p.adversarial for p in pairs])
    if attack_cache is not None:
        attack_cache[key] = out
    return out


def robustness_sweep(model: Model, samples, sweep: dict | None = None,
                     gate_mode="auto", seed: int = 0,
                     attack_cache: dict | None = None) -> EvalReport:
    """Metric grid over clean, attacked, and distorted versions of ``samples``.

    ``samples`` is a list of ImageSample.  Attack rows carry the relative
    drop against the clean row, matching the report-table convention
    (clean - attacked) / clean.
    """
    sweep = sweep if sweep is not None else default_sweep()
    validate_sweep(sweep)
    pixels = np.stack([s.pixels for s in samples])
    masks = np.stack([s.mask for s in samples])
    labels = np.array([int(s.forged) for s in samples], dtype=np.uint8)

    report = EvalReport(config_hash=model.config_hash, gate_mode=str(gate_mode))
    clean = evaluate(model, pixels, masks, labels, gate_mode=gate_mode)
    report.add("clean", {"f1": clean.f1, "detection_acc": clean.detection_acc})

    for entry in sweep.get("attacks", []):
        method, eps = entry["method"], int(entry["epsilon"])
        attacked = _attack_condition_pixels(pixels, model, method, eps, attack_cache)
        res = evaluate(model, attacked, masks, labels, gate_mode=gate_mode)
        report.add(
            f"attack:{method}:eps{eps}",
            {
                "f1": res.f1,
                "detection_acc": res.detection_acc,
                "f1_rel_drop": (clean.f1 - res.f1) / clean.f1 if clean.f1 else 0.0,
            },
            method=method, epsilon=eps,
        )

    for entry in sweep.get("distortions", []):
        kind, level = entry["kind"], entry["level"]
        distorted = [distort(s, kind, level, seed=seed) for s in samples]
        dpix = np.stack([d.pixels for d in distorted])
        dmasks = np.stack([d.mask for d in distorted])
        res = evaluate(model, dpix, dmasks, labels, gate_mode=gate_mode)
        report.add(f"distort:{kind}:{level}", {"f1": res.f1,
                                               "detection_acc": res.detection_acc},
                   kind=kind, level=level)
    return report
