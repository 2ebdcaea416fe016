"""Transferable gradient attacks against the frozen upstream encoder.

Adversarial images are crafted by maximizing an embedding distance through
the bare encoder base only (no experts, no heads).  All pixel arithmetic
stays on the 8-bit grid: perturbation steps are integer pixel levels, and
the emitted image is re-quantized so the l-inf feasibility check is exact
in integer level space (float compares of k/255 values are off by one ulp
at the ball boundary, so levels are the ground truth).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import Encoder, EncoderConfig
from .params import ParamSet
from .tensor import ContractError, Tensor, no_grad, reshape, sqrt, tmean, tsum

METHODS = ("fgsm", "mifgsm")
DISTANCES = ("l2", "neg-cosine")


@dataclass(frozen=True)
class AttackSpec:
    method: str
    epsilon: int                  # l-inf bound in pixel levels of 255
    step: int = 2                 # step size in pixel levels
    iterations: int | None = None  # None: epsilon for mifgsm, 1 for fgsm
    momentum: float = 1.0
    distance: str = "l2"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown attack method {self.method!r}")
        if self.distance not in DISTANCES:
            raise ContractError(f"unknown distance metric {self.distance!r}")
        if int(self.epsilon) != self.epsilon or self.epsilon < 0:
            raise ContractError(f"epsilon must be a non-negative integer, got {self.epsilon}")
        if int(self.step) != self.step or self.step < 0:
            raise ContractError(f"step must be a non-negative integer, got {self.step}")
        if self.momentum < 0:
            raise ContractError(f"momentum must be non-negative, got {self.momentum}")

    @property
    def resolved_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        return 1 if self.method == "fgsm" else self.epsilon


@dataclass
class AdvPair:
    clean: np.ndarray             # [3,H,W] float32 on the 8-bit grid
    adversarial: np.ndarray
    spec: AttackSpec
    distance: float               # achieved embedding distance
    trajectory: list = field(default_factory=list)  # distance per iterate


def embed_distance(fa: Tensor, fb: Tensor, metric: str = "l2") -> Tensor:
    """Distance between two embeddings: elementwise-mean squared difference,
    or one minus the cosine of the flattened features."""
    if metric == "l2":
        diff = fa - fb
        return tmean(diff * diff)
    if metric == "neg-cosine":
        a = reshape(fa, (-1,))
        b = reshape(fb, (-1,))
        dot = tsum(a * b)
        return 1.0 - dot / sqrt(tsum(a * a) * tsum(b * b))
    raise ContractError(f"unknown distance metric {metric!r}")


def _per_image_distance(emb: Tensor, ref: Tensor, metric: str) -> Tensor:
    batch = emb.shape[0]
    a = reshape(emb, (batch, -1))
    b = reshape(ref, (batch, -1))
    if metric == "l2":
        diff = a - b
        return tmean(diff * diff, axes=-1)
    dot = tsum(a * b, axes=-1)
    return 1.0 - dot / sqrt(tsum(a * a, axes=-1) * tsum(b * b, axes=-1))


def upstream_encoder(cfg: EncoderConfig, params: ParamSet):
    """Embedding function of the bare encoder base: reads theta only."""
    enc = Encoder(cfg, params, include_phi=False, include_psi=False)

    def encode_fn(images: Tensor) -> Tensor:
        return enc.encode(images, gate=0).embedding

    return encode_fn


def quantize_levels(pixels: np.ndarray) -> np.ndarray:
    """Integer pixel levels of an on-grid [0,1] image."""
    return np.rint(pixels.astype(np.float64) * 255.0).astype(np.int64)


def levels_to_pixels(levels: np.ndarray) -> np.ndarray:
    return (levels.astype(np.float32)) / np.float32(255.0)


def linf_levels(clean: np.ndarray, adversarial: np.ndarray) -> int:
    """Exact l-inf distance in pixel levels."""
    return int(np.abs(quantize_levels(adversarial) - quantize_levels(clean)).max())


def is_feasible(clean: np.ndarray, adversarial: np.ndarray, epsilon: int) -> bool:
    """On the grid, inside [0,1], and within epsilon levels of the clean image."""
    la = quantize_levels(adversarial)
    if not np.array_equal(levels_to_pixels(la), adversarial.astype(np.float32)):
        return False
    if la.min() < 0 or la.max() > 255:
        return False
    return int(np.abs(la - quantize_levels(clean)).max()) <= epsilon


def _escape_gradient(x: np.ndarray, encode_fn, clean_emb: Tensor) -> np.ndarray:
    """Ascent direction out of the stationary start point.

    The distance objective has an exactly-zero gradient at X' = X (both
    forwards are identical), so sign(0) would never move.  Pushing the
    embedding along its own sign pattern grows any movement the encoder can
    express; for an input-insensitive encoder this is zero too, which keeps
    the "zero gradient at every step leaves X unchanged" contract intact.
    """
    xt = Tensor(x.copy(), requires_grad=True)
    emb = encode_fn(xt)
    tsum(emb * Tensor(np.sign(clean_emb.data))).backward()
    return xt.grad


def _run_attack(images: np.ndarray, encode_fn, spec: AttackSpec):
    """Momentum-iterative sign attack maximizing the embedding distance.

    Returns (adversarial batch, final distances, per-image trajectories).
    Gradient ascent: g <- mu*g + grad/||grad||_1 per image, then a signed
    integer-level step projected onto the epsilon ball and [0,1].
    """
    x0 = images.astype(np.float32)
    batch = x0.shape[0]
    levels0 = quantize_levels(x0)
    eps_f = np.float32(spec.epsilon) / np.float32(255.0)
    step_f = np.float32(spec.step) / np.float32(255.0)
    iters = spec.resolved_iterations

    clean_emb = None
    x = x0.copy()
    g = np.zeros_like(x0)
    traj = [[] for _ in range(batch)]
    for _ in range(max(iters, 0)):
        xt = Tensor(x.copy(), requires_grad=True)
        emb = encode_fn(xt)
        if clean_emb is None:
            with no_grad():
                clean_emb = Tensor(encode_fn(Tensor(x0)).data.copy())
        dist = _per_image_distance(emb, clean_emb, spec.distance)
        for b in range(batch):
            traj[b].append(float(dist.data[b]))
        tsum(dist).backward()
        grad = xt.grad
        stuck = ~np.any(grad.reshape(batch, -1) != 0, axis=1)
        if stuck.any():
            esc = _escape_gradient(x, encode_fn, clean_emb)
            grad = np.where(stuck[:, None, None, None], esc, grad)
        l1 = np.abs(grad).sum(axis=(1, 2, 3), keepdims=True)
        g = spec.momentum * g + grad / np.maximum(l1, np.finfo(np.float32).tiny)
        x = x + step_f * np.sign(g)
        x = np.clip(x, x0 - eps_f, x0 + eps_f)
        x = np.clip(x, 0.0, 1.0)

    levels = np.clip(quantize_levels(x), levels0 - spec.epsilon, levels0 + spec.epsilon)
    levels = np.clip(levels, 0, 255)
    adv = levels_to_pixels(levels)

    with no_grad():
        if clean_emb is None:
            clean_emb = Tensor(encode_fn(Tensor(x0)).data.copy())
        final = _per_image_distance(encode_fn(Tensor(adv)), clean_emb, spec.distance)
    distances = [float(v) for v in final.data]
    for b in range(batch):
        traj[b].append(distances[b])
    return adv, distances, traj


def craft(images: np.ndarray, encode_fn, spec: AttackSpec) -> list[AdvPair]:
    """Attack a batch; returns one AdvPair per image."""
    if images.ndim == 3:
        images = images[None]
    adv, distances, traj = _run_attack(images, encode_fn, spec)
    return [
        AdvPair(clean=images[b].copy(), adversarial=adv[b], spec=spec,
                distance=distances[b], trajectory=traj[b])
        for b in range(images.shape[0])
    ]


def mi_fgsm(image: np.ndarray, encode_fn, spec: AttackSpec):
    """Momentum-iterative attack; accepts [3,H,W] or a batch [B,3,H,W]."""
    if spec.method != "mifgsm":
        raise ContractError(f"mi_fgsm called with method {spec.method!r}")
    pairs = craft(image, encode_fn, spec)
    return pairs[0] if image.ndim == 3 else pairs


def fgsm(image: np.ndarray, encode_fn, spec: AttackSpec):
    """Single-step collapse of the iterative attack: T=1, mu=0, step=epsilon."""
    if spec.method != "fgsm":
        raise ContractError(f"fgsm called with method {spec.method!r}")
    effective = replace(spec, step=spec.epsilon, iterations=1, momentum=0.0)
    pairs = craft(image, encode_fn, effective)
    return pairs[0] if image.ndim == 3 else pairs
