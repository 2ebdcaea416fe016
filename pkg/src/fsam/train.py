"""Three-stage training choreography with per-stage freezing.

Stage 1 trains the forgery experts and both task heads on clean images.
Stage 2 trains only the adversary detector on clean/adversarial batches.
Stage 3 trains only the adversary experts by aligning adversarial feature
taps with their clean counterparts, gated by the trained detector.

Every random draw comes from a purpose-keyed stream, so a stage re-run from
a reloaded checkpoint is bit-identical to an uninterrupted run.  Frozen
groups are verified by checksum before/after each stage.
"""

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .attacks import AttackSpec, craft, upstream_encoder
from .data import ImageSample, load_split, read_image, write_image
from .encoder import EncoderConfig
from .heads import (
    HeadsConfig,
    adversary_detector_loss,
    alignment_loss,
    gate_from_score,
    localization_detection_loss,
)
from .model import Model, build_model, model_from_params
from .checkpoint import load_checkpoint, save_checkpoint
from .params import ParamSet
from .tensor import ContractError, Tensor, no_grad

STAGE_DEFAULTS = {
    1: {"epochs": 5, "batch_size": 16},
    2: {"epochs": 10, "batch_size": 32},
    3: {"epochs": 20, "batch_size": 16},
}
STAGE_TRAINS = {
    1: ("phi", "forgery_detector", "mask_decoder"),
    2: ("adv_detector",),
    3: ("psi",),
}


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient during training."""


@dataclass
class StageConfig:
    stage: int
    seed: int = 0
    epochs: int | None = None
    learning_rate: float = 1e-4
    batch_size: int | None = None
    attack_method: str = "mifgsm"
    attack_eps_choices: tuple = (2, 4, 8)
    attack_step: int = 2
    attack_momentum: float = 1.0
    attack_distance: str = "l2"
    subset_size: int = 400

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ContractError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs is None:
            self.epochs = STAGE_DEFAULTS[self.stage]["epochs"]
        if self.batch_size is None:
            self.batch_size = STAGE_DEFAULTS[self.stage]["batch_size"]
        if self.epochs <= 0:
            raise ContractError("epoch count must be positive")
        self.attack_eps_choices = tuple(int(e) for e in self.attack_eps_choices)

    def to_json(self) -> dict:
        d = asdict(self)
        d["attack_eps_choices"] = list(self.attack_eps_choices)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "StageConfig":
        return cls(**obj)


@dataclass
class SplitData:
    ids: list
    pixels: np.ndarray           # [N,3,H,W] float32
    masks: np.ndarray            # [N,H,W] uint8
    labels: np.ndarray           # [N] uint8, 1 = forged
    adversarial: np.ndarray      # [N] bool

    @classmethod
    def from_samples(cls, samples: list[ImageSample]) -> "SplitData":
        return cls(
            ids=[s.id for s in samples],
            pixels=np.stack([s.pixels for s in samples]),
            masks=np.stack([s.mask for s in samples]),
            labels=np.array([int(s.forged) for s in samples], dtype=np.uint8),
            adversarial=np.array([s.adversarial for s in samples], dtype=bool),
        )

    def take(self, idx) -> "SplitData":
        return SplitData(
            ids=[self.ids[i] for i in idx],
            pixels=self.pixels[idx],
            masks=self.masks[idx],
            labels=self.labels[idx],
            adversarial=self.adversarial[idx],
        )

    def __len__(self):
        return len(self.ids)


# ---- optimizer ---------------------------------------------------------------


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay."""

    def __init__(self, named_tensors, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.named = list(named_tensors)
        self.lr = np.float32(lr)
        self.b1, self.b2 = np.float32(betas[0]), np.float32(betas[1])
        self.eps = np.float32(eps)
        self.wd = np.float32(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.named}
        self.v = {name: np.zeros_like(t.data) for name, t in self.named}

    def step(self):
        self.t += 1
        bc1 = np.float32(1.0 - self.b1 ** self.t)
        bc2 = np.float32(1.0 - self.b2 ** self.t)
        for name, p in self.named:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * update - self.lr * self.wd * p.data

    def zero_grads(self):
        for _, p in self.named:
            p.grad = None


# ---- shared machinery ----------------------------------------------------------


def _snapshot(params: ParamSet, groups) -> dict:
    return {g: params.checksum([g]) for g in groups}


def _assert_frozen(params: ParamSet, before: dict, stage: int):
    for group, checksum in before.items():
        if params.checksum([group]) != checksum:
            raise AssertionError(
                f"stage {stage} changed frozen group {group!r}"
            )


def _epoch_batches(n: int, batch_size: int, gen) -> list[np.ndarray]:
    order = gen.permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def _check_loss(value: float):
    if not math.isfinite(value):
        raise NumericalError("non-finite loss")


def attack_subset_indices(n_train: int, subset_size: int, seed: int) -> np.ndarray:
    """Deterministic train-subset used by stages 2 and 3."""
    order = rng.stream(seed, "attack-subset").permutation(n_train)
    return np.sort(order[: min(subset_size, n_train)])


def generate_attack_partners(subset: SplitData, params: ParamSet, cfg: StageConfig,
                             enc_cfg: EncoderConfig, cache_dir=None,
                             attack_batch: int = 16) -> dict:
    """Adversarial partner for every subset image at every epsilon.

    Pre-generated once; when ``cache_dir`` is given the PPM pairs are reused
    across runs (generation is deterministic, so cached and fresh partners
    are identical).
    """
    frozen = params.copy()
    frozen.set_trainable([])
    encode_fn = upstream_encoder(enc_cfg, frozen)
    partners = {}
    for eps in cfg.attack_eps_choices:
        spec = AttackSpec(cfg.attack_method, epsilon=eps, step=cfg.attack_step,
                          momentum=cfg.attack_momentum, distance=cfg.attack_distance)
        eps_dir = None
        if cache_dir is not None:
            eps_dir = os.path.join(cache_dir, f"eps{eps}")
            os.makedirs(eps_dir, exist_ok=True)
            paths = [os.path.join(eps_dir, f"{sid}.ppm") for sid in subset.ids]
            if all(os.path.exists(p) for p in paths):
                partners[eps] = np.stack([read_image(p) for p in paths])
                continue
        out = np.empty_like(subset.pixels)
        for start in range(0, len(subset), attack_batch):
            idx = np.arange(start, min(start + attack_batch, len(subset)))
            pairs = craft(subset.pixels[idx], encode_fn, spec)
            out[idx] = np.stack([p.adversarial for p in pairs])
        partners[eps] = out
        if eps_dir is not None:
            for i, sid in enumerate(subset.ids):
                write_image(os.path.join(eps_dir, f"{sid}.ppm"), out[i])
    return partners


# ---- stages ---------------------------------------------------------------------


def run_stage1(train: SplitData, cfg: StageConfig, model: Model, log_fn=None) -> dict:
    """Train forgery experts + task heads on clean images only."""
    if cfg.stage != 1:
        raise ContractError(f"run_stage1 got stage {cfg.stage}")
    if train.adversarial.any():
        raise ContractError("stage 1 corpus must not contain adversarial samples")
    params = model.params
    before = _snapshot(params, ("theta", "psi", "adv_detector"))
    params.set_trainable(STAGE_TRAINS[1])
    opt = AdamW(params.items(STAGE_TRAINS[1]), cfg.learning_rate)

    epoch_means = []
    step = 0
    for epoch in range(cfg.epochs):
        gen = rng.stream(cfg.seed, "stage1", "shuffle", epoch)
        losses = []
        for idx in _epoch_batches(len(train), cfg.batch_size, gen):
            t0 = time.time()
            out = model.encoder.encode(Tensor(train.pixels[idx]), gate=0)
            s_f = model.forgery_detector(out.embedding)
            m_f = model.mask_decoder(out.embedding)
            loss, parts = localization_detection_loss(
                s_f, m_f, train.labels[idx], train.masks[idx]
            )
            _check_loss(loss.item())
            opt.zero_grads()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
            if log_fn:
                log_fn({"stage": 1, "epoch": epoch, "step": step,
                        "loss": loss.item(), **parts,
                        "wall_time": time.time() - t0})
        epoch_means.append(float(np.mean(losses)))
    _assert_frozen(params, before, stage=1)
    return {"epoch_mean_loss": epoch_means}


def run_stage2(subset: SplitData, partners: dict, cfg: StageConfig, model: Model,
               log_fn=None) -> dict:
    """Train only the adversary detector on stratified clean/adversarial batches."""
    if cfg.stage != 2:
        raise ContractError(f"run_stage2 got stage {cfg.stage}")
    missing = [eps for eps in cfg.attack_eps_choices if eps not in partners]
    if missing:
        raise ContractError(f"missing adversarial partners for eps {missing}")
    params = model.params
    before = _snapshot(params, ("theta", "phi", "psi", "forgery_detector", "mask_decoder"))
    params.set_trainable(STAGE_TRAINS[2])
    opt = AdamW(params.items(STAGE_TRAINS[2]), cfg.learning_rate)

    half = cfg.batch_size // 2
    epoch_means = []
    step = 0
    for epoch in range(cfg.epochs):
        gen = rng.stream(cfg.seed, "stage2", "shuffle", epoch)
        losses = []
        batches = [b for b in _epoch_batches(len(subset), half, gen) if len(b) == half]
        for bi, idx in enumerate(batches):
            t0 = time.time()
            eps = int(rng.stream(cfg.seed, "stage2", "eps", epoch, bi)
                      .choice(cfg.attack_eps_choices))
            pixels = np.concatenate([subset.pixels[idx], partners[eps][idx]])
            labels = np.concatenate([np.zeros(half, np.uint8), np.ones(half, np.uint8)])
            scores, feats = model.adv_detector(Tensor(pixels))
            loss, parts = adversary_detector_loss(
                scores, feats, labels, rng.stream(cfg.seed, "stage2", "mine", epoch, bi)
            )
            _check_loss(loss.item())
            opt.zero_grads()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
            if log_fn:
                log_fn({"stage": 2, "epoch": epoch, "step": step, "eps": eps,
                        "loss": loss.item(), **parts,
                        "wall_time": time.time() - t0})
        epoch_means.append(float(np.mean(losses)))
    _assert_frozen(params, before, stage=2)
    return {"epoch_mean_loss": epoch_means}


def _gated_taps(model: Model, pixels: np.ndarray, gates: np.ndarray):
    """Clean-side feature taps as constants, honoring per-image gates."""
    n = pixels.shape[0]
    taps = None
    with no_grad():
        for gate in (0, 1):
            sub = np.flatnonzero(gates == gate)
            if sub.size == 0:
                continue
            out = model.encoder.encode(Tensor(pixels[sub]), gate=gate)
            if taps is None:
                taps = [np.zeros((n,) + t.shape[1:], dtype=np.float32) for t in out.taps]
            for slot, tap in zip(taps, out.taps):
                slot[sub] = tap.data
    return taps


def run_stage3(subset: SplitData, partners: dict, cfg: StageConfig, model: Model,
               log_fn=None) -> dict:
    """Train only the adversary experts by aligning adversarial taps to clean
    taps; gating follows the trained detector's decision on each image."""
    if cfg.stage != 3:
        raise ContractError(f"run_stage3 got stage {cfg.stage}")
    missing = [eps for eps in cfg.attack_eps_choices if eps not in partners]
    if missing:
        raise ContractError(f"missing adversarial partners for eps {missing}")
    params = model.params
    before = _snapshot(params, ("theta", "phi", "adv_detector",
                                "forgery_detector", "mask_decoder"))
    params.set_trainable(STAGE_TRAINS[3])
    opt = AdamW(params.items(STAGE_TRAINS[3]), cfg.learning_rate)

    epoch_means = []
    step = 0
    for epoch in range(cfg.epochs):
        gen = rng.stream(cfg.seed, "stage3", "shuffle", epoch)
        losses = []
        for bi, idx in enumerate(_epoch_batches(len(subset), cfg.batch_size, gen)):
            t0 = time.time()
            eps = int(rng.stream(cfg.seed, "stage3", "eps", epoch, bi)
                      .choice(cfg.attack_eps_choices))
            clean = subset.pixels[idx]
            adv = partners[eps][idx]
            with no_grad():
                gate_c = gate_from_score(model.adv_detector(Tensor(clean))[0])
                gate_a = gate_from_score(model.adv_detector(Tensor(adv))[0])
            taps_clean = _gated_taps(model, clean, gate_c)

            on = np.flatnonzero(gate_a == 1)
            off = np.flatnonzero(gate_a == 0)
            n = len(idx)
            loss_value = 0.0
            if off.size:
                with no_grad():
                    out_off = model.encoder.encode(Tensor(adv[off]), gate=0)
                    off_loss = alignment_loss(
                        out_off.taps, [Tensor(t[off]) for t in taps_clean]
                    ).item()
                loss_value += off_loss * off.size / n
            if on.size:
                out_on = model.encoder.encode(Tensor(adv[on]), gate=1)
                align = alignment_loss(out_on.taps, [Tensor(t[on]) for t in taps_clean])
                _check_loss(align.item())
                loss_value += align.item() * on.size / n
                opt.zero_grads()
                (align * (on.size / n)).backward()
                opt.step()
            losses.append(loss_value)
            step += 1
            if log_fn:
                log_fn({"stage": 3, "epoch": epoch, "step": step, "eps": eps,
                        "loss": loss_value, "gated": int(on.size),
                        "wall_time": time.time() - t0})
        epoch_means.append(float(np.mean(losses)))
    _assert_frozen(params, before, stage=3)
    return {"epoch_mean_loss": epoch_means}


# ---- orchestration ----------------------------------------------------------------


def checkpoint_meta(model: Model, stage: int, cfg: StageConfig) -> dict:
    return {
        "stage": stage,
        "epoch": cfg.epochs,
        "seed": cfg.seed,
        "config_hash": model.config_hash,
        "stage_config": cfg.to_json(),
    }


def train_stage(stage: int, corpus_root, cfg: StageConfig, model: Model,
                cache_dir=None, log_fn=None) -> dict:
    """Run one stage against the corpus' train split."""
    train = SplitData.from_samples(load_split(corpus_root, "train"))
    if stage == 1:
        return run_stage1(train, cfg, model, log_fn)
    subset = train.take(attack_subset_indices(len(train), cfg.subset_size, cfg.seed))
    partners = generate_attack_partners(subset, model.params, cfg, model.enc_cfg,
                                        cache_dir=cache_dir)
    if stage == 2:
        return run_stage2(subset, partners, cfg, model, log_fn)
    return run_stage3(subset, partners, cfg, model, log_fn)


def train_all_stages(corpus_root, seed: int, out_dir,
                     enc_cfg: EncoderConfig = EncoderConfig(),
                     heads_cfg: HeadsConfig = HeadsConfig(),
                     overrides: dict | None = None, log_fn=None) -> dict:
    """Stages 1-3 in sequence; returns checkpoint paths keyed by stage."""
    os.makedirs(out_dir, exist_ok=True)
    overrides = overrides or {}
    model = build_model(seed, enc_cfg, heads_cfg)
    paths = {}
    for stage in (1, 2, 3):
        cfg = StageConfig(stage=stage, seed=seed, **overrides.get(stage, {}))
        stats = train_stage(stage, corpus_root, cfg, model,
                            cache_dir=os.path.join(out_dir, "attack_cache"),
                            log_fn=log_fn)
        path = os.path.join(out_dir, f"stage{stage}.ckpt")
        save_checkpoint(path, model.params, checkpoint_meta(model, stage, cfg))
        paths[stage] = path
        if log_fn:
            log_fn({"stage": stage, "event": "stage_complete",
                    "epoch_mean_loss": stats["epoch_mean_loss"]})
    return paths


def load_model(ckpt_path, enc_cfg: EncoderConfig = EncoderConfig(),
               heads_cfg: HeadsConfig = HeadsConfig()):
    """Model + metadata from a checkpoint, verifying the config hash."""
    from .model import model_config_hash

    params, meta = load_checkpoint(ckpt_path, model_config_hash(enc_cfg, heads_cfg))
    return model_from_params(params, enc_cfg, heads_cfg), meta
