"""Full model bundle: encoder plus the three heads over one ParamSet.

Inference routes each image through the adversary detector first; images
scored above 0.5 get the adversary experts enabled.  Batches are split by
gate and encoded per group, so a clean-gated image's computation is
bit-identical to a run without adversary experts.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .encoder import Encoder, EncoderConfig, init_encoder_params
from .heads import (
    AdversaryDetector,
    ForgeryDetector,
    HeadsConfig,
    MaskDecoder,
    gate_from_score,
    init_head_params,
)
from .params import ParamSet
from .tensor import ContractError, Tensor, no_grad


def model_config_hash(enc_cfg: EncoderConfig, heads_cfg: HeadsConfig) -> str:
    blob = json.dumps(
        {
            "encoder": {k: list(v) if isinstance(v, tuple) else v
                        for k, v in vars(enc_cfg).items()},
            "heads": {k: list(v) if isinstance(v, tuple) else v
                      for k, v in vars(heads_cfg).items()},
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Model:
    enc_cfg: EncoderConfig
    heads_cfg: HeadsConfig
    params: ParamSet

    def __post_init__(self):
        self.encoder = Encoder(self.enc_cfg, self.params)
        self.adv_detector = AdversaryDetector(self.params, self.heads_cfg)
        self.forgery_detector = ForgeryDetector(self.params)
        self.mask_decoder = MaskDecoder(self.params, self.enc_cfg.image_size, self.heads_cfg)

    @property
    def config_hash(self) -> str:
        return model_config_hash(self.enc_cfg, self.heads_cfg)


def build_model(seed: int, enc_cfg: EncoderConfig = EncoderConfig(),
                heads_cfg: HeadsConfig = HeadsConfig()) -> Model:
    params = init_encoder_params(enc_cfg, seed)
    init_head_params(enc_cfg.embed_dim, seed, params, heads_cfg)
    return Model(enc_cfg, heads_cfg, params)


def model_from_params(params: ParamSet, enc_cfg: EncoderConfig = EncoderConfig(),
                      heads_cfg: HeadsConfig = HeadsConfig()) -> Model:
    return Model(enc_cfg, heads_cfg, params)


@dataclass
class Prediction:
    forgery_scores: np.ndarray   # [N]
    masks: np.ndarray            # [N,H,W]
    adversary_scores: np.ndarray  # [N]
    gates: np.ndarray            # [N] in {0,1}


def predict(model: Model, pixels: np.ndarray, gate_mode="auto",
            batch_size: int = 32) -> Prediction:
    """Inference over [N,3,H,W] pixels.

    gate_mode "auto" follows the adversary detector's decision; 0 or 1
    force the gate (ablation rows).
    """
    if gate_mode not in ("auto", 0, 1):
        raise ContractError(f"gate_mode must be 'auto', 0 or 1, got {gate_mode!r}")
    n = pixels.shape[0]
    size = model.enc_cfg.image_size
    scores = np.zeros(n, dtype=np.float32)
    masks = np.zeros((n, size, size), dtype=np.float32)
    adv_scores = np.zeros(n, dtype=np.float32)
    gates = np.zeros(n, dtype=np.int64)

    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            batch = Tensor(pixels[idx])
            s_a, _ = model.adv_detector(batch)
            adv_scores[idx] = s_a.data
            if gate_mode == "auto":
                gates[idx] = gate_from_score(s_a)
            else:
                gates[idx] = gate_mode
            for gate in (0, 1):
                sub = idx[gates[idx] == gate]
                if sub.size == 0:
                    continue
                out = model.encoder.encode(Tensor(pixels[sub]), gate=gate)
                scores[sub] = model.forgery_detector(out.embedding).data
                masks[sub] = model.mask_decoder(out.embedding).data
    return Prediction(forgery_scores=scores, masks=masks,
                      adversary_scores=adv_scores, gates=gates)
