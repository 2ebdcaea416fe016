"""Image encoder: patchify -> transformer stack -> embedding with feature taps.

Forgery experts sit on every block; adversary experts only on the four
global-attention blocks, multiplied by the binary gate.  The outputs of the
four global blocks plus the final embedding form the five feature taps used
by the alignment loss.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .layers import AttentionBlock, Linear, LoraAdapter, attention_forward, xavier_normal
from .params import ParamSet
from .tensor import ContractError, DimensionError, Tensor, reshape, transpose


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 8
    num_heads: int = 4
    window_size: int = 4
    global_blocks: tuple = (1, 3, 5, 7)
    lora_rank: int = 8
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be divisible by patch_size")
        grid = self.image_size // self.patch_size
        if grid % self.window_size:
            raise ContractError("token grid must be divisible by window_size")
        gb = tuple(self.global_blocks)
        if len(gb) != 4 or list(gb) != sorted(set(gb)) or gb[-1] >= self.depth:
            raise ContractError(
                f"global_blocks must be exactly 4 strictly increasing indices < depth, got {gb}"
            )
        if self.lora_rank >= self.embed_dim:
            raise ContractError("lora_rank must be below the embedding dim")
        if self.embed_dim % self.num_heads:
            raise ContractError("num_heads must divide embed_dim")
        object.__setattr__(self, "global_blocks", gb)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class EncoderOutput:
    embedding: Tensor              # [B, D, grid, grid]
    taps: list = field(default_factory=list)  # 4 global-block outputs + embedding

    def __post_init__(self):
        if len(self.taps) != 5 or self.taps[4] is not self.embedding:
            raise ContractError("taps must be the 4 global-block outputs plus the embedding")


ADAPTED = ("q", "k", "v", "fc1")  # projections that carry expert adapters


def init_encoder_params(cfg: EncoderConfig, seed: int, params: ParamSet | None = None,
                        dtype=np.float32) -> ParamSet:
    """Create encoder parameters; each tensor gets its own named stream so
    initialization is independent of creation order."""
    ps = params if params is not None else ParamSet()
    d, hid = cfg.embed_dim, cfg.hidden_dim
    patch_dim = 3 * cfg.patch_size * cfg.patch_size

    def theta(name, array):
        return ps.add(name, Tensor(array), "theta")

    def weight(name, shape):
        return theta(name, xavier_normal(rng.stream(seed, "init", name), shape, dtype))

    weight("enc.patch.weight", (patch_dim, d))
    theta("enc.patch.bias", np.zeros(d, dtype=dtype))
    theta("enc.pos", (rng.stream(seed, "init", "enc.pos")
                      .standard_normal((cfg.grid * cfg.grid, d)) * 0.02).astype(dtype))

    for i in range(cfg.depth):
        pre = f"enc.b{i}"
        theta(f"{pre}.ln1.gamma", np.ones(d, dtype=dtype))
        theta(f"{pre}.ln1.beta", np.zeros(d, dtype=dtype))
        for proj in ("q", "k", "v", "proj"):
            weight(f"{pre}.{proj}.weight", (d, d))
            theta(f"{pre}.{proj}.bias", np.zeros(d, dtype=dtype))
        theta(f"{pre}.ln2.gamma", np.ones(d, dtype=dtype))
        theta(f"{pre}.ln2.beta", np.zeros(d, dtype=dtype))
        weight(f"{pre}.fc1.weight", (d, hid))
        theta(f"{pre}.fc1.bias", np.zeros(hid, dtype=dtype))
        weight(f"{pre}.fc2.weight", (hid, d))
        theta(f"{pre}.fc2.bias", np.zeros(d, dtype=dtype))

        for kind, group in (("phi", "phi"), ("psi", "psi")):
            if kind == "psi" and i not in cfg.global_blocks:
                continue
            for proj in ADAPTED:
                out_dim = hid if proj == "fc1" else d
                gen = rng.stream(seed, "init", f"{pre}.{proj}.{kind}")
                adapter = LoraAdapter.create(d, out_dim, cfg.lora_rank, gen, dtype=dtype)
                ps.add(f"{pre}.{proj}.{kind}.up", adapter.up, group)
                ps.add(f"{pre}.{proj}.{kind}.down", adapter.down, group)
    return ps


class Encoder:
    """Layer view over a ParamSet.  ``include_phi``/``include_psi`` control
    whether the expert adapters are wired in at all (the upstream attack
    target is built with both absent)."""

    def __init__(self, cfg: EncoderConfig, params: ParamSet,
                 include_phi: bool = True, include_psi: bool = True):
        self.cfg = cfg
        self.params = params
        self.patch = Linear(params.tensor("enc.patch.weight"), params.tensor("enc.patch.bias"))
        self.pos = params.tensor("enc.pos")
        self.blocks = []
        for i in range(cfg.depth):
            pre = f"enc.b{i}"

            def proj(name, i=i, pre=pre):
                base = Linear(params.tensor(f"{pre}.{name}.weight"),
                              params.tensor(f"{pre}.{name}.bias"))
                phi = psi = None
                if include_phi:
                    phi = LoraAdapter(params.tensor(f"{pre}.{name}.phi.up"),
                                      params.tensor(f"{pre}.{name}.phi.down"))
                if include_psi and i in cfg.global_blocks:
                    psi = LoraAdapter(params.tensor(f"{pre}.{name}.psi.up"),
                                      params.tensor(f"{pre}.{name}.psi.down"))
                return base, phi, psi

            self.blocks.append(AttentionBlock(
                ln1=(params.tensor(f"{pre}.ln1.gamma"), params.tensor(f"{pre}.ln1.beta")),
                q=proj("q"), k=proj("k"), v=proj("v"),
                proj=Linear(params.tensor(f"{pre}.proj.weight"),
                            params.tensor(f"{pre}.proj.bias")),
                ln2=(params.tensor(f"{pre}.ln2.gamma"), params.tensor(f"{pre}.ln2.beta")),
                fc1=proj("fc1"),
                fc2=Linear(params.tensor(f"{pre}.fc2.weight"),
                           params.tensor(f"{pre}.fc2.bias")),
                num_heads=cfg.num_heads,
                window_size=None if i in cfg.global_blocks else cfg.window_size,
            ))

    def patchify(self, images: Tensor) -> Tensor:
        """Non-overlapping patch embedding plus the learned position term."""
        b, c, h, w = images.shape
        g, p, d = self.cfg.grid, self.cfg.patch_size, self.cfg.embed_dim
        x = reshape(images, (b, c, g, p, g, p))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        x = reshape(x, (b, g * g, c * p * p))
        return self.patch(x) + self.pos

    def encode(self, images: Tensor, gate: int) -> EncoderOutput:
        if gate not in (0, 1):
            raise ContractError(f"gate must be 0 or 1, got {gate!r}")
        b, c, h, w = images.shape
        if c != 3 or h != self.cfg.image_size or w != self.cfg.image_size:
            raise DimensionError(
                f"expected [B,3,{self.cfg.image_size},{self.cfg.image_size}] image, got {images.shape}"
            )
        g, d = self.cfg.grid, self.cfg.embed_dim

        def as_map(tokens):
            return transpose(reshape(tokens, (b, g, g, d)), (0, 3, 1, 2))

        tokens = self.patchify(images)
        taps = []
        for i, block in enumerate(self.blocks):
            tokens = attention_forward(block, tokens, gate=gate)
            if i in self.cfg.global_blocks:
                taps.append(as_map(tokens))
        embedding = as_map(tokens)
        taps.append(embedding)
        return EncoderOutput(embedding=embedding, taps=taps)

    __call__ = encode
