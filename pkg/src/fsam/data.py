"""Synthetic forgery corpus, distortions, and bit-exact image file I/O.

Scenes are procedural (gradient background, smooth texture, a few
anti-aliased shapes) so real/forged pairs with exact ground-truth masks can
be produced deterministically from (spec, id).  Forgeries come in three
families: splice (content from a different generated image), copy-move
(displaced content from the same image), and inpaint-like (region replaced
by locally interpolated background).  Images are stored as binary PPM (P6)
and masks as binary PGM (P5, values {0,255}); pixels live on the 8-bit grid
so write/read round-trips are bit-exact.
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import rng
from .layers import resize_array
from .tensor import ContractError


class ParseError(ValueError):
    """Malformed image file; message carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


FORGERY_TYPES = ("splice", "copymove", "inpaint")
DISTORTION_GRIDS = {
    "gauss-noise": (5, 7, 9, 11, 13),   # sigma in pixel levels
    "gauss-blur": (5, 7, 9, 11, 13),    # odd kernel sizes
    "resize": (0.9, 0.8, 0.7, 0.6, 0.5),  # down-then-up rates
}
MIN_REGION_PX = 16
AREA_RANGE = (0.02, 0.30)


@dataclass
class ImageSample:
    pixels: np.ndarray            # [3,H,W] float32 on the 8-bit grid
    mask: np.ndarray              # [H,W] uint8 in {0,1}
    forged: bool
    adversarial: bool
    id: str

    def __post_init__(self):
        if not self.forged and self.mask.any():
            raise ContractError(f"sample {self.id}: real image must have an empty mask")


@dataclass(frozen=True)
class CorpusSpec:
    counts: dict = field(default_factory=lambda: {"train": 1200, "val": 300, "test": 500})
    image_size: int = 64
    forged_fraction: float = 0.5
    type_mix: dict = field(default_factory=lambda: {"splice": 0.4, "copymove": 0.3, "inpaint": 0.3})
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.type_mix.values()) - 1.0) > 1e-9:
            raise ContractError("forgery type mix must sum to 1")
        for t in self.type_mix:
            if t not in FORGERY_TYPES:
                raise ContractError(f"unknown forgery type {t!r}")

    def to_json(self) -> dict:
        return {"counts": dict(self.counts), "image_size": self.image_size,
                "forged_fraction": self.forged_fraction,
                "type_mix": dict(self.type_mix), "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusSpec":
        return cls(**obj)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap [0,1] floats onto the 8-bit grid."""
    return (np.rint(np.clip(pixels, 0.0, 1.0) * 255.0) / np.float32(255.0)).astype(np.float32)


# ---- procedural scenes -------------------------------------------------------


def _coords(size):
    v, u = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    return u, v


def _shape_coverage(gen, size) -> tuple[np.ndarray, np.ndarray]:
    """Anti-aliased coverage in [0,1] for one random shape, plus its color."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    kind = gen.choice(("disc", "rect", "ellipse"))
    cx, cy = gen.uniform(0.15, 0.85, 2) * size
    if kind == "disc":
        r = gen.uniform(0.08, 0.25) * size
        sdf = np.hypot(xx - cx, yy - cy) - r
    elif kind == "ellipse":
        a = gen.uniform(0.10, 0.30) * size
        b = gen.uniform(0.06, 0.20) * size
        phi = gen.uniform(0, np.pi)
        dx = (xx - cx) * math.cos(phi) + (yy - cy) * math.sin(phi)
        dy = -(xx - cx) * math.sin(phi) + (yy - cy) * math.cos(phi)
        sdf = (np.sqrt((dx / a) ** 2 + (dy / b) ** 2) - 1.0) * min(a, b)
    else:
        w = gen.uniform(0.10, 0.35) * size
        h = gen.uniform(0.10, 0.35) * size
        phi = gen.uniform(0, np.pi)
        dx = (xx - cx) * math.cos(phi) + (yy - cy) * math.sin(phi)
        dy = -(xx - cx) * math.sin(phi) + (yy - cy) * math.cos(phi)
        sdf = np.maximum(np.abs(dx) - w / 2, np.abs(dy) - h / 2)
    coverage = np.clip(0.5 - sdf, 0.0, 1.0)  # ~1px anti-aliased edge
    color = gen.uniform(0.0, 1.0, 3)
    return coverage, color


def generate_real(sample_id: str, spec: CorpusSpec) -> ImageSample:
    """Procedural scene, a pure function of (spec.seed, sample_id)."""
    gen = rng.stream(spec.seed, "sample", sample_id)
    size = spec.image_size
    u, v = _coords(size)

    c0, c1 = gen.uniform(0, 1, (2, 3))
    theta = gen.uniform(0, 2 * np.pi)
    t = np.cos(theta) * u + np.sin(theta) * v
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    amp = gen.uniform(0.05, 0.15)
    coarse = gen.uniform(-1, 1, size=(3, 8, 8))
    img = img + amp * resize_array(coarse, size, size, "bilinear")

    for _ in range(int(gen.integers(2, 6))):
        coverage, color = _shape_coverage(gen, size)
        img = img * (1 - coverage) + color[:, None, None] * coverage

    return ImageSample(
        pixels=quantize(img),
        mask=np.zeros((size, size), dtype=np.uint8),
        forged=False,
        adversarial=False,
        id=sample_id,
    )


# ---- forgeries ---------------------------------------------------------------


def _region_mask(gen, size: int) -> np.ndarray:
    """Binary region (ellipse or rotated rectangle) with area in AREA_RANGE."""
    lo, hi = 0.15 * size, 0.85 * size
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    for _ in range(100):
        frac = gen.uniform(0.03, 0.30)
        area = frac * size * size
        aspect = gen.uniform(0.5, 2.0)
        cx = gen.uniform(lo, hi)
        cy = gen.uniform(lo, hi)
        phi = gen.uniform(0, np.pi)
        dx = (xx - cx) * math.cos(phi) + (yy - cy) * math.sin(phi)
        dy = -(xx - cx) * math.sin(phi) + (yy - cy) * math.cos(phi)
        if gen.uniform() < 0.5:
            a = math.sqrt(area * aspect / np.pi)
            b = math.sqrt(area / (aspect * np.pi))
            inside = (dx / a) ** 2 + (dy / b) ** 2 <= 1.0
        else:
            w = math.sqrt(area * aspect)
            h = math.sqrt(area / aspect)
            inside = (np.abs(dx) <= w / 2) & (np.abs(dy) <= h / 2)
        mask = inside.astype(np.uint8)
        px = int(mask.sum())
        if px >= max(MIN_REGION_PX, AREA_RANGE[0] * size * size) and px <= AREA_RANGE[1] * size * size:
            return mask
    raise ContractError("could not draw a valid forgery region in 100 attempts")


def draw_displacement(gen, limit: int) -> tuple[int, int]:
    """Non-zero copy-move displacement; a zero draw is rejected and re-drawn."""
    while True:
        dy, dx = (int(x) for x in gen.integers(-limit, limit + 1, size=2))
        if (dy, dx) != (0, 0):
            return dy, dx


def _ensure_visible(forged: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Nudge masked pixels that quantized back to the original value, so the
    mask support is exactly the changed-pixel set."""
    flv = np.rint(forged * 255).astype(np.int64)
    olv = np.rint(original * 255).astype(np.int64)
    equal = (flv == olv).all(axis=0) & mask.astype(bool)
    if equal.any():
        ch = flv[0]
        ch[equal] += np.where(ch[equal] < 255, 1, -1)
        flv[0] = ch
    return (flv / np.float32(255.0)).astype(np.float32)


def forge(sample: ImageSample, forgery_type: str, spec: CorpusSpec) -> ImageSample:
    """Tamper a real sample; the mask is the exact support of changed pixels."""
    if sample.forged:
        raise ContractError(f"sample {sample.id} is already forged")
    if forgery_type not in FORGERY_TYPES:
        raise ContractError(f"unknown forgery type {forgery_type!r}")
    gen = rng.stream(spec.seed, "forge", sample.id)
    size = spec.image_size
    px = sample.pixels

    if forgery_type == "splice":
        donor = generate_real(sample.id + ".donor", spec)
        mask = _region_mask(gen, size)
        forged = np.where(mask.astype(bool), donor.pixels, px)
    elif forgery_type == "copymove":
        limit = size // 3
        for _ in range(100):
            dy, dx = draw_displacement(gen, limit)
            mask = _region_mask(gen, size)
            ys, xs = np.nonzero(mask)
            src_ok = (ys - dy).min() >= 0 and (ys - dy).max() < size \
                and (xs - dx).min() >= 0 and (xs - dx).max() < size
            if src_ok:
                break
        else:
            raise ContractError("could not place a copy-move source in 100 attempts")
        shifted = np.roll(np.roll(px, dy, axis=1), dx, axis=2)
        forged = np.where(mask.astype(bool), shifted, px)
    else:  # inpaint-like: fill the region from the surrounding background
        mask = _region_mask(gen, size)
        keep = 1.0 - mask.astype(np.float64)
        sigma = size / 8.0
        weights = ndimage.gaussian_filter(keep, sigma, mode="reflect")
        fill = np.stack([
            ndimage.gaussian_filter(px[c].astype(np.float64) * keep, sigma, mode="reflect")
            for c in range(3)
        ]) / np.maximum(weights, 1e-9)
        forged = np.where(mask.astype(bool), fill, px)

    forged = _ensure_visible(quantize(forged), px, mask)
    return ImageSample(pixels=forged, mask=mask, forged=True,
                       adversarial=sample.adversarial, id=sample.id)


# ---- distortions -------------------------------------------------------------


def _gaussian_kernel(ksize: int) -> np.ndarray:
    sigma = 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8
    half = (ksize - 1) / 2
    x = np.arange(ksize, dtype=np.float64) - half
    k = np.exp(-(x**2) / (2 * sigma * sigma))
    return k / k.sum()


def distort(sample: ImageSample, kind: str, level, seed: int = 0) -> ImageSample:
    """Gaussian noise (sigma in pixel levels), Gaussian blur (odd kernel), or
    down-then-up resize by rate; pixels are clipped back to [0,1]."""
    px = sample.pixels
    mask = sample.mask
    if kind == "gauss-noise":
        gen = rng.stream(seed, "distort", kind, level, sample.id)
        noise = gen.normal(0.0, float(level) / 255.0, size=px.shape).astype(np.float32)
        out = np.clip(px + noise, 0.0, 1.0)
    elif kind == "gauss-blur":
        k = int(level)
        if k % 2 == 0:
            raise ContractError(f"blur kernel must be odd, got {k}")
        if k == 1:
            out = px
        else:
            kern = _gaussian_kernel(k)
            out = px.astype(np.float64)
            out = ndimage.correlate1d(out, kern, axis=1, mode="reflect")
            out = ndimage.correlate1d(out, kern, axis=2, mode="reflect")
            out = np.clip(out, 0.0, 1.0).astype(np.float32)
    elif kind == "resize":
        rate = float(level)
        if not 0 < rate <= 1:
            raise ContractError(f"resize rate must be in (0,1], got {rate}")
        size = px.shape[-1]
        down = max(1, round(size * rate))
        small = resize_array(px, down, down, "bilinear")
        out = np.clip(resize_array(small, size, size, "bilinear"), 0.0, 1.0).astype(np.float32)
        m = resize_array(mask.astype(np.float64), down, down, "nearest")
        mask = resize_array(m, size, size, "nearest").astype(np.uint8)
    else:
        raise ContractError(f"unknown distortion kind {kind!r}")
    return replace(sample, pixels=out, mask=mask)


# ---- file I/O ----------------------------------------------------------------


def _read_header(data: bytes, magic: bytes, path: str):
    """Parse a PNM header (magic, width, height, maxval); returns offsets."""
    if data[:2] != magic:
        raise ParseError(f"{path}: bad magic {data[:2]!r}, expected {magic!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise ParseError(f"{path}: expected integer header field, got {token!r}", start)
        fields.append(int(token))
    if pos >= len(data):
        raise ParseError(f"{path}: truncated header", pos)
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}", pos)
    return width, height, pos


def write_image(path, pixels: np.ndarray):
    """Binary PPM (P6), 8-bit."""
    c, h, w = pixels.shape
    levels = np.rint(np.asarray(pixels, dtype=np.float64) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(levels.transpose(1, 2, 0).tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _read_header(data, b"P6", str(path))
    need = width * height * 3
    if len(data) - pos < need:
        raise ParseError(f"{path}: pixel data truncated ({len(data) - pos} of {need} bytes)", pos)
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    arr = raw.reshape(height, width, 3).transpose(2, 0, 1)
    return (arr / np.float32(255.0)).astype(np.float32)


def write_mask(path, mask: np.ndarray):
    """Binary PGM (P5) holding only {0, 255}."""
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write((np.asarray(mask, dtype=np.uint8) * 255).tobytes())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _read_header(data, b"P5", str(path))
    need = width * height
    if len(data) - pos < need:
        raise ParseError(f"{path}: mask data truncated ({len(data) - pos} of {need} bytes)", pos)
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    bad = np.flatnonzero((raw != 0) & (raw != 255))
    if bad.size:
        raise ParseError(f"{path}: mask value {raw[bad[0]]} not in {{0,255}}", pos + int(bad[0]))
    return (raw.reshape(height, width) // 255).astype(np.uint8)


# ---- corpus ------------------------------------------------------------------


def build_sample(split: str, index: int, spec: CorpusSpec) -> ImageSample:
    """Sample ``<split>_<index>`` as a pure function of (spec, id)."""
    count = spec.counts[split]
    sample_id = f"{split}_{index:05d}"
    n_real = count - round(count * spec.forged_fraction)
    sample = generate_real(sample_id, spec)
    if index >= n_real:
        types = sorted(spec.type_mix)
        probs = np.array([spec.type_mix[t] for t in types])
        ftype = str(rng.stream(spec.seed, "ftype", sample_id).choice(types, p=probs))
        sample = forge(sample, ftype, spec)
    return sample


def sample_forgery_type(sample_id: str, spec: CorpusSpec) -> str | None:
    gen = rng.stream(spec.seed, "ftype", sample_id)
    types = sorted(spec.type_mix)
    return str(gen.choice(types, p=np.array([spec.type_mix[t] for t in types])))


def generate_corpus(spec: CorpusSpec, root) -> dict:
    """Write every split under ``root`` and return the manifest."""
    manifest = {"format": 1, "seed": spec.seed, "image_size": spec.image_size,
                "spec": spec.to_json(), "samples": []}
    for split in sorted(spec.counts):
        os.makedirs(os.path.join(root, split), exist_ok=True)
        for index in range(spec.counts[split]):
            sample = build_sample(split, index, spec)
            write_image(os.path.join(root, split, f"{sample.id}.ppm"), sample.pixels)
            write_mask(os.path.join(root, split, f"{sample.id}_mask.pgm"), sample.mask)
            manifest["samples"].append({
                "id": sample.id, "split": split, "forged": sample.forged,
                "type": sample_forgery_type(sample.id, spec) if sample.forged else None,
                "adversarial": False,
            })
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root) -> dict:
    with open(os.path.join(root, "manifest.json")) as fh:
        return json.load(fh)


def load_sample(root, split: str, sample_id: str, forged: bool,
                adversarial: bool = False) -> ImageSample:
    pixels = read_image(os.path.join(root, split, f"{sample_id}.ppm"))
    mask = read_mask(os.path.join(root, split, f"{sample_id}_mask.pgm"))
    return ImageSample(pixels=pixels, mask=mask, forged=forged,
                       adversarial=adversarial, id=sample_id)


def load_split(root, split: str) -> list[ImageSample]:
    manifest = load_manifest(root)
    return [
        load_sample(root, split, rec["id"], rec["forged"])
        for rec in manifest["samples"]
        if rec["split"] == split
    ]
