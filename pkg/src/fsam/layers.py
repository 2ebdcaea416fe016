"""Neural building blocks on top of the autodiff tensors.

Linear layers, low-rank adapters and their gated composition, pre-norm
multi-head attention (windowed or global), layer norm, 2-d convolution
(cross-correlation semantics), and separable nearest/bilinear resizing.
"""

import math

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    _from_op,
    gelu,
    matmul,
    power,
    reshape,
    softmax,
    tmean,
    transpose,
)


def xavier_normal(gen, shape, dtype=np.float32) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return (gen.standard_normal(shape) * std).astype(dtype)


class Linear:
    """y = x @ weight + bias, weight laid out input-dim first."""

    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        if bias is not None and bias.shape != (weight.shape[-1],):
            raise DimensionError(
                f"bias length {bias.shape} does not match output extent {weight.shape[-1]}"
            )
        self.weight = weight
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LoraAdapter:
    """Additive low-rank update up @ down applied after the frozen base.

    ``up`` [D x r] is all-zero at construction so a fresh adapter contributes
    exactly nothing; ``down`` [r x d] starts uniform in [-1/sqrt(D), 1/sqrt(D)].
    """

    def __init__(self, up: Tensor, down: Tensor):
        self.up = up
        self.down = down

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int, gen, dtype=np.float32):
        if rank >= d_out:
            raise ContractError(f"adapter rank {rank} must be below output dim {d_out}")
        bound = 1.0 / math.sqrt(d_in)
        up = Tensor(np.zeros((d_in, rank), dtype=dtype), requires_grad=True)
        down = Tensor(
            gen.uniform(-bound, bound, size=(rank, d_out)).astype(dtype),
            requires_grad=True,
        )
        return cls(up, down)

    @property
    def rank(self) -> int:
        return self.up.shape[1]

    def contribution(self, x: Tensor) -> Tensor:
        if self.up.shape[1] != self.down.shape[0]:
            raise DimensionError(
                f"adapter rank mismatch: up {self.up.shape} vs down {self.down.shape}"
            )
        return matmul(matmul(x, self.up), self.down)


def lora_forward(
    x: Tensor,
    base: Linear,
    forgery: LoraAdapter | None,
    adversary: LoraAdapter | None = None,
    gate: int = 0,
) -> Tensor:
    """Frozen projection plus forgery update, plus the gated adversary update.

    The adversary branch is skipped structurally when gate is 0, so the
    output is bit-identical to the adversary-free computation.  ``forgery``
    may be None when evaluating the bare upstream encoder.
    """
    if gate not in (0, 1):
        raise ContractError(f"gate must be 0 or 1, got {gate!r}")
    out = base(x)
    if forgery is not None:
        out = out + forgery.contribution(x)
    if adversary is not None and gate == 1:
        out = out + adversary.contribution(x)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine."""
    mu = tmean(x, axes=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axes=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return centered * inv * gamma + beta


# ---- attention -------------------------------------------------------------


class AttentionBlock:
    """Pre-norm residual attention + residual MLP with adapter-equipped
    qkv and first MLP linear.  ``window_size`` None means global attention;
    adversary adapters exist only on global blocks."""

    def __init__(
        self,
        ln1: tuple[Tensor, Tensor],
        q: tuple[Linear, LoraAdapter, LoraAdapter | None],
        k: tuple[Linear, LoraAdapter, LoraAdapter | None],
        v: tuple[Linear, LoraAdapter, LoraAdapter | None],
        proj: Linear,
        ln2: tuple[Tensor, Tensor],
        fc1: tuple[Linear, LoraAdapter, LoraAdapter | None],
        fc2: Linear,
        num_heads: int,
        window_size: int | None,
    ):
        dim = q[0].weight.shape[0]
        if dim % num_heads:
            raise DimensionError(f"head count {num_heads} must divide dim {dim}")
        self.ln1 = ln1
        self.q, self.k, self.v = q, k, v
        self.proj = proj
        self.ln2 = ln2
        self.fc1 = fc1
        self.fc2 = fc2
        self.num_heads = num_heads
        self.window_size = window_size


def _partition_windows(x: Tensor, grid: int, window: int) -> Tensor:
    b, n, d = x.shape
    nw = grid // window
    x = reshape(x, (b, nw, window, nw, window, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b * nw * nw, window * window, d))


def _merge_windows(x: Tensor, batch: int, grid: int, window: int) -> Tensor:
    nw = grid // window
    d = x.shape[-1]
    x = reshape(x, (batch, nw, nw, window, window, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (batch, grid * grid, d))


def _multihead(x: Tensor, num_heads: int) -> Tensor:
    b, n, d = x.shape
    x = reshape(x, (b, n, num_heads, d // num_heads))
    return transpose(x, (0, 2, 1, 3))


def attention_forward(block: AttentionBlock, tokens: Tensor, gate: int = 0) -> Tensor:
    b, n, d = tokens.shape
    grid = math.isqrt(n)
    if grid * grid != n:
        raise DimensionError(f"token count {n} is not a square grid")

    h = layer_norm(tokens, *block.ln1)
    if block.window_size:
        if grid % block.window_size:
            raise DimensionError(
                f"token grid {grid} not divisible by window {block.window_size}"
            )
        h = _partition_windows(h, grid, block.window_size)

    q = _multihead(lora_forward(h, *block.q, gate=gate), block.num_heads)
    k = _multihead(lora_forward(h, *block.k, gate=gate), block.num_heads)
    v = _multihead(lora_forward(h, *block.v, gate=gate), block.num_heads)

    scale = 1.0 / math.sqrt(d // block.num_heads)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
    attended = matmul(softmax(scores, axis=-1), v)

    bw, nh, nn, dh = attended.shape
    merged = reshape(transpose(attended, (0, 2, 1, 3)), (bw, nn, d))
    out = block.proj(merged)
    if block.window_size:
        out = _merge_windows(out, b, grid, block.window_size)

    x = tokens + out
    h2 = layer_norm(x, *block.ln2)
    mlp = block.fc2(gelu(lora_forward(h2, *block.fc1, gate=gate)))
    return x + mlp


# ---- convolution -----------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of NCHW input with [out, in, kh, kw] kernels."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input/kernel, got {xd.shape}, {wd.shape}")
    batch, cin, height, width = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin != cin_w:
        raise DimensionError(f"channel mismatch: input {cin} vs kernel {cin_w}")
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{height + 2 * padding}x{width + 2 * padding}"
        )
    oh = (height + 2 * padding - kh) // stride + 1
    ow = (width + 2 * padding - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((batch, oh, ow, cin, kh, kw), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = xp[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ].transpose(0, 2, 3, 1)
    cols2 = cols.reshape(batch * oh * ow, cin * kh * kw)
    wmat = wd.reshape(cout, cin * kh * kw).T
    out = (cols2 @ wmat).reshape(batch, oh, ow, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    need_x, need_w = x.requires_grad, weight.requires_grad

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gx = gw = None
        if need_w:
            gw = (cols2.T @ g2).T.reshape(wd.shape)
        if need_x:
            gcols = (g2 @ wmat.T).reshape(batch, oh, ow, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
                    ] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + height, padding : padding + width]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _from_op(np.ascontiguousarray(out), parents, backward)


# ---- resize ----------------------------------------------------------------


def resample_matrix(n_in: int, n_out: int, mode: str, dtype=np.float32) -> np.ndarray:
    """Row-sampling matrix for one axis, align-corners-false convention."""
    if n_out <= 0 or n_in <= 0:
        raise ContractError(f"resize extents must be positive, got {n_in}->{n_out}")
    mat = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        if mode == "nearest":
            mat[i, min(int(math.floor((i + 0.5) * scale)), n_in - 1)] = 1.0
        elif mode == "bilinear":
            src = min(max(src, 0.0), n_in - 1.0)
            i0 = int(math.floor(src))
            i1 = min(i0 + 1, n_in - 1)
            frac = src - i0
            mat[i, i0] += 1.0 - frac
            mat[i, i1] += frac
        else:
            raise ContractError(f"unknown resize mode {mode!r}")
    return mat


def resize(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    """Resize the trailing two axes; separable, so it reduces to two matmuls."""
    if x.ndim < 2:
        raise DimensionError(f"resize needs spatial trailing axes, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (out_h, out_w):
        return x
    rows = Tensor(resample_matrix(h, out_h, mode, dtype=x.dtype))
    cols = Tensor(resample_matrix(w, out_w, mode, dtype=x.dtype).T)
    return matmul(matmul(rows, x), cols)


def resize_array(x: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Plain-numpy resize for data-pipeline use (no graph)."""
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (out_h, out_w):
        return x
    rows = resample_matrix(h, out_h, mode, dtype=np.float64)
    cols = resample_matrix(w, out_w, mode, dtype=np.float64)
    out = np.matmul(np.matmul(rows, x.astype(np.float64)), cols.T)
    return out.astype(x.dtype) if x.dtype != np.float64 else out


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial axes."""
    return tmean(x, axes=(-2, -1))
