import itertools
import math

import numpy as np
import pytest

from conftest import central_diff_grad, max_rel_err
from fsam import rng
from fsam.layers import (
    AttentionBlock,
    Linear,
    LoraAdapter,
    attention_forward,
    conv2d,
    global_avg_pool,
    layer_norm,
    lora_forward,
    resample_matrix,
    resize,
    resize_array,
    xavier_normal,
)
from fsam.tensor import ContractError, DimensionError, Tensor, tsum


def make_linear(gen, d_in, d_out, dtype=np.float64, requires_grad=True):
    w = Tensor(gen.standard_normal((d_in, d_out)).astype(dtype), requires_grad=requires_grad)
    b = Tensor(gen.standard_normal(d_out).astype(dtype), requires_grad=requires_grad)
    return Linear(w, b)


def make_block(gen, dim=8, heads=2, window=None, with_adv=True, dtype=np.float64):
    def adapters(d_out):
        phi = LoraAdapter.create(dim, d_out, 2, gen, dtype=dtype)
        phi.up.data = gen.standard_normal(phi.up.shape).astype(dtype) * 0.3
        psi = None
        if with_adv:
            psi = LoraAdapter.create(dim, d_out, 2, gen, dtype=dtype)
            psi.up.data = gen.standard_normal(psi.up.shape).astype(dtype) * 0.3
        return phi, psi

    def ln():
        return (
            Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        )

    hidden = dim * 2
    q_phi, q_psi = adapters(dim)
    k_phi, k_psi = adapters(dim)
    v_phi, v_psi = adapters(dim)
    f_phi, f_psi = adapters(hidden)
    return AttentionBlock(
        ln1=ln(),
        q=(make_linear(gen, dim, dim, dtype), q_phi, q_psi),
        k=(make_linear(gen, dim, dim, dtype), k_phi, k_psi),
        v=(make_linear(gen, dim, dim, dtype), v_phi, v_psi),
        proj=make_linear(gen, dim, dim, dtype),
        ln2=ln(),
        fc1=(make_linear(gen, dim, hidden, dtype), f_phi, f_psi),
        fc2=make_linear(gen, hidden, dim, dtype),
        num_heads=heads,
        window_size=window,
    )


# ---- lora ------------------------------------------------------------------


def test_fresh_adapter_is_exact_identity():
    gen = rng.stream(0, "test", "lora-id")
    base = make_linear(gen, 6, 4, np.float32)
    fresh = LoraAdapter.create(6, 4, 2, gen, dtype=np.float32)
    x = Tensor(gen.standard_normal((5, 6)).astype(np.float32))
    out = lora_forward(x, base, fresh)
    assert out.data.tobytes() == base(x).data.tobytes()


def test_gate_zero_matches_adversary_free_bitwise():
    gen = rng.stream(0, "test", "lora-gate")
    base = make_linear(gen, 6, 4, np.float32)
    phi = LoraAdapter.create(6, 4, 2, gen, dtype=np.float32)
    phi.up.data = gen.standard_normal(phi.up.shape).astype(np.float32)
    psi = LoraAdapter.create(6, 4, 2, gen, dtype=np.float32)
    psi.up.data = gen.standard_normal(psi.up.shape).astype(np.float32) * 10
    x = Tensor(gen.standard_normal((5, 6)).astype(np.float32))
    gated = lora_forward(x, base, phi, psi, gate=0)
    absent = lora_forward(x, base, phi, None)
    assert gated.data.tobytes() == absent.data.tobytes()


def test_lora_against_dense_composition_oracle():
    gen = rng.stream(0, "test", "lora-dense")
    base = make_linear(gen, 6, 4, np.float64)
    phi = LoraAdapter.create(6, 4, 2, gen, dtype=np.float64)
    phi.up.data = gen.standard_normal(phi.up.shape)
    x = gen.standard_normal((5, 6))
    dense = x @ (base.weight.data + phi.up.data @ phi.down.data) + base.bias.data
    out = lora_forward(Tensor(x, dtype=np.float64), base, phi)
    assert np.abs(out.data - dense).max() <= 1e-5


def test_lora_rank_mismatch():
    gen = rng.stream(0, "test", "lora-rank")
    bad = LoraAdapter(
        Tensor(np.zeros((6, 2), dtype=np.float32)),
        Tensor(np.zeros((3, 4), dtype=np.float32)),
    )
    base = make_linear(gen, 6, 4, np.float32)
    with pytest.raises(DimensionError):
        lora_forward(Tensor(np.zeros((5, 6), dtype=np.float32)), base, bad)


def test_gate_must_be_binary():
    gen = rng.stream(0, "test", "lora-gate2")
    base = make_linear(gen, 6, 4, np.float32)
    phi = LoraAdapter.create(6, 4, 2, gen, dtype=np.float32)
    with pytest.raises(ContractError):
        lora_forward(Tensor(np.zeros((5, 6), dtype=np.float32)), base, phi, gate=0.5)


# ---- layer norm ------------------------------------------------------------


def test_layer_norm_statistics():
    gen = rng.stream(0, "test", "ln")
    x = Tensor(gen.standard_normal((10, 16)).astype(np.float32) * 3 + 1)
    gamma = Tensor(np.ones(16, dtype=np.float32))
    beta = Tensor(np.zeros(16, dtype=np.float32))
    out = layer_norm(x, gamma, beta).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-5
    assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-3


def test_layer_norm_gradient():
    gen = rng.stream(0, "test", "ln-fd")
    x = gen.standard_normal((3, 5))
    g = gen.standard_normal(5)
    b = gen.standard_normal(5)
    tx = Tensor(x, requires_grad=True, dtype=np.float64)
    tg = Tensor(g, requires_grad=True, dtype=np.float64)
    tb = Tensor(b, requires_grad=True, dtype=np.float64)
    tsum(layer_norm(tx, tg, tb) ** 2).backward()

    def f(arrs):
        xv, gv, bv = arrs
        mu = xv.mean(-1, keepdims=True)
        var = ((xv - mu) ** 2).mean(-1, keepdims=True)
        out = (xv - mu) / np.sqrt(var + 1e-5) * gv + bv
        return float((out**2).sum())

    for i, t in enumerate((tx, tg, tb)):
        fd = central_diff_grad(f, [x, g, b], i)
        assert max_rel_err(t.grad, fd) <= 1e-6


# ---- attention -------------------------------------------------------------


def test_attention_single_token_reduces_to_value_path():
    gen = rng.stream(0, "test", "attn-single")
    block = make_block(gen, dim=8, heads=2, with_adv=False)
    x = Tensor(gen.standard_normal((2, 1, 8)), dtype=np.float64)
    out = attention_forward(block, x, gate=0)

    def ln_np(v, gamma, beta):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * gamma.data + beta.data

    h = ln_np(x.data, *block.ln1)
    v = lora_forward(Tensor(h, dtype=np.float64), *block.v).data
    attn = x.data + (v @ block.proj.weight.data + block.proj.bias.data)
    h2 = ln_np(attn, *block.ln2)
    from scipy.special import erf

    z = lora_forward(Tensor(h2, dtype=np.float64), *block.fc1).data
    z = 0.5 * z * (1 + erf(z / np.sqrt(2)))
    expected = attn + z @ block.fc2.weight.data + block.fc2.bias.data
    assert np.abs(out.data - expected).max() <= 1e-12


def test_attention_uniform_scores_average_values():
    gen = rng.stream(0, "test", "attn-uniform")
    block = make_block(gen, dim=8, heads=2, with_adv=False)
    # zero query weights and bias: every score identical -> uniform softmax
    block.q[0].weight.data[:] = 0
    block.q[0].bias.data[:] = 0
    block.q[1].up.data[:] = 0
    x = Tensor(gen.standard_normal((1, 4, 8)), dtype=np.float64)

    def ln_np(v, gamma, beta):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * gamma.data + beta.data

    h = ln_np(x.data, *block.ln1)
    v = lora_forward(Tensor(h, dtype=np.float64), *block.v).data
    avg = np.repeat(v.mean(axis=1, keepdims=True), 4, axis=1)
    attn_expected = x.data + (avg @ block.proj.weight.data + block.proj.bias.data)

    out = attention_forward(block, x, gate=0)
    h2 = ln_np(attn_expected, *block.ln2)
    from scipy.special import erf

    z = lora_forward(Tensor(h2, dtype=np.float64), *block.fc1).data
    z = 0.5 * z * (1 + erf(z / np.sqrt(2)))
    expected = attn_expected + z @ block.fc2.weight.data + block.fc2.bias.data
    assert np.abs(out.data - expected).max() <= 1e-9


def test_attention_vs_literal_formula_oracle():
    # 4-token global block against explicit per-head softmax(QK^T/sqrt(dh))V
    gen = rng.stream(0, "test", "attn-oracle")
    block = make_block(gen, dim=8, heads=2, with_adv=True)
    x = gen.standard_normal((2, 4, 8))
    out = attention_forward(block, Tensor(x, dtype=np.float64), gate=1).data

    def ln_np(v, gamma, beta):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * gamma.data + beta.data

    def proj(h, spec):
        base, phi, psi = spec
        y = h @ base.weight.data + base.bias.data + h @ phi.up.data @ phi.down.data
        if psi is not None:
            y = y + h @ psi.up.data @ psi.down.data
        return y

    h = ln_np(x, *block.ln1)
    q, k, v = proj(h, block.q), proj(h, block.k), proj(h, block.v)
    dh = 8 // 2
    attended = np.empty_like(q)
    for b in range(2):
        for head in range(2):
            sl = slice(head * dh, (head + 1) * dh)
            scores = q[b, :, sl] @ k[b, :, sl].T / math.sqrt(dh)
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            soft = e / e.sum(axis=-1, keepdims=True)
            attended[b, :, sl] = soft @ v[b, :, sl]
    attn = x + attended @ block.proj.weight.data + block.proj.bias.data
    h2 = ln_np(attn, *block.ln2)
    from scipy.special import erf

    z = proj(h2, block.fc1)
    z = 0.5 * z * (1 + erf(z / np.sqrt(2)))
    expected = attn + z @ block.fc2.weight.data + block.fc2.bias.data
    assert np.abs(out - expected).max() <= 1e-5


def test_windowed_attention_partition_error():
    gen = rng.stream(0, "test", "attn-window")
    block = make_block(gen, dim=8, heads=2, window=3, with_adv=False)
    x = Tensor(np.zeros((1, 16, 8)), dtype=np.float64)  # grid 4 not divisible by 3
    with pytest.raises(DimensionError):
        attention_forward(block, x)


def test_attention_parameter_gradients():
    gen = rng.stream(0, "test", "attn-fd")
    block = make_block(gen, dim=4, heads=2, window=2, with_adv=True)
    x = gen.standard_normal((1, 16, 4)) * 0.5

    def f(arrs):
        block.q[0].weight.data = arrs[0]
        out = attention_forward(block, Tensor(x, dtype=np.float64), gate=1)
        return float((out.data**2).sum())

    w0 = block.q[0].weight.data.copy()
    out = attention_forward(block, Tensor(x, dtype=np.float64), gate=1)
    tsum(out**2).backward()
    analytic = block.q[0].weight.grad.copy()
    fd = central_diff_grad(f, [w0], 0)
    block.q[0].weight.data = w0
    assert max_rel_err(analytic, fd) <= 1e-6


# ---- conv ------------------------------------------------------------------


def conv_oracle(x, w, b, stride, padding):
    """Direct 6-nested-loop cross-correlation."""
    batch, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((batch, cout, oh, ow), dtype=np.float64)
    for n in range(batch):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            acc += float(
                                xp[n, ci, oy * stride + ky, ox * stride : ox * stride + kw]
                                @ w[co, ci, ky]
                            )
                    out[n, co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return out


def test_conv_identity_kernel():
    gen = rng.stream(0, "test", "conv-id")
    x = gen.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = conv2d(Tensor(x), Tensor(w))
    assert np.array_equal(out.data, x)


def test_conv_ones_counting():
    out = conv2d(
        Tensor(np.ones((1, 1, 3, 3), dtype=np.float32)),
        Tensor(np.ones((1, 1, 3, 3), dtype=np.float32)),
    )
    assert out.shape == (1, 1, 1, 1)
    assert out.data.reshape(()) == 9.0


def test_conv_vs_naive_oracle():
    gen = rng.stream(0, "test", "conv-oracle")
    x = gen.standard_normal((2, 3, 7, 6))
    w = gen.standard_normal((4, 3, 3, 3))
    b = gen.standard_normal(4)
    out = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                 Tensor(b, dtype=np.float64), stride=2, padding=1)
    expected = conv_oracle(x, w, b, 2, 1)
    assert out.shape == expected.shape
    assert np.abs(out.data - expected).max() <= 1e-5


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32)),
               Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32)))


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)),
               Tensor(np.zeros((1, 3, 3, 3), dtype=np.float32)))


def test_conv_gradients():
    gen = rng.stream(0, "test", "conv-fd")
    x = gen.standard_normal((1, 2, 5, 5))
    w = gen.standard_normal((3, 2, 3, 3))
    b = gen.standard_normal(3)
    tx = Tensor(x, requires_grad=True, dtype=np.float64)
    tw = Tensor(w, requires_grad=True, dtype=np.float64)
    tb = Tensor(b, requires_grad=True, dtype=np.float64)
    tsum(conv2d(tx, tw, tb, stride=2, padding=1) ** 2).backward()

    def f(arrs):
        return float((conv_oracle(arrs[0], arrs[1], arrs[2], 2, 1) ** 2).sum())

    for i, t in enumerate((tx, tw, tb)):
        fd = central_diff_grad(f, [x, w, b], i)
        assert max_rel_err(t.grad, fd) <= 1e-6


# ---- resize ----------------------------------------------------------------


def test_resize_identity():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
    assert resize(x, 3, 4, "bilinear") is x


def test_resize_2x2_to_1x1_is_mean():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32))
    out = resize(x, 1, 1, "bilinear")
    assert out.data.reshape(()) == pytest.approx(2.5, abs=1e-7)


def test_nearest_roundtrip_preserves_all_binary_3x3_masks():
    # exhaustive: all 512 binary 3x3 masks survive 3->5->3 nearest exactly
    for bits in range(512):
        mask = np.array([(bits >> k) & 1 for k in range(9)], dtype=np.float32).reshape(3, 3)
        up = resize_array(mask, 5, 5, "nearest")
        back = resize_array(up, 3, 3, "nearest")
        assert np.array_equal(back, mask), bits


def test_resize_zero_target_rejected():
    with pytest.raises(ContractError):
        resample_matrix(4, 0, "bilinear")


def test_resize_gradient():
    gen = rng.stream(0, "test", "resize-fd")
    x = gen.standard_normal((2, 3, 4))
    tx = Tensor(x, requires_grad=True, dtype=np.float64)
    tsum(resize(tx, 5, 7, "bilinear") ** 2).backward()

    def f(arrs):
        rows = resample_matrix(3, 5, "bilinear", np.float64)
        cols = resample_matrix(4, 7, "bilinear", np.float64)
        out = rows @ arrs[0] @ cols.T
        return float((out**2).sum())

    fd = central_diff_grad(f, [x], 0)
    assert max_rel_err(tx.grad, fd) <= 1e-6


def test_global_avg_pool():
    x = Tensor(np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4))
    out = global_avg_pool(x)
    assert out.shape == (1, 2)
    assert np.allclose(out.data, x.data.mean(axis=(2, 3)))
