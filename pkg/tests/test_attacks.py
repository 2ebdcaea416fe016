import numpy as np
import pytest

from fsam import rng
from fsam.attacks import (
    AdvPair,
    AttackSpec,
    craft,
    embed_distance,
    fgsm,
    is_feasible,
    linf_levels,
    mi_fgsm,
    quantize_levels,
    upstream_encoder,
)
from fsam.data import CorpusSpec, build_sample
from fsam.encoder import EncoderConfig, init_encoder_params
from fsam.tensor import ContractError, Tensor

SMALL = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=4,
                      num_heads=2, window_size=2, global_blocks=(0, 1, 2, 3),
                      lora_rank=4)
DESK = EncoderConfig()


def small_encoder(seed=0):
    params = init_encoder_params(SMALL, seed=seed)
    params.set_trainable([])
    return params, upstream_encoder(SMALL, params)


def grid_images(seed, batch=4, size=16):
    gen = rng.stream(seed, "test", "attack-imgs")
    raw = gen.uniform(0, 1, size=(batch, 3, size, size))
    return (np.rint(raw * 255) / np.float32(255.0)).astype(np.float32)


# ---- spec validation ---------------------------------------------------------


def test_attack_spec_validation():
    with pytest.raises(ContractError):
        AttackSpec("pgd", epsilon=8)
    with pytest.raises(ContractError):
        AttackSpec("fgsm", epsilon=-1)
    with pytest.raises(ContractError):
        AttackSpec("mifgsm", epsilon=8, distance="l7")
    assert AttackSpec("mifgsm", epsilon=8).resolved_iterations == 8
    assert AttackSpec("fgsm", epsilon=12).resolved_iterations == 1


# ---- embed_distance ----------------------------------------------------------


def test_distance_of_identical_embeddings_is_zero():
    gen = rng.stream(0, "test", "dist")
    f = Tensor(gen.standard_normal((4, 3, 3)).astype(np.float32))
    assert embed_distance(f, f, "l2").item() == 0.0
    assert embed_distance(f, f, "neg-cosine").item() == 0.0


def test_neg_cosine_of_antiparallel_is_two():
    f = Tensor(np.ones((2, 2), dtype=np.float32))
    g = Tensor(-np.ones((2, 2), dtype=np.float32))
    assert embed_distance(f, g, "neg-cosine").item() == pytest.approx(2.0, abs=1e-6)


def test_l2_matches_hand_sum():
    fa = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32))
    fb = Tensor(np.array([0.0, 0.0, 0.0], dtype=np.float32))
    assert embed_distance(fa, fb, "l2").item() == pytest.approx((1 + 4 + 9) / 3, rel=1e-6)


# ---- feasibility -------------------------------------------------------------


def test_all_emitted_images_are_feasible():
    _, enc = small_encoder()
    imgs = grid_images(1)
    for eps in (2, 8):
        for pair in mi_fgsm(imgs, enc, AttackSpec("mifgsm", epsilon=eps, step=2)):
            assert is_feasible(pair.clean, pair.adversarial, eps)
            assert linf_levels(pair.clean, pair.adversarial) <= eps
            assert pair.adversarial.min() >= 0.0 and pair.adversarial.max() <= 1.0


def test_attack_actually_moves_pixels():
    _, enc = small_encoder()
    pair = mi_fgsm(grid_images(2)[0], enc, AttackSpec("mifgsm", epsilon=8, step=2))
    assert linf_levels(pair.clean, pair.adversarial) > 0
    assert pair.distance > 0


def test_epsilon_zero_returns_clean_image():
    _, enc = small_encoder()
    img = grid_images(3)[0]
    pair = fgsm(img, enc, AttackSpec("fgsm", epsilon=0))
    assert pair.adversarial.tobytes() == img.tobytes()


def test_zero_iterations_returns_clean_with_distance():
    _, enc = small_encoder()
    img = grid_images(4)[0]
    pair = mi_fgsm(img, enc, AttackSpec("mifgsm", epsilon=8, iterations=0))
    assert pair.adversarial.tobytes() == img.tobytes()
    assert pair.distance == 0.0


def test_input_insensitive_encoder_leaves_image_unchanged():
    # zero patch projection: embedding ignores pixels -> sign(0)=0 throughout
    params = init_encoder_params(SMALL, seed=5)
    params.tensor("enc.patch.weight").data[:] = 0
    params.set_trainable([])
    enc = upstream_encoder(SMALL, params)
    img = grid_images(5)[0]
    pair = mi_fgsm(img, enc, AttackSpec("mifgsm", epsilon=8, step=2))
    assert pair.adversarial.tobytes() == img.tobytes()


# ---- collapse / determinism ----------------------------------------------------


def test_fgsm_equals_degenerate_mifgsm_bitwise():
    _, enc = small_encoder()
    imgs = grid_images(6)
    a = fgsm(imgs, enc, AttackSpec("fgsm", epsilon=8))
    b = mi_fgsm(imgs, enc, AttackSpec("mifgsm", epsilon=8, step=8, iterations=1,
                                      momentum=0.0))
    for pa, pb in zip(a, b):
        assert pa.adversarial.tobytes() == pb.adversarial.tobytes()
        assert pa.distance == pb.distance


def test_attack_determinism():
    _, enc = small_encoder()
    imgs = grid_images(7)
    spec = AttackSpec("mifgsm", epsilon=4, step=2)
    a = mi_fgsm(imgs, enc, spec)
    b = mi_fgsm(imgs, enc, spec)
    for pa, pb in zip(a, b):
        assert pa.adversarial.tobytes() == pb.adversarial.tobytes()
        assert pa.trajectory == pb.trajectory


def test_method_mismatch_rejected():
    _, enc = small_encoder()
    with pytest.raises(ContractError):
        mi_fgsm(grid_images(8), enc, AttackSpec("fgsm", epsilon=8))
    with pytest.raises(ContractError):
        fgsm(grid_images(8), enc, AttackSpec("mifgsm", epsilon=8))


# ---- transferability isolation --------------------------------------------------


def test_attack_reads_only_theta():
    params_a, enc_a = small_encoder(seed=9)
    params_b = init_encoder_params(SMALL, seed=9)
    # poison every non-theta group in the second copy
    for name, t in params_b.items(["phi", "psi"]):
        t.data = np.full_like(t.data, np.nan)
    params_b.set_trainable([])
    enc_b = upstream_encoder(SMALL, params_b)

    theta_before = params_a.checksum(["theta"])
    imgs = grid_images(9)
    spec = AttackSpec("mifgsm", epsilon=8, step=2)
    pairs_a = mi_fgsm(imgs, enc_a, spec)
    pairs_b = mi_fgsm(imgs, enc_b, spec)
    for pa, pb in zip(pairs_a, pairs_b):
        assert np.all(np.isfinite(pb.adversarial))
        assert pa.adversarial.tobytes() == pb.adversarial.tobytes()
    assert params_a.checksum(["theta"]) == theta_before


# ---- desk-scale calibration (paired comparison oracle) ---------------------------


@pytest.fixture(scope="module")
def desk_pairs():
    params = init_encoder_params(DESK, seed=0)
    params.set_trainable([])
    enc = upstream_encoder(DESK, params)
    spec = CorpusSpec(counts={"train": 50}, image_size=64, forged_fraction=0.5, seed=1)
    imgs = np.stack([build_sample("train", i, spec).pixels for i in range(50)])
    mi = mi_fgsm(imgs, enc, AttackSpec("mifgsm", epsilon=8, step=2))
    fg = fgsm(imgs, enc, AttackSpec("fgsm", epsilon=8))
    return mi, fg


def test_iterative_attack_beats_single_step_on_most_images(desk_pairs):
    mi, fg = desk_pairs
    wins = sum(m.distance > f.distance for m, f in zip(mi, fg))
    assert wins >= 0.8 * len(mi)


def test_distance_trajectory_mostly_non_decreasing(desk_pairs):
    mi, _ = desk_pairs
    inc = tot = 0
    for pair in mi:
        for a, b in zip(pair.trajectory, pair.trajectory[1:]):
            tot += 1
            inc += b >= a
    assert inc / tot >= 0.9


def test_trajectory_records_final_distance(desk_pairs):
    mi, _ = desk_pairs
    for pair in mi:
        assert pair.trajectory[-1] == pair.distance
        assert len(pair.trajectory) == pair.spec.resolved_iterations + 1
