import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psfl.autodiff import Tensor, add, finite_difference_check
from psfl.channel import ChannelRealization
from psfl.errors import ConfigError, ContractError
from psfl.models import (
    FULL_SCALE_PARAMS, PARTS, ImageSpec, ModelProfile, add_positional, attention_head,
    build_model, count_parameters, desk_profile, fused_multi_head_attention, load_checkpoint,
    load_model, multi_head_attention, patch_embed, patchify, save_checkpoint, sc_forward,
    unpatchify,
)
from psfl.oracles import scalar_attention
from psfl.pld import DistillStep, adaptive_distill_loss, adaptive_semantic_loss, task_loss, total_losses


def _images(n=2, seed=0, h=16, w=16):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, h, w, 1))


# ---------------------------------------------------------------------------
# patches and positions


@pytest.mark.parametrize("h,p,n", [(4, 2, 4), (16, 4, 16)])
def test_patch_count(h, p, n):
    assert patchify(np.zeros((h, h, 1)), p).shape == (1, n, p * p)


def test_constant_image_gives_equal_rows():
    D = 4
    E = Tensor(np.vstack([np.eye(D), np.zeros((16 - D, D))]))
    Z = patch_embed(np.full((1, 16, 16, 1), 0.3), E, patch_size=4).data[0]
    assert np.all(Z == Z[0])
    np.testing.assert_allclose(Z[0], 0.3)


def test_patch_embed_rows_are_flattened_patches_times_E():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(1, 8, 8, 1))
    E = rng.standard_normal((16, 3))
    Z = patch_embed(img, Tensor(E), patch_size=4).data[0]
    # patch (row 1, col 0) covers rows 4..7, cols 0..3
    np.testing.assert_allclose(Z[2], img[0, 4:8, 0:4, 0].reshape(-1) @ E, rtol=1e-14)


def test_patchify_roundtrip():
    img = _images(3)
    back = unpatchify(Tensor(patchify(img, 4)), 16, 16, 1, 4).data
    assert np.array_equal(back, img)


def test_indivisible_image_is_config_error():
    with pytest.raises(ConfigError):
        patchify(np.zeros((10, 10, 1)), 4)
    with pytest.raises(ConfigError):
        build_model(desk_profile("GSC-M"), ImageSpec(10, 10))


def test_add_positional():
    rng = np.random.default_rng(2)
    Z0, P = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    assert np.array_equal(add_positional(Tensor(Z0), Tensor(np.zeros((4, 3)))).data, Z0)
    assert np.array_equal(add_positional(Tensor(np.zeros((4, 3))), Tensor(P)).data, P)
    got = add_positional(Tensor(Z0), Tensor(P)).data
    for i in range(4):
        for j in range(3):
            assert got[i, j] == Z0[i, j] + P[i, j]
    with pytest.raises(ContractError):
        add_positional(Tensor(Z0), Tensor(np.zeros((3, 3))))


# ---------------------------------------------------------------------------
# attention


def test_single_token_returns_value_row():
    rng = np.random.default_rng(0)
    Z, Wq, Wk, Wv = (Tensor(rng.standard_normal(s)) for s in ((1, 4), (4, 2), (4, 2), (4, 2)))
    np.testing.assert_allclose(attention_head(Z, Wq, Wk, Wv).data, Z.data @ Wv.data, rtol=1e-15)


def test_zero_scores_average_values():
    rng = np.random.default_rng(0)
    Z, Wv = rng.standard_normal((5, 4)), rng.standard_normal((4, 2))
    zero = Tensor(np.zeros((4, 2)))
    out = attention_head(Tensor(Z), zero, zero, Tensor(Wv)).data
    np.testing.assert_allclose(out, np.tile((Z @ Wv).mean(axis=0), (5, 1)), rtol=1e-13)


def test_attention_matches_oracle_table(oracle_rows):
    for row in oracle_rows("attention"):
        i = row["inputs"]
        got = attention_head(*(Tensor(i[k]) for k in ("Z", "Wq", "Wk", "Wv"))).data
        np.testing.assert_allclose(got, row["expected"], rtol=1e-12, err_msg=row["case"])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_attention_rows_are_convex_combinations(seed, n):
    rng = np.random.default_rng(seed)
    Z, Wq, Wk, Wv = (rng.standard_normal(s) * 2 for s in ((n, 4), (4, 2), (4, 2), (4, 2)))
    out = attention_head(*(Tensor(a) for a in (Z, Wq, Wk, Wv))).data
    V = Z @ Wv
    # recover the weights and check they are a probability vector
    s = (Z @ Wq) @ (Z @ Wk).T / math.sqrt(2)
    A = np.exp(s - s.max(axis=1, keepdims=True))
    A /= A.sum(axis=1, keepdims=True)
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out, A @ V, rtol=1e-10, atol=1e-12)
    # and every output coordinate lies within the range of V's column
    assert np.all(out >= V.min(axis=0) - 1e-12) and np.all(out <= V.max(axis=0) + 1e-12)


def test_one_head_with_identity_output_equals_attention_head():
    rng = np.random.default_rng(3)
    Z, Wq, Wk, Wv = (Tensor(rng.standard_normal(s)) for s in ((3, 4), (4, 4), (4, 4), (4, 4)))
    out = multi_head_attention(Z, [(Wq, Wk, Wv)], Tensor(np.eye(4))).data
    np.testing.assert_allclose(out, attention_head(Z, Wq, Wk, Wv).data, rtol=1e-15)


def test_identical_heads_give_equal_halves():
    rng = np.random.default_rng(4)
    Z, Wq, Wk, Wv = (Tensor(rng.standard_normal(s)) for s in ((3, 4), (4, 2), (4, 2), (4, 2)))
    cat = multi_head_attention(Z, [(Wq, Wk, Wv)] * 2, Tensor(np.eye(4))).data
    assert np.array_equal(cat[:, :2], cat[:, 2:])


def test_multi_head_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    Z = rng.standard_normal((2, 4))
    heads = [tuple(rng.standard_normal((4, 2)) for _ in range(3)) for _ in range(2)]
    Wo = rng.standard_normal((4, 4))
    cat = np.hstack([np.array(scalar_attention(Z.tolist(), *(w.tolist() for w in h))) for h in heads])
    got = multi_head_attention(Tensor(Z), [tuple(map(Tensor, h)) for h in heads], Tensor(Wo)).data
    np.testing.assert_allclose(got, cat @ Wo, rtol=1e-12)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_fused_attention_equals_per_head(heads):
    rng = np.random.default_rng(heads)
    B, N, D = 2, 5, 8
    d = D // heads
    Z = rng.standard_normal((B, N, D))
    Wq, Wk, Wv, Wo = (rng.standard_normal((D, D)) for _ in range(4))
    fused = fused_multi_head_attention(*(Tensor(a) for a in (Z, Wq, Wk, Wv, Wo)), heads).data
    for b in range(B):
        per = [(Tensor(Wq[:, i * d:(i + 1) * d]), Tensor(Wk[:, i * d:(i + 1) * d]),
                Tensor(Wv[:, i * d:(i + 1) * d])) for i in range(heads)]
        ref = multi_head_attention(Tensor(Z[b]), per, Tensor(Wo)).data
        np.testing.assert_allclose(fused[b], ref, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# full models


@pytest.mark.parametrize("family", ["GSC-M", "GSC-L", "GSC-H", "CSC"])
def test_forward_shapes_and_probabilities(family):
    model = build_model(desk_profile(family), seed=1)
    out = sc_forward(model, _images(3))
    assert out.m_hat.shape == (3, 16, 16, 1)
    assert out.S.shape == out.C.shape == (3, 32)
    assert np.all((out.m_hat.data >= 0) & (out.m_hat.data <= 1))
    np.testing.assert_allclose(out.y_hat.data.sum(axis=1), 1.0, atol=1e-9)


def test_forward_is_deterministic():
    model = build_model(desk_profile("GSC-M"), seed=2)
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    a = model.forward(_images(), ChannelRealization.sample((2, 32), 10.0, rng_a))
    b = model.forward(_images(), ChannelRealization.sample((2, 32), 10.0, rng_b))
    assert a.m_hat.data.tobytes() == b.m_hat.data.tobytes()
    assert a.y_hat.data.tobytes() == b.y_hat.data.tobytes()


def test_channel_dimension_mismatch_is_contract_error():
    model = build_model(desk_profile("CSC"))
    bad = ChannelRealization.sample((2, 16), 10.0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        model.forward(_images(), bad)


def test_forward_step_through_matches_stages():
    model = build_model(desk_profile("CSC"), seed=4)
    ch = ChannelRealization.sample((2, 32), 5.0, np.random.default_rng(1))
    x = _images()
    out = model.forward(x, ch)
    S = model.semantic_encode(x)
    X = model.channel_encode(S)
    Y = X.data + ch.noise_for(X.data)
    C = model.channel_decode(Tensor(Y))
    m_hat = model.semantic_decode(C)
    np.testing.assert_array_equal(out.Y.data, Y)
    np.testing.assert_array_equal(out.m_hat.data, m_hat.data)
    np.testing.assert_array_equal(out.y_hat.data, model.classify(m_hat).data)


def test_same_seed_gives_identical_parameters():
    a, b = build_model(desk_profile("GSC-L"), seed=7), build_model(desk_profile("GSC-L"), seed=7)
    assert a.params.equals(b.params)
    assert not a.params.equals(build_model(desk_profile("GSC-L"), seed=8).params)


def test_parameter_counts_increase_with_depth():
    counts = [count_parameters(desk_profile(f)) for f in ("GSC-M", "GSC-L", "GSC-H")]
    assert counts[0] < counts[1] < counts[2]
    for f in ("GSC-M", "CSC"):
        assert count_parameters(desk_profile(f)) == build_model(desk_profile(f)).parameter_count()


def test_full_scale_reference_counts():
    assert FULL_SCALE_PARAMS == {"GSC-M": 112_442_112, "GSC-L": 330_287_872,
                                 "GSC-H": 657_924_684, "CSC": 54_721_065}
    v = list(FULL_SCALE_PARAMS.values())
    assert v[0] < v[1] < v[2]


def test_csc_decoder_has_three_transposed_convolutions():
    names = build_model(desk_profile("CSC")).params.names()
    assert sorted({n.rsplit(".", 1)[0] for n in names if "deconv" in n}) == \
        ["sem_dec.deconv1", "sem_dec.deconv2", "sem_dec.deconv3"]


@pytest.mark.parametrize("family", ["GSC-M", "CSC"])
def test_parts_are_a_disjoint_exact_cover(family):
    model = build_model(desk_profile(family))
    parts = model.parts()
    assert set(parts) == set(PARTS)
    flat = [n for names in parts.values() for n in names]
    assert sorted(flat) == sorted(model.params.names())
    assert len(flat) == len(set(flat))
    assert set(model.fl_names()) == set(flat) - set(parts["classifier"])


def test_invalid_profiles():
    with pytest.raises(ConfigError):
        ModelProfile("GSC-M", 2, embed_dim=15, heads=2)
    with pytest.raises(ConfigError):
        ModelProfile("GSC-X", 2)
    with pytest.raises(ConfigError):
        ModelProfile("GSC-M", 0)
    with pytest.raises(ConfigError):
        desk_profile("RNN")


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(desk_profile("GSC-M"), seed=3)
    mask = model.params.flat_mask()
    mask[::3] = False
    model.params.set_flat_mask(mask)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.params, model.profile, model.image, {"seed": 3})
    params, header = load_checkpoint(path)
    assert params.equals(model.params)
    assert params.prunable == model.params.prunable
    assert header["version"] == 1
    back = load_model(path)
    assert back.profile == model.profile and back.image == model.image
    np.testing.assert_array_equal(back.forward(_images()).m_hat.data, model.forward(_images()).m_hat.data)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ContractError):
        load_checkpoint(p)
    model = build_model(desk_profile("CSC"))
    save_checkpoint(p, model.params)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ContractError):
        load_checkpoint(p)
    save_checkpoint(p, model.params)
    with pytest.raises(ContractError):
        load_model(p)


def student_loss_error(seed):
    """Relative finite-difference error of the full student loss (task + distillation + semantic)."""
    mentor = build_model(desk_profile("GSC-M", embed_dim=8, semantic_dim=8), seed=2 * seed + 1)
    student = build_model(desk_profile("CSC", semantic_dim=8), seed=2 * seed + 2)
    rng = np.random.default_rng(seed)
    x = _images(1, seed=seed + 5)
    y = np.eye(10)[[rng.integers(0, 10)]]
    ch_m = ChannelRealization.sample((1, 8), 10.0, rng)
    out_m = mentor.forward(x, ch_m)
    # noise is a constant in the backward pass, so pin its power for the probe too
    X = student.channel_encode(student.semantic_encode(x)).data
    ch_s = ChannelRealization.sample((1, 8), 10.0, rng, reference_power=(X * X).mean(axis=-1, keepdims=True))

    base = DistillStep.from_outputs(x, y, out_m, student.forward(x, ch_s))
    t_m, t_s = task_loss(base, "mentor").item(), task_loss(base, "student").item()

    # the task-loss denominators are weights, not graph nodes: hold them fixed
    def loss():
        step = DistillStep.from_outputs(x, y, out_m, student.forward(x, ch_s))
        return add(add(task_loss(step, "student"), adaptive_distill_loss(step, "student", counterpart_task=t_m)),
                   adaptive_semantic_loss(step, "student", task_sum=t_m + t_s))

    assert loss().item() == pytest.approx(total_losses(base)[1].total.item(), rel=1e-14)
    return finite_difference_check(loss, student.params.tensors, epsilon=1e-6, samples=60, seed=seed)


def test_student_total_loss_gradcheck():
    assert student_loss_error(0) < 1e-3
