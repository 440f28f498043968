import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, tiny_cond, tiny_model
from helpers import directional_errors
from jamflow import autograd as ag
from jamflow.condnet import (
    CondSet,
    ConditionEmbeds,
    JamModel,
    ModelConfig,
    cfg_velocity,
    draw_dropout,
    dropout_conditions,
    sample_latents,
)
from jamflow.flowcore import euler_sample, fm_loss
from jamflow.lyricalign import SONG_FILLER


def _v(model, z, t, cond):
    return model(z, t, cond).data


# ---------------------------------------------------------------- config


def test_residual_layers_is_half_depth():
    assert ModelConfig(n_layers=4).residual_layers == 2
    assert ModelConfig(n_layers=5, hidden=64).residual_layers == 2
    with pytest.raises(ValueError):
        ModelConfig(hidden=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(pos_kernel=4)


def test_injection_parameters_only_for_first_half():
    m = JamModel(ModelConfig(n_layers=6, hidden=16, heads=2, ffn_hidden=16))
    assert sorted(k for k in m.params if k.startswith("inject.")) == ["inject.0.w", "inject.1.w", "inject.2.w"]
    assert "pad_bias" in m.params
    assert "pad_bias" not in JamModel(dataclasses.replace(TINY, use_pad_bias=False)).params


# ---------------------------------------------------------------- lyric encoder


def test_encode_lyrics_length_and_divisibility(rng):
    m = tiny_model()
    out = m.encode_lyrics(rng.integers(0, TINY.vocab, (2, 14)))
    assert out.shape == (2, 7, TINY.lyric_dim)
    with pytest.raises(ValueError, match="divisible"):
        m.encode_lyrics(np.zeros((1, 7), int))
    with pytest.raises(ValueError, match="vocabulary"):
        m.encode_lyrics(np.full((1, 4), TINY.vocab))


@pytest.mark.parametrize("cell", [0, 5, 10, 19])
def test_encode_lyrics_locality(cell, rng):
    m = tiny_model()
    r, k = TINY.upsample, TINY.lyric_kernel
    grid = rng.integers(0, TINY.vocab, (1, 20))
    other = grid.copy()
    other[0, cell] = (other[0, cell] + 1) % TINY.vocab
    a, b = m.encode_lyrics(grid).data[0], m.encode_lyrics(other).data[0]
    # the edit reaches grid cells cell +- k//2, which fold into frames of r cells
    lo, hi = max(0, cell - k // 2) // r, min(19, cell + k // 2) // r
    changed = np.flatnonzero(np.abs(a - b).max(axis=1) > 0)
    assert changed.size > 0
    assert changed.min() >= lo and changed.max() <= hi


def test_encode_lyrics_identity_configuration(rng):
    cfg = dataclasses.replace(TINY, upsample=1)
    m = JamModel(cfg, np.float64)
    m.params["lyric.conv.w"].data[...] = 0.0
    m.params["lyric.down.w"].data = np.eye(cfg.lyric_dim)[None]
    grid = rng.integers(0, cfg.vocab, (2, 9))
    np.testing.assert_array_equal(m.encode_lyrics(grid).data, m.params["lyric.embed"].data[grid])


def test_all_song_filler_gives_constant_rows():
    out = tiny_model().encode_lyrics(np.full((1, 16), SONG_FILLER)).data[0]
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), rtol=0, atol=1e-14)


# ---------------------------------------------------------------- duration encoder


def test_encode_duration():
    m = tiny_model()
    a, b, c = (m.encode_duration(np.array([x])).data for x in (10.0, 10.0, 200.0))
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a - c) > 0


def test_duration_parameters_pass_gradient_check(rng):
    m = tiny_model(4)
    cond = tiny_cond(rng)
    z1, z0 = rng.standard_normal((2, 6, 4)), rng.standard_normal((2, 6, 4))
    t = np.array([0.3, 0.6])
    errs = directional_errors(m, lambda: fm_loss(m, z1, z0, t, cond), rng, n_dirs=10, h=1e-5, groups=["dur.w", "dur.b"])
    assert errs.max() < 1e-4


# ---------------------------------------------------------------- fusion


def _embeds(m, cond):
    return m.embed_conditions(cond)


def test_fuse_zero_weights_leaves_positional_bias(rng):
    m = tiny_model()
    m.params["fuse.w"].data[...] = 0.0
    m.params["fuse.b"].data[...] = 0.0
    cond = tiny_cond(rng)
    out = m.fuse(rng.standard_normal((2, 6, 4)), _embeds(m, cond)).data
    np.testing.assert_array_equal(out, np.broadcast_to(m.params["pos.b"].data, out.shape))


def test_fuse_is_frame_equivariant_without_positional_conv(rng):
    m = tiny_model()
    m.params["pos.w"].data[...] = 0.0
    cond = tiny_cond(rng, batch=1)
    z = rng.standard_normal((1, 6, 4))
    emb = _embeds(m, cond)
    perm = np.array([3, 1, 2, 0, 5, 4])
    permuted = ConditionEmbeds(ag.Tensor(emb.lyric.data[:, perm]), emb.style, emb.duration, emb.pad_mask[:, perm])
    np.testing.assert_allclose(m.fuse(z[:, perm], permuted).data, m.fuse(z, emb).data[:, perm], atol=1e-13)


def test_fuse_swap_only_disturbs_conv_windows(rng):
    m = JamModel(dataclasses.replace(TINY, pos_kernel=3), np.float64)
    cond = tiny_cond(rng, batch=1, frames=12, valid=[12])
    z = rng.standard_normal((1, 12, 4))
    emb = _embeds(m, cond)
    perm = np.arange(12)
    perm[[2, 3]] = [3, 2]
    permuted = ConditionEmbeds(ag.Tensor(emb.lyric.data[:, perm]), emb.style, emb.duration, emb.pad_mask[:, perm])
    diff = np.abs(m.fuse(z[:, perm], permuted).data - m.fuse(z, emb).data[:, perm]).max(axis=-1)[0]
    assert diff[5:].max() < 1e-13 and diff[0] < 1e-13
    assert diff[1:5].max() > 0


def test_dropped_style_matters_iff_style_weights_nonzero(rng):
    m = tiny_model()
    cond = tiny_cond(rng)
    z = rng.standard_normal((2, 6, 4))
    dropped = cond.with_presence(style=False)
    a, b = m.fuse(z, _embeds(m, cond)).data, m.fuse(z, _embeds(m, dropped)).data
    assert np.abs(a - b).max() > 0
    lo = TINY.latent_channels + TINY.lyric_dim
    m.params["fuse.w"].data[lo : lo + TINY.style_dim] = 0.0
    a, b = m.fuse(z, _embeds(m, cond)).data, m.fuse(z, _embeds(m, dropped)).data
    np.testing.assert_array_equal(a, b)


def test_fuse_rejects_bad_shapes(rng):
    m = tiny_model()
    emb = _embeds(m, tiny_cond(rng))
    with pytest.raises(ValueError):
        m.fuse(np.zeros((2, 6, 5)), emb)
    with pytest.raises(ValueError):
        m.fuse(np.zeros((2, 5, 4)), emb)


# ---------------------------------------------------------------- residual injection and padding bias


def test_residual_inject_layers(rng):
    m = tiny_model()
    x = ag.Tensor(rng.standard_normal((1, 6, TINY.lyric_dim)))
    assert m.residual_inject(x, 1) is not None
    assert m.residual_inject(x, 2) is None
    for bad in (0, 3):
        with pytest.raises(ValueError):
            m.residual_inject(x, bad)


def test_top_block_is_plain(rng):
    m = tiny_model()
    cond = tiny_cond(rng)
    z, t = rng.standard_normal((2, 6, 4)), np.array([0.4, 0.6])
    out = m(z, t, cond).data
    # recompute by hand with the injection applied after block 1 only
    emb = m.embed_conditions(cond)
    x = m.fuse(z, emb)
    from jamflow.condnet import time_features

    x = x + ag.reshape(ag.matmul(time_features(t, TINY.time_features), m.params["time.w"]) + m.params["time.b"], (2, 1, -1))
    res = m.lyric_residual_input(emb)
    x = m.block(x, 0) + ag.matmul(res, m.params["inject.0.w"])
    x = m.block(x, 1)
    manual = (ag.matmul(x, m.params["out.w"]) + m.params["out.b"]).data
    np.testing.assert_array_equal(out, manual)


def test_fully_masked_residual(rng):
    m = tiny_model()
    cond = tiny_cond(rng, batch=1, valid=[0])
    emb = m.embed_conditions(cond)
    got = m.residual_inject(m.lyric_residual_input(emb), 1).data
    want = (emb.lyric.data + m.params["pad_bias"].data) @ m.params["inject.0.w"].data
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-14)


def test_pad_bias_gradient_zero_without_padding(rng):
    m = tiny_model()
    cond = tiny_cond(rng, valid=[6, 6])
    assert not cond.pad_mask.any()
    z1, z0 = rng.standard_normal((2, 6, 4)), rng.standard_normal((2, 6, 4))
    m.zero_grad()
    fm_loss(m, z1, z0, np.array([0.3, 0.8]), cond).backward()
    grads = m.grads()
    assert np.array_equal(grads["pad_bias"], np.zeros(TINY.lyric_dim))
    assert np.abs(grads["inject.0.w"]).max() > 0

    padded = tiny_cond(np.random.default_rng(1234), valid=[4, 5])
    m.zero_grad()
    fm_loss(m, z1, z0, np.array([0.3, 0.8]), padded).backward()
    assert np.abs(m.grads()["pad_bias"]).max() > 0


def test_masked_pathway_ablation(rng):
    m = tiny_model()
    a = tiny_cond(rng, valid=[6, 6])
    b = dataclasses.replace(a, pad_mask=np.arange(6)[None, :] >= np.array([[3], [4]]))
    z, t = rng.standard_normal((2, 6, 4)), np.array([0.5, 0.5])
    assert np.abs(_v(m, z, t, a) - _v(m, z, t, b)).max() > 0
    m.params["pad_bias"].data[...] = 0.0
    np.testing.assert_array_equal(_v(m, z, t, a), _v(m, z, t, b))


def test_model_without_pad_bias_ignores_mask(rng):
    m = JamModel(dataclasses.replace(TINY, use_pad_bias=False), np.float64)
    a = tiny_cond(rng, valid=[6, 6])
    b = dataclasses.replace(a, pad_mask=np.ones((2, 6), bool))
    z, t = rng.standard_normal((2, 6, 4)), np.array([0.2, 0.9])
    np.testing.assert_array_equal(_v(m, z, t, a), _v(m, z, t, b))


# ---------------------------------------------------------------- forward


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(2, 9), st.integers(1, 3), st.booleans())
def test_forward_shape_contract(n_layers, heads, frames, batch, pad_bias):
    cfg = dataclasses.replace(TINY, n_layers=n_layers, heads=heads, hidden=4 * heads, use_pad_bias=pad_bias)
    m = JamModel(cfg, np.float64)
    rng = np.random.default_rng(frames)
    cond = tiny_cond(rng, batch=batch, frames=frames, valid=[frames - 1] * batch)
    out = m(rng.standard_normal((batch, frames, 4)), np.full(batch, 0.5), cond)
    assert out.shape == (batch, frames, 4)
    assert np.isfinite(out.data).all()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_activation_names_the_layer(rng):
    m = tiny_model()
    m.params["blocks.1.wo"].data[...] = np.inf
    with pytest.raises(FloatingPointError, match="layer 2"):
        m(rng.standard_normal((2, 6, 4)), np.array([0.5, 0.5]), tiny_cond(rng))


def test_every_parameter_group_passes_gradient_check(rng):
    m = tiny_model(5)
    cond = tiny_cond(rng, batch=3, valid=[4, 5, 3], lyric=np.array([True, True, False]), style=np.array([True, False, False]))
    z1, z0 = rng.standard_normal((3, 6, 4)), rng.standard_normal((3, 6, 4))
    t = np.array([0.15, 0.5, 0.8])
    m.zero_grad()
    fm_loss(m, z1, z0, t, cond).backward()
    for name, g in m.grads().items():
        assert np.abs(g).max() > 0, f"{name} received no gradient"
    for name in m.params:
        errs = directional_errors(m, lambda: fm_loss(m, z1, z0, t, cond), rng, n_dirs=2, h=1e-5, groups=[name])
        assert errs.max() < 1e-4, name


def test_null_condition_consistency(rng):
    m = tiny_model()
    cond = tiny_cond(rng)
    z, t = rng.standard_normal((2, 6, 4)), np.array([0.3, 0.7])
    dropped = cond.with_presence(style=False, lyric=False)
    emb = m.embed_conditions(cond)
    B, l = 2, 6
    manual = ConditionEmbeds(
        ag.Tensor(np.broadcast_to(m.params["null.lyric"].data, (B, l, TINY.lyric_dim)).copy()),
        ag.Tensor(np.broadcast_to(m.params["null.style"].data, (B, TINY.style_dim)).copy()),
        emb.duration,
        emb.pad_mask,
    )
    np.testing.assert_array_equal(m.velocity(z, t, manual).data, m(z, t, dropped).data)


# ---------------------------------------------------------------- dropout


def test_dropout_statistics():
    drop_s, drop_l = draw_dropout(np.random.default_rng(0), 1_000_000)
    assert abs(drop_s.mean() - 0.10) < 0.003
    assert abs(drop_l.mean() - 0.05) < 0.003
    assert not (drop_l & ~drop_s).any()


def test_dropout_is_seeded_and_can_be_disabled(rng):
    cond = tiny_cond(rng, batch=64 // 32)
    big = CondSet.concat([cond] * 500)
    a = dropout_conditions(np.random.default_rng(3), big)
    b = dropout_conditions(np.random.default_rng(3), big)
    np.testing.assert_array_equal(a.style_present, b.style_present)
    np.testing.assert_array_equal(a.lyric_present, b.lyric_present)
    assert not a.style_present.all()
    off = dropout_conditions(np.random.default_rng(3), big, 0.0, 0.0)
    assert off.style_present.all() and off.lyric_present.all()
    assert (a.lyric_present | ~a.style_present).all()


# ---------------------------------------------------------------- guidance


class CountingField:
    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, z, t, cond):
        self.calls += 1
        return self.model(z, t, cond)


@pytest.mark.parametrize("scales,branch", [((1, 1), (True, True)), ((0, 0), (False, False)), ((1, 0), (True, False))])
def test_cfg_identities(scales, branch, rng):
    m = tiny_model()
    cond = tiny_cond(rng)
    z, t = rng.standard_normal((2, 6, 4)), np.array([0.25, 0.75])
    field = CountingField(m)
    got = cfg_velocity(field, z, t, cond, *scales)
    assert field.calls == 3
    style, lyric = branch
    want = _v(m, z, t, cond.with_presence(style=style, lyric=lyric))
    np.testing.assert_array_equal(got, want)


def test_cfg_general_scales_match_telescoped_form(rng):
    m = tiny_model()
    cond = tiny_cond(rng)
    z, t = rng.standard_normal((2, 6, 4)), np.array([0.25, 0.75])
    v00 = _v(m, z, t, cond.with_presence(style=False, lyric=False))
    v10 = _v(m, z, t, cond.with_presence(lyric=False))
    v11 = _v(m, z, t, cond)
    a_s, a_l = 2.5, 4.0
    want = v00 + a_s * (v10 - v00) + a_l * (v11 - v10)
    np.testing.assert_allclose(cfg_velocity(m, z, t, cond, a_s, a_l), want, rtol=1e-12, atol=1e-12)


def test_unit_scales_sample_equals_conditional_euler(rng):
    m = tiny_model()
    cond = tiny_cond(rng)
    z0 = rng.standard_normal((2, 6, 4))
    np.testing.assert_array_equal(sample_latents(m, cond, z0, 5), euler_sample(m, z0, 5, cond))
