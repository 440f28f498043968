import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jamflow import autograd as ag
from jamflow import checkpoint
from jamflow.checkpoint import MAGIC, CheckpointError
from jamflow.config import ConfigError, RunConfig, from_flat, load_config, to_flat
from jamflow.optim import AdamW, OptimConfig, lr_at

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


# ---------------------------------------------------------------- container


arrays_f32 = st.dictionaries(
    st.text("abcxyz.", min_size=1, max_size=6),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(-1e6, 1e6, width=32)),
    max_size=4,
)


@settings(max_examples=100, deadline=None)
@given(arrays_f32, st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=3))
def test_container_round_trip(arrays, meta):
    blob = checkpoint.to_bytes(arrays, meta)
    back, meta_back = checkpoint.from_bytes(blob)
    assert meta_back == meta
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == np.float32 and back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)
    # re-encoding what was read gives the same bytes
    assert checkpoint.to_bytes(back, meta_back) == blob


def test_container_layout(tmp_path):
    blob = checkpoint.save(tmp_path / "a.ckpt", {"w": np.arange(3.0)}, {"b": 1, "a": 2})
    assert blob[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = blob[16 : 16 + hlen].decode()
    assert header.index('"a"') < header.index('"b"')
    assert json.loads(header)["format_version"] == checkpoint.FORMAT_VERSION
    assert blob[16 + hlen :] == np.arange(3.0, dtype="<f4").tobytes()
    assert (tmp_path / "a.ckpt").read_bytes() == blob
    arrays, meta = checkpoint.load(tmp_path / "a.ckpt")
    assert meta == {"a": 2, "b": 1}


def test_container_errors(tmp_path):
    blob = checkpoint.to_bytes({"w": np.ones(4)}, {})
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.from_bytes(b"NOTJAMFL" + blob[8:])
    with pytest.raises(CheckpointError, match="past end"):
        checkpoint.from_bytes(blob[:-4])
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen])
    header["format_version"] = 99
    raw = json.dumps(header).encode()
    with pytest.raises(CheckpointError, match="format_version"):
        checkpoint.from_bytes(MAGIC + struct.pack("<Q", len(raw)) + raw + blob[16 + hlen :])
    with pytest.raises(CheckpointError, match="header"):
        checkpoint.from_bytes(MAGIC + struct.pack("<Q", 3) + b"{x}")
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "missing.ckpt")


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json")))
def test_shipped_configs_load_and_round_trip(name):
    cfg = load_config(CONFIGS / name)
    assert from_flat(to_flat(cfg)) == cfg
    json.dumps(to_flat(cfg))


def test_overrides_win_and_none_is_ignored():
    cfg = load_config(CONFIGS / "smoke.json", **{"seed": 9, "optim.steps": None})
    assert cfg.seed == 9
    assert cfg.optim.steps == 20


@pytest.mark.parametrize(
    "obj,key",
    [
        ({"model.hiden": 3}, "model.hiden"),
        ({"nosuch.x": 1}, "nosuch.x"),
        ({"seeds": 1}, "seeds"),
        ({"model.hidden": "64"}, "model.hidden"),
        ({"model.hidden": 64.0}, "model.hidden"),
        ({"model.use_pad_bias": 1}, "model.use_pad_bias"),
        ({"seed": True}, "seed"),
        ({"world.duration_range": [1.0]}, "world.duration_range"),
        ({"stage": "finetune"}, "stage"),
        ({"model.latent_channels": 16}, "model.latent_channels"),
        ({"model": {"hidden": 3}}, "model"),
    ],
)
def test_config_errors_name_the_key(obj, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.").replace("[", r"\[")):
        from_flat(obj)


def test_config_value_errors_become_config_errors():
    with pytest.raises(ConfigError):
        from_flat({"model.hidden": 30, "model.heads": 4})
    with pytest.raises(ConfigError):
        from_flat([1, 2])


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_defaults_are_consistent():
    cfg = RunConfig()
    assert cfg.model.vocab == cfg.world.n_phonemes + 2
    assert cfg.dpo.beta == 2000.0 and cfg.dpo.lam == 0.2


# ---------------------------------------------------------------- optimizer


def test_lr_schedule():
    cfg = OptimConfig(lr=1.0, warmup=4, steps=14, min_lr_ratio=0.1)
    assert [lr_at(s, cfg) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]
    assert lr_at(9, cfg) == pytest.approx(0.55)
    assert lr_at(14, cfg) == pytest.approx(0.1)
    assert lr_at(500, cfg) == pytest.approx(0.1)


def test_adamw_first_step_matches_formula():
    p = ag.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    cfg = OptimConfig(lr=0.1, warmup=0, steps=10, weight_decay=0.01, grad_clip=0.0)
    opt = AdamW({"p": p}, cfg)
    g = np.array([0.5, -4.0])
    opt.step({"p": g})
    # bias-corrected first step moves each coordinate by lr * sign(g), plus decay
    want = np.array([1.0, -2.0]) - 0.1 * (g / (np.abs(g) + 1e-8) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.data, want, rtol=1e-12)


def test_grad_clip_bounds_the_update_direction():
    a = ag.Tensor(np.zeros(2), requires_grad=True)
    b = ag.Tensor(np.zeros(2), requires_grad=True)
    cfg = OptimConfig(lr=0.1, warmup=0, steps=10, weight_decay=0.0, grad_clip=1.0)
    oa, ob = AdamW({"p": a}, cfg), AdamW({"p": b}, cfg)
    oa.step({"p": np.array([3.0, 4.0])})
    ob.step({"p": np.array([300.0, 400.0])})
    np.testing.assert_allclose(a.data, b.data, rtol=1e-6)


def test_optimizer_state_round_trip():
    p = ag.Tensor(np.ones(3), requires_grad=True)
    cfg = OptimConfig(lr=0.01, warmup=0, steps=5)
    opt = AdamW({"p": p}, cfg)
    opt.step({"p": np.array([1.0, 2.0, 3.0])})
    q = ag.Tensor(p.data.copy(), requires_grad=True)
    twin = AdamW({"p": q}, cfg)
    twin.load_state(opt.state(), opt.step_count)
    opt.step({"p": np.array([0.5, 0.5, 0.5])})
    twin.step({"p": np.array([0.5, 0.5, 0.5])})
    np.testing.assert_array_equal(p.data, q.data)
