import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from refseg.core import (ModelConfig, TrainConfig, format_config, load_config, full_scale_config,
                         parse_config_text, save_config, seeded_rng, toy_config,
                         validate_config, validate_train_config)
from refseg.errors import ConfigError
from refseg.model import build_model


def test_full_scale_config_accepted():
    cfg = validate_config(full_scale_config())
    assert (cfg.H1, cfg.patch1, cfg.H2, cfg.n_t, cfg.n_p) == (512, 16, 1024, 3, 9)
    assert (cfg.N_decomp, cfg.N_interact, cfg.N_pgen) == (2, 2, 2)
    assert (cfg.h1, cfg.w1, cfg.h2, cfg.w2) == (32, 32, 64, 64)
    assert cfg.dense_hw == (256, 256)


def test_default_loss_weights():
    cfg = ModelConfig()
    assert (cfg.alpha_dice, cfg.alpha_ortho, cfg.alpha_dense, cfg.alpha_spat,
            cfg.alpha_samp) == (1.0, 0.5, 0.0, 0.0, 0.5)
    assert (cfg.r_clip_t, cfg.r_clip_v, cfg.r_sam_v) == (16, 16, 32)


def test_patch_must_divide_input():
    with pytest.raises(ConfigError, match="patch1"):
        validate_config(full_scale_config(patch1=7))


def test_toy_config_geometry():
    cfg = validate_config(toy_config())
    assert (cfg.H1, cfg.patch1, cfg.H2, cfg.stride2, cfg.d1, cfg.d2) == (64, 8, 128, 16, 64, 32)
    assert (cfg.h1, cfg.w1) == (8, 8)
    assert cfg.dense_hw == (32, 32)


@pytest.mark.parametrize("field,value", [
    ("d1", 0), ("d2", -4), ("r_clip_t", -1), ("H2", 120), ("stride2", 12),
    ("alpha_ortho", -0.1), ("spat_mode", "max"), ("n_p", 0),
])
def test_invalid_configs_rejected(field, value):
    with pytest.raises(ConfigError):
        validate_config(dataclasses.replace(toy_config(), **{field: value}))


def test_zero_rank_is_valid():
    validate_config(toy_config(r_clip_t=0, r_clip_v=0, r_sam_v=0))


def test_train_config_validation():
    validate_train_config(TrainConfig())
    with pytest.raises(ConfigError):
        validate_train_config(TrainConfig(lr=-1.0))
    with pytest.raises(ConfigError):
        validate_train_config(TrainConfig(batch_size=0))


def test_seeded_rng_repeatable():
    a, b = seeded_rng(0), seeded_rng(0)
    assert np.array_equal(a.random(10), b.random(10))
    assert not np.array_equal(seeded_rng(0).random(10), seeded_rng(1).random(10))


def test_model_from_same_seed_is_bit_identical():
    cfg = toy_config(seed=7)
    a, b = build_model(cfg).state_dict(), build_model(cfg).state_dict()
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_build_model_leaves_global_rng_alone():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_model(toy_config())
    assert torch.equal(torch.rand(3), expected)


def test_config_text_roundtrip(tmp_path):
    cfg = toy_config(d1=32, cascade=False, spat_mode="MIL", alpha_dense=0.25)
    tcfg = TrainConfig(lr=3e-4, epochs=7)
    path = tmp_path / "c.cfg"
    save_config(path, cfg, tcfg)
    assert load_config(path) == (cfg, tcfg)
    assert parse_config_text(format_config(cfg, tcfg)) == (cfg, tcfg)


def test_config_comments_and_unknown_keys():
    cfg, tcfg = parse_config_text("# comment\nd1 = 32  # trailing\n\nepochs=3\n")
    assert cfg.d1 == 32 and tcfg.epochs == 3
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("dl=32\n")
    with pytest.raises(ConfigError):
        parse_config_text("d1=thirty\n")
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign\n")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 3))
def test_geometry_is_exact_when_valid(mult, pow2):
    stride = 4 * 2 ** pow2
    cfg = validate_config(toy_config(H2=stride * mult * 4, W2=stride * mult * 4, stride2=stride))
    assert cfg.h2 * cfg.stride2 == cfg.H2
    assert cfg.dense_hw == (cfg.H2 // 4, cfg.W2 // 4)
