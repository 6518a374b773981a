import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from refseg.core import full_scale_config, toy_config
from refseg.errors import ShapeError
from refseg.maskgen import (MaskDecoder, OutputTokens, binarize, decode_masks,
                            encode_dense_prompt, select_mask)


@pytest.fixture(scope="module")
def decoder():
    torch.manual_seed(0)
    return MaskDecoder(toy_config()).eval(), OutputTokens(32)


def _features(seed=0, B=None):
    g = torch.Generator().manual_seed(seed)
    lead = () if B is None else (B,)
    return (torch.randn(*lead, 8, 8, 32, generator=g), torch.randn(*lead, 8, 8, 32, generator=g),
            torch.randn(*lead, 9, 32, generator=g))


def test_output_token_layout(decoder):
    _, tokens = decoder
    seq = tokens.concat(torch.randn(2, 9, 32))
    assert seq.shape == (2, 14, 32)
    assert torch.equal(seq[0, :4], tokens.filter) and torch.equal(seq[1, 4], tokens.iou[0])
    assert tokens.filter.requires_grad and tokens.iou.requires_grad


def test_dense_prompt_encoder_shapes(decoder):
    dec, _ = decoder
    f = encode_dense_prompt(torch.randn(32, 32), dec)
    assert f.shape == (8, 8, 32)
    assert torch.isfinite(encode_dense_prompt(torch.zeros(32, 32), dec)).all()
    with pytest.raises(ShapeError):
        encode_dense_prompt(torch.zeros(16, 16), dec)


def test_dense_prompt_encoder_full_scale():
    cfg = full_scale_config()
    dec = MaskDecoder(cfg)
    n_down = sum(isinstance(m, torch.nn.Conv2d) and m.stride == (2, 2)
                 for m in dec.prompt_encoder.modules())
    assert n_down == 2
    assert encode_dense_prompt(torch.randn(256, 256), dec).shape == (64, 64, cfg.d2)


def test_decode_shapes_and_zero_dense(decoder):
    dec, tokens = decoder
    f_img, f_dense, p_sparse = _features()
    masks, iou = decode_masks(f_img, f_dense, p_sparse, tokens, dec)
    assert masks.shape == (4, 128, 128) and iou.shape == (4,)
    masks0, _ = decode_masks(f_img, torch.zeros_like(f_dense), p_sparse, tokens, dec)
    assert torch.isfinite(masks0).all()
    with pytest.raises(ShapeError):
        decode_masks(f_img[:4], f_dense, p_sparse, tokens, dec)


def test_fusion_is_additive(decoder):
    dec, tokens = decoder
    f_img, f_dense, p_sparse = _features(B=2)
    a = decode_masks(f_img, f_dense, p_sparse, tokens, dec)
    b = decode_masks(f_img + f_dense, torch.zeros_like(f_dense), p_sparse, tokens, dec)
    assert torch.allclose(a[0], b[0], atol=1e-6) and torch.allclose(a[1], b[1], atol=1e-6)


def test_sparse_row_perturbation_reaches_every_mask(decoder):
    dec, tokens = decoder
    f_img, f_dense, p_sparse = _features()
    base, _ = decode_masks(f_img, f_dense, p_sparse, tokens, dec)
    bumped = p_sparse.clone()
    bumped[4] += 0.5
    moved, _ = decode_masks(f_img, f_dense, bumped, tokens, dec)
    diff = (moved - base).abs().flatten(1).amax(1)
    assert (diff > 0).all()


def test_decoder_deterministic(decoder):
    dec, tokens = decoder
    f = _features(3)
    a, b = decode_masks(*f, tokens, dec), decode_masks(*f, tokens, dec)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_select_mask_returns_first(decoder):
    m = torch.arange(4 * 9, dtype=torch.float32).reshape(4, 3, 3)
    assert torch.equal(select_mask(m), m[0])
    same = torch.ones(4, 3, 3) * 2
    assert torch.equal(select_mask(same), same[0])
    dec, tokens = decoder
    masks, _ = decode_masks(*_features(), tokens, dec)
    assert torch.equal(select_mask(masks), masks[0])


def test_binarize_cases():
    assert binarize(-torch.ones(4, 4)).sum() == 0
    gt = (np.random.default_rng(0).random((16, 16)) > 0.5).astype(np.uint8)
    assert np.array_equal(binarize(gt * 10.0 - 5.0), gt)
    assert torch.equal(binarize(torch.tensor([0.0, 1e-6])), torch.tensor([0, 1], dtype=torch.uint8))


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0, 3), st.integers(0, 1000))
def test_binarize_monotone_in_threshold(t, dt, seed):
    logits = np.random.default_rng(seed).normal(size=(8, 8))
    low, high = binarize(logits, t), binarize(logits, t + dt)
    assert np.all(high <= low)
