import numpy as np
import pytest
from conftest import param_grad_error
from hypothesis import given, settings, strategies as st

from lesioncap import diffcore as dc
from lesioncap.diffcore import DiffArray, ShapeError, grad_check
from lesioncap.encoder import DualBranchEncoder, EncoderConfig
from lesioncap.imageops import AugmentParams, apply_augment, augment, resize_bilinear, sample_augment


def test_default_shapes():
    enc = DualBranchEncoder(EncoderConfig(), seed=0)
    x = np.random.default_rng(0).random((3, 64, 64))
    logits, acts = enc.forward_classify(x)
    assert logits.shape == (1, 4)
    assert acts.shape == (1, 32, 8, 8)
    assert enc.forward_features(x).shape == (1, 32, 8, 8)


def test_identical_images_identical_logits():
    enc = DualBranchEncoder(EncoderConfig(), seed=0)
    x = np.random.default_rng(1).random((3, 64, 64))
    logits, _ = enc.forward_classify(np.stack([x, x]))
    np.testing.assert_array_equal(logits.data[0], logits.data[1])


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(channels=(8, 16, 32, 64), input_size=32)   # final size 2 < 4
    with pytest.raises(ValueError):
        EncoderConfig(input_size=60)
    with pytest.raises(ValueError):
        EncoderConfig(num_classes=5)


def test_wrong_input_shape():
    enc = DualBranchEncoder(EncoderConfig(), seed=0)
    with pytest.raises(ShapeError):
        enc.forward_classify(np.zeros((3, 32, 32)))


def test_parameter_count_is_function_of_config():
    cfg = EncoderConfig(channels=(4, 8), input_size=32)
    assert DualBranchEncoder(cfg, 0).num_parameters() == DualBranchEncoder(cfg, 7).num_parameters()
    shapes = [p.shape for p in DualBranchEncoder(cfg, 3).parameters()]
    assert shapes == [p.shape for p in DualBranchEncoder(cfg, 4).parameters()]


def test_branches_share_no_parameters():
    enc = DualBranchEncoder(EncoderConfig(), seed=0)
    a = {id(p) for p in enc.branch_a.parameters()}
    b = {id(p) for p in enc.branch_b.parameters()}
    assert a and b and not a & b


def test_shared_stem_shares_stage_parameters():
    enc = DualBranchEncoder(EncoderConfig(share_stem=True), seed=0)
    a = {id(p) for p in enc.branch_a.parameters()}
    b = {id(p) for p in enc.branch_b.stem[0].parameters()}
    assert b <= a


def test_perturbing_branch_a_leaves_features_unchanged():
    enc = DualBranchEncoder(EncoderConfig(), seed=0)
    x = np.random.default_rng(2).random((2, 3, 64, 64))
    before = enc.forward_features(x).data
    for p in enc.branch_a.parameters():
        p.data = p.data + 0.1
    np.testing.assert_array_equal(before, enc.forward_features(x).data)


@pytest.mark.parametrize("residual", [False, True])
def test_gradcheck_both_branches_small_input(residual):
    cfg = EncoderConfig(channels=(2, 3), input_size=16, residual=residual)
    enc = DualBranchEncoder(cfg, seed=0)
    rng = np.random.default_rng(5)
    # zero-initialised biases put pre-activations exactly on the relu kink; move off it
    for name, p in enc.named_parameters():
        if name.endswith("bias"):
            p.data = rng.normal(0, 0.1, size=p.shape)
    ra = rng.normal(size=(1, 4))
    rb = rng.normal(size=(1, 3, 4, 4))

    def f(x):
        logits, _ = enc.forward_classify(x)
        return dc.add(dc.reduce_sum(dc.mul(logits, ra)), dc.reduce_sum(dc.mul(enc.forward_features(x), rb)))

    rep = grad_check(f, rng.random((1, 3, 16, 16)))
    assert rep.passed, rep
    x = DiffArray(rng.random((1, 3, 16, 16)))
    assert param_grad_error(lambda: f(x), enc.parameters(), max_entries=8) < 1e-4


# -- augmentation -------------------------------------------------------------------------

def test_noop_augment_is_identity():
    img = np.random.default_rng(0).random((3, 32, 32))
    rng = np.random.default_rng(0)
    out = augment(img, rng, flip_p=0.0, brightness=(1.0, 1.0), crop_p=0.0)
    np.testing.assert_array_equal(out, img)
    np.testing.assert_array_equal(apply_augment(img, AugmentParams()), img)


def test_flip_twice_is_identity():
    img = np.random.default_rng(0).random((3, 32, 32))
    p = AugmentParams(flip=True)
    np.testing.assert_array_equal(p.apply_geometry(p.apply_geometry(img)), img)


def test_crop_keeps_size():
    img = np.random.default_rng(0).random((3, 40, 40))
    out = AugmentParams(crop=(2, 3, 36)).apply_geometry(img)
    assert out.shape == img.shape


def test_resize_same_size_copy():
    a = np.random.default_rng(0).random((2, 8, 8))
    np.testing.assert_array_equal(resize_bilinear(a, (8, 8)), a)


def test_resize_constant_stays_constant():
    out = resize_bilinear(np.full((4, 4), 0.3), (16, 16))
    np.testing.assert_allclose(out, 0.3, atol=1e-15)


def test_sample_augment_respects_ranges():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = sample_augment(rng, 64)
        assert 0.8 <= p.brightness <= 1.2
        if p.crop is not None:
            t, l, side = p.crop
            assert side == 58 and 0 <= t <= 6 and 0 <= l <= 6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_augment_output_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((3, 32, 32))
    out = augment(img, rng)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
