import numpy as np
import pytest
from conftest import param_grad_error

from lesioncap import diffcore as dc
from lesioncap.diffcore import DiffArray, ShapeError, grad_check
from lesioncap.encoder import DualBranchEncoder, EncoderConfig
from lesioncap.imageops import resize_bilinear
from lesioncap.lesionattn import (CBAM, Fusion, GradCamError, GradCamResult, fuse, grad_cam, grad_cam_batch,
                                  normalize_heatmap, save_overlay)


class ChannelZeroClassifier:
    """Activations are 2x2-average-pooled images minus an offset; every class score is mean(A[0])."""

    def __init__(self, offset=0.5):
        self.offset = offset

    def forward_classify(self, images):
        x = DiffArray(np.asarray(images, dtype=np.float64))
        acts = dc.add(dc.avg_pool2d(x, 2), -self.offset)
        return self.classify_head(acts), acts

    def classify_head(self, acts):
        e0 = np.eye(acts.shape[1])[0][None, :, None, None]
        m = dc.reduce_sum(dc.reduce_mean(dc.mul(acts, e0), axis=(2, 3)), axis=1, keepdims=True)
        return dc.matmul(m, DiffArray(np.ones((1, 4))))


def test_channel_zero_classifier_matches_analytic_heatmap():
    rng = np.random.default_rng(0)
    clf = ChannelZeroClassifier()
    for _ in range(10):
        img = rng.random((3, 16, 16))
        res = grad_cam(clf, img, target_class=2)
        a0 = img.reshape(3, 8, 2, 8, 2).mean(axis=(2, 4))[0] - 0.5
        np.testing.assert_allclose(res.channel_weights, [1 / 64, 0, 0], atol=1e-15)
        expected = normalize_heatmap(resize_bilinear(np.maximum(a0, 0), (16, 16))[None])[0]
        np.testing.assert_allclose(res.heatmap, expected, atol=1e-9)
        assert res.target_class == 2 and res.heatmap.shape == (16, 16)


def test_negative_weights_give_zero_heatmap():
    class Neg(ChannelZeroClassifier):
        def classify_head(self, acts):
            return dc.mul(super().classify_head(acts), -1.0)

    img = np.random.default_rng(1).random((3, 16, 16)) * 0.4 + 0.6   # activations all >= 0
    res = grad_cam(Neg(), img, 0)
    assert np.all(res.channel_weights <= 0)
    np.testing.assert_array_equal(res.heatmap, 0.0)


def test_default_target_is_argmax():
    enc = DualBranchEncoder(EncoderConfig(channels=(4, 8), input_size=32), seed=3)
    img = np.random.default_rng(2).random((3, 32, 32))
    logits, _ = enc.forward_classify(img)
    assert grad_cam(enc, img).target_class == int(logits.data.argmax())


def test_grad_cam_leaves_parameter_grads_untouched():
    enc = DualBranchEncoder(EncoderConfig(channels=(4, 8), input_size=32), seed=3)
    grad_cam_batch(enc, np.random.default_rng(2).random((2, 3, 32, 32)), [0, 1])
    assert all(p.grad is None for p in enc.parameters())
    assert all(p.requires_grad for p in enc.parameters())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradients_raise():
    class Bad(ChannelZeroClassifier):
        def classify_head(self, acts):
            return dc.mul(super().classify_head(acts), np.inf)

    with pytest.raises(GradCamError):
        grad_cam(Bad(), np.random.default_rng(0).random((3, 16, 16)), 0)


def test_heatmap_range_fuzz_1000_inputs():
    enc = DualBranchEncoder(EncoderConfig(channels=(4, 8), input_size=32), seed=11)
    rng = np.random.default_rng(7)
    for _ in range(10):
        imgs = rng.random((100, 3, 32, 32)) * rng.uniform(0, 2)
        heat, _, _ = grad_cam_batch(enc, imgs, rng.integers(0, 4, size=100))
        assert heat.min() >= 0.0 and heat.max() <= 1.0
        peaks = heat.reshape(100, -1).max(axis=1)
        assert set(np.unique(peaks)) <= {0.0, 1.0}


def test_normalize_zero_map_stays_zero():
    out = normalize_heatmap(np.zeros((2, 4, 4)))
    np.testing.assert_array_equal(out, 0.0)


# -- CBAM -------------------------------------------------------------------------------------

def test_cbam_zero_weights_quarter_output():
    cb = CBAM(np.random.default_rng(0), 8, reduction=4)
    for p in cb.parameters():
        p.data = np.zeros_like(p.data)
    f = DiffArray(np.random.default_rng(1).normal(size=(2, 8, 6, 6)))
    np.testing.assert_allclose(cb(f).data, 0.25 * f.data, rtol=0, atol=1e-15)


def test_cbam_shrinks_nonnegative_features():
    cb = CBAM(np.random.default_rng(3), 16, reduction=8)
    f = DiffArray(np.abs(np.random.default_rng(4).normal(size=(3, 16, 8, 8))))
    ch, sp, out = cb.gates(f)
    assert out.shape == f.shape
    assert np.all((ch.data > 0) & (ch.data < 1)) and np.all((sp.data > 0) & (sp.data < 1))
    assert np.all(np.abs(out.data) <= np.abs(f.data))


def test_cbam_validation():
    with pytest.raises(ValueError):
        CBAM(np.random.default_rng(0), 6, reduction=4)
    with pytest.raises(ValueError):
        CBAM(np.random.default_rng(0), 8, reduction=4, kernel=4)
    with pytest.raises(ShapeError):
        CBAM(np.random.default_rng(0), 8, reduction=4)(DiffArray(np.zeros((1, 4, 8, 8))))


@pytest.mark.parametrize("shape", [(1, 4, 8, 8), (2, 4, 5, 7), (1, 8, 6, 6)])
def test_cbam_gradcheck(shape):
    rng = np.random.default_rng(shape[-1])
    cb = CBAM(rng, shape[1], reduction=2)
    r = rng.normal(size=shape)
    rep = grad_check(lambda f: dc.reduce_sum(dc.mul(cb(f), r)), rng.normal(size=shape))
    assert rep.passed, rep
    f = DiffArray(rng.normal(size=shape))
    assert param_grad_error(lambda: dc.reduce_sum(dc.mul(cb(f), r)), cb.parameters()) < 1e-4


# -- fusion -----------------------------------------------------------------------------------

def test_alpha_starts_at_zero_and_fuse_is_cbam():
    rng = np.random.default_rng(0)
    cb = CBAM(rng, 8, reduction=4)
    fusion = Fusion()
    assert fusion.alpha.data == 0.0
    f = DiffArray(rng.normal(size=(2, 8, 4, 4)))
    heat = rng.random((2, 16, 16))
    np.testing.assert_array_equal(fuse(f, heat, cb, fusion).data, cb(f).data)


def test_unit_heatmap_alpha_one_doubles():
    rng = np.random.default_rng(1)
    cb = CBAM(rng, 8, reduction=4)
    fusion = Fusion()
    fusion.alpha.data = np.array(1.0)
    f = DiffArray(rng.normal(size=(1, 8, 4, 4)))
    out = fuse(f, GradCamResult(np.ones((32, 32)), np.zeros(8), 0), cb, fusion)
    np.testing.assert_allclose(out.data, 2 * cb(f).data, rtol=0, atol=1e-15)


def test_fuse_without_cbam():
    rng = np.random.default_rng(2)
    fusion = Fusion()
    fusion.alpha.data = np.array(0.5)
    f = DiffArray(rng.normal(size=(1, 4, 4, 4)))
    heat = rng.random((1, 4, 4))
    np.testing.assert_allclose(fuse(f, heat, None, fusion).data, f.data * (1 + 0.5 * heat[:, None]), atol=1e-15)


def test_fuse_alpha_gradient():
    rng = np.random.default_rng(3)
    cb = CBAM(rng, 8, reduction=4)
    fusion = Fusion()
    f = DiffArray(rng.normal(size=(2, 8, 4, 4)))
    heat = rng.random((2, 8, 8))
    r = rng.normal(size=(2, 8, 4, 4))

    def loss(a):
        fusion.alpha = a
        return dc.reduce_sum(dc.mul(fuse(f, heat, cb, fusion), r))

    rep = grad_check(loss, np.array(0.3))
    assert rep.passed, rep
    analytic = (cb(f).data * resize_bilinear(heat, (4, 4))[:, None] * r).sum()
    a = DiffArray(np.array(0.3), requires_grad=True)
    dc.backward(loss(a))
    assert a.grad == pytest.approx(analytic, rel=1e-12)


@pytest.mark.parametrize("shape", [(1, 4, 4, 4), (2, 4, 6, 6), (1, 8, 5, 5)])
def test_fuse_gradcheck_wrt_features(shape):
    rng = np.random.default_rng(sum(shape))
    cb = CBAM(rng, shape[1], reduction=2)
    fusion = Fusion()
    fusion.alpha.data = np.array(0.7)
    heat = rng.random((shape[0], 12, 12))
    r = rng.normal(size=shape)
    rep = grad_check(lambda f: dc.reduce_sum(dc.mul(fuse(f, heat, cb, fusion), r)), rng.normal(size=shape))
    assert rep.passed, rep


def test_fuse_rejects_non_finite_alpha_and_bad_heatmaps():
    fusion = Fusion()
    f = DiffArray(np.zeros((2, 4, 4, 4)))
    with pytest.raises(ShapeError):
        fuse(f, np.zeros((3, 8, 8)), None, fusion)
    fusion.alpha.data = np.array(np.nan)
    with pytest.raises(ValueError):
        fuse(f, np.zeros((2, 8, 8)), None, fusion)


def test_overlay_png(tmp_path):
    from PIL import Image
    img = np.random.default_rng(0).random((3, 32, 32))
    save_overlay(tmp_path / "x_cam.png", img, np.random.default_rng(1).random((32, 32)))
    with Image.open(tmp_path / "x_cam.png") as im:
        assert im.size == (64, 32)
