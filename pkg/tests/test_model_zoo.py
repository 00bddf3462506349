import numpy as np
import pytest
import torch

from cgn import model_zoo as mz


GRID = {"small-conv": 7, "alexnet-like": 13, "resnet-like": 7}


@pytest.mark.parametrize("backbone", mz.BACKBONES)
def test_backbone_shape_and_sharing(backbone):
    cfg = mz.ModelConfig(backbone=backbone, feature_channels=8)
    net = mz.build_backbone(cfg)
    img = np.random.default_rng(0).integers(0, 256, (224, 224)).astype(np.uint8)
    a = mz.extract_features(net, img)
    assert a.shape == (8, GRID[backbone], GRID[backbone])
    torch.testing.assert_close(a, mz.extract_features(net, img.copy()), rtol=0, atol=0)
    zero = mz.extract_features(net, np.zeros((224, 224), np.uint8))
    full = mz.extract_features(net, np.full((224, 224), 255, np.uint8))
    assert not torch.equal(zero, full)


def test_extract_rejects_wrong_size():
    with pytest.raises(ValueError, match="224x224"):
        mz.extract_features(mz.build_backbone(mz.ModelConfig()), np.zeros((100, 100), np.uint8))


def test_pooled_path_matches_forward():
    net = mz.SmallConv(8)
    x = mz.to_input(np.random.default_rng(2).integers(0, 256, (2, 224, 224)))
    torch.testing.assert_close(net(x), net.forward_pooled(net.pool(x)))


def test_adain_identity_and_stats():
    g = torch.Generator().manual_seed(0)
    h = torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64)
    torch.testing.assert_close(mz.adain(h, h), h, atol=1e-5, rtol=0)
    r = torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64) * 3 + 1
    out = mz.adain(h, r)
    mo, so = mz.channel_stats(out)
    mr, sr = mz.channel_stats(r)
    torch.testing.assert_close(mo, mr, atol=1e-5, rtol=0)
    torch.testing.assert_close(so, sr, atol=1e-5, rtol=0)


def test_adain_hand_fixture():
    ht = torch.tensor([[[0.0, 2.0], [0.0, 2.0]]], dtype=torch.float64)
    hr = torch.tensor([[[4.0, 6.0], [4.0, 6.0]]], dtype=torch.float64)
    torch.testing.assert_close(mz.adain(ht, hr), hr, atol=1e-4, rtol=0)


def test_adain_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        mz.adain(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 4, 4))


def test_adain_constant_channel_finite_gradient():
    ht = torch.ones(1, 2, 3, 3, requires_grad=True)
    mz.adain(ht, torch.randn(1, 2, 3, 3)).sum().backward()
    assert torch.isfinite(ht.grad).all()


def test_generator_input_endpoints():
    g = torch.Generator().manual_seed(1)
    ht, hr = torch.randn(1, 3, 4, 4, generator=g), torch.randn(1, 3, 4, 4, generator=g)
    assert torch.equal(mz.generator_input(ht, hr, 0.0), ht)
    assert torch.equal(mz.generator_input(ht, hr, 1.0), mz.adain(ht, hr))
    with pytest.raises(ValueError, match="alpha"):
        mz.generate_counterfactual(mz.Generator(3, 1), ht, hr, 1.5)


def test_zero_init_generator_is_identity():
    gen = mz.Generator(3, n_blocks=4, zero_init=True)
    ht, hr = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    out = mz.generate_counterfactual(gen, ht, hr, 0.5)
    assert torch.equal(out, mz.generator_input(ht, hr, 0.5))


def test_discriminator_range_and_no_saturation():
    d = mz.Discriminator(4)
    p = d(torch.randn(16, 4, 7, 7) * 5)
    assert ((p > 0.01) & (p < 0.99)).all()
    patch = mz.Discriminator(4, patch=True)(torch.randn(2, 4, 7, 7))
    assert patch.shape == (2, 4, 4)


def test_discriminator_log_gradient_finite_difference():
    torch.manual_seed(3)
    d = mz.Discriminator(4).double()
    x = torch.randn(1, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: torch.log(d(t)), (x,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_classifier_cam_and_probabilities():
    clf = mz.FusionClassifier(8, width=6)
    res, ht = torch.randn(3, 4, 7, 7), torch.randn(3, 4, 7, 7)
    p, cam, logits = mz.classify(clf, res, ht)
    assert cam.shape == (3, 7, 7)
    probs = torch.softmax(logits, 1)
    assert ((p > 0) & (p < 1)).all()
    torch.testing.assert_close(probs.sum(1), torch.ones(3))
    # CAM averaged over positions plus bias gives the logit
    torch.testing.assert_close(cam.mean(dim=(-2, -1)) + clf.head.bias[1], logits[:, 1], atol=1e-5, rtol=1e-5)


def test_swapping_class_weights():
    clf = mz.FusionClassifier(8, width=6)
    res, ht = torch.randn(2, 4, 7, 7), torch.randn(2, 4, 7, 7)
    _, cam, logits = mz.classify(clf, res, ht)
    _, fused = clf(res, ht)
    benign_cam = clf.class_cams(fused)[:, 0]
    with torch.no_grad():
        clf.head.weight.copy_(clf.head.weight.flip(0))
        clf.head.bias.copy_(clf.head.bias.flip(0))
    _, cam2, logits2 = mz.classify(clf, res, ht)
    torch.testing.assert_close(logits2[:, 1] - logits2[:, 0], -(logits[:, 1] - logits[:, 0]))
    torch.testing.assert_close(cam2, benign_cam)


def test_cgn_fusion_modes():
    cfg = mz.ModelConfig(feature_channels=4, generator_blocks=1)
    for mode, has_gen in (("residual", True), ("bilateral", False), ("single", False)):
        m = mz.CGN(cfg, mode)
        assert (m.generator is not None) == has_gen
        h = torch.randn(2, 4, 7, 7)
        logits, _ = m.classify_from(h, h, h)
        assert logits.shape == (2, 2)


def test_config_validation():
    with pytest.raises(ValueError, match="backbone"):
        mz.ModelConfig(backbone="vgg")
    with pytest.raises(ValueError, match="alpha"):
        mz.ModelConfig(alpha=2.0)
