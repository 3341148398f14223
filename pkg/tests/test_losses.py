import numpy as np
import pytest

from catasplat.losses import (
    LossReport,
    LossWeights,
    dssim,
    dssim_loss,
    l1_loss,
    mask_loss,
    mask_tv_loss,
    psnr,
    reflection_volume_loss,
    ssim,
    ssim_map,
)

from gradcheck import numeric_grad, rel_error


def test_loss_weights_defaults():
    w = LossWeights()
    assert (w.l1, w.dssim, w.volume, w.mask, w.mask_tv) == (0.05, 0.2, 0.01, 0.01, 1e-5)
    with pytest.raises(ValueError):
        LossWeights(l1=-1)


def test_report_total_is_weighted_sum():
    terms = dict(l1=0.3, dssim=0.2, volume=0.5, mask=0.1, mask_tv=2.0)
    rep = LossReport.from_terms(terms, LossWeights())
    assert rep.total == 0.05 * 0.3 + 0.2 * 0.2 + 0.01 * 0.5 + 0.01 * 0.1 + 1e-5 * 2.0


def test_l1_examples(rng):
    gt = rng.random((8, 8, 3))
    assert l1_loss(gt, gt)[0] == 0
    assert l1_loss(gt + 0.1, gt)[0] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        l1_loss(gt, gt[:4])


def test_l1_gradient(rng):
    pred, gt = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    _, g = l1_loss(pred, gt)
    np.testing.assert_allclose(g, numeric_grad(lambda x: l1_loss(x, gt)[0], pred, 1e-7), atol=1e-6)


def test_dssim_identical_zero_and_inverted_checkerboard_high():
    gt = np.indices((32, 32)).sum(axis=0) % 2 * 1.0
    assert dssim_loss(gt, gt)[0] == pytest.approx(0.0, abs=1e-15)
    # direct evaluation oracle of the mean SSIM for the inverted pattern
    inv = 1 - gt
    value = dssim_loss(inv, gt)[0]
    assert value == pytest.approx((1 - ssim_map(inv, gt).mean()) / 2)
    assert value > 0.4


def test_dssim_gradient_finite_differences(rng):
    for _ in range(5):
        pred, gt = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        _, g = dssim_loss(pred, gt)
        assert rel_error(g, numeric_grad(lambda x: dssim_loss(x, gt)[0], pred)) < 1e-4


def test_dssim_symmetric(rng):
    a, b = rng.random((20, 20)), rng.random((20, 20))
    assert dssim_loss(a, b)[0] == pytest.approx(dssim_loss(b, a)[0], abs=1e-14)


def test_dssim_too_small():
    with pytest.raises(ValueError):
        dssim_loss(np.zeros((8, 8)), np.zeros((8, 8)))


def test_volume_loss_examples(rng):
    m = np.zeros((4, 6))
    m[:, :3] = 1
    assert reflection_volume_loss(m.copy(), m)[0] == 0
    assert reflection_volume_loss(np.zeros((4, 6)), m)[0] == pytest.approx(0.5)
    _, g = reflection_volume_loss(rng.random((4, 6)), m)
    assert np.all(g[:, 3:] == 0) and np.all(g[:, :3] != 0)


def test_volume_loss_gradient(rng):
    m = rng.random((6, 6)) > 0.5
    o = rng.random((6, 6))
    _, g = reflection_volume_loss(o, m)
    np.testing.assert_allclose(g, numeric_grad(lambda x: reflection_volume_loss(x, m)[0], o, 1e-7), atol=1e-6)


def test_mask_losses(rng):
    m = rng.random((5, 7)) > 0.5
    assert mask_loss(m.astype(float), m)[0] == 0
    assert mask_tv_loss(np.full((5, 7), 0.3))[0] == 0
    spike = np.zeros((9, 9))
    spike[4, 4] = 1
    assert mask_tv_loss(spike)[0] == pytest.approx(4 / 81)


def test_mask_loss_gradients(rng):
    m = rng.random((6, 6)) > 0.5
    rho = rng.random((6, 6))
    _, g = mask_loss(rho, m)
    np.testing.assert_allclose(g, numeric_grad(lambda x: mask_loss(x, m)[0], rho, 1e-7), atol=1e-6)
    _, g = mask_tv_loss(rho)
    np.testing.assert_allclose(g, numeric_grad(lambda x: mask_tv_loss(x)[0], rho, 1e-7), atol=1e-6)


def test_psnr_examples(rng):
    gt = rng.random((10, 10, 3)) * 0.5
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0)
    assert psnr(gt, gt) == 99.0
    with pytest.raises(ValueError):
        psnr(gt, gt, np.zeros((10, 10), dtype=bool))


def test_region_metrics_differ_from_full(rng):
    gt = rng.random((24, 24, 3))
    pred = gt.copy()
    region = np.zeros((24, 24), dtype=bool)
    region[6:18, 6:18] = True
    pred[~region] += 0.3  # error only outside the region
    assert psnr(pred, gt, region) == 99.0
    assert psnr(pred, gt) < 20
    assert ssim(pred, gt, region) > ssim(pred, gt)
    assert dssim(gt, gt) == 0
