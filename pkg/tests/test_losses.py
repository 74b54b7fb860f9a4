import numpy as np
import pytest
from numpy.testing import assert_allclose

from config import LossWeights
from errors import FormatError, ShapeError
from gradcheck import OpFragment, gradcheck
from losses import (
    PSNR_CAP, FeatureExtractor, gaussian_window, image_metrics, l1_loss, perceptual_loss, psnr, ssim,
    ssim_loss, tonemap, tonemap_backward, total_loss,
)
from tensor_ops import Tensor


def reference_ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Per-pixel sliding window over a zero-padded 2-D image"""
    w1 = gaussian_window()
    window = np.outer(w1, w1)
    half = len(w1) // 2
    xp = np.pad(x, half)
    yp = np.pad(y, half)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    values = []
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            px = xp[i:i + 2 * half + 1, j:j + 2 * half + 1]
            py = yp[i:i + 2 * half + 1, j:j + 2 * half + 1]
            mx, my = np.sum(window * px), np.sum(window * py)
            vx = np.sum(window * px * px) - mx * mx
            vy = np.sum(window * py * py) - my * my
            cxy = np.sum(window * px * py) - mx * my
            values.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(values))


def scalar_fragment(name, value_fn, grad_fn, target):
    return OpFragment(
        name,
        lambda p: Tensor(np.full((1, 1, 1, 1), value_fn(p, target))),
        lambda p, g: Tensor(grad_fn(p, target).data * g.data[0, 0, 0, 0]),
    )


def test_tonemap_range_and_gradient(rng):
    x = Tensor(rng.uniform(-1, 10, (1, 3, 4, 4)))
    mapped = tonemap(x).data
    assert mapped.min() >= 0 and mapped.max() < 1
    fragment = OpFragment("tonemap", tonemap, tonemap_backward)
    positive = Tensor(rng.uniform(0.1, 5, (1, 3, 4, 4)))
    assert gradcheck(fragment, positive, tolerance=1e-6).passed


def test_psnr_matches_formula(rng):
    for _ in range(50):
        a = Tensor(rng.uniform(size=(1, 3, 8, 8)))
        b = Tensor(rng.uniform(size=(1, 3, 8, 8)))
        expected = 10 * np.log10(1.0 / np.mean((a.data - b.data) ** 2))
        assert abs(psnr(a, b) - expected) < 1e-6


def test_identical_images_hit_the_caps(rng):
    a = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    assert psnr(a, a) == PSNR_CAP
    assert ssim(a, a) == 1.0
    assert l1_loss(a, a) == 0.0 and ssim_loss(a, a) == 0.0


def test_ssim_matches_sliding_window_reference(rng):
    for _ in range(3):
        x = rng.uniform(size=(20, 20))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        got = ssim(Tensor(x[None, None]), Tensor(y[None, None]))
        assert abs(got - reference_ssim(x, y)) < 1e-5


@pytest.mark.slow
def test_ssim_reference_32x32(rng):
    x = rng.uniform(size=(32, 32))
    y = rng.uniform(size=(32, 32))
    assert abs(ssim(Tensor(x[None, None]), Tensor(y[None, None])) - reference_ssim(x, y)) < 1e-5


def test_mismatched_shapes_are_rejected():
    with pytest.raises(ShapeError):
        psnr(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 5))))


def test_losses_are_positive_for_different_images(rng):
    fx = FeatureExtractor.create(dtype=np.float64)
    a = Tensor(rng.uniform(size=(1, 3, 12, 12)))
    b = Tensor(rng.uniform(size=(1, 3, 12, 12)))
    result = total_loss(a, b, LossWeights(), fx)
    assert set(result.components) == {'l1', 'perceptual', 'structural'}
    assert all(v > 0 for v in result.components.values())
    assert total_loss(a, a, LossWeights(), fx).value == pytest.approx(0.0, abs=1e-12)


def test_zero_weights_skip_terms(rng):
    fx = FeatureExtractor.create(dtype=np.float64)
    a = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    b = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    result = total_loss(a, b, LossWeights(lambda_p=0.0, lambda_s=0.0), fx)
    assert result.components == {'l1': l1_loss(a, b)}
    assert result.value == l1_loss(a, b)


@pytest.mark.parametrize("weights", [LossWeights(0.0, 0.0), LossWeights(0.0, 0.5), LossWeights(0.5, 0.0),
                                     LossWeights()])
def test_total_loss_gradient(weights, rng):
    fx = FeatureExtractor.create(channels=(4, 4, 6), taps=(1, 3), dtype=np.float64)
    target = Tensor(rng.uniform(size=(1, 3, 7, 7)))
    pred = Tensor(target.data + rng.choice([-1.0, 1.0], size=target.shape) * rng.uniform(0.05, 0.2, target.shape))

    def value(p, t):
        return total_loss(p, t, weights, fx).value

    def grad(p, t):
        return total_loss(p, t, weights, fx).grad

    report = gradcheck(scalar_fragment("total_loss", value, grad, target), pred, tolerance=1e-5, max_checks=20)
    assert report.passed, report.failing


def test_perceptual_taps_and_custom_weights(tmp_path, rng):
    path = tmp_path / "vgg.npz"
    np.savez(path, **{
        'layer0.weight': rng.standard_normal((4, 3, 3, 3)),
        'layer0.bias': np.zeros(4),
        'layer1.weight': rng.standard_normal((5, 4, 3, 3)),
    })
    fx = FeatureExtractor.load_weights(path, taps=(1, 2))
    assert [layer.out_channels for layer in fx.layers] == [4, 5]
    a = Tensor(rng.uniform(size=(1, 3, 6, 6)))
    assert perceptual_loss(a, a, fx) == 0.0
    with pytest.raises(ShapeError):
        FeatureExtractor.load_weights(path, taps=(3,))


def test_bad_extractor_file(tmp_path):
    path = tmp_path / "empty.npz"
    np.savez(path, other=np.zeros(1))
    with pytest.raises(FormatError):
        FeatureExtractor.load_weights(path)


def test_image_metrics_tonemap_first(rng):
    hdr = Tensor(rng.uniform(0, 20, (1, 3, 16, 16)))
    noisy = Tensor(hdr.data * 1.05)
    db, structural = image_metrics(noisy, hdr)
    assert db == pytest.approx(psnr(tonemap(noisy), tonemap(hdr)))
    assert 0 < structural <= 1


def test_uniform_error_of_a_tenth_is_twenty_db(rng):
    a = Tensor(rng.uniform(0.0, 0.8, size=(1, 3, 8, 8)))
    assert psnr(Tensor(a.data + 0.1), a) == pytest.approx(20.0, abs=1e-9)


def test_psnr_strictly_decreases_with_noise_amplitude(rng):
    a = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    noise = rng.standard_normal(a.shape)
    values = [psnr(Tensor(a.data + amplitude * noise), a) for amplitude in (0.005, 0.01, 0.03, 0.1, 0.3)]
    assert all(later < earlier for earlier, later in zip(values, values[1:]))


def test_inverted_image_is_not_structurally_similar(rng):
    dark = rng.uniform(0.0, 0.4, size=(1, 3, 16, 16))
    a = np.where(rng.random(dark.shape) < 0.5, dark, dark + 0.6)
    assert ssim(Tensor(1.0 - a), Tensor(a)) < 1.0


def test_perceptual_loss_is_symmetric(rng):
    fx = FeatureExtractor.create(dtype=np.float64)
    a = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    b = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    assert perceptual_loss(a, b, fx) == perceptual_loss(b, a, fx)


def test_perceptual_loss_is_quadratic_without_relu(rng):
    fx = FeatureExtractor.create(relu=False, dtype=np.float64)
    base = rng.uniform(size=(1, 3, 8, 8))
    delta = 0.05 * rng.standard_normal(base.shape)
    once = perceptual_loss(Tensor(base + delta), Tensor(base), fx)
    twice = perceptual_loss(Tensor(base + 2 * delta), Tensor(base), fx)
    assert once > 0
    assert twice == pytest.approx(4 * once, rel=1e-9)
