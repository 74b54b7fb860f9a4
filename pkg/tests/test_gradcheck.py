import numpy as np
import pytest

from errors import GradCheckError
from gradcheck import LayerFragment, OpFragment, gradcheck, layer_suite, model_suite
from tensor_ops import ConvLayer, Tensor, relu, relu_backward

from tests.conftest import tiny_full, tiny_lite


def test_every_layer_type_passes():
    reports = layer_suite(seed=3, tolerance=1e-5)
    names = {report.fragment for report in reports}
    assert {"conv_standard_relu", "conv_dws_none", "pixel_shuffle", "warp_bilinear"} <= names
    for report in reports:
        assert report.passed, report.failing


def test_relu_away_from_kink_passes_tight_tolerance(rng):
    values = rng.uniform(0.1, 1.0, size=(1, 2, 4, 4)) * rng.choice([-1.0, 1.0], size=(1, 2, 4, 4))
    fragment = OpFragment("relu", relu, lambda x, g: relu_backward(relu(x), g))
    assert gradcheck(fragment, Tensor(values), tolerance=1e-6).passed


def test_lite_model_on_8x8_passes():
    report = model_suite(tiny_lite(r=2), lr_size=8, tolerance=1e-5)
    assert report.passed, report.failing
    assert not any(block.subsampled for block in report.blocks)
    assert any(block.name.startswith("head.") for block in report.blocks)


@pytest.mark.slow
def test_default_lite_model_passes():
    from config import HNetConfig

    report = model_suite(HNetConfig.lite(r=2), lr_size=8, tolerance=1e-5, max_checks=2)
    assert report.passed, report.failing


def test_full_model_with_history_passes():
    report = model_suite(tiny_full(r=2), lr_size=4, tolerance=1e-5, max_checks=2)
    assert report.passed, report.failing
    assert all(block.subsampled for block in report.blocks if block.size > 2)


def test_broken_backward_is_reported_with_block_name(rng):
    fragment = OpFragment("doubled", lambda t: Tensor(2.0 * t.data), lambda x, g: g)
    report = gradcheck(fragment, Tensor(rng.standard_normal((1, 1, 3, 3))), tolerance=1e-5)
    assert not report.passed
    with pytest.raises(GradCheckError, match="doubled"):
        report.raise_if_failed()


def test_requires_float64(rng):
    layer = ConvLayer.create(2, 2, rng, dtype=np.float32)
    with pytest.raises(GradCheckError, match="float64"):
        gradcheck(LayerFragment(layer), Tensor(np.zeros((1, 2, 3, 3), dtype=np.float32)))


class CorruptedWeightGrad(LayerFragment):
    """Conv fragment whose backward adds a constant to one weight-gradient entry"""

    def __init__(self, layer: ConvLayer, index: int):
        super().__init__(layer)
        self.index = index

    def backward(self, x, grad_out):
        grad_x, grads = super().backward(x, grad_out)
        weight = grads[f"{self.name}.weight"].copy()
        weight.reshape(-1)[self.index] += 1.0
        grads[f"{self.name}.weight"] = weight
        return grad_x, grads


def test_every_corrupted_weight_gradient_entry_is_caught(rng):
    layer = ConvLayer.create(3, 4, rng, dtype=np.float64, name="conv")
    x = Tensor(rng.standard_normal((1, 3, 5, 5)))
    for index in range(layer.weight.size):
        report = gradcheck(CorruptedWeightGrad(layer, index), x, tolerance=1e-5, check_input=False)
        assert [block.name for block in report.failing] == ["conv.weight"], index


def test_full_coverage_is_the_default(rng):
    layer = ConvLayer.create(3, 4, rng, dtype=np.float64, name="conv")
    report = gradcheck(LayerFragment(layer), Tensor(rng.standard_normal((1, 3, 4, 4))))
    sizes = {block.name: block.checked for block in report.blocks}
    assert sizes == {"input": 48, "conv.weight": 108, "conv.bias": 4}
    assert not any(block.subsampled for block in report.blocks)


def test_sampling_is_opt_in_and_flagged(rng):
    layer = ConvLayer.create(3, 4, rng, dtype=np.float64, name="conv")
    report = gradcheck(LayerFragment(layer), Tensor(rng.standard_normal((1, 3, 4, 4))), max_checks=5)
    weight = next(block for block in report.blocks if block.name == "conv.weight")
    assert (weight.checked, weight.size) == (5, 108)
    assert weight.subsampled
    bias = next(block for block in report.blocks if block.name == "conv.bias")
    assert not bias.subsampled
