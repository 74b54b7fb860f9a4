"""
Finite-difference gradient checking for layers, ops and whole models
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import GradCheckError
from setup_environment import log_event
from tensor_ops import (
    ConvLayer, Tensor, concat_channels, conv2d_backward, conv2d_forward,
    elementwise_mul, elementwise_mul_backward, pixel_shuffle, pixel_shuffle_backward,
    pixel_unshuffle, pixel_unshuffle_backward, relu, relu_backward, split_channels,
    warp_bilinear, warp_bilinear_backward,
)

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
EPS64 = np.finfo(np.float64).eps


@dataclass
class BlockResult:
    """Check outcome for one parameter block"""
    name: str
    checked: int
    max_rel_error: float
    max_abs_error: float
    passed: bool
    size: int = 0

    @property
    def subsampled(self) -> bool:
        return self.checked < self.size


@dataclass
class GradCheckReport:
    """Per-block comparison of analytic and numeric gradients"""
    fragment: str
    tolerance: float
    blocks: List[BlockResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(block.passed for block in self.blocks)

    @property
    def failing(self) -> List[BlockResult]:
        return [block for block in self.blocks if not block.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(block) for block in self.blocks])

    def raise_if_failed(self) -> None:
        if self.passed:
            return
        lines = [f"{b.name}: max rel error {b.max_rel_error:.3e} over {b.checked}/{b.size} entries"
                 for b in self.failing]
        raise GradCheckError(
            f"gradcheck failed for {self.fragment} at tolerance {self.tolerance:g}:\n  " + "\n  ".join(lines),
            report=self,
        )


class LayerFragment:
    """A single conv layer as a gradcheck fragment"""

    def __init__(self, layer: ConvLayer):
        self.layer = layer
        self.name = layer.name or f"conv_{layer.variant}_{layer.activation}"

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{self.name}.{key}": value for key, value in self.layer.params().items()}

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_forward(x, self.layer)

    def backward(self, x: Tensor, grad_out: Tensor) -> Tuple[Tensor, Dict[str, np.ndarray]]:
        grad_x, grads = conv2d_backward(x, self.layer, grad_out)
        return grad_x, {f"{self.name}.{key}": value for key, value in grads.items()}


class OpFragment:
    """A parameterless op given as forward/backward callables"""

    def __init__(self, name: str, forward: Callable[[Tensor], Tensor],
                 backward: Callable[[Tensor, Tensor], Tensor]):
        self.name = name
        self._forward = forward
        self._backward = backward

    def parameters(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor) -> Tensor:
        return self._forward(x)

    def backward(self, x: Tensor, grad_out: Tensor) -> Tuple[Tensor, Dict[str, np.ndarray]]:
        return self._backward(x, grad_out), {}


def _objective(fragment, x: Tensor, proj: np.ndarray) -> Tuple[float, float]:
    out = fragment.forward(x).data
    terms = out * proj
    return float(np.sum(terms)), float(np.sum(np.abs(terms)))


def _central_difference(fragment, x: Tensor, arr: np.ndarray, index: int,
                        proj: np.ndarray, step: float) -> Tuple[float, float]:
    flat = arr.reshape(-1)
    original = flat[index]
    flat[index] = original + step
    f_plus, s_plus = _objective(fragment, x, proj)
    flat[index] = original - step
    f_minus, s_minus = _objective(fragment, x, proj)
    flat[index] = original
    noise = 32.0 * EPS64 * (s_plus + s_minus) / (2.0 * step)
    return (f_plus - f_minus) / (2.0 * step), noise


def _numeric_derivative(fragment, x, arr, index, proj, step, tolerance) -> Tuple[float, float]:
    """Central difference, shrinking the step when a ReLU kink is crossed"""
    value, noise = _central_difference(fragment, x, arr, index, proj, step)
    for _ in range(4):
        half, half_noise = _central_difference(fragment, x, arr, index, proj, step / 2)
        scale = max(abs(value), abs(half))
        if abs(value - half) <= 0.1 * tolerance * scale + 2.0 * (noise + half_noise):
            return half, half_noise
        step /= 10.0
        value, noise = _central_difference(fragment, x, arr, index, proj, step)
    return value, noise


def gradcheck(fragment, x: Tensor, tolerance: float = 1e-5, step: float = DEFAULT_STEP,
              max_checks: Optional[int] = None, seed: int = 0, check_input: bool = True) -> GradCheckReport:
    """Compare analytic gradients of `fragment` against central differences.

    The scalar objective is sum(forward(x) * P) for a fixed random projection P.
    Every entry of every block is compared unless `max_checks` is given, in which
    case larger blocks are checked on a seeded random subset and marked `subsampled`.
    """
    if x.dtype != np.float64 or any(p.dtype != np.float64 for p in fragment.parameters().values()):
        raise GradCheckError("gradcheck requires float64 inputs and parameters")

    rng = np.random.default_rng(seed)
    out = fragment.forward(x)
    proj = rng.standard_normal(out.shape)
    grad_x, grads = fragment.backward(x, Tensor(proj))

    blocks: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    if check_input:
        blocks['input'] = (x.data, grad_x.data)
    for name, arr in fragment.parameters().items():
        if name not in grads:
            raise GradCheckError(f"fragment produced no gradient for block '{name}'")
        blocks[name] = (arr, grads[name])

    report = GradCheckReport(fragment=getattr(fragment, 'name', type(fragment).__name__), tolerance=tolerance)
    for name, (arr, analytic) in blocks.items():
        analytic = np.asarray(analytic).reshape(-1)
        if analytic.size != arr.size:
            raise GradCheckError(f"block '{name}': gradient has {analytic.size} entries, parameter has {arr.size}")
        if not arr.flags['C_CONTIGUOUS']:
            raise GradCheckError(f"block '{name}' must be C-contiguous to be perturbed in place")
        if max_checks is None or arr.size <= max_checks:
            indices = np.arange(arr.size)
        else:
            indices = np.sort(rng.choice(arr.size, size=max_checks, replace=False))

        max_rel, max_abs = 0.0, 0.0
        for index in indices:
            numeric, noise = _numeric_derivative(fragment, x, arr, int(index), proj, step, tolerance)
            a = float(analytic[index])
            diff = abs(a - numeric)
            denom = max(abs(a), abs(numeric), noise / tolerance, 1e-300)
            max_rel = max(max_rel, diff / denom)
            max_abs = max(max_abs, diff)
        report.blocks.append(BlockResult(name, int(len(indices)), max_rel, max_abs, max_rel <= tolerance,
                                          size=int(arr.size)))

    log_event(logger, "gradcheck", fragment=report.fragment, blocks=len(report.blocks),
              passed=report.passed, level=logging.DEBUG)
    return report


def _bounded_away(shape, rng: np.random.Generator, margin: float) -> Tensor:
    values = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    values += np.sign(values) * margin
    return Tensor(values)


def layer_suite(seed: int = 0, tolerance: float = 1e-5) -> List[GradCheckReport]:
    """Gradcheck every layer type the network uses"""
    rng = np.random.default_rng(seed)
    reports = []

    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    for variant in ("standard", "dws"):
        for activation in ("relu", "none"):
            layer = ConvLayer.create(3, 4, rng, activation=activation, variant=variant,
                                     dtype=np.float64, name=f"conv_{variant}_{activation}")
            layer.bias = rng.standard_normal(4) * 0.1
            reports.append(gradcheck(LayerFragment(layer), x, tolerance=tolerance, seed=seed))

    xr = _bounded_away((1, 4, 4, 4), rng, margin=10 * DEFAULT_STEP)
    reports.append(gradcheck(OpFragment("relu", relu, lambda inp, g: relu_backward(relu(inp), g)),
                             xr, tolerance=tolerance, seed=seed))

    xs = Tensor(rng.standard_normal((1, 2, 8, 8)))
    reports.append(gradcheck(OpFragment("pixel_unshuffle", lambda t: pixel_unshuffle(t, 2),
                                        lambda inp, g: pixel_unshuffle_backward(g, 2)),
                             xs, tolerance=tolerance, seed=seed))
    xc = Tensor(rng.standard_normal((1, 8, 3, 3)))
    reports.append(gradcheck(OpFragment("pixel_shuffle", lambda t: pixel_shuffle(t, 2),
                                        lambda inp, g: pixel_shuffle_backward(g, 2)),
                             xc, tolerance=tolerance, seed=seed))

    other = Tensor(rng.standard_normal((1, 2, 8, 8)))
    reports.append(gradcheck(OpFragment("concat_channels", lambda t: concat_channels([t, other]),
                                        lambda inp, g: split_channels(g, [2, 2])[0]),
                             xs, tolerance=tolerance, seed=seed))

    scale = Tensor(rng.uniform(0.2, 1.5, size=(1, 2, 8, 8)))
    reports.append(gradcheck(OpFragment("elementwise_mul", lambda t: elementwise_mul(t, scale),
                                        lambda inp, g: elementwise_mul_backward(inp, scale, g)[0]),
                             xs, tolerance=tolerance, seed=seed))

    motion = Tensor(rng.uniform(-1.5, 1.5, size=(1, 2, 8, 8)))
    reports.append(gradcheck(OpFragment("warp_bilinear", lambda t: warp_bilinear(t, motion),
                                        lambda inp, g: warp_bilinear_backward(inp.shape, motion, g)),
                             xs, tolerance=tolerance, seed=seed))
    return reports


def model_suite(config, seed: int = 0, lr_size: int = 8, tolerance: float = 1e-5,
                max_checks: Optional[int] = None) -> GradCheckReport:
    """Gradcheck a whole H-Net built from `config` on a tiny LR input"""
    from hnet_model import HNetModel, ModelFragment

    model = HNetModel.create(config, seed=seed, dtype=np.float64)
    fragment = ModelFragment.random(model, lr_size=lr_size, seed=seed)
    return gradcheck(fragment, fragment.ld_lr, tolerance=tolerance, max_checks=max_checks, seed=seed)


if __name__ == "__main__":
    for rep in layer_suite():
        status = "ok" if rep.passed else "FAIL"
        worst = max((b.max_rel_error for b in rep.blocks), default=0.0)
        print(f"{rep.fragment:28} {status:4} worst={worst:.2e}")
