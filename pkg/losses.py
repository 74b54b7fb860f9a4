"""
Training losses (L1, SSIM, fixed-feature perceptual) with analytic
gradients, and the PSNR/SSIM evaluation metrics.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config import LossWeights
from errors import FormatError, ShapeError
from tensor_ops import ConvLayer, Tensor, conv2d_backward, conv2d_forward

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0
DEFAULT_EXTRACTOR_CHANNELS = (8, 8, 16, 16, 16)
DEFAULT_TAPS = (2, 4)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Tone mapping
# ---------------------------------------------------------------------------

def tonemap(x: Tensor) -> Tensor:
    """Reinhard x/(1+x) on max(x, 0); lands in [0, 1)"""
    clipped = np.maximum(x.data, 0)
    return Tensor(clipped / (1 + clipped))


def tonemap_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    positive = x.data > 0
    return Tensor(np.where(positive, grad_out.data / np.square(1 + np.maximum(x.data, 0)), 0))


# ---------------------------------------------------------------------------
# L1
# ---------------------------------------------------------------------------

def l1_loss(pred: Tensor, target: Tensor) -> float:
    _same_shape(pred, target, "l1_loss")
    return float(np.mean(np.abs(pred.data - target.data)))


def l1_loss_backward(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "l1_loss")
    return Tensor(np.sign(pred.data - target.data) / pred.numel)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - size // 2
    weights = np.exp(-offsets ** 2 / (2 * sigma ** 2))
    return weights / weights.sum()


def gaussian_filter(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable same-size filter with zero padding; self-adjoint"""
    half = len(window) // 2
    h, w = x.shape[2], x.shape[3]
    padded = np.pad(x, ((0, 0), (0, 0), (half, half), (0, 0)))
    rows = np.zeros_like(x)
    for k, weight in enumerate(window):
        rows += weight * padded[:, :, k:k + h]
    padded = np.pad(rows, ((0, 0), (0, 0), (0, 0), (half, half)))
    out = np.zeros_like(x)
    for k, weight in enumerate(window):
        out += weight * padded[:, :, :, k:k + w]
    return out


@dataclass
class _SsimTerms:
    mx: np.ndarray
    my: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    s: np.ndarray


def _ssim_terms(a: Tensor, b: Tensor, window: np.ndarray, data_range: float) -> _SsimTerms:
    x, y = a.data, b.data
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = gaussian_filter(x, window), gaussian_filter(y, window)
    sxx = gaussian_filter(x * x, window) - mx * mx
    syy = gaussian_filter(y * y, window) - my * my
    sxy = gaussian_filter(x * y, window) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    return _SsimTerms(mx, my, a1, a2, b1, b2, (a1 * a2) / (b1 * b2))


def ssim_map(a: Tensor, b: Tensor, window: np.ndarray = None, data_range: float = 1.0) -> Tensor:
    """Per-pixel, per-channel SSIM with an 11x11 Gaussian window"""
    _same_shape(a, b, "ssim_map")
    if window is None:
        window = gaussian_window()
    return Tensor(_ssim_terms(a, b, window, data_range).s)


def ssim(a: Tensor, b: Tensor, data_range: float = 1.0) -> float:
    """Mean SSIM"""
    return float(np.mean(ssim_map(a, b, data_range=data_range).data))


def ssim_loss(a: Tensor, b: Tensor) -> float:
    return 1.0 - ssim(a, b)


def ssim_loss_backward(a: Tensor, b: Tensor) -> Tensor:
    """d(1 - mean SSIM)/da"""
    _same_shape(a, b, "ssim_loss")
    window = gaussian_window()
    t = _ssim_terms(a, b, window, 1.0)
    g = -1.0 / a.numel
    denom = t.b1 * t.b2
    d_mx = 2 * t.my * (t.a2 - t.a1) / denom - 2 * t.mx * t.s * (1 / t.b1 - 1 / t.b2)
    d_pxx = -t.s / t.b2
    d_pxy = 2 * t.a1 / denom
    grad = (gaussian_filter(g * d_mx, window)
            + 2 * a.data * gaussian_filter(g * d_pxx, window)
            + b.data * gaussian_filter(g * d_pxy, window))
    return Tensor(grad)


# ---------------------------------------------------------------------------
# Perceptual
# ---------------------------------------------------------------------------

@dataclass
class FeatureExtractor:
    """Fixed conv stack; features are read after the layers listed in `taps` (1-based)"""
    layers: List[ConvLayer]
    taps: Tuple[int, ...] = DEFAULT_TAPS

    @classmethod
    def create(cls, seed: int = 1234, channels: Sequence[int] = DEFAULT_EXTRACTOR_CHANNELS,
               taps: Sequence[int] = DEFAULT_TAPS, relu: bool = True, dtype=np.float32) -> 'FeatureExtractor':
        rng = np.random.default_rng(seed)
        layers, in_channels = [], 3
        for i, out_channels in enumerate(channels):
            layers.append(ConvLayer.create(in_channels, out_channels, rng,
                                           activation="relu" if relu else "none",
                                           dtype=dtype, name=f"vgg.{i}"))
            in_channels = out_channels
        extractor = cls(layers=layers, taps=tuple(taps))
        extractor._check_taps()
        return extractor

    @classmethod
    def load_weights(cls, path, taps: Sequence[int] = DEFAULT_TAPS, relu: bool = True) -> 'FeatureExtractor':
        """Load `layer{i}.weight` (out, in, 3, 3) / `layer{i}.bias` arrays from an .npz file"""
        try:
            archive = np.load(Path(path))
        except (OSError, ValueError) as e:
            raise FormatError(f"cannot load feature extractor weights {path}: {e}")
        layers, i = [], 0
        while f"layer{i}.weight" in archive:
            weight = archive[f"layer{i}.weight"]
            bias = archive[f"layer{i}.bias"] if f"layer{i}.bias" in archive else None
            if weight.ndim != 4 or weight.shape[2:] != (3, 3):
                raise FormatError(f"layer{i}.weight has shape {weight.shape}, expected (out, in, 3, 3)")
            layers.append(ConvLayer(weight.shape[1], weight.shape[0], "relu" if relu else "none",
                                    weight=weight, bias=bias, name=f"vgg.{i}"))
            i += 1
        if not layers or layers[0].in_channels != 3:
            raise FormatError(f"{path}: expected a conv stack with 3 input channels")
        extractor = cls(layers=layers, taps=tuple(taps))
        extractor._check_taps()
        return extractor

    def _check_taps(self) -> None:
        if not self.taps or any(t < 1 or t > len(self.layers) for t in self.taps):
            raise ShapeError(f"tap layers {self.taps} outside 1..{len(self.layers)}")

    def activations(self, x: Tensor) -> List[Tensor]:
        acts, h = [], x
        for layer in self.layers[:max(self.taps)]:
            h = conv2d_forward(h, layer)
            acts.append(h)
        return acts

    def features(self, x: Tensor) -> List[Tensor]:
        acts = self.activations(x)
        return [acts[t - 1] for t in self.taps]

    def astype(self, dtype) -> 'FeatureExtractor':
        return FeatureExtractor([layer.astype(dtype) for layer in self.layers], self.taps)


def _check_rgb(pred: Tensor, target: Tensor) -> None:
    _same_shape(pred, target, "perceptual_loss")
    if pred.channels != 3:
        raise ShapeError(f"perceptual_loss expects 3-channel images, got {pred.channels}")


def perceptual_loss(pred: Tensor, target: Tensor, fx: FeatureExtractor) -> float:
    """Sum over taps of the mean squared feature difference"""
    _check_rgb(pred, target)
    total = 0.0
    for fp, ft in zip(fx.features(pred), fx.features(target)):
        total += float(np.mean(np.square(fp.data - ft.data)))
    return total


def perceptual_loss_backward(pred: Tensor, target: Tensor, fx: FeatureExtractor) -> Tensor:
    _check_rgb(pred, target)
    acts = fx.activations(pred)
    target_feats = dict(zip(fx.taps, fx.features(target)))
    g = np.zeros_like(acts[-1].data)
    for i in range(len(acts) - 1, -1, -1):
        tap = i + 1
        if tap in target_feats:
            diff = acts[i].data - target_feats[tap].data
            g = g + 2 * diff / diff.size
        inp = acts[i - 1] if i > 0 else pred
        grad_in, _ = conv2d_backward(inp, fx.layers[i], Tensor(g), out=acts[i])
        g = grad_in.data
    return Tensor(g)


# ---------------------------------------------------------------------------
# Total
# ---------------------------------------------------------------------------

@dataclass
class TotalLoss:
    """Weighted loss value, its gradient with respect to pred, and the parts"""
    value: float
    grad: Tensor
    components: Dict[str, float] = field(default_factory=dict)


def total_loss(pred: Tensor, target: Tensor, weights: LossWeights, fx: FeatureExtractor) -> TotalLoss:
    """L1 + lambda_p * perceptual + lambda_s * (1 - SSIM); zero-weight terms are skipped"""
    color = l1_loss(pred, target)
    grad = l1_loss_backward(pred, target).data
    components = {'l1': color}
    value = color
    if weights.lambda_p > 0:
        perceptual = perceptual_loss(pred, target, fx)
        components['perceptual'] = perceptual
        value += weights.lambda_p * perceptual
        grad = grad + weights.lambda_p * perceptual_loss_backward(pred, target, fx).data
    if weights.lambda_s > 0:
        structural = ssim_loss(pred, target)
        components['structural'] = structural
        value += weights.lambda_s * structural
        grad = grad + weights.lambda_s * ssim_loss_backward(pred, target).data
    return TotalLoss(value=value, grad=Tensor(grad), components=components)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def psnr(pred: Tensor, target: Tensor, cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE) for unit peak, capped for identical images"""
    _same_shape(pred, target, "psnr")
    mse = float(np.mean(np.square(pred.data.astype(np.float64) - target.data.astype(np.float64))))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def image_metrics(pred: Tensor, target: Tensor) -> Tuple[float, float]:
    """(PSNR dB, SSIM) after tone mapping both images identically"""
    a = tonemap(pred.astype(np.float64))
    b = tonemap(target.astype(np.float64))
    return psnr(a, b), ssim(a, b)


if __name__ == "__main__":
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((1, 3, 32, 32)))
    y = Tensor(np.clip(x.data + rng.normal(0, 0.05, x.shape), 0, 1))
    fx = FeatureExtractor.create(dtype=np.float64)
    result = total_loss(x, y, LossWeights(), fx)
    print(f"psnr={psnr(x, y):.2f} dB ssim={ssim(x, y):.4f} total={result.value:.4f} {result.components}")
