"""
Deterministic tensor kernels with forward and backward passes.

Every feature map is a rank-4 (batch, channels, height, width) array stored
row-major. Convolutions are 3x3, stride 1, zero padding 1, evaluated as a
fixed-order sum of nine shifted tensor contractions so that results are
reproducible bit for bit in single-threaded mode.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import AlignmentError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DIV_EPS = 1e-4
ACTIVATIONS = ('relu', 'none')
CONV_VARIANTS = ('standard', 'dws')


@dataclass
class Tensor:
    """Dense (batch, channels, height, width) feature map with optional gradient"""
    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ShapeError(f"Tensor expects rank-4 (b,c,h,w) data, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = np.ascontiguousarray(data)
        if self.grad is not None:
            grad = np.asarray(self.grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"grad shape {grad.shape} differs from data shape {self.data.shape}")
            self.grad = grad

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=np.float32) -> 'Tensor':
        return cls(np.zeros(tuple(shape), dtype=dtype))

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def astype(self, dtype) -> 'Tensor':
        return Tensor(self.data.astype(dtype))

    def copy(self) -> 'Tensor':
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))


@dataclass
class ConvLayer:
    """3x3 stride-1 convolution, standard or depthwise-separable"""
    in_channels: int
    out_channels: int
    activation: str = "relu"
    variant: str = "standard"
    weight: Optional[np.ndarray] = None      # standard: (out, in, 3, 3); dws pointwise: (out, in)
    depthwise: Optional[np.ndarray] = None   # dws only: (in, 3, 3)
    bias: Optional[np.ndarray] = None        # (out,)
    name: str = ""

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"layer {self.name}: unknown activation '{self.activation}'")
        if self.variant not in CONV_VARIANTS:
            raise ShapeError(f"layer {self.name}: unknown variant '{self.variant}'")
        if self.weight is None:
            self.weight = np.zeros(self.param_shapes()['weight'])
        if self.variant == "dws" and self.depthwise is None:
            self.depthwise = np.zeros(self.param_shapes()['depthwise'], dtype=self.weight.dtype)
        if self.bias is None:
            self.bias = np.zeros(self.out_channels, dtype=self.weight.dtype)
        for key, arr in self.params().items():
            expected = self.param_shapes()[key]
            if arr.shape != expected:
                raise ShapeError(f"layer {self.name}: {key} has shape {arr.shape}, expected {expected}")

    @classmethod
    def create(cls, in_channels: int, out_channels: int, rng: np.random.Generator,
               activation: str = "relu", variant: str = "standard",
               dtype=np.float32, name: str = "") -> 'ConvLayer':
        """He-initialized layer with zero bias"""
        if variant == "dws":
            depthwise = rng.standard_normal((in_channels, 3, 3)) * np.sqrt(2.0 / 9.0)
            weight = rng.standard_normal((out_channels, in_channels)) * np.sqrt(2.0 / in_channels)
            return cls(in_channels, out_channels, activation, variant,
                       weight=weight.astype(dtype), depthwise=depthwise.astype(dtype),
                       bias=np.zeros(out_channels, dtype=dtype), name=name)
        weight = rng.standard_normal((out_channels, in_channels, 3, 3)) * np.sqrt(2.0 / (9 * in_channels))
        return cls(in_channels, out_channels, activation, variant,
                   weight=weight.astype(dtype), bias=np.zeros(out_channels, dtype=dtype), name=name)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        if self.variant == "dws":
            return {
                'depthwise': (self.in_channels, 3, 3),
                'weight': (self.out_channels, self.in_channels),
                'bias': (self.out_channels,),
            }
        return {
            'weight': (self.out_channels, self.in_channels, 3, 3),
            'bias': (self.out_channels,),
        }

    def params(self) -> Dict[str, np.ndarray]:
        if self.variant == "dws":
            return {'depthwise': self.depthwise, 'weight': self.weight, 'bias': self.bias}
        return {'weight': self.weight, 'bias': self.bias}

    def set_param(self, key: str, value: np.ndarray) -> None:
        setattr(self, key, value)

    @property
    def weight_count(self) -> int:
        """Number of kernel weights, bias excluded"""
        if self.variant == "dws":
            return self.in_channels * 9 + self.in_channels * self.out_channels
        return self.out_channels * self.in_channels * 9

    def astype(self, dtype) -> 'ConvLayer':
        return ConvLayer(self.in_channels, self.out_channels, self.activation, self.variant,
                         weight=self.weight.astype(dtype),
                         depthwise=None if self.depthwise is None else self.depthwise.astype(dtype),
                         bias=self.bias.astype(dtype), name=self.name)


def conv_macs(layer: ConvLayer, height: int, width: int) -> int:
    """Multiply-accumulate count of one forward pass over an h x w map"""
    return int(height * width * layer.weight_count)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _standard_valid(xp: np.ndarray, weight: np.ndarray) -> np.ndarray:
    b, _, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    out = np.zeros((b, weight.shape[0], h, w), dtype=np.result_type(xp, weight))
    for i in range(3):
        for j in range(3):
            xs = xp[:, :, i:i + h, j:j + w]
            out += np.tensordot(weight[:, :, i, j], xs, axes=([1], [1])).transpose(1, 0, 2, 3)
    return out


def _depthwise_valid(xp: np.ndarray, depthwise: np.ndarray) -> np.ndarray:
    b, c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    out = np.zeros((b, c, h, w), dtype=np.result_type(xp, depthwise))
    for i in range(3):
        for j in range(3):
            out += depthwise[:, i, j][None, :, None, None] * xp[:, :, i:i + h, j:j + w]
    return out


def _pointwise(z: np.ndarray, weight: np.ndarray) -> np.ndarray:
    return np.tensordot(weight, z, axes=([1], [1])).transpose(1, 0, 2, 3)


def _conv_linear_valid(xp: np.ndarray, layer: ConvLayer) -> np.ndarray:
    if layer.variant == "dws":
        out = _pointwise(_depthwise_valid(xp, layer.depthwise), layer.weight)
    else:
        out = _standard_valid(xp, layer.weight)
    return out + layer.bias[None, :, None, None]


def _check_conv_input(x: Tensor, layer: ConvLayer) -> None:
    if x.channels != layer.in_channels:
        raise ShapeError(
            f"conv {layer.name or '<unnamed>'}: expected {layer.in_channels} input channels, got {x.channels}"
        )


def conv2d_forward(x: Tensor, layer: ConvLayer, threads: int = 1) -> Tensor:
    """3x3 convolution with optional ReLU.

    threads > 1 splits output rows into fixed blocks evaluated concurrently;
    that mode is reproducible to 1e-6 relative rather than bitwise.
    """
    _check_conv_input(x, layer)
    xp = _pad1(x.data)
    h = x.height

    if threads > 1 and h >= 2 * threads:
        bounds = np.linspace(0, h, threads + 1).astype(int)
        blocks = [(int(r0), int(r1)) for r0, r1 in zip(bounds[:-1], bounds[1:]) if r1 > r0]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda rows: _conv_linear_valid(xp[:, :, rows[0]:rows[1] + 2], layer), blocks))
        z = np.concatenate(parts, axis=2)
    else:
        z = _conv_linear_valid(xp, layer)

    if layer.activation == "relu":
        z = np.maximum(z, 0)
    return Tensor(z.astype(x.dtype, copy=False))


def conv2d_backward(x: Tensor, layer: ConvLayer, grad_out: Tensor,
                    out: Optional[Tensor] = None) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """Gradients of conv2d_forward with respect to input, weights and bias.

    `out` is the forward output; when omitted it is recomputed for the ReLU mask.
    The ReLU subgradient at exactly zero is zero.
    """
    _check_conv_input(x, layer)
    expected = (x.batch, layer.out_channels, x.height, x.width)
    if grad_out.shape != expected:
        raise ShapeError(f"conv {layer.name or '<unnamed>'}: grad_out shape {grad_out.shape}, expected {expected}")

    g = grad_out.data
    if layer.activation == "relu":
        if out is None:
            out = conv2d_forward(x, layer)
        g = g * (out.data > 0)

    xp = _pad1(x.data)
    h, w = x.height, x.width
    gxp = np.zeros_like(xp, dtype=np.result_type(xp, g))
    grads: Dict[str, np.ndarray] = {'bias': g.sum(axis=(0, 2, 3))}

    if layer.variant == "dws":
        z = _depthwise_valid(xp, layer.depthwise)
        grads['weight'] = np.tensordot(g, z, axes=([0, 2, 3], [0, 2, 3]))
        gz = np.tensordot(layer.weight, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        g_depth = np.zeros_like(layer.depthwise, dtype=gz.dtype)
        for i in range(3):
            for j in range(3):
                xs = xp[:, :, i:i + h, j:j + w]
                g_depth[:, i, j] = (gz * xs).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + h, j:j + w] += gz * layer.depthwise[:, i, j][None, :, None, None]
        grads['depthwise'] = g_depth
    else:
        g_weight = np.zeros_like(layer.weight, dtype=np.result_type(layer.weight, g))
        for i in range(3):
            for j in range(3):
                xs = xp[:, :, i:i + h, j:j + w]
                g_weight[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, i:i + h, j:j + w] += np.tensordot(
                    layer.weight[:, :, i, j], g, axes=([0], [1])
                ).transpose(1, 0, 2, 3)
        grads['weight'] = g_weight

    grad_x = Tensor(gxp[:, :, 1:-1, 1:-1].astype(x.dtype, copy=False))
    return grad_x, grads


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0))


def relu_backward(out: Tensor, grad_out: Tensor) -> Tensor:
    return Tensor(grad_out.data * (out.data > 0))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor(a.data + b.data)


# ---------------------------------------------------------------------------
# Pixel shuffle / unshuffle, channel ordering (c, dy, dx)
# ---------------------------------------------------------------------------

def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """(b, c, h*r, w*r) -> (b, c*r*r, h, w) without information loss"""
    if r < 1:
        raise AlignmentError(f"pixel_unshuffle: factor must be >= 1, got {r}")
    b, c, hh, ww = x.shape
    if hh % r or ww % r:
        raise AlignmentError(f"pixel_unshuffle: spatial size {hh}x{ww} not divisible by r={r}")
    h, w = hh // r, ww // r
    out = x.data.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h, w)
    return Tensor(np.ascontiguousarray(out))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(b, c*r*r, h, w) -> (b, c, h*r, w*r); exact inverse of pixel_unshuffle"""
    if r < 1:
        raise AlignmentError(f"pixel_shuffle: factor must be >= 1, got {r}")
    b, cc, h, w = x.shape
    if cc % (r * r):
        raise AlignmentError(f"pixel_shuffle: {cc} channels not divisible by r^2={r * r}")
    c = cc // (r * r)
    out = x.data.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h * r, w * r)
    return Tensor(np.ascontiguousarray(out))


def pixel_unshuffle_backward(grad_out: Tensor, r: int) -> Tensor:
    return pixel_shuffle(grad_out, r)


def pixel_shuffle_backward(grad_out: Tensor, r: int) -> Tensor:
    return pixel_unshuffle(grad_out, r)


# ---------------------------------------------------------------------------
# Channel concatenation
# ---------------------------------------------------------------------------

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels, order preserved"""
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    b, _, h, w = xs[0].shape
    for i, t in enumerate(xs):
        if (t.batch, t.height, t.width) != (b, h, w):
            raise ShapeError(
                f"concat_channels: input {i} has batch/spatial {(t.batch, t.height, t.width)}, expected {(b, h, w)}"
            )
    if len(xs) == 1:
        return Tensor(xs[0].data.copy())
    return Tensor(np.concatenate([t.data for t in xs], axis=1))


def channel_offsets(sizes: Sequence[int]) -> List[int]:
    offsets, acc = [], 0
    for size in sizes:
        offsets.append(acc)
        acc += size
    return offsets


def split_channels(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    """Inverse of concat_channels given the part sizes"""
    if sum(sizes) != x.channels:
        raise ShapeError(f"split_channels: sizes sum to {sum(sizes)}, tensor has {x.channels} channels")
    return [Tensor(x.data[:, off:off + size].copy()) for off, size in zip(channel_offsets(sizes), sizes)]


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if (a.batch, a.height, a.width) != (b.batch, b.height, b.width) or \
            (b.channels != a.channels and b.channels != 1):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """a ⊙ b, b may carry a single broadcast channel"""
    _check_broadcast(a, b, "elementwise_mul")
    return Tensor(a.data * b.data)


def elementwise_mul_backward(a: Tensor, b: Tensor, grad_out: Tensor) -> Tuple[Tensor, Tensor]:
    _check_broadcast(a, b, "elementwise_mul_backward")
    ga = grad_out.data * b.data
    gb = grad_out.data * a.data
    if b.channels == 1 and a.channels != 1:
        gb = gb.sum(axis=1, keepdims=True)
    return Tensor(ga), Tensor(gb)


def elementwise_div(a: Tensor, b: Tensor, eps: float = DEFAULT_DIV_EPS) -> Tensor:
    """a / max(b, eps)"""
    _check_broadcast(a, b, "elementwise_div")
    return Tensor(a.data / np.maximum(b.data, eps))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _bilinear_taps(motion: np.ndarray, h: int, w: int):
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing='ij')
    sx = np.clip(xs[None] + motion[:, 0], 0, w - 1)
    sy = np.clip(ys[None] + motion[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    return x0, x1, y0, y1, fx, fy


def _check_motion(x: Tensor, motion: Tensor) -> None:
    if motion.channels != 2 or (motion.batch, motion.height, motion.width) != (x.batch, x.height, x.width):
        raise ShapeError(f"warp_bilinear: motion shape {motion.shape} incompatible with {x.shape}")


def warp_bilinear(x: Tensor, motion: Tensor) -> Tensor:
    """Bilinear resample of x at (px + dx, py + dy), edge-clamped"""
    _check_motion(x, motion)
    b, c, h, w = x.shape
    x0, x1, y0, y1, fx, fy = _bilinear_taps(motion.data, h, w)
    flat = x.data.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w)
        return np.take_along_axis(flat, np.broadcast_to(idx, (b, c, h * w)), axis=2).reshape(b, c, h, w)

    fx = fx[:, None].astype(x.dtype)
    fy = fy[:, None].astype(x.dtype)
    top = (1 - fx) * gather(y0, x0) + fx * gather(y0, x1)
    bottom = (1 - fx) * gather(y1, x0) + fx * gather(y1, x1)
    return Tensor((1 - fy) * top + fy * bottom)


def warp_bilinear_backward(x_shape: Sequence[int], motion: Tensor, grad_out: Tensor) -> Tensor:
    """Adjoint of warp_bilinear with respect to the warped map"""
    b, c, h, w = x_shape
    x0, x1, y0, y1, fx, fy = _bilinear_taps(motion.data, h, w)
    g = grad_out.data.reshape(b, c, h * w)
    grad = np.zeros((b, c, h * w), dtype=grad_out.dtype)
    corners = (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x1, (1 - fy) * fx),
        (y1, x0, fy * (1 - fx)),
        (y1, x1, fy * fx),
    )
    for bi in range(b):
        for yi, xi, weight in corners:
            idx = (yi[bi] * w + xi[bi]).reshape(-1)
            np.add.at(grad[bi], (slice(None), idx), g[bi] * weight[bi].reshape(1, -1))
    return Tensor(grad.reshape(b, c, h, w))


def avg_pool(x: Tensor, r: int) -> Tensor:
    b, c, hh, ww = x.shape
    if hh % r or ww % r:
        raise AlignmentError(f"avg_pool: spatial size {hh}x{ww} not divisible by r={r}")
    return Tensor(x.data.reshape(b, c, hh // r, r, ww // r, r).mean(axis=(3, 5)))


def max_pool(x: Tensor, r: int) -> Tensor:
    b, c, hh, ww = x.shape
    if hh % r or ww % r:
        raise AlignmentError(f"max_pool: spatial size {hh}x{ww} not divisible by r={r}")
    return Tensor(x.data.reshape(b, c, hh // r, r, ww // r, r).max(axis=(3, 5)))


def upsample_nearest(x: Tensor, r: int) -> Tensor:
    return Tensor(np.repeat(np.repeat(x.data, r, axis=2), r, axis=3))


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resize_matrix(n_in: int, r: int, kind: str) -> np.ndarray:
    """(n_in*r, n_in) interpolation matrix, half-pixel centers, clamped edges"""
    n_out = n_in * r
    matrix = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) / r - 0.5
    base = np.floor(src).astype(np.int64)
    if kind == "bilinear":
        offsets = (0, 1)
    else:
        offsets = (-1, 0, 1, 2)
    for off in offsets:
        tap = base + off
        dist = src - tap
        if kind == "bilinear":
            weight = np.maximum(0.0, 1.0 - np.abs(dist))
        else:
            weight = _cubic(dist)
        np.add.at(matrix, (np.arange(n_out), np.clip(tap, 0, n_in - 1)), weight)
    return matrix / matrix.sum(axis=1, keepdims=True)


def resize_upsample(x: Tensor, r: int, kind: str = "bicubic") -> Tensor:
    """Separable bilinear/bicubic upsampling by integer factor r"""
    if kind not in ("bilinear", "bicubic"):
        raise ShapeError(f"unknown upsampling kind '{kind}'")
    my = _resize_matrix(x.height, r, kind).astype(x.dtype)
    mx = _resize_matrix(x.width, r, kind).astype(x.dtype)
    out = np.tensordot(my, x.data, axes=([1], [2]))       # (H, b, c, w)
    out = np.tensordot(out, mx, axes=([3], [1]))          # (H, b, c, W)
    return Tensor(out.transpose(1, 2, 0, 3))


def bilinear_upsample(x: Tensor, r: int) -> Tensor:
    return resize_upsample(x, r, "bilinear")


def bicubic_upsample(x: Tensor, r: int) -> Tensor:
    return resize_upsample(x, r, "bicubic")


if __name__ == "__main__":
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)))
    packed = pixel_unshuffle(x, 4)
    print(f"unshuffle {x.shape} -> {packed.shape}, round trip exact: "
          f"{np.array_equal(pixel_shuffle(packed, 4).data, x.data)}")
    layer = ConvLayer.create(3, 4, rng, dtype=np.float64, name="demo")
    y = conv2d_forward(x, layer)
    print(f"conv {x.shape} -> {y.shape}, macs={conv_macs(layer, 8, 8)}")
