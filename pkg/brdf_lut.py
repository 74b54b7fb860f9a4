"""
Split-sum environment BRDF table, F_beta maps and (de)modulation.

The table stores, over (roughness, NdotV), the scale A and bias B of the
GGX specular pre-integral so that the pre-integrated BRDF of a surface with
reflectance F0 is F0*A + B. Integration uses visible-normal sampling, for
which the per-sample estimator reduces to F * G2 / G1(V).
"""
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from errors import ConfigError, FormatError, SchemaError, ShapeError
from setup_environment import log_event
from tensor_ops import DEFAULT_DIV_EPS, Tensor, elementwise_div

logger = logging.getLogger(__name__)

LUT_MAGIC = b"SSLUT01"
_LUT_HEADER = struct.Struct('<IIIQ')
ALPHA_FLOOR = 1e-4
DEFAULT_NDOTV_FLOOR = 1e-2
SAMPLERS = ('hammersley', 'random')

ArrayLike = Union[float, np.ndarray]


@dataclass
class EnvBrdfLut:
    """Pre-integrated BRDF scale/bias over (roughness, NdotV)"""
    scale: np.ndarray            # A, shape (n_roughness, n_ndotv)
    bias: np.ndarray             # B, same shape
    sample_count: int
    seed: int
    ndotv_floor: float = DEFAULT_NDOTV_FLOOR
    sampler: str = "hammersley"
    stderr: Optional[np.ndarray] = None   # (2, n_roughness, n_ndotv), not serialized

    @property
    def size(self) -> Tuple[int, int]:
        return self.scale.shape

    @property
    def roughness_axis(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.size[0])

    @property
    def ndotv_axis(self) -> np.ndarray:
        return np.linspace(self.ndotv_floor, 1.0, self.size[1])


# ---------------------------------------------------------------------------
# GGX helpers
# ---------------------------------------------------------------------------

def alpha_from_roughness(roughness: ArrayLike) -> ArrayLike:
    return np.maximum(np.square(roughness), ALPHA_FLOOR)


def smith_lambda(cos_theta: np.ndarray, alpha: ArrayLike) -> np.ndarray:
    cos2 = np.clip(np.square(cos_theta), 1e-12, 1.0)
    tan2 = (1.0 - cos2) / cos2
    return 0.5 * (np.sqrt(1.0 + np.square(alpha) * tan2) - 1.0)


def ggx_ndf(cos_h: np.ndarray, alpha: ArrayLike) -> np.ndarray:
    a2 = np.square(alpha)
    denom = np.square(cos_h) * (a2 - 1.0) + 1.0
    return a2 / (np.pi * np.square(denom))


def schlick_weight(v_dot_h: np.ndarray) -> np.ndarray:
    return np.power(1.0 - np.clip(v_dot_h, 0.0, 1.0), 5)


def radical_inverse(indices: np.ndarray) -> np.ndarray:
    """Van der Corput base-2 sequence via 32-bit reversal"""
    bits = indices.astype(np.uint32)
    bits = (bits << np.uint32(16)) | (bits >> np.uint32(16))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    return bits.astype(np.float64) * 2.3283064365386963e-10


def cell_uniforms(seed: int, cell_index: int, samples: int, sampler: str) -> Tuple[np.ndarray, np.ndarray]:
    """Per-cell independent stream, derived from (seed, cell_index)"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, cell_index]))
    if sampler == "hammersley":
        i = np.arange(samples)
        shift = rng.random(2)
        u1 = np.mod((i + 0.5) / samples + shift[0], 1.0)
        u2 = np.mod(radical_inverse(i) + shift[1], 1.0)
        return u1, u2
    if sampler == "random":
        u = rng.random((2, samples))
        return u[0], u[1]
    raise ConfigError(f"unknown LUT sampler '{sampler}', expected one of {SAMPLERS}")


def sample_vndf(ndotv: np.ndarray, alpha: np.ndarray, u1: np.ndarray, u2: np.ndarray):
    """Visible-normal sample of the isotropic GGX lobe for V=(sin, 0, cos).

    Returns the half vector components (hx, hy, hz).
    """
    vz = ndotv
    vx = np.sqrt(np.maximum(0.0, 1.0 - vz * vz))
    # Stretch view to the hemisphere configuration
    vhx, vhy, vhz = alpha * vx, np.zeros_like(vx), vz
    norm = np.sqrt(vhx * vhx + vhz * vhz)
    vhx, vhz = vhx / norm, vhz / norm

    lensq = vhx * vhx + vhy * vhy
    has = lensq > 0
    inv = 1.0 / np.sqrt(np.where(has, lensq, 1.0))
    t1x = np.where(has, -vhy * inv, 1.0)
    t1y = np.where(has, vhx * inv, 0.0)
    t2x = -vhz * t1y
    t2y = vhz * t1x
    t2z = vhx * t1y - vhy * t1x

    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    p1 = r * np.cos(phi)
    p2 = r * np.sin(phi)
    s = 0.5 * (1.0 + vhz)
    p2 = (1.0 - s) * np.sqrt(np.maximum(0.0, 1.0 - p1 * p1)) + s * p2
    p3 = np.sqrt(np.maximum(0.0, 1.0 - p1 * p1 - p2 * p2))

    nx = p1 * t1x + p2 * t2x + p3 * vhx
    ny = p1 * t1y + p2 * t2y + p3 * vhy
    nz = p2 * t2z + p3 * vhz

    hx, hy, hz = alpha * nx, alpha * ny, np.maximum(nz, 0.0)
    hn = np.sqrt(hx * hx + hy * hy + hz * hz)
    hn = np.where(hn > 0, hn, 1.0)
    return hx / hn, hy / hn, hz / hn


def integrate_cells(roughness: np.ndarray, ndotv: np.ndarray, u1: np.ndarray, u2: np.ndarray):
    """Estimate (A, B) and their standard errors for a batch of cells.

    roughness, ndotv: (k,); u1, u2: (k, n). Returns four (k,) arrays.
    """
    alpha = alpha_from_roughness(roughness)[:, None]
    vz = ndotv[:, None]
    vx = np.sqrt(np.maximum(0.0, 1.0 - vz * vz))
    hx, _, hz = sample_vndf(np.broadcast_to(vz, u1.shape), alpha, u1, u2)

    v_dot_h = vx * hx + vz * hz
    l_z = 2.0 * v_dot_h * hz - vz
    valid = l_z > 0

    lam_v = smith_lambda(vz, alpha)
    lam_l = smith_lambda(np.where(valid, l_z, 1.0), alpha)
    weight = np.where(valid, (1.0 + lam_v) / (1.0 + lam_v + lam_l), 0.0)

    fc = schlick_weight(v_dot_h)
    a_terms = (1.0 - fc) * weight
    b_terms = fc * weight
    n = u1.shape[1]
    a = a_terms.mean(axis=1)
    b = b_terms.mean(axis=1)
    a_err = a_terms.std(axis=1) / np.sqrt(n)
    b_err = b_terms.std(axis=1) / np.sqrt(n)
    return a, b, a_err, b_err


def precompute_lut(n_roughness: int = 32, n_ndotv: int = 32, samples: int = 1024, seed: int = 0,
                   sampler: str = "hammersley", ndotv_floor: float = DEFAULT_NDOTV_FLOOR,
                   threads: int = 1) -> EnvBrdfLut:
    """Monte Carlo split-sum table; identical for any thread count"""
    if samples < 1:
        raise ConfigError(f"LUT needs at least one sample per cell, got {samples}")
    if n_roughness < 2 or n_ndotv < 2:
        raise ConfigError(f"LUT grid must be at least 2x2, got {n_roughness}x{n_ndotv}")
    if sampler not in SAMPLERS:
        raise ConfigError(f"unknown LUT sampler '{sampler}', expected one of {SAMPLERS}")

    start = time.perf_counter()
    roughness_axis = np.linspace(0.0, 1.0, n_roughness)
    ndotv_axis = np.linspace(ndotv_floor, 1.0, n_ndotv)
    scale = np.zeros((n_roughness, n_ndotv))
    bias = np.zeros((n_roughness, n_ndotv))
    stderr = np.zeros((2, n_roughness, n_ndotv))

    def row(i: int) -> None:
        streams = [cell_uniforms(seed, i * n_ndotv + j, samples, sampler) for j in range(n_ndotv)]
        u1 = np.stack([s[0] for s in streams])
        u2 = np.stack([s[1] for s in streams])
        a, b, a_err, b_err = integrate_cells(np.full(n_ndotv, roughness_axis[i]), ndotv_axis, u1, u2)
        scale[i], bias[i] = a, b
        stderr[0, i], stderr[1, i] = a_err, b_err

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(row, range(n_roughness)))
    else:
        for i in range(n_roughness):
            row(i)

    log_event(logger, "lut precomputed", size=f"{n_roughness}x{n_ndotv}", samples=samples,
              seed=seed, sampler=sampler, seconds=time.perf_counter() - start)
    return EnvBrdfLut(scale=scale, bias=bias, sample_count=samples, seed=seed,
                      ndotv_floor=ndotv_floor, sampler=sampler, stderr=stderr)


def uniform_hemisphere_reference(roughness: float, ndotv: float, samples: int = 1 << 22,
                                 seed: int = 0, chunk: int = 1 << 20) -> Tuple[float, float]:
    """Brute-force (A, B) with stratified uniform hemisphere sampling"""
    alpha = float(alpha_from_roughness(roughness))
    vz = float(ndotv)
    vx = float(np.sqrt(max(0.0, 1.0 - vz * vz)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    m = int(np.sqrt(samples))
    total = m * m
    lam_v = float(smith_lambda(np.array(vz), alpha))

    acc_a, acc_b = 0.0, 0.0
    for begin in range(0, total, chunk):
        idx = np.arange(begin, min(begin + chunk, total))
        jitter = rng.random((2, idx.size))
        cos_t = (idx // m + jitter[0]) / m
        phi = 2.0 * np.pi * (idx % m + jitter[1]) / m
        sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
        lx, ly, lz = sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t

        hx, hy, hz = vx + lx, ly, vz + lz
        hn = np.sqrt(hx * hx + hy * hy + hz * hz)
        hx, hy, hz = hx / hn, hy / hn, hz / hn
        v_dot_h = vx * hx + vz * hz

        g2 = 1.0 / (1.0 + lam_v + smith_lambda(lz, alpha))
        # f * cos / pdf with pdf = 1 / (2 pi); NdotL cancels
        value = 2.0 * np.pi * ggx_ndf(hz, alpha) * g2 / (4.0 * vz)
        fc = schlick_weight(v_dot_h)
        acc_a += float(np.sum(value * (1.0 - fc)))
        acc_b += float(np.sum(value * fc))
    return acc_a / total, acc_b / total


# ---------------------------------------------------------------------------
# Lookup
# ---------------------------------------------------------------------------

def _grid_coordinate(value: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    pos = value * (n - 1)
    snapped = np.round(pos)
    pos = np.where(np.abs(pos - snapped) < 1e-9, snapped, pos)
    i0 = np.clip(np.floor(pos), 0, n - 2).astype(np.int64)
    return i0, pos - i0


def query_lut(lut: EnvBrdfLut, roughness: ArrayLike, ndotv: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    """Bilinear (A, B) lookup; inputs are clamped into the grid domain"""
    scalar = np.ndim(roughness) == 0 and np.ndim(ndotv) == 0
    r = np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0)
    v = np.clip(np.asarray(ndotv, dtype=np.float64), lut.ndotv_floor, 1.0)
    n_r, n_v = lut.size

    i0, fu = _grid_coordinate(r, n_r)
    j0, fv = _grid_coordinate((v - lut.ndotv_floor) / (1.0 - lut.ndotv_floor), n_v)

    def blend(table: np.ndarray) -> np.ndarray:
        t = table.astype(np.float64, copy=False)
        top = (1.0 - fv) * t[i0, j0] + fv * t[i0, j0 + 1]
        bottom = (1.0 - fv) * t[i0 + 1, j0] + fv * t[i0 + 1, j0 + 1]
        return (1.0 - fu) * top + fu * bottom

    a, b = blend(lut.scale), blend(lut.bias)
    if scalar:
        return float(a), float(b)
    return a, b


# ---------------------------------------------------------------------------
# G-buffer and F_beta
# ---------------------------------------------------------------------------

GBUFFER_CHANNELS = {
    'albedo': 3,
    'specular': 3,
    'roughness': 1,
    'normal': 3,
    'ndotv': 1,
    'emissive': 3,
    'depth': 1,
    'motion': 2,
}


@dataclass
class ShadingGBuffer:
    """Per-pixel shading attributes, each array shaped (batch, channels, h, w)"""
    albedo: Optional[np.ndarray] = None
    specular: Optional[np.ndarray] = None    # F0 reflectance
    roughness: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    ndotv: Optional[np.ndarray] = None
    emissive: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    motion: Optional[np.ndarray] = None

    def channel(self, name: str) -> np.ndarray:
        if name not in GBUFFER_CHANNELS:
            raise SchemaError(f"unknown G-buffer channel '{name}'")
        value = getattr(self, name)
        if value is None:
            raise SchemaError(f"G-buffer is missing channel '{name}'")
        if value.ndim != 4 or value.shape[1] != GBUFFER_CHANNELS[name]:
            raise SchemaError(
                f"G-buffer channel '{name}' has shape {value.shape}, expected {GBUFFER_CHANNELS[name]} channels"
            )
        return value

    def present(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @property
    def spatial(self) -> Tuple[int, int]:
        first = next(iter(self.present().values()))
        return first.shape[2], first.shape[3]

    def tensor(self, names: Iterable[str]) -> Tensor:
        return Tensor(np.concatenate([self.channel(name) for name in names], axis=1))

    def map(self, fn) -> 'ShadingGBuffer':
        return ShadingGBuffer(**{name: fn(name, value) for name, value in self.present().items()})

    def crop(self, y: int, x: int, h: int, w: int) -> 'ShadingGBuffer':
        return self.map(lambda _, v: v[:, :, y:y + h, x:x + w])

    def validate(self, tolerance: float = 1e-3) -> None:
        """Check unit normals, roughness range and ndotv range"""
        if self.normal is not None:
            length = np.sqrt(np.sum(np.square(self.normal), axis=1))
            if np.any(np.abs(length - 1.0) > tolerance):
                raise SchemaError("G-buffer normals are not unit length")
        if self.roughness is not None and (self.roughness.min() < 0 or self.roughness.max() > 1):
            raise SchemaError("G-buffer roughness outside [0, 1]")
        if self.ndotv is not None and (self.ndotv.min() <= 0 or self.ndotv.max() > 1 + tolerance):
            raise SchemaError("G-buffer ndotv outside (0, 1]")
        if self.depth is not None and self.depth.min() <= 0:
            raise SchemaError("G-buffer depth must be positive")
        if self.emissive is not None and self.emissive.min() < 0:
            raise SchemaError("G-buffer emissive must be non-negative")


def build_fbeta_map(g: ShadingGBuffer, lut: EnvBrdfLut, include_diffuse: bool = True) -> Tensor:
    """Per-pixel F_beta = F0*A + B (+ (1 - mean F0) * albedo with the diffuse lobe)"""
    f0 = g.channel('specular')
    roughness = g.channel('roughness')
    ndotv = g.channel('ndotv')
    a, b = query_lut(lut, roughness[:, 0], ndotv[:, 0])
    fbeta = f0 * a[:, None] + b[:, None]
    if include_diffuse:
        albedo = g.channel('albedo')
        fbeta = fbeta + (1.0 - f0.mean(axis=1, keepdims=True)) * albedo
    return Tensor(fbeta.astype(np.result_type(f0.dtype, np.float32), copy=False))


def demodulate(color: Tensor, fbeta: Tensor, eps: float = DEFAULT_DIV_EPS) -> Tensor:
    """L_D = color / max(F_beta, eps); emissive is removed by the caller"""
    if color.shape != fbeta.shape:
        raise ShapeError(f"demodulate: color {color.shape} and F_beta {fbeta.shape} differ")
    return elementwise_div(color, fbeta, eps)


def remodulate(ld: Tensor, fbeta: Tensor, emissive: Tensor) -> Tensor:
    """I = F_beta * L_D + emissive"""
    if not (ld.shape == fbeta.shape == emissive.shape):
        raise ShapeError(f"remodulate: shapes {ld.shape}, {fbeta.shape}, {emissive.shape} differ")
    return Tensor(fbeta.data * ld.data + emissive.data)


# ---------------------------------------------------------------------------
# SSLUT01 files
# ---------------------------------------------------------------------------

def save_lut(lut: EnvBrdfLut, path) -> None:
    n_r, n_v = lut.size
    pairs = np.stack([lut.scale, lut.bias], axis=-1).astype('<f4')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(LUT_MAGIC)
        f.write(_LUT_HEADER.pack(n_r, n_v, lut.sample_count, lut.seed))
        f.write(pairs.tobytes())


def load_lut(path, ndotv_floor: float = DEFAULT_NDOTV_FLOOR) -> EnvBrdfLut:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read LUT {path}: {e}")
    if raw[:len(LUT_MAGIC)] != LUT_MAGIC:
        raise FormatError(f"{path}: bad LUT magic {raw[:len(LUT_MAGIC)]!r}")
    head = len(LUT_MAGIC) + _LUT_HEADER.size
    if len(raw) < head:
        raise FormatError(f"{path}: truncated LUT header")
    n_r, n_v, samples, seed = _LUT_HEADER.unpack_from(raw, len(LUT_MAGIC))
    expected = n_r * n_v * 2 * 4
    if len(raw) - head != expected:
        raise FormatError(f"{path}: LUT payload has {len(raw) - head} bytes, expected {expected}")
    pairs = np.frombuffer(raw, dtype='<f4', offset=head).reshape(n_r, n_v, 2).astype(np.float32)
    return EnvBrdfLut(scale=pairs[..., 0].copy(), bias=pairs[..., 1].copy(),
                      sample_count=samples, seed=seed, ndotv_floor=ndotv_floor)


if __name__ == "__main__":
    table = precompute_lut(16, 16, 256, seed=1)
    print(f"A range [{table.scale.min():.3f}, {table.scale.max():.3f}], "
          f"max A+B = {(table.scale + table.bias).max():.4f}")
    print("mirror cell (r=0, ndotv=1):", query_lut(table, 0.0, 1.0))
