"""
Procedural paired LR/HR frame sequences with full G-buffers.

Scenes are analytic spheres and planes lit by directional and point lights,
shaded at pixel centers with the GGX + Lambertian model the LUT integrates.
Motion vectors are computed analytically by reprojecting each hit point into
the previous frame's camera.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from brdf_lut import ALPHA_FLOOR, ShadingGBuffer, ggx_ndf, schlick_weight, smith_lambda
from config import DatasetSettings
from errors import ConfigError, SchemaError
from frame_io import FrameBundle, frame_dir_name, read_bundle, write_bundle
from setup_environment import log_event, runtime_settings
from tensor_ops import Tensor

logger = logging.getLogger(__name__)

SEQUENCE_FILE = "sequence.json"
FAR_DEPTH = 1.0e3
MIN_NDOTV = 1e-4
HIT_EPS = 1e-6
TEXTURES = ('constant', 'checker', 'noise')
CAMERA_PATHS = ('static', 'pan', 'orbit')

Vec3 = Tuple[float, float, float]


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _vec(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------

@dataclass
class Material:
    """Textured GGX + Lambertian material; the texture value blends the two ends"""
    albedo: Vec3 = (0.5, 0.5, 0.5)
    albedo2: Vec3 = (0.5, 0.5, 0.5)
    specular: Vec3 = (0.04, 0.04, 0.04)
    roughness: float = 0.5
    roughness2: float = 0.5
    emissive: Vec3 = (0.0, 0.0, 0.0)
    texture: str = "constant"
    texture_scale: float = 1.0
    texture_seed: int = 0

    def validate(self) -> None:
        for name in ('albedo', 'albedo2', 'specular'):
            value = _vec(getattr(self, name))
            if value.min() < 0 or value.max() > 1:
                raise ConfigError(f"material {name} {tuple(value)} outside [0, 1]")
        for name in ('roughness', 'roughness2'):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"material {name} {getattr(self, name)} outside [0, 1]")
        if _vec(self.emissive).min() < 0:
            raise ConfigError("material emissive must be non-negative")
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture '{self.texture}', expected one of {TEXTURES}")


@dataclass
class Sphere:
    """Sphere moving with constant velocity (world units per frame)"""
    center: Vec3
    radius: float
    material: Material
    velocity: Vec3 = (0.0, 0.0, 0.0)

    def origin_at(self, frame: float) -> np.ndarray:
        return _vec(self.center) + frame * _vec(self.velocity)


@dataclass
class Plane:
    """Infinite plane through `point` with unit `normal`"""
    point: Vec3
    normal: Vec3
    material: Material
    velocity: Vec3 = (0.0, 0.0, 0.0)

    def origin_at(self, frame: float) -> np.ndarray:
        return _vec(self.point) + frame * _vec(self.velocity)

    def tangents(self) -> Tuple[np.ndarray, np.ndarray]:
        n = _normalize(_vec(self.normal))
        helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        t1 = _normalize(np.cross(helper, n))
        return t1, np.cross(n, t1)


@dataclass
class DirectionalLight:
    """Light arriving from `direction` (pointing towards the light)"""
    direction: Vec3
    intensity: Vec3


@dataclass
class PointLight:
    position: Vec3
    intensity: Vec3


@dataclass
class Scene:
    """Primitives, lights and the background radiance for rays that miss"""
    objects: List[Union[Sphere, Plane]] = field(default_factory=list)
    lights: List[Union[DirectionalLight, PointLight]] = field(default_factory=list)
    background: Vec3 = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        for obj in self.objects:
            obj.material.validate()


@dataclass
class Camera:
    """Pinhole camera, vertical field of view in degrees"""
    position: Vec3 = (0.0, 0.5, 4.0)
    target: Vec3 = (0.0, 0.0, 0.0)
    up: Vec3 = (0.0, 1.0, 0.0)
    fov_y: float = 45.0

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        forward = _normalize(_vec(self.target) - _vec(self.position))
        right = _normalize(np.cross(forward, _vec(self.up)))
        return forward, right, np.cross(right, forward)

    def _scale(self, height: int, width: int) -> Tuple[float, float]:
        tan_half = math.tan(math.radians(self.fov_y) / 2)
        return tan_half * width / height, tan_half

    def rays(self, height: int, width: int) -> np.ndarray:
        """Unit directions through pixel centers, shape (h, w, 3)"""
        forward, right, up = self.basis()
        sx, sy = self._scale(height, width)
        x = (2 * (np.arange(width) + 0.5) / width - 1) * sx
        y = (1 - 2 * (np.arange(height) + 0.5) / height) * sy
        dirs = forward + x[None, :, None] * right + y[:, None, None] * up
        return _normalize(dirs)

    def project(self, points: np.ndarray, height: int, width: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(column, row, depth) in pixel-index coordinates (pixel centers are integers)"""
        forward, right, up = self.basis()
        d = points - _vec(self.position)
        depth = d @ forward
        sx, sy = self._scale(height, width)
        x = (d @ right) / (depth * sx)
        y = (d @ up) / (depth * sy)
        return (x + 1) * width / 2 - 0.5, (1 - y) * height / 2 - 0.5, depth

    def view_matrix(self) -> np.ndarray:
        forward, right, up = self.basis()
        m = np.eye(4)
        m[0, :3], m[1, :3], m[2, :3] = right, up, -forward
        m[:3, 3] = -m[:3, :3] @ _vec(self.position)
        return m

    def to_dict(self) -> Dict[str, Any]:
        data = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}
        data['view_matrix'] = self.view_matrix().tolist()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Camera':
        return cls(position=tuple(data['position']), target=tuple(data['target']),
                   up=tuple(data['up']), fov_y=data['fov_y'])


# ---------------------------------------------------------------------------
# Textures
# ---------------------------------------------------------------------------

def _hash2(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    h = (ix * 374761393 + iy * 668265263 + (seed & 0xFFFF) * 2246822519) & 0xFFFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return h.astype(np.float64) / 4294967296.0


def value_noise(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    """Smoothed lattice noise in [0, 1)"""
    iu, iv = np.floor(u), np.floor(v)
    fu, fv = u - iu, v - iv
    fu, fv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
    iu, iv = iu.astype(np.int64), iv.astype(np.int64)
    top = (1 - fu) * _hash2(iu, iv, seed) + fu * _hash2(iu + 1, iv, seed)
    bottom = (1 - fu) * _hash2(iu, iv + 1, seed) + fu * _hash2(iu + 1, iv + 1, seed)
    return (1 - fv) * top + fv * bottom


def texture_value(material: Material, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u, v = u * material.texture_scale, v * material.texture_scale
    if material.texture == "checker":
        return np.mod(np.floor(u) + np.floor(v), 2.0)
    if material.texture == "noise":
        return value_noise(u, v, material.texture_seed)
    return np.zeros_like(u)


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

@dataclass
class SurfaceHits:
    """Nearest hit per ray; object index -1 marks a miss"""
    t: np.ndarray
    index: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    uv: np.ndarray


def _intersect(obj, origin: np.ndarray, dirs: np.ndarray, frame: float) -> np.ndarray:
    if isinstance(obj, Sphere):
        oc = origin - obj.origin_at(frame)
        b = dirs @ oc
        c = oc @ oc - obj.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0))
        near, far = -b - root, -b + root
        t = np.where(near > HIT_EPS, near, far)
        return np.where((disc >= 0) & (t > HIT_EPS), t, np.inf)
    n = _normalize(_vec(obj.normal))
    denom = dirs @ n
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    t = ((obj.origin_at(frame) - origin) @ n) / safe
    return np.where((np.abs(denom) > 1e-12) & (t > HIT_EPS), t, np.inf)


def trace(scene: Scene, origin: np.ndarray, dirs: np.ndarray, frame: float = 0.0) -> SurfaceHits:
    """Primary-ray hits for directions of shape (n, 3)"""
    n_rays = dirs.shape[0]
    best = np.full(n_rays, np.inf)
    index = np.full(n_rays, -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        t = _intersect(obj, origin, dirs, frame)
        closer = t < best
        best = np.where(closer, t, best)
        index = np.where(closer, k, index)

    hit = index >= 0
    points = origin + dirs * np.where(hit, best, FAR_DEPTH)[:, None]
    normals = -dirs.copy()
    uv = np.zeros((n_rays, 2))
    for k, obj in enumerate(scene.objects):
        mask = index == k
        if not mask.any():
            continue
        local = points[mask] - obj.origin_at(frame)
        if isinstance(obj, Sphere):
            nrm = local / obj.radius
            normals[mask] = _normalize(nrm)
            uv[mask, 0] = (np.arctan2(nrm[:, 2], nrm[:, 0]) / (2 * np.pi) + 0.5) * 8
            uv[mask, 1] = np.arccos(np.clip(nrm[:, 1], -1, 1)) / np.pi * 4
        else:
            t1, t2 = obj.tangents()
            normals[mask] = _normalize(_vec(obj.normal))
            uv[mask, 0] = local @ t1
            uv[mask, 1] = local @ t2
    return SurfaceHits(t=best, index=index, points=points, normals=normals, uv=uv)


def _material_maps(scene: Scene, hits: SurfaceHits) -> Dict[str, np.ndarray]:
    n = hits.index.shape[0]
    maps = {
        'albedo': np.zeros((n, 3)),
        'specular': np.zeros((n, 3)),
        'roughness': np.ones(n),
        'emissive': np.tile(_vec(scene.background), (n, 1)),
    }
    for k, obj in enumerate(scene.objects):
        mask = hits.index == k
        if not mask.any():
            continue
        m = obj.material
        tex = texture_value(m, hits.uv[mask, 0], hits.uv[mask, 1])
        maps['albedo'][mask] = (1 - tex)[:, None] * _vec(m.albedo) + tex[:, None] * _vec(m.albedo2)
        maps['specular'][mask] = _vec(m.specular)
        maps['roughness'][mask] = (1 - tex) * m.roughness + tex * m.roughness2
        maps['emissive'][mask] = _vec(m.emissive)
    return maps


def shade(scene: Scene, hits: SurfaceHits, dirs: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Direct lighting at each hit; returns (color (n, 3), per-pixel G-buffer arrays)"""
    maps = _material_maps(scene, hits)
    view = -dirs
    normals = hits.normals.copy()
    facing = np.sum(normals * view, axis=1)
    normals[facing < 0] *= -1
    ndotv = np.maximum(np.abs(facing), MIN_NDOTV)

    hit = hits.index >= 0
    alpha = np.maximum(np.square(maps['roughness']), ALPHA_FLOOR)
    f0 = maps['specular']
    color = maps['emissive'].copy()
    lam_v = smith_lambda(ndotv, alpha)

    for light in scene.lights:
        if isinstance(light, DirectionalLight):
            to_light = np.broadcast_to(_normalize(_vec(light.direction)), hits.points.shape)
            radiance = np.broadcast_to(_vec(light.intensity), hits.points.shape)
        else:
            delta = _vec(light.position) - hits.points
            dist2 = np.sum(delta * delta, axis=1, keepdims=True)
            to_light = delta / np.sqrt(dist2)
            radiance = _vec(light.intensity) / dist2
        ndotl = np.sum(normals * to_light, axis=1)
        lit = hit & (ndotl > 0)
        if not lit.any():
            continue
        half = _normalize(view + to_light)
        ndoth = np.clip(np.sum(normals * half, axis=1), 0, 1)
        vdoth = np.clip(np.sum(view * half, axis=1), 0, 1)
        g2 = 1.0 / (1.0 + lam_v + smith_lambda(np.where(lit, ndotl, 1.0), alpha))
        fresnel = f0 + (1 - f0) * schlick_weight(vdoth)[:, None]
        spec = (ggx_ndf(ndoth, alpha) * g2 / (4 * ndotv))[:, None] * fresnel
        diffuse = (1 - f0.mean(axis=1, keepdims=True)) * maps['albedo'] / np.pi
        contribution = (spec + diffuse * ndotl[:, None]) * radiance
        color += np.where(lit[:, None], contribution, 0.0)

    maps['normal'] = normals
    maps['ndotv'] = ndotv
    return color, maps


def _to_planar(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """(h*w, c) or (h*w,) -> (1, c, h, w) float32"""
    if values.ndim == 1:
        values = values[:, None]
    return np.ascontiguousarray(values.reshape(height, width, -1).transpose(2, 0, 1)[None]).astype(np.float32)


def render_frame(scene: Scene, camera: Camera, resolution: Tuple[int, int], frame: int = 0,
                 prev_camera: Optional[Camera] = None) -> FrameBundle:
    """Point-sampled render of one frame with its G-buffer.

    Motion maps each pixel to its position in frame-1, seen from prev_camera
    (defaults to `camera`) with objects moved back by their velocity.
    """
    height, width = resolution
    if prev_camera is None:
        prev_camera = camera
    origin = _vec(camera.position)
    dirs = camera.rays(height, width).reshape(-1, 3)
    hits = trace(scene, origin, dirs, frame)
    color, maps = shade(scene, hits, dirs)

    velocity = np.zeros_like(hits.points)
    for k, obj in enumerate(scene.objects):
        velocity[hits.index == k] = _vec(obj.velocity)
    col, row, depth = camera.project(hits.points, height, width)
    prev_col, prev_row, _ = prev_camera.project(hits.points - velocity, height, width)
    motion = np.stack([prev_col - col, prev_row - row], axis=1)

    gbuffer = ShadingGBuffer(
        albedo=_to_planar(maps['albedo'], height, width),
        specular=_to_planar(maps['specular'], height, width),
        roughness=_to_planar(maps['roughness'], height, width),
        normal=_to_planar(maps['normal'], height, width),
        ndotv=_to_planar(maps['ndotv'], height, width),
        emissive=_to_planar(maps['emissive'], height, width),
        depth=_to_planar(np.maximum(depth, HIT_EPS), height, width),
        motion=_to_planar(motion, height, width),
    )
    camera_info = camera.to_dict()
    camera_info['resolution'] = [height, width]
    return FrameBundle(color=Tensor(_to_planar(color, height, width)), gbuffer=gbuffer,
                       camera=camera_info, frame_index=frame)


def box_downsample(bundle: FrameBundle, r: int) -> FrameBundle:
    """LR bundle by r x r box averaging; normals renormalized, motion rescaled to LR pixels"""
    def pool(arr: np.ndarray) -> np.ndarray:
        b, c, h, w = arr.shape
        if h % r or w % r:
            raise SchemaError(f"cannot box-downsample {h}x{w} by r={r}")
        return arr.reshape(b, c, h // r, r, w // r, r).mean(axis=(3, 5), dtype=np.float64)

    channels = {name: pool(value) for name, value in bundle.gbuffer.present().items()}
    normal = channels['normal']
    channels['normal'] = normal / np.linalg.norm(normal, axis=1, keepdims=True)
    channels['ndotv'] = np.clip(channels['ndotv'], MIN_NDOTV, 1.0)
    channels['motion'] = channels['motion'] / r
    gbuffer = ShadingGBuffer(**{k: v.astype(np.float32) for k, v in channels.items()})
    camera = dict(bundle.camera)
    h, w = bundle.resolution
    camera['resolution'] = [h // r, w // r]
    return FrameBundle(Tensor(pool(bundle.color.data).astype(np.float32)), gbuffer, camera, bundle.frame_index)


def render_pair(scene: Scene, camera: Camera, hr_res: Tuple[int, int], r: int, frame: int = 0,
                prev_camera: Optional[Camera] = None, downsample: str = "native") -> Tuple[FrameBundle, FrameBundle]:
    """(HR, LR) bundles of the same view; LR is rendered natively at hr_res / r by default"""
    height, width = hr_res
    if height % r or width % r:
        raise ConfigError(f"HR resolution {height}x{width} not divisible by r={r}")
    hr = render_frame(scene, camera, hr_res, frame, prev_camera)
    if r == 1:
        return hr, FrameBundle(Tensor(hr.color.data.copy()), hr.gbuffer.map(lambda _, v: v.copy()),
                               dict(hr.camera), hr.frame_index)
    if downsample == "native":
        lr = render_frame(scene, camera, (height // r, width // r), frame, prev_camera)
    elif downsample == "box":
        lr = box_downsample(hr, r)
    else:
        raise ConfigError(f"unknown downsample mode '{downsample}', expected 'native' or 'box'")
    return hr, lr


def render_sequence(scene: Scene, cameras: Sequence[Camera], hr_res: Tuple[int, int], r: int,
                    downsample: str = "native", threads: int = 1) -> List[Tuple[FrameBundle, FrameBundle]]:
    """One (HR, LR) pair per camera; motion of frame t points into frame t-1"""
    def job(t: int):
        prev = cameras[t - 1] if t > 0 else cameras[0]
        return render_pair(scene, cameras[t], hr_res, r, frame=t, prev_camera=prev, downsample=downsample)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(job, range(len(cameras))))
    return [job(t) for t in range(len(cameras))]


# ---------------------------------------------------------------------------
# Random content
# ---------------------------------------------------------------------------

def _random_material(rng: np.random.Generator, emissive: bool = False) -> Material:
    texture = str(rng.choice(['checker', 'noise', 'constant'], p=[0.45, 0.45, 0.10]))
    base = rng.uniform(0.05, 0.9, size=3)
    f0 = float(rng.uniform(0.02, 0.08)) if rng.random() < 0.7 else None
    specular = (f0, f0, f0) if f0 is not None else tuple(rng.uniform(0.5, 0.95, size=3))
    return Material(
        albedo=tuple(base),
        albedo2=tuple(np.clip(base * rng.uniform(0.2, 0.6), 0, 1)),
        specular=tuple(float(s) for s in specular),
        roughness=float(rng.uniform(0.25, 0.9)),
        roughness2=float(rng.uniform(0.25, 0.9)),
        emissive=tuple(rng.uniform(0.5, 2.0, size=3)) if emissive else (0.0, 0.0, 0.0),
        texture=texture,
        texture_scale=float(rng.uniform(2.0, 6.0)),
        texture_seed=int(rng.integers(0, 2 ** 16)),
    )


def random_scene(seed: int = 0) -> Scene:
    """Ground and backdrop planes, a few textured (some moving) spheres, mixed lights"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE7E]))
    objects: List[Union[Sphere, Plane]] = [
        Plane((0.0, -1.0, 0.0), (0.0, 1.0, 0.0), _random_material(rng)),
        Plane((0.0, 0.0, -4.0), (0.0, 0.0, 1.0), _random_material(rng)),
    ]
    for i in range(int(rng.integers(3, 6))):
        radius = float(rng.uniform(0.25, 0.7))
        center = (float(rng.uniform(-1.8, 1.8)), -1.0 + radius, float(rng.uniform(-2.5, 0.8)))
        velocity = tuple(rng.uniform(-0.02, 0.02, size=3) * [1, 0, 1]) if rng.random() < 0.5 else (0.0, 0.0, 0.0)
        objects.append(Sphere(center, radius, _random_material(rng, emissive=(i == 0)), velocity))

    lights: List[Union[DirectionalLight, PointLight]] = [
        DirectionalLight(tuple(_normalize(np.array([rng.uniform(-1, 1), rng.uniform(0.5, 1.5), rng.uniform(0.2, 1)]))),
                         tuple(rng.uniform(1.5, 3.0, size=3))),
    ]
    for _ in range(int(rng.integers(1, 3))):
        lights.append(PointLight((float(rng.uniform(-2, 2)), float(rng.uniform(0.5, 2.5)), float(rng.uniform(-1, 2))),
                                 tuple(rng.uniform(2.0, 6.0, size=3))))
    scene = Scene(objects=objects, lights=lights, background=(0.05, 0.06, 0.08))
    scene.validate()
    return scene


def camera_path(kind: str, n: int, seed: int = 0, base: Optional[Camera] = None) -> List[Camera]:
    """Camera per frame: static, pan (pure translation along x) or orbit around the target"""
    if kind not in CAMERA_PATHS:
        raise ConfigError(f"unknown camera path '{kind}', expected one of {CAMERA_PATHS}")
    base = base or Camera()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA7]))
    position, target = _vec(base.position), _vec(base.target)
    if kind == "static":
        return [Camera(tuple(position), tuple(target), base.up, base.fov_y) for _ in range(n)]
    if kind == "pan":
        speed = float(rng.uniform(0.01, 0.03)) * (1 if rng.random() < 0.5 else -1)
        shift = np.array([speed, 0.0, 0.0])
        return [Camera(tuple(position + t * shift), tuple(target + t * shift), base.up, base.fov_y)
                for t in range(n)]
    step = math.radians(float(rng.uniform(0.3, 0.8)))
    offset = position - target
    cameras = []
    for t in range(n):
        c, s = math.cos(t * step), math.sin(t * step)
        rotated = np.array([c * offset[0] + s * offset[2], offset[1], -s * offset[0] + c * offset[2]])
        cameras.append(Camera(tuple(target + rotated), tuple(target), base.up, base.fov_y))
    return cameras


# ---------------------------------------------------------------------------
# Datasets on disk
# ---------------------------------------------------------------------------

@dataclass
class FrameSequence:
    """Paired HR/LR bundles of one generated sequence"""
    hr: List[FrameBundle]
    lr: List[FrameBundle]
    r: int
    train_fraction: float = 0.8
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.hr)

    @property
    def train_count(self) -> int:
        n = len(self)
        if n <= 1:
            return n
        return min(n - 1, max(1, int(round(n * self.train_fraction))))

    def train_indices(self) -> List[int]:
        return list(range(self.train_count))

    def test_indices(self) -> List[int]:
        return list(range(self.train_count, len(self)))


def generate_sequence(settings: DatasetSettings, threads: Optional[int] = None) -> FrameSequence:
    """Render the sequence described by `settings` in memory"""
    if threads is None:
        threads = runtime_settings().threads
    scene = random_scene(settings.scene_seed)
    cameras = camera_path(settings.path, settings.frames, settings.path_seed)
    pairs = render_sequence(scene, cameras, (settings.hr, settings.hr), settings.r,
                            downsample=settings.downsample, threads=threads)
    return FrameSequence(hr=[p[0] for p in pairs], lr=[p[1] for p in pairs], r=settings.r,
                         train_fraction=settings.train_fraction, meta={'settings': asdict(settings)})


def build_dataset(settings: DatasetSettings, out_dir, threads: Optional[int] = None) -> Path:
    """Render and write `<out>/hr/frame_%05d`, `<out>/lr/frame_%05d` and sequence.json"""
    out_dir = Path(out_dir)
    sequence = generate_sequence(settings, threads)
    for hr, lr in zip(sequence.hr, sequence.lr):
        write_bundle(hr, out_dir / "hr" / frame_dir_name(hr.frame_index))
        write_bundle(lr, out_dir / "lr" / frame_dir_name(lr.frame_index))
    with open(out_dir / SEQUENCE_FILE, 'w') as f:
        json.dump({'frames': len(sequence), 'r': settings.r, 'settings': asdict(settings)}, f, indent=2)
    log_event(logger, "dataset written", path=out_dir, frames=len(sequence), hr=settings.hr, r=settings.r)
    return out_dir


def read_sequence_meta(directory) -> Dict[str, Any]:
    """Parse and validate `sequence.json` of a generated dataset"""
    path = Path(directory) / SEQUENCE_FILE
    try:
        with open(path, 'r') as f:
            meta = json.load(f)
    except OSError as e:
        raise SchemaError(f"{directory} is not a generated dataset (no {SEQUENCE_FILE}): {e}")
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path} is not valid JSON: {e}")
    if not isinstance(meta, dict):
        raise SchemaError(f"{path}: expected an object, got {type(meta).__name__}")
    for key in ('frames', 'r'):
        if not isinstance(meta.get(key), int) or meta[key] < 1:
            raise SchemaError(f"{path}: '{key}' must be a positive integer, got {meta.get(key)!r}")
    if not isinstance(meta.get('settings', {}), dict):
        raise SchemaError(f"{path}: 'settings' must be an object")
    return meta


def load_sequence(directory) -> FrameSequence:
    directory = Path(directory)
    meta = read_sequence_meta(directory)
    hr, lr = [], []
    for t in range(meta['frames']):
        hr.append(read_bundle(directory / "hr" / frame_dir_name(t)))
        lr.append(read_bundle(directory / "lr" / frame_dir_name(t)))
    settings = meta.get('settings', {})
    return FrameSequence(hr=hr, lr=lr, r=meta['r'], train_fraction=settings.get('train_fraction', 0.8), meta=meta)


if __name__ == "__main__":
    demo = generate_sequence(DatasetSettings(hr=64, r=4, frames=3), threads=1)
    last = demo.hr[-1]
    print(f"{len(demo)} frames, HR {last.resolution}, LR {demo.lr[-1].resolution}, "
          f"mean color {last.color.data.mean():.3f}, max |motion| {np.abs(last.gbuffer.motion).max():.3f}")
