"""
Frame bundles on disk: one directory per frame holding a PFM image per
channel plus a manifest.json describing resolution, channels and camera.

PFM files are little-endian (negative scale) with rows stored bottom-up.
Two-channel maps (motion) are stored as three-channel PFMs with a zero
third channel; the manifest records the true channel count.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from brdf_lut import GBUFFER_CHANNELS, ShadingGBuffer
from errors import FormatError, SchemaError
from tensor_ops import Tensor

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
BUNDLE_CHANNELS = ['color'] + list(GBUFFER_CHANNELS)
CHANNEL_COUNTS = {'color': 3, **GBUFFER_CHANNELS}


@dataclass
class FrameBundle:
    """Color plus G-buffer of one rendered frame (batch dimension 1)"""
    color: Tensor
    gbuffer: ShadingGBuffer
    camera: Dict[str, Any] = field(default_factory=dict)
    frame_index: int = 0

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.color.height, self.color.width

    def channels(self) -> Dict[str, np.ndarray]:
        return {'color': self.color.data, **self.gbuffer.present()}

    def crop(self, y: int, x: int, h: int, w: int) -> 'FrameBundle':
        return FrameBundle(Tensor(self.color.data[:, :, y:y + h, x:x + w]), self.gbuffer.crop(y, x, h, w),
                           dict(self.camera), self.frame_index)


def frame_dir_name(index: int) -> str:
    return f"frame_{index:05d}"


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def write_pfm(path, image: np.ndarray) -> None:
    """Write a (c, h, w) image with c in {1, 3} as little-endian float32"""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise FormatError(f"PFM needs a (1|3, h, w) image, got {image.shape}")
    channels, height, width = image.shape
    header = f"{'PF' if channels == 3 else 'Pf'}\n{width} {height}\n-1.0\n".encode('ascii')
    pixels = image.transpose(1, 2, 0)[::-1].astype('<f4')
    with open(path, 'wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(pixels).tobytes())


def _read_token(raw: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(raw) and raw[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(raw) and not raw[pos:pos + 1].isspace():
        pos += 1
    return raw[start:pos], pos


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a (c, h, w) float32 array"""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}")

    kind, pos = _read_token(raw, 0)
    if kind not in (b'PF', b'Pf'):
        raise FormatError(f"{path}: not a PFM file (header {kind!r})")
    try:
        width_tok, pos = _read_token(raw, pos)
        height_tok, pos = _read_token(raw, pos)
        scale_tok, pos = _read_token(raw, pos)
        width, height, scale = int(width_tok), int(height_tok), float(scale_tok)
    except ValueError:
        raise FormatError(f"{path}: malformed PFM header")
    pos += 1  # single whitespace byte ends the header

    channels = 3 if kind == b'PF' else 1
    dtype = '<f4' if scale < 0 else '>f4'
    count = width * height * channels
    if len(raw) - pos < count * 4:
        raise FormatError(f"{path}: truncated PFM data")
    pixels = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(height, width, channels)
    return np.ascontiguousarray(pixels[::-1].transpose(2, 0, 1)).astype(np.float32)


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

def write_bundle(bundle: FrameBundle, directory) -> Path:
    """Write every present channel plus manifest.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    height, width = bundle.resolution
    entries: List[Dict[str, Any]] = []
    for name, data in bundle.channels().items():
        image = np.asarray(data[0], dtype=np.float32)
        if image.shape[0] == 2:
            image = np.concatenate([image, np.zeros_like(image[:1])], axis=0)
        write_pfm(directory / f"{name}.pfm", image)
        entries.append({'name': name, 'file': f"{name}.pfm", 'channels': int(data.shape[1]),
                        'height': height, 'width': width, 'dtype': 'float32'})

    manifest = {
        'frame_index': bundle.frame_index,
        'resolution': [height, width],
        'camera': bundle.camera,
        'channels': entries,
    }
    with open(directory / MANIFEST_FILE, 'w') as f:
        json.dump(manifest, f, indent=2)
    return directory


def read_manifest(directory) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_FILE
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except OSError as e:
        raise SchemaError(f"frame bundle {directory} has no readable {MANIFEST_FILE}: {e}")
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}")


def read_bundle(directory) -> FrameBundle:
    """Read a bundle, validating every channel against the manifest"""
    directory = Path(directory)
    manifest = read_manifest(directory)
    height, width = manifest['resolution']
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest['channels']:
        name = entry['name']
        if name not in CHANNEL_COUNTS:
            raise SchemaError(f"{directory}: unknown channel '{name}' in manifest")
        path = directory / entry['file']
        if not path.exists():
            raise SchemaError(f"{directory}: missing channel '{name}' ({entry['file']})")
        image = read_pfm(path)
        channels = entry['channels']
        if channels != CHANNEL_COUNTS[name]:
            raise SchemaError(f"{directory}: channel '{name}' declares {channels} channels, "
                              f"expected {CHANNEL_COUNTS[name]}")
        if image.shape[1:] != (height, width) or image.shape[0] < channels:
            raise SchemaError(f"{directory}: channel '{name}' is {image.shape}, manifest says "
                              f"({channels}, {height}, {width})")
        arrays[name] = image[:channels][None]

    if 'color' not in arrays:
        raise SchemaError(f"{directory}: missing channel 'color'")
    color = arrays.pop('color')
    return FrameBundle(color=Tensor(color), gbuffer=ShadingGBuffer(**arrays),
                       camera=manifest.get('camera', {}), frame_index=manifest.get('frame_index', 0))


if __name__ == "__main__":
    import tempfile

    rng = np.random.default_rng(0)
    demo = FrameBundle(
        color=Tensor(rng.random((1, 3, 4, 6)).astype(np.float32)),
        gbuffer=ShadingGBuffer(depth=rng.random((1, 1, 4, 6)).astype(np.float32) + 1,
                               motion=rng.random((1, 2, 4, 6)).astype(np.float32)),
    )
    with tempfile.TemporaryDirectory() as tmp:
        back = read_bundle(write_bundle(demo, Path(tmp) / frame_dir_name(0)))
        print("round trip exact:", np.array_equal(back.color.data, demo.color.data)
              and np.array_equal(back.gbuffer.motion, demo.gbuffer.motion))
