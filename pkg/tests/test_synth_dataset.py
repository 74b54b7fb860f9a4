import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from brdf_lut import build_fbeta_map, demodulate, remodulate
from config import DatasetSettings
from errors import ConfigError, SchemaError
from synth_dataset import (
    FAR_DEPTH, Camera, DirectionalLight, FrameSequence, Material, Plane, Scene, build_dataset, camera_path,
    generate_sequence, load_sequence, random_scene, read_sequence_meta, render_frame, render_pair,
)
from tensor_ops import Tensor


def wall_scene(albedo=(0.6, 0.4, 0.2), light=(0.0, 0.0, 1.0)) -> Scene:
    material = Material(albedo=albedo, albedo2=albedo, specular=(0.0, 0.0, 0.0), roughness=0.5, roughness2=0.5)
    return Scene(objects=[Plane((0.0, 0.0, -4.0), (0.0, 0.0, 1.0), material)],
                 lights=[DirectionalLight(light, (2.0, 2.0, 2.0))])


def test_lambertian_wall_center_matches_closed_form():
    camera = Camera(position=(0.0, 0.0, 4.0), target=(0.0, 0.0, 0.0))
    frame = render_frame(wall_scene(), camera, (9, 9))
    center = frame.color.data[0, :, 4, 4]
    assert_allclose(center, np.array([0.6, 0.4, 0.2]) / math.pi * 2.0, rtol=1e-5)
    assert frame.gbuffer.ndotv[0, 0, 4, 4] == pytest.approx(1.0, abs=1e-6)
    assert frame.gbuffer.depth[0, 0, 4, 4] == pytest.approx(8.0, rel=1e-6)


def test_pan_motion_matches_parallax_formula():
    shift, depth, h, w = 0.05, 8.0, 12, 16
    prev = Camera(position=(0.0, 0.0, 4.0), target=(0.0, 0.0, 0.0))
    cur = Camera(position=(shift, 0.0, 4.0), target=(shift, 0.0, 0.0))
    frame = render_frame(wall_scene(), cur, (h, w), frame=1, prev_camera=prev)
    sx = math.tan(math.radians(45.0) / 2) * w / h
    expected = shift * w / (2 * depth * sx)
    assert_allclose(frame.gbuffer.motion[0, 0], expected, atol=1e-4)
    assert_allclose(frame.gbuffer.motion[0, 1], 0.0, atol=1e-4)


def test_static_camera_and_scene_have_zero_motion():
    camera = Camera()
    frame = render_frame(wall_scene(), camera, (6, 6), frame=2, prev_camera=camera)
    assert_allclose(frame.gbuffer.motion, 0.0, atol=1e-5)


def test_misses_see_background():
    scene = Scene(objects=[], lights=[], background=(0.1, 0.2, 0.3))
    frame = render_frame(scene, Camera(), (4, 4))
    assert_allclose(frame.color.data[0, :, 0, 0], [0.1, 0.2, 0.3], rtol=1e-6)
    assert_allclose(frame.gbuffer.emissive[0, :, 2, 2], [0.1, 0.2, 0.3], rtol=1e-6)
    assert frame.gbuffer.depth.min() > 0.8 * FAR_DEPTH


def test_rendered_gbuffer_is_valid(tiny_sequence):
    for bundle in tiny_sequence.hr + tiny_sequence.lr:
        bundle.gbuffer.validate()
        assert bundle.color.data.min() >= 0


def test_sequence_shapes_and_split(tiny_sequence, dataset_settings):
    assert len(tiny_sequence) == dataset_settings.frames
    assert tiny_sequence.hr[0].resolution == (32, 32)
    assert tiny_sequence.lr[0].resolution == (16, 16)
    assert tiny_sequence.train_indices() == [0, 1, 2]
    assert tiny_sequence.test_indices() == [3]


def test_generation_is_deterministic(dataset_settings):
    settings = DatasetSettings(hr=16, r=2, frames=2, scene_seed=dataset_settings.scene_seed)
    a, b = generate_sequence(settings, threads=1), generate_sequence(settings, threads=2)
    for x, y in zip(a.hr, b.hr):
        assert_array_equal(x.color.data, y.color.data)
        assert_array_equal(x.gbuffer.motion, y.gbuffer.motion)


def test_demodulation_roundtrip_on_rendered_frames(tiny_sequence, coarse_lut):
    for bundle in tiny_sequence.hr:
        fbeta = build_fbeta_map(bundle.gbuffer, coarse_lut)
        emissive = Tensor(bundle.gbuffer.emissive.astype(np.float64))
        color = bundle.color.astype(np.float64)
        ld = demodulate(Tensor(color.data - emissive.data), fbeta)
        restored = remodulate(ld, fbeta, emissive).data
        mask = fbeta.data > 1e-3
        assert_allclose(restored[mask], color.data[mask], rtol=1e-5, atol=1e-7)


@pytest.mark.slow
def test_demodulation_roundtrip_twenty_frames(coarse_lut):
    sequence = generate_sequence(DatasetSettings(hr=64, r=4, frames=20, path="orbit"))
    for bundle in sequence.hr:
        fbeta = build_fbeta_map(bundle.gbuffer, coarse_lut)
        emissive = bundle.gbuffer.emissive.astype(np.float64)
        color = bundle.color.data.astype(np.float64)
        restored = remodulate(demodulate(Tensor(color - emissive), fbeta), fbeta, Tensor(emissive)).data
        mask = fbeta.data > 1e-3
        assert_allclose(restored[mask], color[mask], rtol=1e-5, atol=1e-7)


def test_factor_one_pair_is_a_copy():
    hr, lr = render_pair(wall_scene(), Camera(), (6, 6), r=1)
    assert_array_equal(hr.color.data, lr.color.data)
    lr.color.data[...] = 0
    assert hr.color.data.max() > 0


def test_box_downsample_rescales_motion():
    prev = Camera(position=(0.0, 0.0, 4.0), target=(0.0, 0.0, 0.0))
    cur = Camera(position=(0.04, 0.0, 4.0), target=(0.04, 0.0, 0.0))
    hr, lr = render_pair(wall_scene(), cur, (8, 8), r=2, frame=1, prev_camera=prev, downsample="box")
    assert lr.resolution == (4, 4)
    assert_allclose(lr.gbuffer.motion.mean(), hr.gbuffer.motion.mean() / 2, rtol=1e-5)
    with pytest.raises(ConfigError):
        render_pair(wall_scene(), cur, (8, 8), r=2, downsample="lanczos")


def test_dataset_on_disk_roundtrip(tmp_path):
    settings = DatasetSettings(hr=16, r=4, frames=3, scene_seed=2)
    out = build_dataset(settings, tmp_path / "data", threads=1)
    assert (out / "sequence.json").exists()
    assert (out / "hr" / "frame_00002" / "manifest.json").exists()
    loaded = load_sequence(out)
    fresh = generate_sequence(settings, threads=1)
    assert loaded.r == 4 and len(loaded) == 3
    assert_allclose(loaded.lr[1].color.data, fresh.lr[1].color.data, rtol=1e-6)


@pytest.mark.parametrize("content, message", [
    ("{frames: 3", "not valid JSON"),
    ('{"r": 2}', "'frames'"),
    ('{"frames": 3, "r": 0}', "'r'"),
    ('{"frames": 3, "r": 2, "settings": []}', "'settings'"),
    ('[3, 2]', "expected an object"),
])
def test_malformed_sequence_file_raises_schema_error(tmp_path, content, message):
    (tmp_path / "sequence.json").write_text(content)
    with pytest.raises(SchemaError, match=message):
        read_sequence_meta(tmp_path)
    with pytest.raises(SchemaError):
        load_sequence(tmp_path)


def test_scene_and_path_validation():
    scene = random_scene(5)
    assert len(scene.objects) >= 5 and scene.lights
    with pytest.raises(ConfigError):
        Material(roughness=1.5).validate()
    with pytest.raises(ConfigError):
        camera_path("spiral", 3)
    pan = camera_path("pan", 3, seed=1)
    assert pan[0].position[1:] == pan[2].position[1:]
    assert pan[0].position[0] != pan[2].position[0]


def test_split_keeps_one_test_frame():
    seq = FrameSequence(hr=[None] * 5, lr=[None] * 5, r=2, train_fraction=1.0)
    assert seq.test_indices() == [4]
    assert FrameSequence(hr=[None], lr=[None], r=2).train_indices() == [0]
