import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from brdf_lut import (
    LUT_MAGIC, ShadingGBuffer, build_fbeta_map, demodulate, load_lut, precompute_lut, query_lut,
    remodulate, save_lut, uniform_hemisphere_reference,
)
from errors import ConfigError, FormatError, SchemaError
from tensor_ops import Tensor


def random_gbuffer(rng, h=6, w=5) -> ShadingGBuffer:
    normal = rng.standard_normal((1, 3, h, w))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    return ShadingGBuffer(
        albedo=rng.uniform(0, 1, (1, 3, h, w)),
        specular=rng.uniform(0.02, 1, (1, 3, h, w)),
        roughness=rng.uniform(0, 1, (1, 1, h, w)),
        normal=normal,
        ndotv=rng.uniform(0.05, 1, (1, 1, h, w)),
        emissive=rng.uniform(0, 0.2, (1, 3, h, w)),
        depth=rng.uniform(1, 5, (1, 1, h, w)),
        motion=np.zeros((1, 2, h, w)),
    )


def test_table_is_bounded_by_furnace(coarse_lut):
    assert coarse_lut.size == (8, 8)
    assert coarse_lut.scale.min() >= 0 and coarse_lut.bias.min() >= 0
    assert (coarse_lut.scale + coarse_lut.bias).max() <= 1 + 1e-3


def test_mirror_limit():
    lut = precompute_lut(4, 4, samples=256, seed=2)
    a, b = query_lut(lut, 0.0, 1.0)
    assert abs(a - 1.0) < 0.02
    assert b < 0.02


def test_precompute_is_deterministic_for_any_thread_count():
    one = precompute_lut(6, 5, samples=32, seed=9, threads=1)
    many = precompute_lut(6, 5, samples=32, seed=9, threads=3)
    assert_array_equal(one.scale, many.scale)
    assert_array_equal(one.bias, many.bias)


def test_seed_changes_the_table():
    a = precompute_lut(4, 4, samples=16, seed=0, sampler="random")
    b = precompute_lut(4, 4, samples=16, seed=1, sampler="random")
    assert not np.array_equal(a.scale, b.scale)


@pytest.mark.parametrize("kwargs", [dict(samples=0), dict(n_roughness=1), dict(sampler="sobol")])
def test_precompute_rejects_bad_arguments(kwargs):
    args = dict(n_roughness=4, n_ndotv=4, samples=8)
    args.update(kwargs)
    with pytest.raises(ConfigError):
        precompute_lut(**args)


def test_query_returns_grid_nodes_exactly(coarse_lut):
    i, j = 3, 5
    a, b = query_lut(coarse_lut, coarse_lut.roughness_axis[i], coarse_lut.ndotv_axis[j])
    assert a == pytest.approx(coarse_lut.scale[i, j], abs=1e-12)
    assert b == pytest.approx(coarse_lut.bias[i, j], abs=1e-12)


def test_query_clamps_out_of_range_inputs(coarse_lut):
    inside = query_lut(coarse_lut, np.array([1.0, 0.0]), np.array([coarse_lut.ndotv_floor, 1.0]))
    outside = query_lut(coarse_lut, np.array([1.5, -0.2]), np.array([0.0, 2.0]))
    assert_allclose(outside[0], inside[0])
    assert_allclose(outside[1], inside[1])


@pytest.mark.slow
def test_matches_uniform_hemisphere_oracle():
    lut = precompute_lut(32, 32, samples=1024, seed=0)
    rng = np.random.default_rng(4)
    cells = zip(rng.integers(0, 32, 16), rng.integers(0, 32, 16))
    for i, j in cells:
        roughness, ndotv = lut.roughness_axis[i], lut.ndotv_axis[j]
        ref_a, ref_b = uniform_hemisphere_reference(roughness, ndotv, samples=1 << 22, seed=1)
        assert abs(lut.scale[i, j] - ref_a) < 5e-3, (roughness, ndotv)
        assert abs(lut.bias[i, j] - ref_b) < 5e-3, (roughness, ndotv)


@pytest.mark.slow
def test_monotone_in_roughness_at_normal_incidence():
    lut = precompute_lut(16, 2, samples=1 << 14, seed=0)
    assert np.all(np.diff(lut.scale[:, -1]) <= 1e-2)
    assert np.all(np.diff(lut.bias[:, -1]) <= 1e-2)


def test_lut_file_roundtrip_and_header(tmp_path, coarse_lut):
    path = tmp_path / "lut.bin"
    save_lut(coarse_lut, path)
    raw = path.read_bytes()
    assert raw[:7] == LUT_MAGIC
    assert len(raw) == 7 + 20 + 8 * 8 * 2 * 4
    loaded = load_lut(path)
    assert loaded.sample_count == coarse_lut.sample_count and loaded.seed == coarse_lut.seed
    assert_allclose(loaded.scale, coarse_lut.scale, rtol=1e-6)


def test_lut_file_with_wrong_payload_is_rejected(tmp_path, coarse_lut):
    path = tmp_path / "lut.bin"
    save_lut(coarse_lut, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_lut(path)
    path.write_bytes(b"BADLUT!" + b"\0" * 40)
    with pytest.raises(FormatError, match="magic"):
        load_lut(path)


def test_fbeta_specular_only_is_f0_a_plus_b(rng, coarse_lut):
    g = random_gbuffer(rng)
    fbeta = build_fbeta_map(g, coarse_lut, include_diffuse=False).data
    a, b = query_lut(coarse_lut, g.roughness[0, 0], g.ndotv[0, 0])
    assert_allclose(fbeta[0], g.specular[0] * a + b, rtol=1e-6)
    assert fbeta.min() >= 0 and fbeta.max() <= 1 + 1e-3


def test_fbeta_with_diffuse_adds_weighted_albedo(rng, coarse_lut):
    g = random_gbuffer(rng)
    spec = build_fbeta_map(g, coarse_lut, include_diffuse=False).data
    full = build_fbeta_map(g, coarse_lut, include_diffuse=True).data
    weight = 1.0 - g.specular.mean(axis=1, keepdims=True)
    assert_allclose(full - spec, weight * g.albedo, rtol=1e-5, atol=1e-7)


def test_fbeta_with_diffuse_stays_below_two(rng, coarse_lut):
    g = random_gbuffer(rng)
    g.specular[...] = 0.04
    g.albedo[...] = 1.0
    g.roughness[...] = 0.5
    g.ndotv[...] = 0.1
    fbeta = build_fbeta_map(g, coarse_lut, include_diffuse=True).data
    assert fbeta.max() > 1.0
    assert fbeta.max() <= 2 + 1e-3
    mixed = build_fbeta_map(random_gbuffer(rng, 16, 16), coarse_lut, include_diffuse=True).data
    assert mixed.min() >= 0 and mixed.max() <= 2 + 1e-3


def test_fbeta_requires_roughness(rng, coarse_lut):
    g = random_gbuffer(rng)
    g.roughness = None
    with pytest.raises(SchemaError, match="roughness"):
        build_fbeta_map(g, coarse_lut)


def test_demodulation_roundtrip(rng, coarse_lut):
    g = random_gbuffer(rng)
    fbeta = build_fbeta_map(g, coarse_lut)
    emissive = Tensor(g.emissive)
    color = Tensor(rng.uniform(0, 4, (1, 3, 6, 5)))
    ld = demodulate(Tensor(color.data - emissive.data), fbeta)
    restored = remodulate(ld, fbeta, emissive).data
    mask = fbeta.data > 1e-3
    assert_allclose(restored[mask], color.data[mask], rtol=1e-6)


def test_gbuffer_validation(rng):
    g = random_gbuffer(rng)
    g.validate()
    g.normal = g.normal * 1.1
    with pytest.raises(SchemaError, match="unit"):
        g.validate()


def test_gbuffer_crop_and_tensor(rng):
    g = random_gbuffer(rng)
    cropped = g.crop(1, 2, 3, 2)
    assert cropped.spatial == (3, 2)
    assert g.tensor(['normal', 'depth']).channels == 4
