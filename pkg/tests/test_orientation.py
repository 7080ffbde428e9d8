import numpy as np
import pytest

from mash import sampler
from mash.fitting import rotvec_between
from mash.model import MashModel
from mash.orientation import (OrientedSamples, blend_normals, orient_patches, orient_samples,
                              reference_subset)

from conftest import random_model


def facing_pair():
    """Two anchors on opposite sides of the plane z=0, both looking at it."""
    m = MashModel.zeros(2, 2, 3, n_dir=200)
    m.positions = np.array([[-0.15, 0.0, 0.3], [0.15, 0.0, -0.3]])
    m.rotvecs = rotvec_between(np.array([0.0, 0.0, 1.0]), np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]]))
    m.sh_coeffs[:, 0] = 0.3 / 0.28209479177387814 / 7.52
    m.mask_coeffs[:, 0] = -1.0
    return m


def with_normals(model):
    s = sampler.sample_model(model)
    s.normals = sampler.model_normals(model, s.rays, s.points)
    return s


def manual_set(normals, omega):
    n = len(omega)
    rays = sampler.RayBatch(np.zeros(n, dtype=int), np.asarray(omega, float), np.zeros(n), np.zeros(n))
    pts = np.column_stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)])
    return sampler.SampleSet(pts, rays, np.zeros((0, 3)), np.zeros(0, dtype=int),
                             np.asarray(normals, float), _M=1)


class TestPatchSigns:
    def test_single_patch(self, rng):
        m = random_model(rng, M=1)
        s = with_normals(m)
        assert orient_patches(m, s).tolist() == [1.0]
        assert orient_patches(m, s, seed_sign=-1.0).tolist() == [-1.0]

    def test_opposite_patches_one_flip(self):
        m = facing_pair()
        s = with_normals(m)
        raw = [s.normals[s.anchor == i].mean(0) for i in range(2)]
        assert raw[0] @ raw[1] < 0
        signs = orient_patches(m, s)
        assert signs[0] * signs[1] == -1.0
        fixed = [signs[i] * raw[i] for i in range(2)]
        assert fixed[0] @ fixed[1] > 0
        # seeded at the highest patch, pointing up
        assert fixed[0][2] > 0 and fixed[1][2] > 0

    def test_requires_normals(self, rng):
        m = random_model(rng)
        with pytest.raises(ValueError):
            orient_patches(m, sampler.sample_model(m))


class TestBlend:
    def test_endpoints_and_midpoint(self):
        n_src = np.array([[1.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0]])
        n_ref = np.array([[0.0, 1, 0], [0.0, 1, 0], [0.0, 1, 0]])
        s = manual_set(n_src, [0.0, 1.0, 0.25])
        out = blend_normals(s, s.points, n_ref)
        np.testing.assert_array_equal(out.normals[0], n_src[0])
        np.testing.assert_allclose(out.normals[1], n_ref[1], atol=1e-15)
        # sqrt(0.25) = 0.5: halfway along the great circle
        np.testing.assert_allclose(out.normals[2], [np.sqrt(0.5), np.sqrt(0.5), 0.0], atol=1e-15)
        assert out.antiparallel == 0

    def test_antiparallel_kept_and_counted(self):
        n_src = np.array([[0.0, 0, 1], [0.0, 0, 1]])
        n_ref = np.array([[0.0, 0, -1], [1.0, 0, 0]])
        s = manual_set(n_src, [0.5, 0.5])
        out = blend_normals(s, s.points, n_ref)
        assert out.antiparallel == 1
        np.testing.assert_array_equal(out.normals[0], n_src[0])

    def test_unit_length(self, rng):
        n = rng.normal(size=(300, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        r = rng.normal(size=(300, 3))
        r /= np.linalg.norm(r, axis=1, keepdims=True)
        s = manual_set(n, rng.uniform(0, 1, 300))
        out = blend_normals(s, s.points, r)
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-12)


def test_reference_subset_size(rng):
    pts = rng.normal(size=(10000, 3))
    assert len(reference_subset(10000, pts)) == 1000
    assert len(reference_subset(2000, pts[:2000])) == 512
    assert len(reference_subset(100, pts[:100])) == 100


def test_sign_equivariance(rng):
    m = random_model(rng, M=6)
    s = sampler.sample_model(m)
    a = orient_samples(m, s, 1.0, np.random.default_rng(0))
    b = orient_samples(m, s, -1.0, np.random.default_rng(0))
    assert isinstance(a, OrientedSamples)
    np.testing.assert_array_equal(a.normals, -b.normals)


@pytest.mark.slow
def test_fitted_sphere_radial(sphere_fit):
    m = sphere_fit["model"]
    s = sampler.sample_model(m)
    out = orient_samples(m, s, rng=np.random.default_rng(0))
    radial = out.points / np.linalg.norm(out.points, axis=1, keepdims=True)
    assert np.mean(np.sum(out.normals * radial, axis=1) > 0) >= 0.99
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-12)
