import numpy as np
import pytest

from fpi import (
    DataError,
    SeededRng,
    SphereAnomalySpec,
    Volume,
    apply_anomaly,
    apply_noise_addition,
    apply_reflection,
    apply_sink_source,
    apply_uniform_addition,
    apply_uniform_shift,
    build_testset,
    generate_phantom,
    sample_sphere,
    sphere_mask,
)
from fpi.testbench import (
    KIND_NOISE_ADD,
    KIND_REFLECT,
    KIND_SHIFT,
    KIND_SINK,
    KIND_SOURCE,
    KIND_UNIFORM_ADD,
    deformation_sources,
    noise_values,
    save_testset,
)

from conftest import random_volume

D = 64


def flat_volume(value=0.5, shape=(D, D, D)) -> Volume:
    return Volume(voxels=np.full(shape, value, dtype=np.float32), vol_id="flat")


def ramp_volume(shape=(D, D, D)) -> Volume:
    # A(k, j, i) = i / d, linear along the last axis
    i = np.arange(shape[2], dtype=np.float32) / shape[2]
    vox = np.broadcast_to(i, shape).copy()
    return Volume(voxels=vox, vol_id="ramp")


class TestSampleSphere:
    def test_diameter_range(self):
        rng = SeededRng(0)
        diams = [sample_sphere(rng.child(i), (D, D, D)).diameter for i in range(10_000)]
        assert min(diams) >= 0.1 * D
        assert max(diams) <= 0.3 * D

    def test_sphere_fits_inside(self):
        rng = SeededRng(1)
        for i in range(2000):
            spec = sample_sphere(rng.child(i), (D, D, D))
            r = spec.diameter / 2
            for ax, c in enumerate(spec.center):
                assert c - r >= 2.0
                assert c + r <= D - 1 - 2.0

    def test_kind_family_frequencies_uniform(self):
        rng = SeededRng(2)
        counts = {}
        n = 10_000
        for i in range(n):
            kind = sample_sphere(rng.child(i), (D, D, D)).kind
            family = "deformation" if kind in (KIND_SINK, KIND_SOURCE) else kind
            counts[family] = counts.get(family, 0) + 1
        sigma = np.sqrt(n * 0.2 * 0.8)
        for family, count in counts.items():
            assert abs(count - n * 0.2) <= 3 * sigma, (family, count)

    def test_infeasible_geometry_rejected(self):
        with pytest.raises(DataError):
            # radius can exceed what a 16-voxel axis allows at this width
            sample_sphere(SeededRng(3), (16, 128, 128), diameter_range=(0.2, 0.2))


def _spec(kind, center=(32.0, 32.0, 32.0), diameter=16.0, **params):
    return SphereAnomalySpec(center=center, diameter=diameter, kind=kind, params=params)


class TestUniformAddition:
    def test_zero_intensity_keeps_volume_but_marks_mask(self):
        vol = random_volume(1, shape=(D, D, D))
        case = apply_uniform_addition(vol, _spec(KIND_UNIFORM_ADD, n=0.0))
        assert np.array_equal(case.volume.voxels, vol.voxels)
        assert case.mask.sum() > 0

    def test_addition_arithmetic(self):
        vol = flat_volume(0.2)
        case = apply_uniform_addition(vol, _spec(KIND_UNIFORM_ADD, n=0.5))
        assert np.allclose(case.volume.voxels[case.mask], 0.7, atol=1e-6)

    def test_clipping(self):
        vol = flat_volume(0.8)
        case = apply_uniform_addition(vol, _spec(KIND_UNIFORM_ADD, n=2.0))
        assert (case.volume.voxels[case.mask] == 1.0).all()


class TestNoiseAddition:
    def test_deterministic_given_seed(self):
        vol = random_volume(2, shape=(D, D, D))
        spec = _spec(KIND_NOISE_ADD, noise_seed=99)
        a = apply_noise_addition(vol, spec)
        b = apply_noise_addition(vol, spec)
        assert a.volume.voxels.tobytes() == b.volume.voxels.tobytes()

    def test_preclip_noise_is_standard_normal(self):
        # sample-statistics oracle on the values the generator will add
        values = noise_values(1234, 10_000)
        assert abs(values.std() - 1.0) < 0.05
        assert abs(values.mean()) < 0.05

    def test_outside_sphere_untouched(self):
        vol = random_volume(3, shape=(D, D, D))
        case = apply_noise_addition(vol, _spec(KIND_NOISE_ADD, noise_seed=5))
        assert np.array_equal(case.volume.voxels[~case.mask], vol.voxels[~case.mask])


class TestSinkSource:
    def test_boundary_voxel_identity(self):
        # voxel exactly on the sphere surface: s = 1, sampling position = itself
        center = np.array([32.0, 32.0, 32.0])
        spec_src = _spec(KIND_SOURCE, center=tuple(center), diameter=10.0)
        boundary = np.array([[37.0, 32.0, 32.0]])
        for kind in (KIND_SOURCE, KIND_SINK):
            spec = _spec(kind, center=tuple(center), diameter=10.0)
            v = deformation_sources(spec, boundary)
            assert np.allclose(v, boundary, atol=1e-12)
        vol = random_volume(4, shape=(D, D, D))
        case = apply_sink_source(vol, spec_src)
        assert abs(case.volume.voxels[37, 32, 32] - vol.voxels[37, 32, 32]) < 1e-6

    def test_center_voxel_identity(self):
        spec = _spec(KIND_SOURCE)
        vol = random_volume(5, shape=(D, D, D))
        case = apply_sink_source(vol, spec)
        assert abs(case.volume.voxels[32, 32, 32] - vol.voxels[32, 32, 32]) < 1e-6

    def test_sink_reads_from_doubled_offset_toward_center_limit(self):
        # at s -> 0 a sink reads from 2I - c; check a voxel near the center
        # against the exact rule V = I + (1 - s)(I - c) on a ramp
        spec = _spec(KIND_SINK, center=(32.0, 32.0, 32.0), diameter=12.0)
        vol = ramp_volume()
        case = apply_sink_source(vol, spec)
        s = (2.0 / 6.0) ** 2
        expected = (34 + (1 - s) * 2) / D
        assert abs(case.volume.voxels[32, 32, 34] - expected) < 1e-6
        # exactly at the center the sampling position is the center itself
        assert abs(case.volume.voxels[32, 32, 32] - vol.voxels[32, 32, 32]) < 1e-7

    def test_ramp_closed_form_both_modes(self):
        vol = ramp_volume()
        for kind in (KIND_SOURCE, KIND_SINK):
            spec = _spec(kind, center=(30.0, 34.0, 31.0), diameter=17.0)
            case = apply_sink_source(vol, spec)
            coords = np.argwhere(case.mask).astype(np.float64)
            v = deformation_sources(spec, coords)
            expected = v[:, 2] / D  # trilinear on a linear field is exact
            got = case.volume.voxels[case.mask]
            assert np.abs(got - expected).max() < 1e-6

    def test_outside_sphere_untouched(self):
        vol = random_volume(6, shape=(D, D, D))
        for kind in (KIND_SOURCE, KIND_SINK):
            case = apply_sink_source(vol, _spec(kind))
            assert np.array_equal(case.volume.voxels[~case.mask], vol.voxels[~case.mask])


class TestUniformShift:
    def test_shift_magnitudes_in_range(self):
        rng = SeededRng(7)
        count = 0
        for i in range(20_000):
            spec = sample_sphere(rng.child(i), (D, D, D))
            if spec.kind != KIND_SHIFT:
                continue
            count += 1
            for component in spec.params["shift"]:
                assert 0.02 * D <= abs(component) <= 0.05 * D
        assert count > 1000

    def test_constant_volume_unchanged(self):
        vol = flat_volume(0.37)
        spec = _spec(KIND_SHIFT, shift=[2.0, -3.0, 2.5])
        case = apply_uniform_shift(vol, spec)
        assert np.array_equal(case.volume.voxels, vol.voxels)

    def test_ramp_closed_form(self):
        vol = ramp_volume()
        shift = [2.0, -3.0, 2.6]
        spec = _spec(KIND_SHIFT, center=(32.0, 32.0, 32.0), diameter=16.0, shift=shift)
        case = apply_uniform_shift(vol, spec)
        coords = np.argwhere(case.mask)
        # independent arithmetic: round source coordinate, clamp, read ramp
        src_i = np.clip(np.rint(coords[:, 2] + shift[2]), 0, D - 1)
        expected = src_i / D
        got = case.volume.voxels[case.mask]
        assert np.abs(got - expected.astype(np.float32)).max() < 1e-6

    def test_outside_sphere_untouched(self):
        vol = random_volume(8, shape=(D, D, D))
        case = apply_uniform_shift(vol, _spec(KIND_SHIFT, shift=[1.5, 1.5, -2.0]))
        assert np.array_equal(case.volume.voxels[~case.mask], vol.voxels[~case.mask])


class TestReflection:
    def test_symmetric_volume_unchanged(self):
        j = np.arange(D, dtype=np.float32)
        sym = np.minimum(j, D - 1 - j) / D  # symmetric under j -> D-1-j
        vox = np.broadcast_to(sym[None, :, None], (D, D, D)).copy()
        vol = Volume(voxels=vox, vol_id="sym")
        case = apply_reflection(vol, _spec(KIND_REFLECT, axis=1))
        assert np.array_equal(case.volume.voxels, vol.voxels)

    def test_involution(self):
        vol = random_volume(9, shape=(D, D, D))
        spec = _spec(KIND_REFLECT, center=(32.0, 31.5, 32.0), diameter=14.0, axis=1)
        # a sphere centered on the mirror plane maps onto itself
        once = apply_reflection(vol, spec)
        twice = apply_reflection(once.volume, spec)
        assert np.allclose(twice.volume.voxels, vol.voxels, atol=1e-7)

    def test_single_bright_voxel_moves_across_midplane(self):
        d = 16
        vox = np.zeros((d, d, d), dtype=np.float32)
        vox[4, 2, 4] = 1.0
        vol = Volume(voxels=vox, vol_id="dot")
        spec = _spec(KIND_REFLECT, center=(4.0, 7.5, 4.0), diameter=11.0, axis=1)
        case = apply_reflection(vol, spec)
        assert case.mask[4, 2, 4] and case.mask[4, 13, 4]
        assert case.volume.voxels[4, 13, 4] == 1.0
        assert case.volume.voxels[4, 2, 4] == 0.0  # source position was dark


class TestBuildTestset:
    def _volumes(self, n, start=0):
        return [generate_phantom(SeededRng(start + i), (32, 32, 32), vol_id=f"p{start + i:03d}")
                for i in range(n)]

    def test_counts_and_masks(self):
        cases, normals = build_testset(self._volumes(30), self._volumes(10, 100), SeededRng(0))
        assert len(cases) == 30
        assert len(normals) == 10
        assert all(c.subject_label == 1 and c.mask.any() for c in cases)
        assert all(c.subject_label == 0 and not c.mask.any() for c in normals)

    def test_kind_counts_roughly_uniform(self):
        vols = self._volumes(200)
        cases, _ = build_testset(vols, self._volumes(2, 900), SeededRng(1))
        counts = {}
        for c in cases:
            family = "deformation" if c.spec.kind in (KIND_SINK, KIND_SOURCE) else c.spec.kind
            counts[family] = counts.get(family, 0) + 1
        sigma = np.sqrt(200 * 0.2 * 0.8)
        for family, count in counts.items():
            assert abs(count - 40) <= 3 * sigma, (family, count)

    def test_rerun_identical_files(self, tmp_path):
        import filecmp

        for d in ("a", "b"):
            cases, normals = build_testset(self._volumes(5), self._volumes(2, 50), SeededRng(3))
            save_testset(cases, normals, str(tmp_path / d))
        match, mismatch, errors = filecmp.cmpfiles(
            str(tmp_path / "a"), str(tmp_path / "b"),
            [p.name for p in (tmp_path / "a").iterdir()], shallow=False)
        assert not mismatch and not errors

    def test_empty_split_rejected(self):
        with pytest.raises(DataError):
            build_testset([], self._volumes(2), SeededRng(0))


class TestInvariants:
    def test_all_generators_keep_unit_interval_and_outside(self):
        rng = SeededRng(42)
        for i in range(60):
            vol = generate_phantom(rng.child(i), (32, 32, 32), vol_id=f"v{i}")
            spec = sample_sphere(rng.child(1000 + i), vol.shape)
            case = apply_anomaly(vol, spec)
            assert case.volume.voxels.min() >= 0.0
            assert case.volume.voxels.max() <= 1.0
            assert np.array_equal(case.volume.voxels[~case.mask], vol.voxels[~case.mask])
            assert case.mask.sum() > 0

    def test_mask_matches_distance_rule(self):
        spec = _spec(KIND_UNIFORM_ADD, center=(30.5, 33.0, 31.25), diameter=15.0, n=0.1)
        mask = sphere_mask((D, D, D), spec.center, spec.diameter)
        zz, yy, xx = np.mgrid[0:D, 0:D, 0:D].astype(np.float64)
        dist = np.sqrt((zz - 30.5) ** 2 + (yy - 33.0) ** 2 + (xx - 31.25) ** 2)
        assert np.array_equal(mask, dist <= 7.5)

    def test_deformation_displacement_vanishes_at_boundary(self):
        spec = _spec(KIND_SINK, diameter=16.0)
        mask = sphere_mask((D, D, D), spec.center, spec.diameter)
        coords = np.argwhere(mask).astype(np.float64)
        v = deformation_sources(spec, coords)
        disp = np.linalg.norm(v - coords, axis=1)
        radius = spec.diameter / 2
        rho = np.linalg.norm(coords - np.asarray(spec.center), axis=1)
        s = (rho / radius) ** 2
        # |V - I| = (1 - s) * rho for a sink: decays to zero at the boundary
        assert np.allclose(disp, (1 - s) * rho, atol=1e-9)
        shell = (rho > radius * 0.95) & (rho <= radius)
        assert disp[shell].max() <= 0.1 * radius
