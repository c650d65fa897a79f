"""Synthetic anomaly test set: spherical alterations with ground-truth masks.

Five generator families, each altering only the voxels inside a randomly
placed sphere: adding a constant, adding per-voxel Gaussian noise, radially
deforming content toward or away from the center (sink/source), resampling
from a uniformly shifted copy, and resampling from a copy reflected across
the volume's vertical mid-plane. The ground-truth mask marks the whole
sphere even where the alteration is numerically tiny.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import DataError
from .rng import SeededRng
from .volume import Volume, save_volume

KIND_UNIFORM_ADD = "uniform-add"
KIND_NOISE_ADD = "noise-add"
KIND_SOURCE = "source"
KIND_SINK = "sink"
KIND_SHIFT = "uniform-shift"
KIND_REFLECT = "reflection"

# sink and source are two halves of the same deformation family
KIND_FAMILIES = (
    (KIND_UNIFORM_ADD,),
    (KIND_NOISE_ADD,),
    (KIND_SOURCE, KIND_SINK),
    (KIND_SHIFT,),
    (KIND_REFLECT,),
)

DIAMETER_RANGE = (0.1, 0.3)  # fraction of image width
SHIFT_RANGE = (0.02, 0.05)  # fraction of image width, per axis
FACE_MARGIN = 2.0  # minimum sphere clearance from every volume face, voxels


@dataclass(frozen=True)
class SphereAnomalySpec:
    """Everything needed to reproduce one synthetic anomaly."""

    center: tuple[float, float, float]  # (z, y, x) voxel coordinates
    diameter: float
    kind: str
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "center": list(self.center),
            "diameter": self.diameter,
            "kind": self.kind,
            "params": self.params,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SphereAnomalySpec":
        return cls(
            center=tuple(data["center"]),
            diameter=float(data["diameter"]),
            kind=data["kind"],
            params=dict(data.get("params", {})),
        )


@dataclass
class TestCase:
    """An altered volume, its binary ground-truth mask, and provenance."""

    volume: Volume
    mask: np.ndarray  # bool, same shape
    subject_label: int
    spec: SphereAnomalySpec | None


def sphere_mask(shape: tuple[int, int, int], center, diameter: float) -> np.ndarray:
    """Boolean mask of voxels within Euclidean distance diameter/2 of center."""
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    r2 = (
        (zz - center[0]) ** 2.0
        + (yy - center[1]) ** 2.0
        + (xx - center[2]) ** 2.0
    )
    return r2 <= (diameter / 2.0) ** 2


def sample_sphere(
    rng: SeededRng,
    shape: tuple[int, int, int],
    diameter_range: tuple[float, float] = DIAMETER_RANGE,
) -> SphereAnomalySpec:
    """Draw a sphere spec: size, interior location, kind, and kind parameters.

    Diameter is uniform over ``diameter_range`` times the image width. The
    center is uniform over all positions keeping the sphere at least
    FACE_MARGIN voxels from every face. The five generator families are
    equally likely; within the deformation family sink and source each take
    half.
    """
    g = rng.gen
    d = shape[2]
    diameter = g.uniform(diameter_range[0] * d, diameter_range[1] * d)
    radius = diameter / 2.0
    lo = radius + FACE_MARGIN
    center = []
    for extent in shape:
        hi = (extent - 1) - radius - FACE_MARGIN
        if hi < lo:
            raise DataError(
                f"infeasible sphere: diameter {diameter:.1f} does not fit in shape {shape}"
            )
        center.append(float(g.uniform(lo, hi)))
    family = KIND_FAMILIES[g.integers(0, len(KIND_FAMILIES))]
    kind = family[g.integers(0, len(family))] if len(family) > 1 else family[0]

    params: dict = {}
    if kind == KIND_UNIFORM_ADD:
        params["n"] = float(g.normal())
    elif kind == KIND_NOISE_ADD:
        params["noise_seed"] = int(g.integers(0, 2**63 - 1))
    elif kind == KIND_SHIFT:
        shift = []
        for _ in range(3):
            u = g.uniform(SHIFT_RANGE[0] * d, SHIFT_RANGE[1] * d)
            sign = 1.0 if g.integers(0, 2) == 1 else -1.0
            shift.append(float(sign * u))
        params["shift"] = shift
    elif kind == KIND_REFLECT:
        params["axis"] = 1
    return SphereAnomalySpec(center=tuple(center), diameter=float(diameter),
                             kind=kind, params=params)


def _finish(vol: Volume, altered: np.ndarray, mask: np.ndarray,
            spec: SphereAnomalySpec) -> TestCase:
    out = np.clip(altered, 0.0, 1.0).astype(np.float32)
    return TestCase(
        volume=Volume(voxels=out, spacing=vol.spacing, vol_id=vol.vol_id),
        mask=mask,
        subject_label=1,
        spec=spec,
    )


def apply_uniform_addition(vol: Volume, spec: SphereAnomalySpec) -> TestCase:
    """Add a single constant n ~ N(0, 1) inside the sphere, then clip to [0, 1]."""
    if spec.kind != KIND_UNIFORM_ADD:
        raise DataError(f"spec kind {spec.kind!r} is not {KIND_UNIFORM_ADD!r}")
    mask = sphere_mask(vol.shape, spec.center, spec.diameter)
    out = vol.voxels.astype(np.float64).copy()
    out[mask] += spec.params["n"]
    return _finish(vol, out, mask, spec)


def noise_values(noise_seed: int, count: int) -> np.ndarray:
    """The i.i.d. standard-normal values a noise-addition case will add.

    Exposed separately so the pre-clip noise statistics can be inspected;
    values are consumed in C-order mask position."""
    return np.random.Generator(np.random.PCG64(noise_seed)).standard_normal(count)


def apply_noise_addition(vol: Volume, spec: SphereAnomalySpec) -> TestCase:
    """Add i.i.d. N(0, 1) noise per voxel inside the sphere, then clip."""
    if spec.kind != KIND_NOISE_ADD:
        raise DataError(f"spec kind {spec.kind!r} is not {KIND_NOISE_ADD!r}")
    mask = sphere_mask(vol.shape, spec.center, spec.diameter)
    out = vol.voxels.astype(np.float64).copy()
    out[mask] += noise_values(spec.params["noise_seed"], int(mask.sum()))
    return _finish(vol, out, mask, spec)


def deformation_sources(
    spec: SphereAnomalySpec, coords: np.ndarray
) -> np.ndarray:
    """Sampling positions for the sink/source deformation at voxel ``coords``.

    With s = (|I - c| / r)^2, a source samples from c + s (I - c) (content is
    pushed outward) and a sink samples from I + (1 - s)(I - c) (content is
    pulled inward). Both reduce to the identity on the sphere boundary, so
    the deformation is continuous across it.
    """
    center = np.asarray(spec.center, dtype=np.float64)
    radius = spec.diameter / 2.0
    delta = coords - center
    s = (np.einsum("ij,ij->i", delta, delta) / radius**2)[:, None]
    if spec.kind == KIND_SOURCE:
        return center + s * delta
    if spec.kind == KIND_SINK:
        return coords + (1.0 - s) * delta
    raise DataError(f"spec kind {spec.kind!r} is not sink/source")


def apply_sink_source(vol: Volume, spec: SphereAnomalySpec) -> TestCase:
    """Radially resample inside the sphere with trilinear interpolation.

    Non-integer sampling positions are interpolated trilinearly; positions
    outside the volume are clamped to the nearest voxel.
    """
    mask = sphere_mask(vol.shape, spec.center, spec.diameter)
    coords = np.argwhere(mask).astype(np.float64)
    sources = deformation_sources(spec, coords)
    sampled = map_coordinates(
        vol.voxels.astype(np.float64), sources.T, order=1, mode="nearest"
    )
    out = vol.voxels.astype(np.float64).copy()
    out[mask] = sampled
    return _finish(vol, out, mask, spec)


def apply_uniform_shift(vol: Volume, spec: SphereAnomalySpec) -> TestCase:
    """Resample the sphere from a copy shifted by (a, b, c) voxels.

    Each component has magnitude between 2% and 5% of the image width with
    an independent random sign. Source coordinates are rounded to the
    nearest voxel and clamped to the volume bounds.
    """
    if spec.kind != KIND_SHIFT:
        raise DataError(f"spec kind {spec.kind!r} is not {KIND_SHIFT!r}")
    mask = sphere_mask(vol.shape, spec.center, spec.diameter)
    coords = np.argwhere(mask)
    shift = np.asarray(spec.params["shift"], dtype=np.float64)
    src = np.rint(coords + shift).astype(np.int64)
    for ax in range(3):
        np.clip(src[:, ax], 0, vol.shape[ax] - 1, out=src[:, ax])
    out = vol.voxels.copy()
    out[mask] = vol.voxels[src[:, 0], src[:, 1], src[:, 2]]
    return _finish(vol, out, mask, spec)


def apply_reflection(vol: Volume, spec: SphereAnomalySpec) -> TestCase:
    """Resample the sphere from the volume mirrored across an axis mid-plane.

    Axis 1 (height) by default: voxel (k, j, i) reads from (k, n-1-j, i)
    with zero-based indices, an involution on the sphere.
    """
    if spec.kind != KIND_REFLECT:
        raise DataError(f"spec kind {spec.kind!r} is not {KIND_REFLECT!r}")
    axis = int(spec.params.get("axis", 1))
    if axis not in (0, 1, 2):
        raise DataError(f"reflection axis must be 0, 1 or 2, got {axis}")
    mask = sphere_mask(vol.shape, spec.center, spec.diameter)
    coords = np.argwhere(mask)
    src = coords.copy()
    src[:, axis] = vol.shape[axis] - 1 - src[:, axis]
    out = vol.voxels.copy()
    out[mask] = vol.voxels[src[:, 0], src[:, 1], src[:, 2]]
    return _finish(vol, out, mask, spec)


_APPLY = {
    KIND_UNIFORM_ADD: apply_uniform_addition,
    KIND_NOISE_ADD: apply_noise_addition,
    KIND_SOURCE: apply_sink_source,
    KIND_SINK: apply_sink_source,
    KIND_SHIFT: apply_uniform_shift,
    KIND_REFLECT: apply_reflection,
}


def apply_anomaly(vol: Volume, spec: SphereAnomalySpec) -> TestCase:
    """Dispatch to the generator for ``spec.kind``."""
    try:
        fn = _APPLY[spec.kind]
    except KeyError:
        raise DataError(f"unknown anomaly kind {spec.kind!r}") from None
    return fn(vol, spec)


def build_testset(
    anomaly_sources: list[Volume],
    normals: list[Volume],
    rng: SeededRng,
    diameter_range: tuple[float, float] = DIAMETER_RANGE,
) -> tuple[list[TestCase], list[TestCase]]:
    """One anomaly per source volume; normals pass through with empty masks."""
    if not anomaly_sources or not normals:
        raise DataError("both anomaly-source and normal splits must be nonempty")
    cases = []
    for i, vol in enumerate(anomaly_sources):
        spec = sample_sphere(rng.child(i), vol.shape, diameter_range)
        cases.append(apply_anomaly(vol, spec))
    passthrough = [
        TestCase(volume=v, mask=np.zeros(v.shape, dtype=bool), subject_label=0, spec=None)
        for v in normals
    ]
    return cases, passthrough


def save_testset(cases: list[TestCase], passthrough: list[TestCase], out_dir: str) -> str:
    """Write altered volumes, masks, and index.json; returns the index path."""
    os.makedirs(out_dir, exist_ok=True)
    index = {"format_version": 1, "cases": []}
    for case in cases + passthrough:
        cid = case.volume.vol_id
        img_path = os.path.join(out_dir, f"{cid}_img.raw")
        save_volume(case.volume, img_path)
        entry = {
            "id": cid,
            "subject_label": case.subject_label,
            "kind": case.spec.kind if case.spec else "normal",
            "img": os.path.basename(img_path),
            "mask": None,
            "spec": case.spec.to_json() if case.spec else None,
        }
        if case.subject_label:
            mask_path = os.path.join(out_dir, f"{cid}_mask.raw")
            save_volume(
                Volume(voxels=case.mask.astype(np.float32), vol_id=f"{cid}-mask"),
                mask_path,
            )
            entry["mask"] = os.path.basename(mask_path)
        index["cases"].append(entry)
    index_path = os.path.join(out_dir, "index.json")
    with open(index_path, "w") as f:
        json.dump(index, f, sort_keys=True, indent=1)
        f.write("\n")
    return index_path


def load_testset_index(path: str) -> dict:
    if not os.path.exists(path):
        raise DataError(f"testset index not found: {path}")
    with open(path) as f:
        return json.load(f)
