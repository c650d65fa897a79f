"""3D volumes, 2D slices, on-disk format, manifests, and slice pairing.

A volume on disk is a raw little-endian float32 payload in C order plus a
JSON sidecar carrying shape/dtype/spacing/id. The format is deliberately
dumb so it stays byte-reproducible and convertible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .rng import SeededRng

FORMAT_VERSION = 1
SPLIT_TRAIN = "train"
SPLIT_TEST_NORMAL = "test-normal"
SPLIT_TEST_ANOMALY = "test-anomaly-source"
SPLITS = (SPLIT_TRAIN, SPLIT_TEST_NORMAL, SPLIT_TEST_ANOMALY)
DEFAULT_FRACTIONS = {SPLIT_TRAIN: 0.6, SPLIT_TEST_NORMAL: 0.1, SPLIT_TEST_ANOMALY: 0.3}

MIN_AXIS = 8


@dataclass(frozen=True)
class Volume:
    """A 3D scalar field, axes ordered (depth, height, width).

    Voxels are float32, finite, row-major. ``spacing`` is mm per axis and is
    carried as metadata only; no operation resamples between spacings.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    vol_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {v.shape}")
        if min(v.shape) < MIN_AXIS:
            raise DataError(f"volume axes must be >= {MIN_AXIS}, got {v.shape}")
        if not np.isfinite(v).all():
            raise DataError(f"volume {self.vol_id!r} contains non-finite voxels")
        object.__setattr__(self, "voxels", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def width(self) -> int:
        """Image width d, the last-axis extent."""
        return self.voxels.shape[2]


@dataclass(frozen=True)
class SliceImage:
    """A 2D slice with provenance (volume id, axis, index)."""

    pixels: np.ndarray
    source: tuple[str, int, int] = ("", 0, 0)

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 2:
            raise DataError(f"slice must be 2D, got shape {p.shape}")
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _sidecar_path(path: str) -> str:
    base = path[:-4] if path.endswith(".raw") else path
    return base + ".json"


def _raw_path(path: str) -> str:
    return path if path.endswith(".raw") else path + ".raw"


def save_array(
    arr: np.ndarray,
    path: str,
    array_id: str = "",
    extra_meta: dict | None = None,
) -> str:
    """Write any float array as <path>.raw plus a JSON sidecar.

    Payload is little-endian float32 in C order; the sidecar carries shape,
    dtype, and id. Output bytes are a pure function of the array contents,
    so identical arrays produce identical files.
    """
    raw = _raw_path(path)
    os.makedirs(os.path.dirname(raw) or ".", exist_ok=True)
    data = np.ascontiguousarray(arr, dtype="<f4")
    meta = {
        "format_version": FORMAT_VERSION,
        "id": array_id,
        "shape": list(data.shape),
        "dtype": "float32-le",
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(raw, "wb") as f:
        f.write(data.tobytes())
    with open(_sidecar_path(raw), "w") as f:
        json.dump(meta, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    return raw


def _load_array_meta(path: str) -> tuple[np.ndarray, dict]:
    raw = _raw_path(path)
    sidecar = _sidecar_path(raw)
    if not os.path.exists(raw):
        raise DataError(f"array payload not found: {raw}")
    if not os.path.exists(sidecar):
        raise DataError(f"missing sidecar for {raw}")
    with open(sidecar) as f:
        meta = json.load(f)
    shape = tuple(int(s) for s in meta["shape"])
    if meta.get("dtype") != "float32-le":
        raise DataError(f"unsupported dtype {meta.get('dtype')!r} in {sidecar}")
    expected = int(np.prod(shape)) * 4
    actual = os.path.getsize(raw)
    if actual != expected:
        raise DataError(
            f"{raw}: sidecar declares shape {shape} ({expected} bytes) "
            f"but payload is {actual} bytes"
        )
    values = np.fromfile(raw, dtype="<f4").reshape(shape)
    if not np.isfinite(values).all():
        raise DataError(f"{raw}: non-finite value encountered")
    return values, meta


def load_array(path: str) -> np.ndarray:
    """Read an array written by :func:`save_array`."""
    values, _ = _load_array_meta(path)
    return values


def save_volume(vol: Volume, path: str) -> str:
    """Write a volume in the raw+sidecar format; returns the raw path."""
    return save_array(
        vol.voxels, path, array_id=vol.vol_id,
        extra_meta={"spacing": list(vol.spacing)},
    )


def load_volume(path: str) -> Volume:
    """Read a volume written by :func:`save_volume`.

    Raises DataError on a missing sidecar, a payload whose byte length does
    not match the declared shape, or non-finite voxels.
    """
    values, meta = _load_array_meta(path)
    if values.ndim != 3:
        raise DataError(f"{path}: expected a 3D volume, got shape {values.shape}")
    spacing = tuple(float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0)))
    return Volume(voxels=values, spacing=spacing, vol_id=str(meta.get("id", "")))


def normalize(vol: Volume) -> Volume:
    """Min-max rescale to [0, 1]; a constant volume maps to all zeros."""
    v = vol.voxels
    if not np.isfinite(v).all():
        raise DataError("normalize: non-finite input")
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / np.float32(hi - lo)
    return Volume(voxels=out.astype(np.float32), spacing=vol.spacing, vol_id=vol.vol_id)


def extract_slice(vol: Volume, axis: int, index: int) -> SliceImage:
    """Copy out one 2D slice along ``axis`` with provenance attached."""
    if axis not in (0, 1, 2):
        raise DataError(f"axis must be 0, 1 or 2, got {axis}")
    extent = vol.shape[axis]
    if not 0 <= index < extent:
        raise DataError(f"slice index {index} out of range for axis {axis} (extent {extent})")
    pixels = np.take(vol.voxels, index, axis=axis).copy()
    return SliceImage(pixels=pixels, source=(vol.vol_id, axis, index))


@dataclass
class ManifestEntry:
    vol_id: str
    path: str
    split: str


@dataclass
class DatasetManifest:
    """List of volumes with disjoint split tags plus the split fractions."""

    entries: list[ManifestEntry] = field(default_factory=list)
    fractions: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_FRACTIONS))

    def ids(self, split: str) -> list[str]:
        return [e.vol_id for e in self.entries if e.split == split]

    def paths(self, split: str) -> list[str]:
        return [e.path for e in self.entries if e.split == split]

    def validate(self):
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split tag {e.split!r} for {e.vol_id!r}")
            if e.vol_id in seen:
                raise DataError(f"duplicate volume id {e.vol_id!r} in manifest")
            seen.add(e.vol_id)

    def save(self, path: str):
        self.validate()
        data = {
            "format_version": FORMAT_VERSION,
            "fractions": self.fractions,
            "entries": [
                {"id": e.vol_id, "path": e.path, "split": e.split} for e in self.entries
            ],
        }
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            json.dump(data, f, sort_keys=True, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        if not os.path.exists(path):
            raise DataError(f"manifest not found: {path}")
        with open(path) as f:
            data = json.load(f)
        m = cls(
            entries=[
                ManifestEntry(vol_id=e["id"], path=e["path"], split=e["split"])
                for e in data.get("entries", [])
            ],
            fractions=data.get("fractions", dict(DEFAULT_FRACTIONS)),
        )
        m.validate()
        return m


def assign_splits(n: int, fractions: dict[str, float] | None = None) -> list[str]:
    """Deterministic split tags for n items: train block, then the test blocks."""
    fr = dict(DEFAULT_FRACTIONS if fractions is None else fractions)
    n_train = round(n * fr[SPLIT_TRAIN])
    n_normal = round(n * fr[SPLIT_TEST_NORMAL])
    tags = (
        [SPLIT_TRAIN] * n_train
        + [SPLIT_TEST_NORMAL] * n_normal
        + [SPLIT_TEST_ANOMALY] * (n - n_train - n_normal)
    )
    return tags[:n]


def pair_ids(ids: list[str], rng: SeededRng) -> list[tuple[str, str]]:
    """Shuffle ids uniformly and pair them off consecutively.

    With an odd count the leftover id sits this round out, so a volume can
    never be paired with itself.
    """
    if len(ids) < 2:
        raise DataError(f"need at least two volumes to pair, got {len(ids)}")
    order = rng.gen.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [(shuffled[i], shuffled[i + 1]) for i in range(0, len(shuffled) - 1, 2)]


def pair_slices(
    manifest: DatasetManifest,
    epoch_seed: int,
    cache: dict[str, Volume] | None = None,
) -> list[tuple[SliceImage, SliceImage]]:
    """Pair training volumes for one epoch and match their slices by index.

    Volumes are shuffled by ``epoch_seed`` into disjoint pairs; within a pair,
    slice k of the first volume is matched with slice k of the second. Loaded
    volumes are min-max normalized and kept in ``cache`` when provided.
    """
    train = [e for e in manifest.entries if e.split == SPLIT_TRAIN]
    if len(train) < 2:
        raise DataError(f"need at least two training volumes, got {len(train)}")
    if cache is None:
        cache = {}
    by_id = {e.vol_id: e for e in train}

    def get(vol_id: str) -> Volume:
        if vol_id not in cache:
            cache[vol_id] = normalize(load_volume(by_id[vol_id].path))
        return cache[vol_id]

    rng = SeededRng(epoch_seed)
    pairs = pair_ids([e.vol_id for e in train], rng)
    out: list[tuple[SliceImage, SliceImage]] = []
    for a_id, b_id in pairs:
        a, b = get(a_id), get(b_id)
        depth = min(a.shape[0], b.shape[0])
        for k in range(depth):
            out.append((extract_slice(a, 0, k), extract_slice(b, 0, k)))
    return out
