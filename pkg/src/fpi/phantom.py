"""Procedural anatomy-like phantom volumes.

Each phantom is a dark, faintly textured background plus a large bright
body (a rounded superellipsoid) containing 2-4 softly shaded internal
structures. Per-subject jitter of position, size, and intensity mimics the
natural variation between subjects: two phantoms share layout but never
voxel values. Everything inside the body has a nonzero intensity gradient,
so deformations of the interior are in principle detectable.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .rng import SeededRng
from .volume import Volume

MIN_SHAPE = 16
BACKGROUND_CEIL = 0.045  # background stays strictly below the 0.05 body cutoff

# Internal structures: (center, semi-axes) in units of the body semi-axes,
# plus a signed intensity offset. The first k of these are used per subject.
_STRUCTURES = (
    ((0.0, -0.35, -0.40), (0.28, 0.30, 0.30), -0.30),
    ((0.0, -0.35, +0.40), (0.28, 0.30, 0.30), -0.24),
    ((0.0, +0.45, 0.00), (0.65, 0.22, 0.20), +0.22),
    ((0.35, +0.05, +0.15), (0.30, 0.26, 0.26), +0.16),
)

_BODY_SEMI = (0.82, 0.86, 0.90)  # fractions of the half-extent per axis (z, y, x)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def generate_phantom(rng: SeededRng, shape: tuple[int, int, int], vol_id: str = "") -> Volume:
    """Deterministically generate one phantom volume with values in [0, 1]."""
    if len(shape) != 3 or min(shape) < MIN_SHAPE:
        raise DataError(f"phantom shape must be >= {MIN_SHAPE} per axis, got {shape}")
    g = rng.gen

    # Normalized voxel-center coordinates in [-1, 1] per axis.
    axes = [np.linspace(-1.0, 1.0, n, dtype=np.float64) for n in shape]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij", sparse=True)

    body_level = g.uniform(0.60, 0.72)
    body_center = g.uniform(-0.06, 0.06, size=3)  # <= 3% of each extent
    body_semi = np.array(_BODY_SEMI) * g.uniform(0.95, 1.04, size=3)

    # Superellipsoid radius: 0 at the center, 1 on the surface. The cubic
    # exponent gives a fuller, rounded-box body compared to an ellipsoid.
    m3 = (
        np.abs((zz - body_center[0]) / body_semi[0]) ** 3
        + np.abs((yy - body_center[1]) / body_semi[1]) ** 3
        + np.abs((xx - body_center[2]) / body_semi[2]) ** 3
    )
    m = np.cbrt(m3)
    body_w = _smoothstep((1.0 - m) / 0.07)
    body_val = body_level * (0.95 - 0.30 * np.minimum(m, 1.0) ** 2)

    n_struct = int(g.integers(2, 5))  # 2..4 structures
    struct_field = np.zeros(shape, dtype=np.float64)
    for center_b, semi_b, delta in _STRUCTURES[:n_struct]:
        c = body_center + np.asarray(center_b) * body_semi + g.uniform(-0.06, 0.06, size=3)
        s = np.asarray(semi_b) * body_semi * g.uniform(0.92, 1.08, size=3)
        r2 = (
            ((zz - c[0]) / s[0]) ** 2
            + ((yy - c[1]) / s[1]) ** 2
            + ((xx - c[2]) / s[2]) ** 2
        )
        w = _smoothstep((1.0 - np.sqrt(r2)) / 0.20)
        struct_field += delta * g.uniform(0.9, 1.1) * w

    # Faint smooth texture keeps the background dark but not constant.
    bg = np.zeros(shape, dtype=np.float64)
    for _ in range(3):
        amp = g.uniform(0.015, 0.042)
        c = g.uniform(-0.8, 0.8, size=3)
        sig = g.uniform(0.30, 0.60)
        r2 = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2
        bg += amp * np.exp(-r2 / (2.0 * sig * sig))
    bg = np.minimum(bg, BACKGROUND_CEIL)

    out = bg * (1.0 - body_w) + (body_val + struct_field * body_w) * body_w
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return Volume(voxels=out, vol_id=vol_id)
