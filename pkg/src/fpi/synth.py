"""Foreign patch interpolation: self-supervised training sample synthesis.

A training sample takes two subjects' slices A and B, draws a square patch
and an interpolation factor alpha, and replaces the patch in A with the
convex combination (1-alpha)*A + alpha*B. The pixel-wise label is alpha
inside the patch wherever A and B actually differ, zero everywhere else,
so regions where the two subjects agree exactly (typically background) are
truncated out of the label.

Patch side length is drawn uniformly between 10% and 40% of the image
width; the center is drawn uniformly with each coordinate between 10% and
90% of the width; patches are square unless clipped by the image boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError, UsageError
from .rng import SeededRng
from .volume import SliceImage

MIN_IMAGE_WIDTH = 16

PATCH_SIDE_RANGE = (0.1, 0.4)  # fraction of image width
PATCH_CENTER_RANGE = (0.1, 0.9)

DISCRETE_ALPHAS = (0.0, 0.25, 0.50, 0.75, 1.0)


class AlphaMode(str, Enum):
    """How the interpolation factor is drawn and how the label encodes it."""

    CONTINUOUS = "continuous"
    DISCRETE = "discrete"
    BINARY = "binary"
    ROUND_UP = "continuous-round-up"

    @property
    def discrete_head(self) -> bool:
        return self is AlphaMode.DISCRETE


@dataclass(frozen=True)
class PatchSpec:
    """A drawn patch: real-valued center/side plus the rasterized bounds.

    ``bounds`` is the half-open integer rectangle ((j0, i0), (j1, i1)),
    clipped to the image, guaranteed nonempty.
    """

    center: tuple[float, float]  # (row, col)
    side: float
    bounds: tuple[int, int, int, int]  # j0, i0, j1, i1

    @classmethod
    def from_draw(
        cls, center: tuple[float, float], side: float, height: int, width: int
    ) -> "PatchSpec":
        cy, cx = center
        j0 = int(np.clip(round(cy - side / 2.0), 0, height))
        j1 = int(np.clip(round(cy + side / 2.0), 0, height))
        i0 = int(np.clip(round(cx - side / 2.0), 0, width))
        i1 = int(np.clip(round(cx + side / 2.0), 0, width))
        if j1 <= j0 or i1 <= i0:
            raise DataError(f"degenerate patch bounds for center={center} side={side}")
        return cls(center=(float(cy), float(cx)), side=float(side), bounds=(j0, i0, j1, i1))

    @property
    def slices(self) -> tuple[slice, slice]:
        j0, i0, j1, i1 = self.bounds
        return slice(j0, j1), slice(i0, i1)

    @property
    def area(self) -> int:
        j0, i0, j1, i1 = self.bounds
        return (j1 - j0) * (i1 - i0)


@dataclass(frozen=True)
class FpiSample:
    """One synthesized training sample.

    ``label`` is a float alpha-mask for continuous/binary/round-up modes and
    an integer class-index mask for discrete mode (the class values live in
    DISCRETE_ALPHAS).
    """

    image: SliceImage
    label: np.ndarray
    alpha: float
    patch: PatchSpec
    sources: tuple[str, str]
    mode: AlphaMode


def sample_patch_spec(rng: SeededRng, d: int) -> PatchSpec:
    """Draw patch side ~ U(0.1 d, 0.4 d) and center ~ U(0.1 d, 0.9 d)^2."""
    if d < MIN_IMAGE_WIDTH:
        raise DataError(f"image width must be >= {MIN_IMAGE_WIDTH}, got {d}")
    side = rng.gen.uniform(PATCH_SIDE_RANGE[0] * d, PATCH_SIDE_RANGE[1] * d)
    cy = rng.gen.uniform(PATCH_CENTER_RANGE[0] * d, PATCH_CENTER_RANGE[1] * d)
    cx = rng.gen.uniform(PATCH_CENTER_RANGE[0] * d, PATCH_CENTER_RANGE[1] * d)
    return PatchSpec.from_draw((cy, cx), side, d, d)


def sample_alpha(rng: SeededRng, mode: AlphaMode) -> float:
    """Draw the interpolation factor for the given mode.

    Continuous and round-up draw alpha ~ U(0, 1); round-up later binarizes
    only the *label*, not the blend. Discrete draws uniformly from the five
    class values; binary draws uniformly from {0, 1}.
    """
    if mode in (AlphaMode.CONTINUOUS, AlphaMode.ROUND_UP):
        return float(rng.gen.uniform(0.0, 1.0))
    if mode is AlphaMode.DISCRETE:
        return float(DISCRETE_ALPHAS[rng.gen.integers(0, len(DISCRETE_ALPHAS))])
    if mode is AlphaMode.BINARY:
        return float(rng.gen.integers(0, 2))
    raise UsageError(f"unknown alpha mode {mode!r}")


def discrete_class_index(alpha: float) -> int:
    """Map an alpha from DISCRETE_ALPHAS to its class index."""
    idx = int(round(alpha / 0.25))
    if not 0 <= idx < len(DISCRETE_ALPHAS) or abs(DISCRETE_ALPHAS[idx] - alpha) > 1e-9:
        raise UsageError(f"alpha {alpha} is not one of the discrete class values")
    return idx


def interpolate(
    a: SliceImage, b: SliceImage, patch: PatchSpec, alpha: float, mode: AlphaMode
) -> FpiSample:
    """Blend patch content of ``b`` into ``a`` and build the pixel-wise label.

    Inside the patch the output is (1-alpha)*A + alpha*B; outside it equals A
    bit-for-bit. The label is zero wherever A and B are exactly equal, which
    extends the zero region of the label into the patch (e.g. over shared
    background).
    """
    if a.pixels.shape != b.pixels.shape:
        raise DataError(f"slice shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must be in [0, 1], got {alpha}")
    h, w = a.pixels.shape
    j0, i0, j1, i1 = patch.bounds
    if j1 > h or i1 > w:
        raise DataError(f"patch bounds {patch.bounds} exceed image shape {(h, w)}")

    out = a.pixels.copy()
    sj, si = patch.slices
    a_patch = a.pixels[sj, si]
    b_patch = b.pixels[sj, si]
    differs = a_patch != b_patch
    # Pixels where the sources agree are left bit-exact (the patch region
    # effectively excludes them), so a self-pair is a no-op at any alpha.
    if alpha == 1.0:
        out[sj, si] = np.where(differs, b_patch, a_patch)
    elif alpha > 0.0:
        blend = (1.0 - np.float32(alpha)) * a_patch + np.float32(alpha) * b_patch
        out[sj, si] = np.where(differs, blend, a_patch)
    if mode is AlphaMode.DISCRETE:
        label = np.zeros((h, w), dtype=np.int64)
        label[sj, si] = np.where(differs, discrete_class_index(alpha), 0)
    else:
        value = alpha
        if mode is AlphaMode.ROUND_UP and alpha > 0.0:
            value = 1.0
        label = np.zeros((h, w), dtype=np.float32)
        label[sj, si] = np.where(differs, np.float32(value), np.float32(0.0))

    src = (a.source[0], b.source[0])
    image = SliceImage(pixels=out, source=a.source)
    return FpiSample(image=image, label=label, alpha=float(alpha), patch=patch,
                     sources=src, mode=mode)


def make_training_batch(
    pairs: list[tuple[SliceImage, SliceImage]],
    rng: SeededRng,
    mode: AlphaMode,
    batch_size: int,
) -> list[FpiSample]:
    """Synthesize a batch, one independent (patch, alpha) draw per sample.

    Sample s uses slice pair s (mod len(pairs)) and the child stream
    rng.child(s), so a batch is bit-reproducible from (seed, pairs) alone
    and samples are never cached across epochs.
    """
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    if not pairs:
        raise DataError("empty slice-pair sequence")
    samples = []
    for s in range(batch_size):
        a, b = pairs[s % len(pairs)]
        child = rng.child(s)
        patch = sample_patch_spec(child, d=a.width)
        alpha = sample_alpha(child, mode)
        samples.append(interpolate(a, b, patch, alpha, mode))
    return samples


def batch_arrays(samples: list[FpiSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack a batch into (images, labels) arrays for the network.

    Images become (N, 1, H, W) float32. Labels become (N, 1, H, W) float32
    for float-labeled modes and (N, H, W) int64 for discrete mode.
    """
    images = np.stack([s.image.pixels for s in samples])[:, None, :, :]
    if samples[0].mode is AlphaMode.DISCRETE:
        labels = np.stack([s.label for s in samples]).astype(np.int64)
    else:
        labels = np.stack([s.label for s in samples])[:, None, :, :].astype(np.float32)
    return images.astype(np.float32), labels
