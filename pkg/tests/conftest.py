import numpy as np
import pytest

from fpi import SeededRng, SliceImage, Volume


@pytest.fixture
def rng():
    return SeededRng(12345)


def random_volume(seed: int, shape=(8, 8, 8), lo=0.0, hi=1.0) -> Volume:
    g = np.random.Generator(np.random.PCG64(seed))
    return Volume(
        voxels=g.uniform(lo, hi, size=shape).astype(np.float32),
        vol_id=f"vol-{seed}",
    )


def random_slice(seed: int, size=32) -> SliceImage:
    g = np.random.Generator(np.random.PCG64(seed))
    return SliceImage(
        pixels=g.uniform(0.0, 1.0, size=(size, size)).astype(np.float32),
        source=(f"s{seed}", 0, 0),
    )
