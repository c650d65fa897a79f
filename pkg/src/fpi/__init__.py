"""Self-supervised anomaly detection via foreign patch interpolation.

Data handling, sample synthesis, the synthetic anomaly test bench, and the
evaluation metrics are importable from the top level. The network, trainer,
and scorer live in their own submodules (``fpi.network``, ``fpi.trainer``,
``fpi.scoring``) so that data-only workflows never pay the torch import.
"""

__version__ = "0.1.0"

from .errors import DataError, FpiError, NumericError, UsageError
from .rng import SeededRng, splitmix64
from .volume import (
    DatasetManifest,
    ManifestEntry,
    SliceImage,
    Volume,
    extract_slice,
    load_array,
    load_volume,
    normalize,
    pair_slices,
    save_array,
    save_volume,
)
from .phantom import generate_phantom
from .synth import (
    AlphaMode,
    DISCRETE_ALPHAS,
    FpiSample,
    PatchSpec,
    interpolate,
    make_training_batch,
    sample_alpha,
    sample_patch_spec,
)
from .testbench import (
    SphereAnomalySpec,
    TestCase,
    apply_anomaly,
    apply_noise_addition,
    apply_reflection,
    apply_sink_source,
    apply_uniform_addition,
    apply_uniform_shift,
    build_testset,
    sample_sphere,
    sphere_mask,
)
from .metrics import (
    CaseRecord,
    EvalReport,
    auroc,
    average_precision,
    dice_ceiling,
    evaluate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
