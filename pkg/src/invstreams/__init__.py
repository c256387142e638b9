"""Group-equivariant CNNs with invariant integration and multi-stream heads, on a small numpy autodiff."""

import os

# Must run before numpy loads its BLAS.
_threads = os.environ.get("INVSTREAMS_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from .autodiff import Tensor, no_grad  # noqa: E402
from .data import Dataset, load_idx, subset_balanced, synth_generate  # noqa: E402
from .groups import GroupElement, GroupSpec  # noqa: E402
from .invariant import (  # noqa: E402
    MonomialPair,
    MonomialSpec,
    RotationMonomialII,
    ScaleMonomialII,
    ScaleWSII,
    WSRotationII,
)
from .layers import GConvLayer, GroupFeature, group_conv, lift_conv  # noqa: E402
from .metrics import equivariance_error, invariance_error, test_error  # noqa: E402
from .multistream import StreamBundle, head_variant, staged_train  # noqa: E402
from .trainer import TrainConfig, build_model, evaluate, train  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Dataset", "GConvLayer", "GroupElement", "GroupFeature", "GroupSpec", "MonomialPair", "MonomialSpec",
    "RotationMonomialII", "ScaleMonomialII", "ScaleWSII", "StreamBundle", "Tensor", "TrainConfig",
    "WSRotationII", "build_model", "equivariance_error", "evaluate", "group_conv", "head_variant",
    "invariance_error", "lift_conv", "load_idx", "no_grad", "staged_train", "subset_balanced",
    "synth_generate", "test_error", "train",
]
