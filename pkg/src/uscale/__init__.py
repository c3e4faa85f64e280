"""uscale: unit-scaled maximal-update parametrization toolkit.

A self-contained numpy implementation of unit-scaled ops, abc-parametrization
rules, emulated FP8 formats, and a desk-scale pre-norm transformer trainer
with a hyperparameter-sweep harness.

The submodules are the real API surface; this package root re-exports the
handful of names most scripts start from.
"""

from .model import build_model, config_from_dict
from .numerics import FloatFormat, make_format, quantize
from .parametrization import HpSet, Scheme, lr_for_param
from .rng import Rng
from .sweep import (SweepSpec, independent_search, lr_transfer_report,
                    random_search, transfer_error)
from .tensor import Tape, Tensor, set_engine_dtype
from .train import TokenStream, TrainConfig, train_run

__version__ = "0.1.0"

__all__ = [
    "FloatFormat", "HpSet", "Rng", "Scheme", "SweepSpec", "Tape", "Tensor",
    "TokenStream", "TrainConfig", "build_model", "config_from_dict",
    "independent_search", "lr_for_param", "lr_transfer_report", "make_format",
    "quantize", "random_search", "set_engine_dtype", "train_run",
    "transfer_error",
]
