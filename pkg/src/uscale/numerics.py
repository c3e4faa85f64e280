"""Emulated low-precision float formats, quantization, and tensor-scale statistics.

Quantization here is a value-level simulation: arrays stay float64, but every
element is snapped to the nearest value representable in the target format
(round-to-nearest-even). This is exact — float64 has enough mantissa bits to
represent every value of every format we emulate — so tests can compare against
a bit-level oracle with zero tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FloatFormat",
    "FORMAT_NAMES",
    "make_format",
    "quantize",
    "ScaleStats",
    "stats",
    "log_interpolate",
]


@dataclass(frozen=True)
class FloatFormat:
    """Parameters of an emulated binary float format.

    ``special_values`` is either "inf+nan" (IEEE-style: the top exponent is
    reserved for infinities and NaNs) or "single-nan-only" (the top exponent
    holds ordinary values except the all-ones mantissa, which is NaN; there
    are no infinities). The industry 8-bit formats differ exactly here: E5M2
    keeps inf/NaN, E4M3 spends that space on range, giving max 448.
    """

    name: str
    exponent_bits: int
    mantissa_bits: int
    max_finite: float
    min_normal: float
    min_subnormal: float
    saturating: bool = True
    special_values: str = "inf+nan"

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1


def _build_format(name: str, e: int, m: int, special_values: str) -> FloatFormat:
    bias = 2 ** (e - 1) - 1
    if special_values == "single-nan-only":
        # Top exponent is usable; only the all-ones mantissa there is NaN.
        max_exp = (2**e - 1) - bias
        max_mantissa = 2.0 - 2.0 ** (1 - m)  # one step below the NaN encoding
    elif special_values == "inf+nan":
        max_exp = (2**e - 2) - bias
        max_mantissa = 2.0 - 2.0 ** (-m)
    else:
        raise ValueError(f"unknown special_values policy: {special_values!r}")
    min_normal = 2.0 ** (1 - bias)
    return FloatFormat(
        name=name,
        exponent_bits=e,
        mantissa_bits=m,
        max_finite=math.ldexp(max_mantissa, max_exp),
        min_normal=min_normal,
        min_subnormal=min_normal * 2.0**-m,
        special_values=special_values,
    )


_PRESETS = {
    "e4m3": _build_format("e4m3", 4, 3, "single-nan-only"),
    "e5m2": _build_format("e5m2", 5, 2, "inf+nan"),
    "bf16": _build_format("bf16", 8, 7, "inf+nan"),
    "fp16": _build_format("fp16", 5, 10, "inf+nan"),
    "fp32": _build_format("fp32", 8, 23, "inf+nan"),
}

FORMAT_NAMES = tuple(_PRESETS)


def make_format(name: str, saturating: bool = True) -> FloatFormat:
    """Return a preset format by name (e4m3, e5m2, bf16, fp16, fp32)."""
    key = name.lower()
    if key not in _PRESETS:
        raise ValueError(f"unknown format {name!r}; expected one of {sorted(_PRESETS)}")
    preset = _PRESETS[key]
    if saturating != preset.saturating:
        preset = FloatFormat(**{**preset.__dict__, "saturating": saturating})
    return preset


def quantize(x, fmt: FloatFormat) -> np.ndarray:
    """Round every element of ``x`` to the nearest value representable in ``fmt``.

    Round-to-nearest-even throughout, including the subnormal range (where the
    quantum is fixed at ``min_subnormal``). Magnitudes that round past
    ``max_finite`` saturate to ±max_finite by default; with ``saturating=False``
    they become the format's overflow value (±inf for inf+nan formats, NaN for
    single-nan-only formats). NaN propagates; signed zeros are preserved.
    """
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(x)

    # x = m * 2**e with |m| in [0.5, 1), so the leading-bit exponent is e-1.
    # The rounding quantum is 2**(exponent - mantissa_bits), with the exponent
    # clamped at the minimum normal exponent so subnormals share one quantum.
    _, e = np.frexp(np.where(finite, x, 0.0))
    min_exp = 1 - fmt.bias
    quantum_exp = np.maximum(e - 1, min_exp) - fmt.mantissa_bits
    with np.errstate(over="ignore", invalid="ignore"):
        # The rescale can overflow float64 for inputs near its max; those land
        # in the overflow branch below anyway.
        q = np.ldexp(np.rint(np.ldexp(x, -quantum_exp)), quantum_exp)

    over = np.abs(q) > fmt.max_finite  # true for ±inf inputs too, false for NaN
    if fmt.saturating:
        overflowed = np.copysign(fmt.max_finite, x)
    elif fmt.special_values == "inf+nan":
        overflowed = np.copysign(np.inf, x)
    else:
        overflowed = np.full_like(x, np.nan)
    q = np.where(over, overflowed, q)
    q = np.where(np.isnan(x), np.nan, q)
    return q


def cast_report(x, fmt: FloatFormat) -> dict:
    """Clipping-error summary of quantizing ``x`` to ``fmt``.

    underflow_frac: fraction of nonzero inputs that quantize to zero.
    overflow_frac: fraction of inputs beyond max_finite (clipped or overflowed).
    """
    x = np.asarray(x, dtype=np.float64)
    q = quantize(x, fmt)
    nonzero = x != 0.0
    n_nonzero = int(np.count_nonzero(nonzero))
    underflow = int(np.count_nonzero(nonzero & (q == 0.0)))
    overflow = int(np.count_nonzero(np.abs(x) > fmt.max_finite))
    return {
        "format": fmt.name,
        "input_count": int(x.size),
        "underflow_frac": underflow / n_nonzero if n_nonzero else 0.0,
        "overflow_frac": overflow / x.size if x.size else 0.0,
        "rms_before": stats(x).rms if x.size else 0.0,
        "rms_after": stats(q).rms if x.size else 0.0,
    }


@dataclass(frozen=True)
class ScaleStats:
    """Summary statistics used for tensor-health reports (RMS is the headline)."""

    mean: float
    std: float
    rms: float
    abs_max: float
    count: int


def stats(x) -> ScaleStats:
    """Mean, population std, RMS = sqrt(std² + mean²), and abs-max of an array."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("stats() requires at least one element")
    mean = float(np.mean(x))
    std = float(np.std(x))
    return ScaleStats(
        mean=mean,
        std=std,
        rms=math.hypot(mean, std),
        abs_max=float(np.max(np.abs(x))),
        count=int(x.size),
    )


def log_interpolate(alpha: float, b_upper: float, b_lower: float) -> float:
    """Geometric interpolation exp(alpha·ln b_upper + (1−alpha)·ln b_lower).

    Used for the empirically-fitted op scales, where the right scale moves
    between two closed-form bounds as a multiplier sweeps the op between two
    regimes.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if b_upper <= 0.0 or b_lower <= 0.0:
        raise ValueError("interpolation bounds must be positive")
    return math.exp(alpha * math.log(b_upper) + (1.0 - alpha) * math.log(b_lower))
