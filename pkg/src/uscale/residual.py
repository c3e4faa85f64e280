"""Unit-scaled pre-norm residual scheme.

A stack of residual branches x <- a_l * f_l(x) + b_l * x with a_l^2 + b_l^2
= 1 keeps the stream at unit variance, and choosing a_l/b_l = tau_l (the
branch-to-stream scale ratio of an ordinary residual network) makes the
whole stack mathematically equivalent to that ordinary network: the stream
differs only by the running normalizer sqrt(sum of squared branch
multipliers), which vanishes through the 0-homogeneous final norm.
``lemma_f1_check`` verifies this equivalence numerically.

The schedule is parametrized by two interpretable knobs: alpha_res (overall
residual-vs-embedding contribution) and alpha_ratio (attention-vs-FFN
contribution); depth enters through an L/2 term so deeper models shrink
per-branch updates like a 1/sqrt(depth) branch multiplier would.

In the backward pass, the branch-side multiplier a_l is not applied where
the branch rejoins the stream but at the base where the branch reads the
stream (``branch_base``): gradients inside the branch stay unit-scale for
any a_l, gradients below the base are unchanged, and branch parameter
gradients change only by the constant a_l per tensor, which per-tensor
optimizers absorb.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, as_tensor, mul_const, record_op, scale_bwd, scale_fwd

ATTN = "attn"
FFN = "ffn"


@dataclass(frozen=True)
class BranchCoeffs:
    l: int  # 1-indexed position in the stack
    kind: str  # "attn" for odd l, "ffn" for even l
    tau_sq: float
    a: float
    b: float


@dataclass(frozen=True)
class ResidualSchedule:
    depth_L: int
    alpha_res: float
    alpha_ratio: float
    branches: tuple

    def __getitem__(self, l: int) -> BranchCoeffs:
        """1-indexed branch lookup."""
        return self.branches[l - 1]

    def to_json(self) -> str:
        rows = [
            {"l": br.l, "kind": br.kind, "tau_sq": br.tau_sq, "a": br.a, "b": br.b}
            for br in self.branches
        ]
        return json.dumps(rows, indent=2)


def branch_alphas(alpha_res: float, alpha_ratio: float) -> tuple:
    """(attn, ffn) branch scales before depth division.

    ffn^2 = 2*alpha_res^2/(alpha_ratio^2+1) and attn = alpha_ratio*ffn, so
    the mean square of the two is alpha_res^2 and their ratio alpha_ratio.
    """
    ffn_sq = 2.0 * alpha_res**2 / (alpha_ratio**2 + 1.0)
    attn_sq = alpha_ratio**2 * ffn_sq
    return math.sqrt(attn_sq), math.sqrt(ffn_sq)


def build_schedule(L: int, alpha_res: float, alpha_ratio: float) -> ResidualSchedule:
    """Per-branch (tau, a, b) for an alternating attention/FFN stack.

    L counts residual branches (2 per transformer block); odd l is
    attention, even l is FFN. The embedding contributes the L/2 term of the
    denominator at unit scale.
    """
    if L < 2 or L % 2:
        raise ValueError(f"depth L must be even and >= 2, got {L}")
    if alpha_res <= 0 or alpha_ratio <= 0:
        raise ValueError(f"residual HPs must be positive, got alpha_res={alpha_res}, alpha_ratio={alpha_ratio}")
    attn, ffn = branch_alphas(alpha_res, alpha_ratio)
    a_sq, f_sq = attn**2, ffn**2
    half = L / 2.0
    branches = []
    for l in range(1, L + 1):
        ell = (l - 1) // 2
        if l % 2:  # attention
            tau_sq = a_sq / (half + ell * a_sq + ell * f_sq)
            kind = ATTN
        else:  # feed-forward
            tau_sq = f_sq / (half + (ell + 1) * a_sq + ell * f_sq)
            kind = FFN
        a = math.sqrt(tau_sq / (tau_sq + 1.0))
        b = math.sqrt(1.0 / (tau_sq + 1.0))
        branches.append(BranchCoeffs(l, kind, tau_sq, a, b))
    return ResidualSchedule(L, alpha_res, alpha_ratio, tuple(branches))


def generic_tau_schedule(r) -> list:
    """tau_l^2 = r_l^2 / sum_{i<l} r_i^2 for arbitrary branch multipliers
    r_0..r_L (r_0 is the embedding). Reference recurrence for cross-checks.
    """
    r = [float(v) for v in r]
    if len(r) < 1 or r[0] <= 0:
        raise ValueError("need r_0 > 0")
    taus = []
    running = r[0] ** 2
    for rl in r[1:]:
        taus.append(rl**2 / running)
        running += rl**2
    return taus


# ---------------------------------------------------------------------------
# Tape ops
# ---------------------------------------------------------------------------


def _check_coeffs(a: float, b: float) -> None:
    if not (math.isfinite(a) and math.isfinite(b)) or a < 0 or b <= 0:
        raise ValueError(f"residual coefficients must satisfy a >= 0, b > 0, got a={a}, b={b}")
    if abs(a * a + b * b - 1.0) > 1e-9:
        raise ValueError(f"residual coefficients must satisfy a^2+b^2=1, got {a*a + b*b}")


def residual_add(branch_out, skip, a: float, b: float) -> Tensor:
    """a*branch_out + b*skip with the branch-side backward factor deferred.

    The skip multiplication is exact; the branch side scales forward only
    (its backward factor belongs at ``branch_base``). a = 0 degenerates to
    the scaled skip with zero branch gradients.
    """
    branch_out, skip = as_tensor(branch_out), as_tensor(skip)
    if branch_out.data.shape != skip.data.shape:
        raise ValueError(f"residual shapes differ: {branch_out.data.shape} vs {skip.data.shape}")
    _check_coeffs(a, b)
    if a == 0.0:
        return record_op(b * skip.data, (branch_out, skip), lambda g: (np.zeros_like(g), b * g))
    return add(scale_fwd(branch_out, a), mul_const(skip, b))


def branch_base(stream, a: float) -> Tensor:
    """Read the stream at the base of a residual branch.

    Identity in the forward pass; multiplies the branch's outgoing gradient
    by a, completing the pair started by ``residual_add``. Everything below
    the base then sees the same gradient as if a had been applied exactly
    at the add.
    """
    stream = as_tensor(stream)
    if a == 0.0:
        return record_op(stream.data.copy(), (stream,), lambda g: (np.zeros_like(g),))
    return scale_bwd(stream, a)


# ---------------------------------------------------------------------------
# Equivalence checker
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LemmaCheckResult:
    stream_deviation: float  # max over l of rel. deviation of the scaled streams
    final_deviation: float  # rel. deviation of the final outputs
    per_layer: tuple


def _rel_dev(actual: np.ndarray, expected: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(expected))), 1e-30)
    return float(np.max(np.abs(actual - expected))) / denom


def lemma_f1_check(r_multipliers, L: int, probe_fns, x) -> LemmaCheckResult:
    """Numerically verify stream equivalence of the two residual networks.

    Builds the ordinary network R_l = r_l f_l(R_{l-1}) + R_{l-1} (R_0 = r_0
    x) and the normalized network Rhat_l = a_l f_l(Rhat_{l-1}) + b_l
    Rhat_{l-1} (Rhat_0 = x) from the same multipliers, with tau_l^2 = r_l^2
    / sum_{i<l} r_i^2, and returns the deviation of Rhat_l from R_l /
    sqrt(sum_{i<=l} r_i^2) for every l, plus the deviation between the
    final 0-homogeneous outputs f_{L+1}(R_L) and f_{L+1}(Rhat_L).

    probe_fns must hold L+1 plain-array functions f_1..f_{L+1}, each
    0-homogeneous (checked by comparing f(2x) to f(x)).
    """
    r = [float(v) for v in r_multipliers]
    if len(r) != L + 1:
        raise ValueError(f"need L+1 multipliers r_0..r_L, got {len(r)} for L={L}")
    if len(probe_fns) != L + 1:
        raise ValueError(f"need L+1 probe functions f_1..f_{{L+1}}, got {len(probe_fns)}")
    if r[0] <= 0:
        raise ValueError("r_0 must be positive")
    x = np.asarray(x, dtype=np.float64)
    for i, f in enumerate(probe_fns):
        ref = f(x)
        if _rel_dev(f(2.0 * x), ref) > 1e-9:
            raise ValueError(f"probe function {i + 1} is not zero-homogeneous")

    taus = generic_tau_schedule(r)
    standard = r[0] * x
    unit = x.copy()
    running_sq = r[0] ** 2
    devs = [_rel_dev(unit, standard / math.sqrt(running_sq))]
    for l in range(1, L + 1):
        f = probe_fns[l - 1]
        standard = r[l] * f(standard) + standard
        tau_sq = taus[l - 1]
        a = math.sqrt(tau_sq / (tau_sq + 1.0))
        b = math.sqrt(1.0 / (tau_sq + 1.0))
        unit = a * f(unit) + b * unit
        running_sq += r[l] ** 2
        devs.append(_rel_dev(unit, standard / math.sqrt(running_sq)))
    final = probe_fns[L]
    final_dev = _rel_dev(final(unit), final(standard))
    return LemmaCheckResult(max(devs), final_dev, tuple(devs))
