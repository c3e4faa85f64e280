"""Unit-scaled operations: the op catalog with forward/backward scale factors.

Each op owns an ideal forward factor (alpha, restoring unit output variance
for unit-variance inputs) and per-input backward factors (betas, restoring
unit gradient variance). Where forward and backward must share one scale to
keep gradients proportional to the true gradient, a constraint reconciles
them: "to_output_scale" snaps constrained betas to alpha. Cut edges (weight
gradients, the logits edge) keep independent factors: deleting such an edge
splits the graph, so a mismatched scale there only multiplies a whole
parameter's gradient by a constant, which the optimizer's update rule
absorbs.

All factors are computed from shapes and declared hyperparameters, never
from tensor contents; ``dynamic_rescale_matmul`` is the single deliberate
exception and documents its own rules.

Every op takes ``exact_backward=False``; passing True keeps the forward
identical but computes the true gradient of that forward function instead
of the unit-scaled one. This powers gradient-direction tests: unit-scaled
gradients must equal the exact twin's times one positive constant per
parameter tensor.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .numerics import quantize
from .tensor import (
    Tensor,
    as_tensor,
    engine_dtype,
    matmul,
    mul,
    mul_const,
    record_op,
    scale_bwd,
    scale_fwd,
    sigmoid,
    softmax,
    transpose,
    gather_rows,
    _check_scale,
)

logger = logging.getLogger(__name__)

TO_OUTPUT_SCALE = "to_output_scale"
NO_CONSTRAINT = "none"
_CONSTRAINTS = (TO_OUTPUT_SCALE, NO_CONSTRAINT)


@dataclass(frozen=True)
class OpScales:
    """Resolved scale factors for one op: forward alpha + named backward betas."""

    alpha_fwd: float
    betas_bwd: dict


def apply_constraint(constraint: str, alpha: float, betas: dict, unconstrained=()) -> OpScales:
    """Reconcile an op's ideal factors under a scale constraint.

    ``betas`` maps input name -> ideal backward factor. Names listed in
    ``unconstrained`` are cut edges: they keep their ideal factor verbatim.
    Under "to_output_scale" every other beta is replaced by ``alpha`` so the
    op's backward pass reuses the forward scale; "none" keeps all factors.
    """
    if constraint not in _CONSTRAINTS:
        raise ValueError(f"unknown constraint {constraint!r}; expected one of {_CONSTRAINTS}")
    alpha = _check_scale(alpha)
    resolved = {}
    for name, beta in betas.items():
        beta = _check_scale(beta)
        if constraint == TO_OUTPUT_SCALE and name not in unconstrained:
            beta = alpha
        resolved[name] = beta
    return OpScales(alpha, resolved)


# ---------------------------------------------------------------------------
# Scale-factor formulas (shape/HP -> factor). Kept separate from the ops so
# reports and tests can evaluate them directly.
# ---------------------------------------------------------------------------


def log_interpolate(alpha: float, b_upper: float, b_lower: float) -> float:
    """Geometric interpolation exp(alpha*ln(b_upper) + (1-alpha)*ln(b_lower))."""
    from .numerics import log_interpolate as _li

    return _li(alpha, b_upper, b_lower)


def attention_scale(alpha_attn: float, d_head: int, seq_len: int) -> float:
    """Output multiplier restoring unit std for causal softmax attention.

    Interpolates between two regimes: sharp attention (large alpha_attn)
    passes single rows through at unit scale (bound 1); near-uniform
    attention averages each causal prefix, giving output std ~ sqrt(ln(s)/s)
    (mean of 1/row_length over rows ~ harmonic(s)/s ~ ln(s)/s).
    """
    if alpha_attn <= 0:
        raise ValueError(f"alpha_attn must be positive, got {alpha_attn}")
    if seq_len < 2:
        raise ValueError(f"seq_len must be >= 2, got {seq_len}")
    if d_head < 1:
        raise ValueError(f"d_head must be >= 1, got {d_head}")
    weight = 1.0 / (1.0 + 4.0 * d_head / alpha_attn**2)
    b_lower = math.sqrt(math.log(seq_len) / seq_len)
    return 1.0 / log_interpolate(weight, 1.0, b_lower)


def gated_silu_scale(alpha_ffn_act: float) -> float:
    """Output multiplier restoring unit std for the fused SwiGLU gate.

    Interpolates between the linear-gate regime (small alpha: gate ~ x/2,
    product std 1/2) and the hard-gate regime (large alpha: product of two
    unit Gaussians on half the support, std 1/sqrt(2)).
    """
    if alpha_ffn_act <= 0:
        raise ValueError(f"alpha_ffn_act must be positive, got {alpha_ffn_act}")
    weight = 1.0 / (1.0 + 1.0 / alpha_ffn_act**2)
    return 1.0 / log_interpolate(weight, 1.0 / math.sqrt(2.0), 0.5)


def xent_scales(num_classes: int, batch: int) -> tuple:
    """(jacobian_factor, batch_factor) for the scaled cross-entropy gradient.

    jacobian_factor = s/sqrt(s-1) undoes the softmax Jacobian's shrinkage of
    the logits gradient (exact for uniform probabilities). batch_factor
    undoes the 1/batch of the loss's mean reduction; it must be the full
    batch count so the scaled grad-logit std is ~1 regardless of batch size
    (a sqrt(batch) factor would leave std at 1/sqrt(batch)).
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    return num_classes / math.sqrt(num_classes - 1.0), float(batch)


# clip(x,-1,1) on unit Gaussian input: E[y^2] = 1 - sqrt(2/(pi*e)); the pass-
# through mask keeps a fraction erf(1/sqrt(2)) of gradient variance.
HARDTANH_Y_SCALE = 1.0 / math.sqrt(1.0 - math.sqrt(2.0 / (math.pi * math.e)))
HARDTANH_GRAD_SCALE = 1.0 / math.sqrt(math.erf(1.0 / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# Matmul family
# ---------------------------------------------------------------------------


def scaled_matmul(
    x,
    w,
    alpha: float,
    beta_x: float,
    beta_w: float,
    *,
    x_format=None,
    w_format=None,
    grad_format=None,
    stats_hook=None,
    name: str = "matmul",
) -> Tensor:
    """Matmul node with independent forward/backward factors and optional casts.

    forward: (cast(x) @ cast(w)) * alpha, with x (..., fan_in), w (fan_in, fan_out).
    backward: grad_x = cast(g) @ w.T * beta_x; grad_w = x.T @ cast(g) * beta_w.
    Casts are value-level (straight-through): gradients are computed from the
    cast operands but no derivative is taken through the rounding. Passing
    beta_x = beta_w = alpha yields the exact gradient of the forward function.
    ``stats_hook(name, role, array)`` receives pre-cast values for roles
    "input", "weight" (forward) and "grad_out" (backward).
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2:
        raise ValueError(f"weight must be 2-d, got shape {w.data.shape}")
    fan_in, fan_out = w.data.shape
    if x.data.shape[-1] != fan_in:
        raise ValueError(f"matmul shape mismatch: x {x.data.shape} vs w {w.data.shape}")
    alpha = _check_scale(alpha)
    beta_x = _check_scale(beta_x)
    beta_w = _check_scale(beta_w)
    dt = engine_dtype()
    if stats_hook is not None:
        stats_hook(name, "input", x.data)
        stats_hook(name, "weight", w.data)
    xq = quantize(x.data, x_format).astype(dt) if x_format is not None else x.data
    wq = quantize(w.data, w_format).astype(dt) if w_format is not None else w.data
    out = (xq @ wq) * alpha

    def backward(g):
        if stats_hook is not None:
            stats_hook(name, "grad_out", g)
        gq = quantize(g, grad_format).astype(dt) if grad_format is not None else g
        gx = (gq @ wq.T) * beta_x
        gw = (xq.reshape(-1, fan_in).T @ gq.reshape(-1, fan_out)) * beta_w
        return gx, gw

    return record_op(out.astype(dt, copy=False), (x, w), backward)


def u_matmul(x, w, constraint: str = TO_OUTPUT_SCALE, *, exact_backward: bool = False, **node_kwargs) -> Tensor:
    """Unit-scaled matmul: alpha = 1/sqrt(fan_in), beta_x = 1/sqrt(fan_out),
    beta_w = 1/sqrt(batch). beta_w is a cut edge and ignores the constraint;
    the default constraint snaps beta_x to alpha.
    """
    x, w = as_tensor(x), as_tensor(w)
    fan_in, fan_out = w.data.shape
    batch = max(x.data.size // fan_in, 1)
    scales = apply_constraint(
        constraint,
        fan_in**-0.5,
        {"x": fan_out**-0.5, "w": batch**-0.5},
        unconstrained=("w",),
    )
    beta_x, beta_w = scales.betas_bwd["x"], scales.betas_bwd["w"]
    if exact_backward:
        beta_x = beta_w = scales.alpha_fwd
    return scaled_matmul(x, w, scales.alpha_fwd, beta_x, beta_w, **node_kwargs)


def u_linear_output(x, w, *, exact_backward: bool = False, **node_kwargs) -> Tensor:
    """Readout matmul: forward (x @ w)/fan_in, input gradient * 1/sqrt(fan_in).

    The 1/fan_in forward keeps logits stable as width grows; the backward
    uses 1/sqrt(fan_in) so the gradient entering the network stays unit
    scale. The mismatch is legal because the logits edge is a cut edge.
    Weight gradient * 1/sqrt(batch) as for any matmul.
    """
    x, w = as_tensor(x), as_tensor(w)
    fan_in, _ = w.data.shape
    batch = max(x.data.size // fan_in, 1)
    alpha = 1.0 / fan_in
    beta_x, beta_w = fan_in**-0.5, batch**-0.5
    if exact_backward:
        beta_x = beta_w = alpha
    return scaled_matmul(x, w, alpha, beta_x, beta_w, **node_kwargs)


def dynamic_rescale_matmul(x, w, constraint: str = TO_OUTPUT_SCALE, *, exact_backward: bool = False, stats_hook=None, name: str = "matmul", **node_kwargs) -> Tensor:
    """u_matmul with content-dependent input normalization for casting.

    Divides x by its standard deviation sigma (detached, taken over the whole
    tensor) before the matmul and multiplies the output back, so a cast
    between the two sees a unit-scale tensor. Both multiplications are exact
    constants that cancel: forward and backward match plain u_matmul up to
    rounding. Zero-variance input falls back to the unscaled cast with a
    logged warning.
    """
    x = as_tensor(x)
    sigma = float(x.data.std())
    if stats_hook is not None:
        stats_hook(name, "input_raw", x.data)
    if not (sigma > 0.0 and math.isfinite(sigma)):
        logger.warning("dynamic rescale on %s skipped: input std %r is not positive and finite", name, sigma)
        return u_matmul(x, w, constraint, exact_backward=exact_backward, stats_hook=stats_hook, name=name, **node_kwargs)
    xn = mul_const(x, 1.0 / sigma)
    out = u_matmul(xn, w, constraint, exact_backward=exact_backward, stats_hook=stats_hook, name=name, **node_kwargs)
    return mul_const(out, sigma)


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------


def u_embedding_lookup(ids, table) -> Tensor:
    """Row gather from an embedding table: no forward or backward scaling.

    Unit-initialized rows come out at unit scale already, and the backward
    scatter-add reaches each row only through its own occurrences, so the
    usual fan-in/fan-out corrections do not apply.
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"token ids out of range [0, {vocab})")
    return gather_rows(table, ids)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def _causal_mask(seq_len: int, dtype_name: str) -> np.ndarray:
    mask = np.zeros((seq_len, seq_len), dtype=np.dtype(dtype_name))
    mask[np.triu_indices(seq_len, k=1)] = -np.inf
    return mask


def attention_core(q, k, v, logit_scale: float, causal: bool = True) -> Tensor:
    """Plain dot-product attention with exact gradients and no scale factors:
    softmax(logit_scale * q @ k^T + causal mask) @ v. Model variants that do
    not use the unit-scaled factors (e.g. 1/sqrt(d_head) logit scaling) call
    this directly.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.data.shape == k.data.shape == v.data.shape):
        raise ValueError(
            f"q/k/v shapes must match, got {q.data.shape}, {k.data.shape}, {v.data.shape}"
        )
    seq_len = q.data.shape[-2]
    axes = tuple(range(q.data.ndim - 2)) + (q.data.ndim - 1, q.data.ndim - 2)
    logits = mul_const(matmul(q, transpose(k, axes)), logit_scale)
    if causal:
        mask = _causal_mask(seq_len, logits.data.dtype.name)
        # constant additive mask: gradient passes straight through
        logits = record_op(logits.data + mask, (logits,), lambda g: (g,))
    return matmul(softmax(logits, axis=-1), v)


def u_attention(q, k, v, alpha_attn: float = 1.0, causal: bool = True, *, exact_backward: bool = False) -> Tensor:
    """Scaled dot-product attention with 1/d_head logit scaling.

    logits = alpha_attn * (q @ k^T) / d_head (+ additive -inf causal mask),
    out = softmax(logits) @ v. The inner math uses exact gradients; a single
    shape-derived factor multiplies the output and (constrained equal) all
    three input gradients.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    seq_len, d_head = q.data.shape[-2], q.data.shape[-1]
    factor = attention_scale(alpha_attn, d_head, seq_len)
    if not exact_backward:
        q, k, v = scale_bwd(q, factor), scale_bwd(k, factor), scale_bwd(v, factor)
    out = attention_core(q, k, v, alpha_attn / d_head, causal)
    if exact_backward:
        return mul_const(out, factor)
    return scale_fwd(out, factor)


# ---------------------------------------------------------------------------
# Gated activation
# ---------------------------------------------------------------------------


def gated_silu_core(x_in, x_gate, alpha_ffn_act: float = 1.0) -> Tensor:
    """Plain SwiGLU gate with exact gradients and no scale factor:
    x_in * x_gate * sigmoid(alpha * x_gate)."""
    x_in, x_gate = as_tensor(x_in), as_tensor(x_gate)
    if x_in.data.shape != x_gate.data.shape:
        raise ValueError(f"gate shape mismatch: {x_in.data.shape} vs {x_gate.data.shape}")
    return mul(mul(x_in, x_gate), sigmoid(mul_const(x_gate, alpha_ffn_act)))


def u_gated_silu(x_in, x_gate, alpha_ffn_act: float = 1.0, *, exact_backward: bool = False) -> Tensor:
    """Fused SwiGLU gate: x_in * x_gate * sigmoid(alpha * x_gate).

    One shape-independent factor multiplies the output and (constrained
    equal) both input gradients.
    """
    x_in, x_gate = as_tensor(x_in), as_tensor(x_gate)
    factor = gated_silu_scale(alpha_ffn_act)
    if not exact_backward:
        x_in, x_gate = scale_bwd(x_in, factor), scale_bwd(x_gate, factor)
    out = gated_silu_core(x_in, x_gate, alpha_ffn_act)
    if exact_backward:
        return mul_const(out, factor)
    return scale_fwd(out, factor)


# ---------------------------------------------------------------------------
# Cross-entropy loss
# ---------------------------------------------------------------------------


def u_softmax_xent(logits, targets, alpha_loss_softmax: float = 1.0, *, exact_backward: bool = False) -> Tensor:
    """Softmax cross-entropy, batch-mean reduced, with a unit-scaled gradient.

    loss = mean_b( -log softmax(alpha * logits_b)[target_b] ).
    The true logits gradient alpha*(p - onehot)/batch is multiplied by two
    documented factors (see xent_scales): the Jacobian factor s/sqrt(s-1)
    and the batch factor, giving grad std ~= 1 for near-uniform predictions.
    The logits edge is a cut edge, so this rescaling is legal.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be 2-d (batch, classes), got shape {logits.data.shape}")
    batch, num_classes = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (batch,):
        raise ValueError(f"targets shape {targets.shape} does not match batch {batch}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise TypeError(f"targets must be integers, got dtype {targets.dtype}")
    if targets.min() < 0 or targets.max() >= num_classes:
        raise ValueError(f"target ids out of range [0, {num_classes})")

    z = alpha_loss_softmax * logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    total = ez.sum(axis=1, keepdims=True)
    probs = ez / total
    log_probs = (z - zmax) - np.log(total)
    rows = np.arange(batch)
    loss = -log_probs[rows, targets].mean()

    jac_factor, batch_factor = xent_scales(num_classes, batch)
    if exact_backward:
        jac_factor = batch_factor = 1.0

    def backward(g):
        gl = probs.copy()
        gl[rows, targets] -= 1.0
        return (g * (alpha_loss_softmax * jac_factor * batch_factor / batch) * gl,)

    return record_op(np.asarray(loss, dtype=engine_dtype()), (logits,), backward)


# ---------------------------------------------------------------------------
# Norms and rotations
# ---------------------------------------------------------------------------


def u_rmsnorm(x, eps: float = 0.0) -> Tensor:
    """Non-trainable RMS normalization over the last axis, exact gradient.

    y = x / sqrt(mean(x^2) + eps). No learned gain. Already scale-setting,
    so no extra factors (alpha = beta = 1).
    """
    x = as_tensor(x)
    xd = x.data
    n = xd.shape[-1]
    mean_sq = np.mean(xd * xd, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(mean_sq + eps)
    out = xd * r

    def backward(g):
        # d/dx_j of x_i*r: delta_ij*r - x_i*x_j*r^3/n
        inner = np.sum(g * xd, axis=-1, keepdims=True)
        return (g * r - xd * (inner * r**3 / n),)

    return record_op(out, (x,), backward)


@functools.lru_cache(maxsize=8)
def _rope_tables(seq_len: int, d_head: int, base: float, dtype_name: str):
    half = d_head // 2
    inv_freq = base ** (-np.arange(half) * 2.0 / d_head)
    angles = np.arange(seq_len)[:, None] * inv_freq[None, :]
    dt = np.dtype(dtype_name)
    return np.cos(angles).astype(dt), np.sin(angles).astype(dt)


def rope(x, base: float = 10000.0) -> Tensor:
    """Rotary position embedding: rotate element pairs (2i, 2i+1) by
    position * base^(-2i/d). Each rotation is orthogonal, so scale is
    preserved exactly (no factors); gradient is the inverse rotation.
    Positions are 0..seq_len-1 along the second-to-last axis.
    """
    x = as_tensor(x)
    seq_len, d_head = x.data.shape[-2], x.data.shape[-1]
    if d_head % 2:
        raise ValueError(f"head dimension must be even for pair rotation, got {d_head}")
    cos, sin = _rope_tables(seq_len, d_head, base, x.data.dtype.name)
    x1, x2 = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def backward(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = g2 * cos - g1 * sin
        return (gx,)

    return record_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# Extension exemplar
# ---------------------------------------------------------------------------


def u_hardtanh(x, constraint: str = TO_OUTPUT_SCALE, *, exact_backward: bool = False) -> Tensor:
    """clip(x, -1, 1) with closed-form unit-scale factors; the worked example
    of wrapping a new op: compute y/grad scales for unit Gaussian input, then
    apply the constraint.
    """
    x = as_tensor(x)
    scales = apply_constraint(constraint, HARDTANH_Y_SCALE, {"x": HARDTANH_GRAD_SCALE})
    alpha, beta = scales.alpha_fwd, scales.betas_bwd["x"]
    if exact_backward:
        beta = alpha
    xd = x.data
    out = np.clip(xd, -1.0, 1.0) * alpha
    pass_through = np.abs(xd) < 1.0

    def backward(g):
        return (g * pass_through * beta,)

    return record_op(out, (x,), backward)
