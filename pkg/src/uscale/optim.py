"""AdamW with independent weight decay and per-parameter learning rates.

The update for each parameter w with gradient g and per-tensor LR lr_w is

    m <- beta1 m + (1 - beta1) g          mhat = m / (1 - beta1^t)
    v <- beta2 v + (1 - beta2) g^2        vhat = v / (1 - beta2^t)
    w <- w - lr_w * mhat / (sqrt(vhat) + eps) - lambda_indep * w

The decay term uses lambda_indep directly — it is NOT multiplied by lr_w, so
annealing the LR schedule to zero still decays weights at the same rate
("independent" decay). Per-tensor LRs come from the parametrization rules;
this module treats them as opaque numbers.

Adam's update direction is invariant to positive rescaling of the whole
gradient history (up to eps), which is what makes the abc shift a true
symmetry of training; tests pin that property here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 2.0**-13


@dataclass
class AdamState:
    """First/second moments per parameter name plus the global step count."""

    m: dict
    v: dict
    t: int = 0


def init_state(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adamw_step(
    params: dict,
    grads: dict | None,
    state: AdamState,
    per_param_lr: dict,
    *,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
    lambda_indep: float = WEIGHT_DECAY,
    decay_mask: dict | None = None,
) -> dict:
    """Advance every parameter one step in place; returns params.

    grads maps name -> array; pass None to read each Tensor's .grad.
    per_param_lr maps name -> nonnegative LR for this step (post-schedule).
    decay_mask maps name -> bool; missing names decay (the default model has
    only weight parameters, which all decay).
    """
    if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
        raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if lambda_indep < 0.0:
        raise ValueError(f"weight decay must be >= 0, got {lambda_indep}")

    resolved = {}
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise ValueError(f"no gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
            )
        if name not in per_param_lr:
            raise ValueError(f"no learning rate for parameter {name!r}")
        lr = per_param_lr[name]
        if lr < 0.0:
            raise ValueError(f"learning rate must be >= 0, got {lr} for {name!r}")
        resolved[name] = (g, lr)

    state.t += 1
    t = state.t
    m_corr = 1.0 - beta1**t
    v_corr = 1.0 - beta2**t
    for name, p in params.items():
        g, lr = resolved[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        adam_delta = lr * (m / m_corr) / (np.sqrt(v / v_corr) + eps)
        decays = decay_mask is None or decay_mask.get(name, True)
        if decays and lambda_indep != 0.0:
            p.data = p.data - adam_delta - lambda_indep * p.data
        else:
            p.data = p.data - adam_delta
    return params
