"""abc-multiplier rules: how parameter multiplier (A), init std (B), and
per-tensor Adam LR factor (C) scale with width and depth under each scheme.

A parametrization is invariant under the shift (A, B, C) -> (A*theta, B/theta,
C/theta): with Adam (no weight decay) the effective parameter A*w follows the
same trajectory, so schemes related by a shift are the same model. The
unit-scaled scheme is exactly the shift of the classic maximal-update rules
that makes every init std 1, putting all shape dependence into A and C.

Scheme summary (shape factors; eta = global LR):

  unit-scaled (u_mup): input  A=1          B=1  C=eta/sqrt(fan_out)
                       hidden A=1/sqrt(fi) B=1  C=eta/sqrt(fan_in)
                       output A=1/fan_in   B=1  C=eta   (backward-only A
                              override 1/sqrt(fan_in): the logits edge is cut)
                       residual-branch weights: extra C factor 1/sqrt(depth);
                       the matching 1/sqrt(depth) A factor lives in the
                       residual schedule, applied at branch ends.

  mup:  input  A=alpha_emb                    B=sigma_init                        C=eta*eta_emb_hat
        hidden A=1                            B=sigma_init*sqrt(base_fi/fan_in)   C=eta*base_fi/fan_in
        output A=alpha_out*base_fi/fan_in     B=sigma_init                        C=eta
        residual-branch weights: A and C gain sqrt(base_depth/depth), applied
        at branch ends on the A side. (alpha_attn multiplies attention logits
        as an op multiplier, not a weight multiplier.)

  sp:   A=1, B=1/sqrt(fan_in) truncated normal (cutoff 3 std), C=eta.

depth counts residual branches (2 per transformer block) in both schemes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .rng import Rng
from .tensor import Tensor

U_MUP = "u_mup"
MUP = "mup"
SP = "sp"
SCHEME_KINDS = (U_MUP, MUP, SP)

WEIGHT_INPUT = "weight_input"
WEIGHT_HIDDEN = "weight_hidden"
WEIGHT_OUTPUT = "weight_output"
BIAS = "bias"
NORM = "norm"
TAG_KINDS = (WEIGHT_INPUT, WEIGHT_HIDDEN, WEIGHT_OUTPUT, BIAS, NORM)

SP_INIT_CUTOFF = 3.0  # truncation for the sp baseline init, in units of std


@dataclass(frozen=True)
class ParamTag:
    kind: str
    fan_in: int
    fan_out: int
    on_residual_branch: bool = False

    def __post_init__(self):
        if self.kind not in TAG_KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError(f"fan_in/fan_out must be >= 1, got {self.fan_in}/{self.fan_out}")


@dataclass(frozen=True)
class HpSet:
    """Hyperparameters across schemes. The alpha_* multipliers attach to ops
    (attention softmax, FFN activation, residual adds, loss softmax) and
    default to 1; sigma_init and the extra multipliers exist only for the
    mup baseline and must stay unset for the unit-scaled scheme.
    eta_w optionally maps a tag kind to a per-tensor LR multiplier.
    """

    eta: float = 1.0
    alpha_ffn_act: float = 1.0
    alpha_attn_softmax: float = 1.0
    alpha_res: float = 1.0
    alpha_res_attn_ratio: float = 1.0
    alpha_loss_softmax: float = 1.0
    sigma_init: float = None
    alpha_emb: float = 1.0
    alpha_attn: float = 1.0
    alpha_out: float = 1.0
    eta_emb_hat: float = 1.0
    eta_w: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("eta", "alpha_ffn_act", "alpha_attn_softmax", "alpha_res",
                     "alpha_res_attn_ratio", "alpha_loss_softmax", "alpha_emb",
                     "alpha_attn", "alpha_out", "eta_emb_hat"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"HP {name} must be positive and finite, got {v}")
        if self.sigma_init is not None and not self.sigma_init > 0:
            raise ValueError(f"sigma_init must be positive, got {self.sigma_init}")


@dataclass(frozen=True)
class Scheme:
    kind: str
    hps: HpSet
    base_width: int = None
    base_depth: int = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.kind == U_MUP:
            if self.base_width is not None or self.base_depth is not None:
                raise ValueError("the unit-scaled scheme has no base shapes")
            if self.hps.sigma_init is not None:
                raise ValueError("sigma_init is not an HP of the unit-scaled scheme")
        if self.kind == MUP:
            if self.base_width is None:
                raise ValueError("mup requires base_width")
            if self.hps.sigma_init is None:
                raise ValueError("mup requires sigma_init")


@dataclass(frozen=True)
class AbcMultipliers:
    A: float
    B: float
    C: float
    A_bwd_override: float = None

    def __post_init__(self):
        for v in (self.A, self.B, self.C):
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"abc multipliers must be positive and finite, got {self}")


def abc_multipliers(tag: ParamTag, depth_L: int, scheme: Scheme) -> AbcMultipliers:
    """(A, B, C) for one parameter tensor; pure in shape, depth, and HPs."""
    hps = scheme.hps
    if tag.kind in (BIAS, NORM):
        # no such parameters in the default model; documented for totality
        return AbcMultipliers(1.0, 1.0, hps.eta)

    if scheme.kind == U_MUP:
        if tag.kind == WEIGHT_INPUT:
            out = AbcMultipliers(1.0, 1.0, hps.eta / math.sqrt(tag.fan_out))
        elif tag.kind == WEIGHT_HIDDEN:
            s = 1.0 / math.sqrt(tag.fan_in)
            out = AbcMultipliers(s, 1.0, hps.eta * s)
        else:  # output
            out = AbcMultipliers(
                1.0 / tag.fan_in, 1.0, hps.eta, A_bwd_override=1.0 / math.sqrt(tag.fan_in)
            )
        if tag.on_residual_branch:
            # the A-side depth factor lives in the residual schedule
            out = AbcMultipliers(out.A, out.B, out.C / math.sqrt(depth_L), out.A_bwd_override)
        return out

    if scheme.kind == MUP:
        width_ratio = scheme.base_width / tag.fan_in
        if tag.kind == WEIGHT_INPUT:
            out = AbcMultipliers(hps.alpha_emb, hps.sigma_init, hps.eta * hps.eta_emb_hat)
        elif tag.kind == WEIGHT_HIDDEN:
            out = AbcMultipliers(1.0, hps.sigma_init * math.sqrt(width_ratio), hps.eta * width_ratio)
        else:  # output
            out = AbcMultipliers(hps.alpha_out * width_ratio, hps.sigma_init, hps.eta)
        if tag.on_residual_branch:
            depth_ratio = math.sqrt((scheme.base_depth or depth_L) / depth_L)
            out = AbcMultipliers(out.A * depth_ratio, out.B, out.C * depth_ratio)
        return out

    # sp baseline
    return AbcMultipliers(1.0, 1.0 / math.sqrt(tag.fan_in), hps.eta)


def abc_shift(m: AbcMultipliers, theta: float) -> AbcMultipliers:
    """The symmetry transform (A, B, C) -> (A*theta, B/theta, C/theta).

    The backward-only A override is an A-type factor and shifts with A.
    """
    if not (theta > 0 and math.isfinite(theta)):
        raise ValueError(f"theta must be positive and finite, got {theta}")
    override = None if m.A_bwd_override is None else m.A_bwd_override * theta
    return AbcMultipliers(m.A * theta, m.B / theta, m.C / theta, override)


def lr_for_param(tag: ParamTag, scheme: Scheme, step_lr: float) -> float:
    """Per-tensor LR at one step: scheduled global LR times the width part
    of C (C divided by eta) times any per-tensor multiplier from eta_w.

    This function is depth-free, so it covers the width part only; the
    residual-branch depth factor in C is applied by callers that know the
    depth, via abc_multipliers.
    """
    if step_lr < 0:
        raise ValueError(f"step_lr must be >= 0, got {step_lr}")
    flat_tag = replace(tag, on_residual_branch=False)
    c_shape = abc_multipliers(flat_tag, 2, scheme).C / scheme.hps.eta
    return step_lr * c_shape * scheme.hps.eta_w.get(tag.kind, 1.0)


def init_param(tag: ParamTag, scheme: Scheme, rng: Rng) -> Tensor:
    """Fresh (fan_in, fan_out) parameter: i.i.d. normal with std B.

    The sp baseline truncates at 3 std (tails resampled); the other schemes
    use plain normals.
    """
    b = abc_multipliers(tag, 2, scheme).B  # B never depends on depth
    shape = (tag.fan_in, tag.fan_out)
    if scheme.kind == SP:
        data = rng.truncated_normal(shape, std=b, cutoff=SP_INIT_CUTOFF)
    else:
        data = rng.normal(shape, std=b)
    return Tensor(data, requires_grad=True)


def param_row(name: str, tag: ParamTag, depth_L: int, scheme: Scheme) -> dict:
    """One row of the parametrization report: name, tag, shape, A/B/C, and
    the LR multiplier relative to the global LR."""
    m = abc_multipliers(tag, depth_L, scheme)
    return {
        "name": name,
        "kind": tag.kind,
        "fan_in": tag.fan_in,
        "fan_out": tag.fan_out,
        "on_residual_branch": tag.on_residual_branch,
        "A": m.A,
        "B": m.B,
        "C": m.C,
        "A_bwd_override": m.A_bwd_override,
        "lr_multiplier": m.C / scheme.hps.eta * scheme.hps.eta_w.get(tag.kind, 1.0),
    }
