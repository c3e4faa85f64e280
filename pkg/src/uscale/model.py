"""Pre-norm decoder-only transformer assembled from the scaled ops.

Per block: rmsnorm -> Q/K/V projections -> rotary embedding -> causal
attention -> out projection -> residual add, then rmsnorm -> gate/up
projections -> gated SiLU -> down projection -> residual add. A final
rmsnorm feeds the readout matmul and softmax cross-entropy. Norms are
non-parametric and there are no biases, so every parameter is a weight
matrix stored as (fan_in, fan_out).

Scheme variants share this graph and differ only in scale handling:

- unit-scaled: scaled ops carry all shape factors (the per-weight A
  multipliers are folded into them); residual adds use the coefficient
  schedule with the delayed-backward convention (the branch gradient
  multiplier sits at the branch base, which leaves gradients below the
  branch unchanged and scales each branch-interior weight gradient by a
  constant the optimizer absorbs).
- mup: standard ops; each weight's A multiplier (width/depth ratios and
  the alpha_emb/alpha_out knobs) multiplies the weight at its matmul;
  attention logits are scaled alpha_attn/d_head; residuals add plainly
  (branch-end depth factors live in the out-/down-projection A values).
- sp: standard ops, 1/sqrt(d_head) logits, plain residual adds.

FP8 is emulated by value-level casts at matmul boundaries only: input,
weight, and grad-output tensors quantize to the configured formats; matmul
outputs stay in the engine precision. The exact_backward flag on the
forward switches every scaled op to its twin with identical forward bits
and true gradients, for gradient-direction comparisons.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_format, stats
from .parametrization import (
    MUP,
    SP,
    U_MUP,
    WEIGHT_HIDDEN,
    WEIGHT_INPUT,
    WEIGHT_OUTPUT,
    AbcMultipliers,
    HpSet,
    ParamTag,
    Scheme,
    abc_multipliers,
    init_param,
    param_row,
)
from .residual import ResidualSchedule, branch_base, build_schedule, residual_add
from .rng import Rng
from .scaled_ops import (
    attention_core,
    dynamic_rescale_matmul,
    gated_silu_core,
    scaled_matmul,
    u_attention,
    u_embedding_lookup,
    u_gated_silu,
    u_linear_output,
    u_matmul,
    u_rmsnorm,
    u_softmax_xent,
    rope,
)
from .tensor import Tensor, add, mul_const, reshape, transpose

FULL = "full"
FP8_PRIMARY = "fp8_primary"
FP8_PARTIAL = "fp8_partial"
PRECISION_MODES = (FULL, FP8_PRIMARY, FP8_PARTIAL)

# the two matmuls whose input activations grow during training
WIDE_INPUT_SITES = frozenset({"attn.out", "ffn.down"})

_E4M3 = make_format("e4m3")
_E5M2 = make_format("e5m2")


@dataclass(frozen=True)
class PrecisionPolicy:
    """Where casts (and optionally dynamic input rescaling) apply.

    fp8_primary casts every matmul input/weight/grad-output to E4M3, except
    the inputs of the attention out-projection and FFN down-projection,
    which use the wider E5M2. fp8_partial leaves those two inputs uncast
    and is otherwise identical. Dynamic rescaling (off by default; the
    primary scheme is pure casts) divides the listed sites' inputs by their
    standard deviation around the cast.
    """

    mode: str = FULL
    wide_input_sites: frozenset = WIDE_INPUT_SITES
    dynamic_rescale: bool = False
    dynamic_rescale_layers: frozenset = WIDE_INPUT_SITES

    def __post_init__(self):
        if self.mode not in PRECISION_MODES:
            raise ValueError(f"unknown precision mode {self.mode!r}; expected one of {PRECISION_MODES}")

    def _is_wide(self, site: str) -> bool:
        return any(site.endswith(suffix) for suffix in self.wide_input_sites)

    def formats_for(self, site: str):
        """(input, weight, grad-output) cast formats for a matmul site; None = no cast."""
        if self.mode == FULL:
            return None, None, None
        if self._is_wide(site):
            x_fmt = _E5M2 if self.mode == FP8_PRIMARY else None
        else:
            x_fmt = _E4M3
        return x_fmt, _E4M3, _E4M3

    def rescale_active(self, site: str) -> bool:
        return self.dynamic_rescale and any(
            site.endswith(suffix) for suffix in self.dynamic_rescale_layers
        )


def default_ffn_dim(d_model: int) -> int:
    """Gated-FFN hidden size: 8/3 of the width, rounded up to a multiple of 16."""
    return ((8 * d_model // 3 + 15) // 16) * 16


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int
    n_blocks: int
    n_heads: int
    d_head: int
    vocab: int
    seq_len: int
    scheme: Scheme
    d_ffn: int | None = None
    tied_embeddings: bool = False
    precision: PrecisionPolicy = field(default_factory=PrecisionPolicy)
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*d_head "
                f"({self.n_heads}*{self.d_head})"
            )
        if self.vocab < 2:
            raise ValueError(f"vocab must be >= 2, got {self.vocab}")
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.seq_len < 2:
            raise ValueError(
                f"seq_len must be >= 2 (attention scale is undefined below), got {self.seq_len}"
            )
        if self.d_head % 2:
            raise ValueError(f"d_head must be even for rotary embedding, got {self.d_head}")
        if self.d_ffn is not None and self.d_ffn < 1:
            raise ValueError(f"d_ffn must be >= 1, got {self.d_ffn}")

    @property
    def depth_L(self) -> int:
        """Residual depth: two branches (attention, FFN) per block."""
        return 2 * self.n_blocks

    @property
    def ffn_dim(self) -> int:
        return self.d_ffn if self.d_ffn is not None else default_ffn_dim(self.d_model)


@dataclass
class Model:
    cfg: TransformerConfig
    params: dict  # name -> Tensor (requires_grad)
    tags: dict  # name -> ParamTag (includes "readout" even when tied)
    mults: dict  # name -> AbcMultipliers
    schedule: ResidualSchedule | None  # unit-scaled scheme only


def _structure(cfg: TransformerConfig):
    """Parameter names, tags, and multipliers for a config (no arrays)."""
    d, f, v = cfg.d_model, cfg.ffn_dim, cfg.vocab
    tags = {"embedding": ParamTag(WEIGHT_INPUT, v, d)}
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}"
        for proj in ("q", "k", "v"):
            tags[f"{p}.attn.{proj}"] = ParamTag(WEIGHT_HIDDEN, d, d)
        tags[f"{p}.attn.out"] = ParamTag(WEIGHT_HIDDEN, d, d, on_residual_branch=True)
        tags[f"{p}.ffn.gate"] = ParamTag(WEIGHT_HIDDEN, d, f)
        tags[f"{p}.ffn.up"] = ParamTag(WEIGHT_HIDDEN, d, f)
        tags[f"{p}.ffn.down"] = ParamTag(WEIGHT_HIDDEN, f, d, on_residual_branch=True)
    tags["readout"] = ParamTag(WEIGHT_OUTPUT, d, v)
    mults = {n: abc_multipliers(t, cfg.depth_L, cfg.scheme) for n, t in tags.items()}
    schedule = None
    if cfg.scheme.kind == U_MUP:
        hps = cfg.scheme.hps
        schedule = build_schedule(cfg.depth_L, hps.alpha_res, hps.alpha_res_attn_ratio)
    return tags, mults, schedule


def build_model(cfg: TransformerConfig, rng: Rng) -> Model:
    """Initialize all parameters (each from its own derived stream, so the
    result is seed-deterministic and independent of construction order)."""
    tags, mults, schedule = _structure(cfg)
    params = {}
    for name, tag in tags.items():
        if name == "readout" and cfg.tied_embeddings:
            continue
        params[name] = init_param(tag, cfg.scheme, rng.derive(f"init.{name}"))
    return Model(cfg=cfg, params=params, tags=tags, mults=mults, schedule=schedule)


def lr_multipliers(model: Model) -> dict:
    """Per-parameter LR multiplier relative to the global LR (the width and
    depth parts of C plus any per-tensor eta_w factor)."""
    hps = model.cfg.scheme.hps
    return {
        name: model.mults[name].C / hps.eta * hps.eta_w.get(model.tags[name].kind, 1.0)
        for name in model.params
    }


def param_report(model: Model) -> list:
    """One report row per parameter (multipliers and LR factors)."""
    return [
        param_row(name, model.tags[name], model.cfg.depth_L, model.cfg.scheme)
        for name in model.params
    ]


# ---------------------------------------------------------------------------
# Forward graph
# ---------------------------------------------------------------------------


def _site_matmul(model, site, x, w, *, readout=False, exact=False, stats_hook=None):
    cfg = model.cfg
    x_fmt, w_fmt, g_fmt = cfg.precision.formats_for(site)
    kw = dict(x_format=x_fmt, w_format=w_fmt, grad_format=g_fmt, stats_hook=stats_hook, name=site)
    if cfg.scheme.kind == U_MUP:
        if readout:
            return u_linear_output(x, w, exact_backward=exact, **kw)
        if cfg.precision.rescale_active(site):
            return dynamic_rescale_matmul(x, w, exact_backward=exact, **kw)
        return u_matmul(x, w, exact_backward=exact, **kw)
    a = model.mults[site].A
    # exact matmul of x with the effective weight A*w (alpha=beta gradients)
    return scaled_matmul(x, w, a, a, a, **kw)


def _split_heads(t, n_heads, d_head):
    b, s, _ = t.data.shape
    return transpose(reshape(t, (b, s, n_heads, d_head)), (0, 2, 1, 3))


def _merge_heads(t):
    b, h, s, dh = t.data.shape
    return reshape(transpose(t, (0, 2, 1, 3)), (b, s, h * dh))


def _attn_branch(model, i, x, *, exact, stats_hook):
    cfg, hps = model.cfg, model.cfg.scheme.hps
    p = f"blocks.{i}"
    q = _site_matmul(model, f"{p}.attn.q", x, model.params[f"{p}.attn.q"], exact=exact, stats_hook=stats_hook)
    k = _site_matmul(model, f"{p}.attn.k", x, model.params[f"{p}.attn.k"], exact=exact, stats_hook=stats_hook)
    v = _site_matmul(model, f"{p}.attn.v", x, model.params[f"{p}.attn.v"], exact=exact, stats_hook=stats_hook)
    q, k, v = (_split_heads(t, cfg.n_heads, cfg.d_head) for t in (q, k, v))
    q, k = rope(q, cfg.rope_base), rope(k, cfg.rope_base)
    if cfg.scheme.kind == U_MUP:
        a = u_attention(q, k, v, hps.alpha_attn_softmax, causal=True, exact_backward=exact)
    elif cfg.scheme.kind == MUP:
        a = attention_core(q, k, v, hps.alpha_attn / cfg.d_head, causal=True)
    else:
        a = attention_core(q, k, v, cfg.d_head**-0.5, causal=True)
    a = _merge_heads(a)
    return _site_matmul(model, f"{p}.attn.out", a, model.params[f"{p}.attn.out"], exact=exact, stats_hook=stats_hook)


def _ffn_branch(model, i, x, *, exact, stats_hook):
    hps = model.cfg.scheme.hps
    p = f"blocks.{i}"
    gate = _site_matmul(model, f"{p}.ffn.gate", x, model.params[f"{p}.ffn.gate"], exact=exact, stats_hook=stats_hook)
    up = _site_matmul(model, f"{p}.ffn.up", x, model.params[f"{p}.ffn.up"], exact=exact, stats_hook=stats_hook)
    if model.cfg.scheme.kind == U_MUP:
        z = u_gated_silu(up, gate, hps.alpha_ffn_act, exact_backward=exact)
    else:
        z = gated_silu_core(up, gate, 1.0)
    return _site_matmul(model, f"{p}.ffn.down", z, model.params[f"{p}.ffn.down"], exact=exact, stats_hook=stats_hook)


def _residual_join(branch_out, skip, coeff, exact):
    if exact:
        # true gradient twin: both paths carry their coefficients backward
        return add(mul_const(branch_out, coeff.a), mul_const(skip, coeff.b))
    return residual_add(branch_out, skip, coeff.a, coeff.b)


def forward_loss(model: Model, tokens, *, exact_backward: bool = False,
                 stats_hook=None, stream_hook=None) -> Tensor:
    """Next-token cross-entropy over tokens of shape [batch, seq_len+1].

    exact_backward switches every scaled op to its identical-forward,
    true-gradient twin (meaningful for the unit-scaled scheme; the others
    always use exact gradients). stats_hook receives (site, role, array)
    around each matmul; stream_hook receives (label, array) snapshots of
    the residual stream.
    """
    cfg = model.cfg
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len + 1:
        raise ValueError(
            f"tokens must have shape [batch, seq_len+1={cfg.seq_len + 1}], got {tokens.shape}"
        )
    if tokens.dtype.kind not in "iu":
        raise ValueError(f"tokens must be integers, got dtype {tokens.dtype}")
    ids, targets = tokens[:, :-1], tokens[:, 1:]
    unit = cfg.scheme.kind == U_MUP
    exact = exact_backward

    h = u_embedding_lookup(ids, model.params["embedding"])
    a_emb = model.mults["embedding"].A
    if a_emb != 1.0:
        h = mul_const(h, a_emb)
    if stream_hook is not None:
        stream_hook("embed", h.data)

    for i in range(cfg.n_blocks):
        for branch_fn, l in ((_attn_branch, 2 * i + 1), (_ffn_branch, 2 * i + 2)):
            if unit:
                coeff = model.schedule[l]
                base = h if exact else branch_base(h, coeff.a)
                out = branch_fn(model, i, u_rmsnorm(base), exact=exact, stats_hook=stats_hook)
                h = _residual_join(out, h, coeff, exact)
            else:
                out = branch_fn(model, i, u_rmsnorm(h), exact=exact, stats_hook=stats_hook)
                h = add(h, out)
        if stream_hook is not None:
            stream_hook(f"block.{i}", h.data)

    x = u_rmsnorm(h)
    if cfg.tied_embeddings:
        w_read = transpose(model.params["embedding"], (1, 0))
    else:
        w_read = model.params["readout"]
    logits = _site_matmul(model, "readout", x, w_read, readout=unit, exact=exact, stats_hook=stats_hook)
    flat = reshape(logits, (-1, cfg.vocab))
    flat_targets = np.reshape(targets, -1)
    if unit:
        return u_softmax_xent(flat, flat_targets, cfg.scheme.hps.alpha_loss_softmax,
                              exact_backward=exact)
    return u_softmax_xent(flat, flat_targets, 1.0, exact_backward=True)


def rms_report(model: Model, tokens, step: int = 0) -> list:
    """Forward+backward once; return one row per (matmul, tensor role) with
    the tensor's RMS (pre-cast values, so drift is visible even when a cast
    would saturate)."""
    from .tensor import Tape  # local import to keep the module graph simple

    rows = []

    def hook(site, role, arr):
        s = stats(arr)
        rows.append({
            "step": step,
            "site": site,
            "role": role,
            "rms": s.rms,
            "abs_max": s.abs_max,
        })

    with Tape() as tape:
        loss = forward_loss(model, tokens, stats_hook=hook)
        tape.backward(loss)
    return rows


# ---------------------------------------------------------------------------
# Config and checkpoint serialization
# ---------------------------------------------------------------------------


def config_to_dict(cfg: TransformerConfig) -> dict:
    hps = cfg.scheme.hps
    return {
        "d_model": cfg.d_model,
        "n_blocks": cfg.n_blocks,
        "n_heads": cfg.n_heads,
        "d_head": cfg.d_head,
        "vocab": cfg.vocab,
        "seq_len": cfg.seq_len,
        "d_ffn": cfg.d_ffn,
        "tied_embeddings": cfg.tied_embeddings,
        "rope_base": cfg.rope_base,
        "scheme": {
            "kind": cfg.scheme.kind,
            "base_width": cfg.scheme.base_width,
            "base_depth": cfg.scheme.base_depth,
            "hps": {
                "eta": hps.eta,
                "alpha_ffn_act": hps.alpha_ffn_act,
                "alpha_attn_softmax": hps.alpha_attn_softmax,
                "alpha_res": hps.alpha_res,
                "alpha_res_attn_ratio": hps.alpha_res_attn_ratio,
                "alpha_loss_softmax": hps.alpha_loss_softmax,
                "sigma_init": hps.sigma_init,
                "alpha_emb": hps.alpha_emb,
                "alpha_attn": hps.alpha_attn,
                "alpha_out": hps.alpha_out,
                "eta_emb_hat": hps.eta_emb_hat,
                "eta_w": dict(hps.eta_w),
            },
        },
        "precision": {
            "mode": cfg.precision.mode,
            "wide_input_sites": sorted(cfg.precision.wide_input_sites),
            "dynamic_rescale": cfg.precision.dynamic_rescale,
            "dynamic_rescale_layers": sorted(cfg.precision.dynamic_rescale_layers),
        },
    }


def config_from_dict(d: dict) -> TransformerConfig:
    s = d["scheme"]
    scheme = Scheme(
        kind=s["kind"],
        hps=HpSet(**s["hps"]),
        base_width=s.get("base_width"),
        base_depth=s.get("base_depth"),
    )
    p = d.get("precision", {})
    precision = PrecisionPolicy(
        mode=p.get("mode", FULL),
        wide_input_sites=frozenset(p.get("wide_input_sites", WIDE_INPUT_SITES)),
        dynamic_rescale=p.get("dynamic_rescale", False),
        dynamic_rescale_layers=frozenset(p.get("dynamic_rescale_layers", WIDE_INPUT_SITES)),
    )
    return TransformerConfig(
        d_model=d["d_model"],
        n_blocks=d["n_blocks"],
        n_heads=d["n_heads"],
        d_head=d["d_head"],
        vocab=d["vocab"],
        seq_len=d["seq_len"],
        scheme=scheme,
        d_ffn=d.get("d_ffn"),
        tied_embeddings=d.get("tied_embeddings", False),
        precision=precision,
        rope_base=d.get("rope_base", 10000.0),
    )


def save_checkpoint(model: Model, path: str) -> None:
    """Write params.bin (little-endian float64, concatenated in parameter
    order) and manifest.json (config plus name/shape/offset index) to the
    directory at path."""
    os.makedirs(path, exist_ok=True)
    index = []
    offset = 0
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for name, p in model.params.items():
            raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            fh.write(raw)
            index.append({"name": name, "shape": list(p.data.shape), "offset": offset})
            offset += len(raw)
    manifest = {"config": config_to_dict(model.cfg), "params": index}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(path: str) -> Model:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = config_from_dict(manifest["config"])
    tags, mults, schedule = _structure(cfg)
    expected = [n for n in tags if not (n == "readout" and cfg.tied_embeddings)]
    listed = [entry["name"] for entry in manifest["params"]]
    if listed != expected:
        raise ValueError(f"checkpoint parameters {listed} do not match config structure {expected}")
    params = {}
    with open(os.path.join(path, "params.bin"), "rb") as fh:
        blob = fh.read()
    for entry in manifest["params"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        want = (tags[name].fan_in, tags[name].fan_out)
        if shape != want:
            raise ValueError(f"checkpoint shape {shape} for {name!r} does not match config {want}")
        count = shape[0] * shape[1]
        if offset + 8 * count > len(blob):
            raise ValueError("checkpoint binary is shorter than its manifest")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[name] = Tensor(arr.reshape(shape).copy(), requires_grad=True)
    return Model(cfg=cfg, params=params, tags=tags, mults=mults, schedule=schedule)
