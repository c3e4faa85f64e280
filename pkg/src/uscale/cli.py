"""Command-line front end: training, sweeps, and report/check verbs.

Every verb is non-interactive and reproducible: the same config file,
``--set`` overrides, and seed produce byte-identical CSV outputs. Numeric
CSV cells use full round-trip decimal formatting. Exit codes: 0 on success
with the declared files written, 1 on a validation error (the message names
the offending key), 2 on a runtime failure (divergence in a single-run
train, I/O).
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .model import (
    build_model,
    config_from_dict,
    param_report,
    rms_report,
    save_checkpoint,
)
from .numerics import make_format, quantize, stats
from .optim import WEIGHT_DECAY
from .parametrization import MUP, U_MUP, HpSet, abc_shift
from .residual import lemma_f1_check
from .rng import Rng, fnv1a64
from .sweep import (
    INDEPENDENT,
    RANDOM,
    SweepSpec,
    independent_search,
    lr_transfer_report,
    random_search,
    transfer_error,
    write_results_csv,
)
from .tensor import Tensor
from .train import (
    RMS_COLUMNS,
    TokenStream,
    TrainConfig,
    format_value,
    ingest,
    train_run,
    write_csv,
)

logger = logging.getLogger(__name__)

HP_FIELDS = frozenset(
    f.name for f in dataclasses.fields(HpSet) if f.name != "eta_w")

# Config subtrees whose keys are free-form (validated downstream, not by the
# schema merge): HP dictionaries and sweep grids.
_OPEN_SUBTREES = (
    "model.scheme.hps",
    "sweep.grids",
    "sweep.defaults",
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


def default_config() -> dict:
    """The full config tree with desk-scale defaults.

    ``model.width`` is the scaling axis: d_model = width and n_heads =
    width / d_head. Set ``model.d_model`` and ``model.n_heads`` explicitly
    to bypass it. ``data`` needs either a corpus path or a synthetic token
    count.
    """
    return {
        "model": {
            "width": 256,
            "d_head": 64,
            "d_model": None,
            "n_heads": None,
            "n_blocks": 2,
            "vocab": 256,
            "seq_len": 128,
            "d_ffn": None,
            "tied_embeddings": False,
            "rope_base": 10000.0,
            "scheme": {
                "kind": U_MUP,
                "base_width": None,
                "base_depth": None,
                "hps": {},
            },
            "precision": {
                "mode": "full",
                "wide_input_sites": ["attn.out", "ffn.down"],
                "dynamic_rescale": False,
                "dynamic_rescale_layers": ["attn.out", "ffn.down"],
            },
        },
        "train": {
            "steps": 200,
            "peak_lr": 2.0**-3,
            "warmup_steps": 50,
            "batch": 16,
            "final_lr_frac": 0.1,
            "seed": 0,
            "eval_every": 50,
            "val_batches": 8,
            "weight_decay": float(WEIGHT_DECAY),
            "allow_repeat": False,
        },
        "data": {
            "path": None,
            "mode": "text",
            "synthetic_tokens": None,
        },
        "sweep": {
            "strategy": INDEPENDENT,
            "random_n": 16,
            "grids": {"eta": [2.0**k for k in range(-1, 4)]},
            "defaults": {},
        },
        "lr_transfer": {
            "widths": [64, 128, 256],
            "lr_grid": [2.0**k for k in range(-1, 6)],
            "replicas": 3,
        },
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    for key, value in override.items():
        kpath = f"{path}.{key}" if path else str(key)
        if path in _OPEN_SUBTREES:
            base[key] = copy.deepcopy(value)
            continue
        if key not in base:
            raise ConfigError(f"unknown config key {kpath!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, kpath)
        else:
            base[key] = copy.deepcopy(value)
    return base


def _apply_set(cfg: dict, item: str) -> None:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quotes
    parts = key.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        prefix = ".".join(parts[: i + 1])
        if part not in node:
            if any(prefix == o or prefix.startswith(o + ".") for o in _OPEN_SUBTREES):
                node[part] = {}
            else:
                raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
        if not isinstance(node, dict):
            raise ConfigError(f"config key {key!r} indexes into a non-section value")
    leaf = parts[-1]
    parent = ".".join(parts[:-1])
    open_parent = any(parent == o or parent.startswith(o + ".") for o in _OPEN_SUBTREES)
    if not open_parent and leaf not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = value


def load_config(path: str | None, sets: list) -> dict:
    """Defaults <- config file <- --set overrides, in that order."""
    cfg = default_config()
    if path:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _merge(cfg, user)
    for item in sets:
        _apply_set(cfg, item)
    return cfg


def _model_config(model_dict: dict):
    d = copy.deepcopy(model_dict)
    hps = dict(d["scheme"].get("hps") or {})
    unknown = sorted(set(hps) - HP_FIELDS - {"eta_w"})
    if unknown:
        raise ConfigError(f"unknown config key 'model.scheme.hps.{unknown[0]}'")
    if d.get("d_model") is not None:
        if d.get("n_heads") is None:
            raise ConfigError("model.n_heads is required when model.d_model is set")
        d_model, n_heads = int(d["d_model"]), int(d["n_heads"])
    else:
        width, d_head = int(d["width"]), int(d["d_head"])
        if width < 1 or width % d_head:
            raise ConfigError(
                f"model.width ({width}) must be a positive multiple of "
                f"model.d_head ({d_head})"
            )
        d_model, n_heads = width, width // d_head
    full = {
        "d_model": d_model,
        "n_heads": n_heads,
        "d_head": int(d["d_head"]),
        "n_blocks": d["n_blocks"],
        "vocab": d["vocab"],
        "seq_len": d["seq_len"],
        "d_ffn": d["d_ffn"],
        "tied_embeddings": d["tied_embeddings"],
        "rope_base": d["rope_base"],
        "scheme": d["scheme"],
        "precision": d["precision"],
    }
    return config_from_dict(full)


def _load_stream(data_dict: dict, vocab: int, seed: int) -> TokenStream:
    if data_dict.get("path"):
        return ingest(data_dict["path"], data_dict.get("mode", "text"))
    n = data_dict.get("synthetic_tokens")
    if not n:
        raise ConfigError(
            "data.path (or data.synthetic_tokens for a generated corpus) is required")
    symbols = min(32, vocab)
    ids = Rng(seed, stream="synthetic-data").integers(0, symbols, (int(n),))
    return TokenStream(ids=ids.astype(np.int64), vocab=vocab, source="synthetic")


def _resolve_out(args) -> str:
    out = args.out or os.environ.get("USCALE_OUT") or "out"
    os.makedirs(out, exist_ok=True)
    return out


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_config(train_dict: dict, seed: int | None) -> TrainConfig:
    d = dict(train_dict)
    if seed is not None:
        d["seed"] = seed
    return TrainConfig(**d)


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.sets)
    out = _resolve_out(args)
    mcfg = _model_config(cfg["model"])
    tcfg = _train_config(cfg["train"], args.seed)
    stream = _load_stream(cfg["data"], mcfg.vocab, tcfg.seed)
    model = build_model(mcfg, Rng(tcfg.seed).derive("model.init"))
    result = train_run(model, stream, tcfg, out_dir=out)
    ckpt = os.path.join(out, "checkpoint")
    save_checkpoint(model, ckpt)
    print(f"steps_run={result.steps_run}"
          f" final_train_loss={format_value(result.final_train_loss)}"
          f" final_val_loss={format_value(result.final_val_loss)}"
          f" diverged={result.diverged}")
    print(f"wrote {out}/metrics.csv {out}/rms.csv {ckpt}")
    if result.diverged:
        print("error: training run diverged", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _apply_hp(model_d: dict, train_d: dict, name: str, value: float) -> None:
    if name == "eta":
        train_d["peak_lr"] = value
    elif name in HP_FIELDS:
        model_d["scheme"]["hps"][name] = value
    elif name.startswith("train."):
        key = name[len("train."):]
        if key not in train_d:
            raise ConfigError(f"unknown sweep hyperparameter {name!r}")
        train_d[key] = value
    else:
        raise ConfigError(
            f"unknown sweep hyperparameter {name!r}; expected 'eta', an HP "
            f"multiplier name, or a 'train.'-prefixed key")


def _make_run_fn(cfg: dict, stream: TokenStream):
    """runner(assignment, seed) -> (final validation loss, diverged)."""

    def runner(assignment: dict, seed: int):
        model_d = copy.deepcopy(cfg["model"])
        train_d = dict(cfg["train"])
        for name, value in assignment.items():
            _apply_hp(model_d, train_d, name, value)
        mcfg = _model_config(model_d)
        train_d["seed"] = seed
        tcfg = TrainConfig(**train_d)
        model = build_model(mcfg, Rng(seed).derive("model.init"))
        result = train_run(model, stream, tcfg)
        return result.final_val_loss, result.diverged

    return runner


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.sets)
    out = _resolve_out(args)
    sw = cfg["sweep"]
    spec = SweepSpec(grids=sw["grids"], strategy=sw["strategy"],
                     random_n=int(sw["random_n"]), defaults=sw["defaults"])
    # Validate the grid names and the base model/train config up front, so
    # key errors exit 1 before any training starts.
    probe_model, probe_train = copy.deepcopy(cfg["model"]), dict(cfg["train"])
    for name in spec.grids:
        _apply_hp(probe_model, probe_train, name, spec.grids[name][0])
    _model_config(probe_model)
    mcfg = _model_config(cfg["model"])
    seed = args.seed if args.seed is not None else 0
    stream = _load_stream(cfg["data"], mcfg.vocab, seed)
    runner = _make_run_fn(cfg, stream)

    workers = max(1, args.workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcome = _run_strategy(spec, runner, seed, pool.map)
    else:
        outcome = _run_strategy(spec, runner, seed, map)
    best_assignment, best_loss, runs = outcome

    write_results_csv(os.path.join(out, "results.csv"), runs)
    with open(os.path.join(out, "best.json"), "w") as fh:
        json.dump({"assignment": best_assignment, "loss": best_loss}, fh, indent=1)
        fh.write("\n")
    print(f"runs={len(runs)} best_loss={format_value(best_loss)} "
          f"best={json.dumps(best_assignment, sort_keys=True)}")
    print(f"wrote {out}/results.csv {out}/best.json")
    return 0


def _run_strategy(spec: SweepSpec, runner, seed: int, map_fn):
    if spec.strategy == RANDOM:
        results = random_search(spec, runner, n=spec.random_n, seed=seed, map_fn=map_fn)
        best = results[0]
        if best.diverged:
            raise RuntimeError("every sweep run diverged")
        return best.assignment, best.final_loss, results
    outcome = independent_search(spec, runner, seed=seed, map_fn=map_fn)
    return outcome.best_assignment, outcome.best_loss, outcome.runs


# ---------------------------------------------------------------------------
# transfer-error
# ---------------------------------------------------------------------------


def _load_grid(spec: str):
    name, sep, path = spec.partition("=")
    if not sep:
        name, path = "", spec
    if not name:
        name = os.path.splitext(os.path.basename(path))[0]
    try:
        grid = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise ConfigError(f"--grid {path}: expected a plain numeric CSV ({e})") from e
    return name, grid


def _cmd_transfer_error(args) -> int:
    if not args.grids:
        raise ConfigError("--grid PATH is required (repeatable, NAME=PATH to label)")
    out = _resolve_out(args)
    loaded = [_load_grid(spec) for spec in args.grids]
    rows = []
    for name, grid in loaded:
        err = transfer_error(grid)
        rows.append({"grid": name, "rows": grid.shape[0], "cols": grid.shape[1],
                     "transfer_error": err})
        print(f"{name}: transfer_error={format_value(err)} "
              f"({grid.shape[0]}x{grid.shape[1]} grid)")
    if len(rows) > 1:
        mean = sum(r["transfer_error"] for r in rows) / len(rows)
        rows.append({"grid": "mean", "rows": "", "cols": "",
                     "transfer_error": mean})
        print(f"mean: transfer_error={format_value(mean)}")
    write_csv(os.path.join(out, "transfer_error.csv"),
              ("grid", "rows", "cols", "transfer_error"), rows)

    plt = _pyplot()
    fig, axes = plt.subplots(1, len(loaded), figsize=(4.6 * len(loaded), 4.2),
                             squeeze=False)
    for ax, (name, grid) in zip(axes[0], loaded):
        im = ax.imshow(grid, aspect="auto", cmap="viridis")
        gf, gt = np.unravel_index(int(grid.argmin()), grid.shape)
        ax.scatter([gt], [gf], marker="*", s=160, c="white", edgecolors="black",
                   label="global argmin")
        row_mins = grid.argmin(axis=1)
        ax.scatter(row_mins, np.arange(grid.shape[0]), marker="o", s=30, c="red",
                   label="per-row argmin")
        ax.set_xlabel("transferred HP index")
        ax.set_ylabel("fixed HP index")
        ax.set_title(f"{name}: err={transfer_error(grid):.4g}")
        ax.legend(loc="upper right", fontsize=8)
        fig.colorbar(im, ax=ax, label="loss")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "transfer_error.png"), dpi=120)
    plt.close(fig)
    print(f"wrote {out}/transfer_error.csv {out}/transfer_error.png")
    return 0


# ---------------------------------------------------------------------------
# lr-transfer
# ---------------------------------------------------------------------------


def _cmd_lr_transfer(args) -> int:
    cfg = load_config(args.config, args.sets)
    out = _resolve_out(args)
    lt = cfg["lr_transfer"]
    widths = [int(w) for w in lt["widths"]]
    lr_grid = [float(v) for v in lt["lr_grid"]]
    replicas = int(lt["replicas"])
    d_head = int(cfg["model"]["d_head"])
    for w in widths:
        if w < 1 or w % d_head:
            raise ConfigError(
                f"lr_transfer.widths entry {w} must be a positive multiple of "
                f"model.d_head ({d_head})")
    seed = args.seed if args.seed is not None else 0
    base_vocab = _model_config(cfg["model"]).vocab
    stream = _load_stream(cfg["data"], base_vocab, seed)

    def runner(width, lr, run_seed):
        model_d = copy.deepcopy(cfg["model"])
        model_d["width"], model_d["d_model"], model_d["n_heads"] = width, None, None
        train_d = dict(cfg["train"])
        train_d["peak_lr"], train_d["seed"] = lr, run_seed
        mcfg = _model_config(model_d)
        model = build_model(mcfg, Rng(run_seed).derive("model.init"))
        result = train_run(model, stream, TrainConfig(**train_d))
        return result.final_val_loss, result.diverged

    cells, summary = lr_transfer_report(widths, lr_grid, runner,
                                        replicas=replicas, seed=seed)
    write_csv(os.path.join(out, "lr_transfer_cells.csv"),
              ("width", "lr", "mean_loss", "sem2", "replicas", "diverged"), cells)
    write_csv(os.path.join(out, "lr_transfer_summary.csv"),
              ("width", "best_lr", "best_loss", "drift_steps"), summary)
    for row in summary:
        print(f"width={row['width']} best_lr={format_value(row['best_lr'])} "
              f"best_loss={format_value(row['best_loss'])} "
              f"drift_steps={row['drift_steps']}")

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for w in widths:
        ws = [c for c in cells if c["width"] == w]
        xs = [math.log2(c["lr"]) for c in ws]
        ys = [c["mean_loss"] for c in ws]
        es = [c["sem2"] for c in ws]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=f"width {w}")
    ax.set_xlabel("log2 learning rate")
    ax.set_ylabel("final validation loss (mean ± 2 s.e.m.)")
    ax.set_title("learning-rate transfer across width")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out, "lr_transfer.png"), dpi=120)
    plt.close(fig)
    print(f"wrote {out}/lr_transfer_cells.csv {out}/lr_transfer_summary.csv "
          f"{out}/lr_transfer.png")
    return 0


# ---------------------------------------------------------------------------
# rms-report
# ---------------------------------------------------------------------------


def _cmd_rms_report(args) -> int:
    cfg = load_config(args.config, args.sets)
    out = _resolve_out(args)
    mcfg = _model_config(cfg["model"])
    seed = args.seed if args.seed is not None else int(cfg["train"]["seed"])
    model = build_model(mcfg, Rng(seed).derive("model.init"))
    batch = int(cfg["train"]["batch"])
    if cfg["data"].get("path") or cfg["data"].get("synthetic_tokens"):
        stream = _load_stream(cfg["data"], mcfg.vocab, seed)
        need = batch * mcfg.seq_len + 1
        if len(stream) < need:
            raise ConfigError(f"data holds {len(stream)} tokens < one batch ({need})")
        rows_tok = [stream.ids[j * mcfg.seq_len: j * mcfg.seq_len + mcfg.seq_len + 1]
                    for j in range(batch)]
        tokens = np.stack(rows_tok)
    else:
        tokens = Rng(seed, stream="rms-tokens").integers(
            0, mcfg.vocab, (batch, mcfg.seq_len + 1))
    report = [{"step": r["step"], "tensor": r["site"], "role": r["role"],
               "rms": r["rms"], "abs_max": r["abs_max"]}
              for r in rms_report(model, tokens)]
    write_csv(os.path.join(out, "rms.csv"), RMS_COLUMNS, report)

    lo = min(report, key=lambda r: r["rms"])
    hi = max(report, key=lambda r: r["rms"])
    inside = sum(1 for r in report if 0.5 <= r["rms"] <= 2.0)
    print(f"tensors={len(report)} within [0.5, 2.0]: {inside}/{len(report)}")
    print(f"min rms {format_value(lo['rms'])} at {lo['tensor']} ({lo['role']})")
    print(f"max rms {format_value(hi['rms'])} at {hi['tensor']} ({hi['role']})")

    plt = _pyplot()
    roles = sorted({r["role"] for r in report})
    sites = list(dict.fromkeys(r["tensor"] for r in report))
    fig, ax = plt.subplots(figsize=(7.0, 0.34 * len(sites) + 1.8))
    for role in roles:
        ys = [sites.index(r["tensor"]) for r in report if r["role"] == role]
        xs = [r["rms"] for r in report if r["role"] == role]
        ax.scatter(xs, ys, label=role, s=26)
    for guide in (0.5, 1.0, 2.0):
        ax.axvline(guide, color="grey", linestyle=":" if guide == 1.0 else "--",
                   linewidth=1)
    ax.set_xscale("log", base=2)
    ax.set_yticks(range(len(sites)), sites, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("RMS at initialization (log2 scale)")
    ax.set_title("per-matmul tensor RMS")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(out, "rms.png"), dpi=120)
    plt.close(fig)
    print(f"wrote {out}/rms.csv {out}/rms.png")
    return 0


# ---------------------------------------------------------------------------
# quantize-report
# ---------------------------------------------------------------------------


def _cmd_quantize_report(args) -> int:
    out = _resolve_out(args)
    seed = args.seed if args.seed is not None else 0
    formats = [make_format("e4m3"), make_format("e5m2")]
    const_rows = [{
        "format": f.name,
        "exponent_bits": f.exponent_bits,
        "mantissa_bits": f.mantissa_bits,
        "bias": f.bias,
        "max_finite": f.max_finite,
        "min_normal": f.min_normal,
        "min_subnormal": f.min_subnormal,
        "special_values": f.special_values,
    } for f in formats]
    write_csv(os.path.join(out, "quantize_formats.csv"),
              ("format", "exponent_bits", "mantissa_bits", "bias", "max_finite",
               "min_normal", "min_subnormal", "special_values"), const_rows)
    for row in const_rows:
        print(f"{row['format']}: max_finite={format_value(row['max_finite'])} "
              f"min_normal={format_value(row['min_normal'])} "
              f"min_subnormal={format_value(row['min_subnormal'])}")

    base = Rng(seed, stream="quantize-report").normal((2**16,))
    base_rms = stats(base).rms
    stds = [2.0**k for k in range(-8, 9)]
    rows = []
    for fmt in formats:
        for std in stds:
            x = base * std
            q = quantize(x, fmt)
            nonzero = x != 0.0
            rows.append({
                "format": fmt.name,
                "input_std": std,
                "rel_rmse": float(np.sqrt(np.mean((q - x) ** 2))) / (base_rms * std),
                "overflow_frac": float(np.mean(np.abs(x) > fmt.max_finite)),
                "underflow_frac": float(np.mean(nonzero & (q == 0.0))),
            })
    write_csv(os.path.join(out, "quantize.csv"),
              ("format", "input_std", "rel_rmse", "overflow_frac", "underflow_frac"),
              rows)

    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.6, 4.0))
    for fmt in formats:
        sub = [r for r in rows if r["format"] == fmt.name]
        xs = [r["input_std"] for r in sub]
        ax1.plot(xs, [max(r["rel_rmse"], 1e-12) for r in sub], marker="o",
                 label=fmt.name)
        ax2.plot(xs, [r["overflow_frac"] for r in sub], marker="^",
                 label=f"{fmt.name} overflow")
        ax2.plot(xs, [r["underflow_frac"] for r in sub], marker="v",
                 linestyle="--", label=f"{fmt.name} underflow")
    ax1.set_xscale("log", base=2)
    ax1.set_yscale("log")
    ax1.set_xlabel("input std")
    ax1.set_ylabel("relative RMS quantization error")
    ax1.legend()
    ax2.set_xscale("log", base=2)
    ax2.set_xlabel("input std")
    ax2.set_ylabel("clipped fraction")
    ax2.legend(fontsize=8)
    fig.suptitle("quantization error vs input scale (unit-normal data)")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "quantize.png"), dpi=120)
    plt.close(fig)
    print(f"wrote {out}/quantize_formats.csv {out}/quantize.csv {out}/quantize.png")
    return 0


# ---------------------------------------------------------------------------
# param-report
# ---------------------------------------------------------------------------


def _cmd_param_report(args) -> int:
    cfg = load_config(args.config, args.sets)
    out = _resolve_out(args)
    mcfg = _model_config(cfg["model"])
    seed = args.seed if args.seed is not None else 0
    model = build_model(mcfg, Rng(seed).derive("model.init"))
    rows = param_report(model)
    columns = ("name", "kind", "fan_in", "fan_out", "on_residual_branch",
               "A", "B", "C", "A_bwd_override", "lr_multiplier")
    write_csv(os.path.join(out, "param_report.csv"), columns, rows)
    for row in rows:
        print(f"{row['name']}: kind={row['kind']} B={format_value(row['B'])} "
              f"lr_multiplier={format_value(row['lr_multiplier'])}")

    plt = _pyplot()
    names = [r["name"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8.0, 6.4), sharex=True)
    ax1.bar(range(len(rows)), [r["B"] for r in rows], color="tab:blue")
    ax1.set_yscale("log", base=2)
    ax1.set_ylabel("init std (B)")
    ax2.bar(range(len(rows)), [r["lr_multiplier"] for r in rows], color="tab:orange")
    ax2.set_yscale("log", base=2)
    ax2.set_ylabel("LR multiplier (C / eta)")
    ax2.set_xticks(range(len(names)), names, rotation=60, ha="right", fontsize=7)
    fig.suptitle(f"parameter multipliers ({mcfg.scheme.kind}, width {mcfg.d_model})")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "param_report.png"), dpi=120)
    plt.close(fig)
    print(f"wrote {out}/param_report.csv {out}/param_report.png")
    return 0


# ---------------------------------------------------------------------------
# lemma-check
# ---------------------------------------------------------------------------


def _np_rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True))


def _cmd_lemma_check(args) -> int:
    if args.depth < 1:
        raise ConfigError(f"--depth must be >= 1, got {args.depth}")
    if args.trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {args.trials}")
    seed = args.seed if args.seed is not None else 0
    width = 32
    worst = 0.0
    for trial in range(args.trials):
        rng = np.random.default_rng(fnv1a64(f"{seed}:lemma:{trial}") & 0x7FFFFFFF)
        r = rng.uniform(0.3, 2.5, args.depth + 1)
        probes = []
        for _ in range(args.depth + 1):
            w = rng.standard_normal((width, width)) / math.sqrt(width)
            probes.append(lambda x, w=w: _np_rmsnorm(x) @ w)
        x = rng.standard_normal((4, width))
        res = lemma_f1_check(r, args.depth, probes, x)
        worst = max(worst, res.stream_deviation, res.final_deviation)
    ok = worst < 1e-6
    print(f"max deviation {worst:.3e} over {args.trials} trials at depth "
          f"{args.depth}: {'OK (< 1e-06)' if ok else 'FAIL (>= 1e-06)'}")
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# abc-check
# ---------------------------------------------------------------------------


def _shifted_twin(model, theta: float):
    """Same function, reparametrized: every (A, B, C) shifted by theta and
    every parameter rescaled by 1/theta to keep the effective weights."""
    from .model import Model

    params = {n: Tensor(p.data / theta, requires_grad=True)
              for n, p in model.params.items()}
    mults = {n: abc_shift(m, theta) for n, m in model.mults.items()}
    return Model(cfg=model.cfg, params=params, tags=model.tags, mults=mults,
                 schedule=model.schedule)


def abc_symmetry_deviation(theta: float, steps: int, seed: int = 0,
                           adam_eps: float = 1e-8) -> dict:
    """Train a base model and its theta-shifted twin on identical data and
    return the worst relative deviation between the two train-loss paths."""
    mcfg = config_from_dict({
        "d_model": 64, "n_blocks": 2, "n_heads": 2, "d_head": 32,
        "vocab": 64, "seq_len": 32,
        "scheme": {"kind": MUP, "base_width": 32,
                   "hps": {"sigma_init": 2.0**-2}},
    })
    base = build_model(mcfg, Rng(seed).derive("model.init"))
    twin = _shifted_twin(base, theta)
    n_tokens = max(20000, steps * 8 * 33 + 2000)
    ids = Rng(seed, stream="abc-data").integers(0, 16, (n_tokens,)).astype(np.int64)
    stream = TokenStream(ids=ids, vocab=64, source="synthetic")
    tcfg = TrainConfig(steps=steps, peak_lr=2.0**-4, warmup_steps=min(10, steps),
                       batch=8, weight_decay=0.0, eval_every=max(steps, 1),
                       seed=seed, allow_repeat=True, adam_eps=adam_eps)
    losses = []
    for m in (base, twin):
        result = train_run(m, stream, tcfg)
        losses.append([row["loss"] for row in result.metrics
                       if row["split"] == "train"])
    a, b = losses
    dev = max(abs(x - y) / max(abs(x), 1e-12) for x, y in zip(a, b))
    return {"max_rel_deviation": dev, "losses_base": a, "losses_twin": b}


def _cmd_abc_check(args) -> int:
    if args.steps < 1:
        raise ConfigError(f"--steps must be >= 1, got {args.steps}")
    if not args.theta > 0:
        raise ConfigError(f"--theta must be positive, got {args.theta}")
    seed = args.seed if args.seed is not None else 0
    report = abc_symmetry_deviation(args.theta, args.steps, seed=seed)
    dev = report["max_rel_deviation"]
    ok = dev < 1e-5
    print(f"max loss deviation {dev:.3e} over {args.steps} steps "
          f"(theta={args.theta:g}): {'OK (< 1e-05)' if ok else 'FAIL (>= 1e-05)'}")
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uscale",
        description="Unit-scaled transformer toolkit: training, HP sweeps, "
                    "and numerics reports.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(sp, workers=False):
        sp.add_argument("--config", metavar="PATH",
                        help="JSON config file merged over the defaults")
        sp.add_argument("--set", action="append", default=[], dest="sets",
                        metavar="KEY=VALUE",
                        help="override a config key (repeatable; applied "
                             "after the file, before validation)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", metavar="DIR",
                        help="output directory (default: $USCALE_OUT or ./out)")
        if workers:
            sp.add_argument("--workers", type=int, default=1,
                            help="parallel sweep runs")

    common(sub.add_parser("train", help="train one model; writes metrics.csv, "
                                        "rms.csv, and a checkpoint"))
    common(sub.add_parser("sweep", help="run an HP search; writes results.csv "
                                        "and best.json"), workers=True)
    te = sub.add_parser("transfer-error",
                        help="score HP transfer from loss-grid CSVs")
    common(te)
    te.add_argument("--grid", action="append", default=[], dest="grids",
                    metavar="[NAME=]PATH",
                    help="numeric CSV, rows = fixed HP, cols = transferred HP")
    common(sub.add_parser("lr-transfer",
                          help="LR sweep across widths; writes cell and "
                               "summary CSVs plus a figure"))
    common(sub.add_parser("rms-report",
                          help="per-tensor RMS at initialization"))
    common(sub.add_parser("quantize-report",
                          help="8-bit format constants and quantization "
                               "error vs input scale"))
    common(sub.add_parser("param-report",
                          help="per-parameter init/LR multipliers"))
    lc = sub.add_parser("lemma-check",
                        help="verify the normalized residual-network "
                             "equivalence on random nets")
    common(lc)
    lc.add_argument("--depth", type=int, default=8)
    lc.add_argument("--trials", type=int, default=20)
    ac = sub.add_parser("abc-check",
                        help="verify the multiplier-shift symmetry on a "
                             "twin training run")
    common(ac)
    ac.add_argument("--theta", type=float, default=2.0)
    ac.add_argument("--steps", type=int, default=50)
    return parser


_COMMANDS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "transfer-error": _cmd_transfer_error,
    "lr-transfer": _cmd_lr_transfer,
    "rms-report": _cmd_rms_report,
    "quantize-report": _cmd_quantize_report,
    "param-report": _cmd_param_report,
    "lemma-check": _cmd_lemma_check,
    "abc-check": _cmd_abc_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.verb](args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
