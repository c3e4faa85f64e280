"""Data ingestion, LR schedule, training loop, and metrics logging.

Token streams come from plain files (text mode: raw bytes, vocab 256) or
from the package's binary token format (magic ``UTOK``). Training consumes
sequential contiguous windows without shuffling or epoch repetition by
default, holding out the final 5% of the stream for validation — repeating
data silently would move runs out of the under-fitting regime that makes
small-model loss comparisons meaningful.

All CSV output uses full round-trip float formatting so reruns diff clean.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import Model, forward_loss, lr_multipliers, rms_report
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, WEIGHT_DECAY, adamw_step, init_state
from .tensor import Tape

logger = logging.getLogger(__name__)

TOKEN_MAGIC = b"UTOK"
TOKEN_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")  # magic, version, vocab, bytes_per_id, count

METRICS_COLUMNS = ("step", "split", "loss", "lr", "grad_norm")
RMS_COLUMNS = ("step", "tensor", "role", "rms", "abs_max")

VALIDATION_FRACTION = 0.05


# ---------------------------------------------------------------------------
# Token streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenStream:
    ids: np.ndarray
    vocab: int
    source: str

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 1 or ids.dtype.kind not in "iu":
            raise ValueError(f"token ids must be a 1-d integer array, got {ids.dtype} {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError(f"token ids must lie in [0, {self.vocab})")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.ids.size


def ingest(path: str, mode: str = "text") -> TokenStream:
    """Read a token stream: ``text`` treats the file as raw bytes (vocab 256);
    ``binary`` parses the UTOK format. Malformed binary input is reported
    with the byte offset of the first offending field."""
    if mode == "text":
        with open(path, "rb") as f:
            raw = f.read()
        return TokenStream(np.frombuffer(raw, dtype=np.uint8).astype(np.int64), 256, path)
    if mode != "binary":
        raise ValueError(f"unknown ingest mode {mode!r}; expected 'text' or 'binary'")

    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes < {_HEADER.size})")
    magic, version, vocab, bytes_per_id, count = _HEADER.unpack_from(raw)
    if magic != TOKEN_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at offset 0")
    if version != TOKEN_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at offset 4")
    if vocab < 2:
        raise ValueError(f"{path}: vocab {vocab} < 2 at offset 8")
    if bytes_per_id not in (2, 4):
        raise ValueError(f"{path}: bytes-per-id {bytes_per_id} not in {{2, 4}} at offset 12")
    body = raw[_HEADER.size:]
    if len(body) != count * bytes_per_id:
        raise ValueError(
            f"{path}: payload is {len(body)} bytes, expected {count} ids x {bytes_per_id} bytes"
        )
    ids = np.frombuffer(body, dtype=f"<u{bytes_per_id}").astype(np.int64)
    bad = np.nonzero(ids >= vocab)[0]
    if bad.size:
        i = int(bad[0])
        offset = _HEADER.size + i * bytes_per_id
        raise ValueError(f"{path}: id {int(ids[i])} >= vocab {vocab} at byte offset {offset}")
    return TokenStream(ids, vocab, path)


def write_token_file(path: str, ids, vocab: int) -> None:
    """Write the bit-exact binary token format (UTOK v1, little-endian)."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or ids.dtype.kind not in "iu":
        raise ValueError(f"token ids must be a 1-d integer array, got {ids.dtype} {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"token ids must lie in [0, {vocab})")
    bytes_per_id = 2 if vocab <= 1 << 16 else 4
    with open(path, "wb") as f:
        f.write(_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, vocab, bytes_per_id, ids.size))
        f.write(ids.astype(f"<u{bytes_per_id}").tobytes())


def split_stream(stream: TokenStream, fraction: float = VALIDATION_FRACTION):
    """(train_ids, val_ids): the held-out tail is the last ``fraction`` of the
    stream, so the two regions are disjoint by construction."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"validation fraction must be in (0, 1), got {fraction}")
    n_val = max(int(len(stream) * fraction), 1)
    return stream.ids[: len(stream) - n_val], stream.ids[len(stream) - n_val:]


def _windows(ids: np.ndarray, seq_len: int, max_rows: int | None = None) -> np.ndarray:
    """Stack [n, seq_len+1] next-token windows at stride seq_len."""
    n = (ids.size - 1) // seq_len
    if max_rows is not None:
        n = min(n, max_rows)
    if n < 1:
        return np.empty((0, seq_len + 1), dtype=ids.dtype)
    return np.stack([ids[i * seq_len: i * seq_len + seq_len + 1] for i in range(n)])


# ---------------------------------------------------------------------------
# LR schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    peak_lr: float
    warmup_steps: int = 50
    batch: int = 16
    final_lr_frac: float = 0.1
    seed: int = 0
    eval_every: int = 50
    val_batches: int = 8
    weight_decay: float = WEIGHT_DECAY
    allow_repeat: bool = False
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError(
                f"warmup_steps must lie in [0, steps={self.steps}], got {self.warmup_steps}"
            )
        if not self.peak_lr >= 0:
            raise ValueError(f"peak_lr must be >= 0, got {self.peak_lr}")
        if not 0.0 < self.final_lr_frac <= 1.0:
            raise ValueError(f"final_lr_frac must be in (0, 1], got {self.final_lr_frac}")
        if self.batch < 1 or self.eval_every < 1 or self.val_batches < 1:
            raise ValueError("batch, eval_every and val_batches must be >= 1")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def cosine_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak over warmup_steps, then cosine decay from peak
    to final_lr_frac * peak at step == steps. Warmup length is an independent
    constant: changing ``steps`` re-stretches only the decay.

    In the degenerate steps == warmup_steps case the decay has zero length
    and the warmup endpoint (peak) wins.
    """
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step must lie in [0, {cfg.steps}], got {step}")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if cfg.steps == cfg.warmup_steps:
        return cfg.peak_lr
    final = cfg.final_lr_frac * cfg.peak_lr
    t = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return final + (cfg.peak_lr - final) * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    steps_run: int
    diverged: bool
    final_train_loss: float
    init_val_loss: float
    final_val_loss: float
    best_val_loss: float
    metrics: list = field(default_factory=list)
    rms_rows: list = field(default_factory=list)


def _val_loss(model: Model, val_rows: np.ndarray, batch: int) -> float:
    total, count = 0.0, 0
    for i in range(0, val_rows.shape[0], batch):
        chunk = val_rows[i: i + batch]
        total += float(forward_loss(model, chunk).data) * chunk.shape[0]
        count += chunk.shape[0]
    return total / count


def train_run(model: Model, stream: TokenStream, cfg: TrainConfig,
              out_dir: str | None = None) -> TrainResult:
    """Train ``model`` in place on sequential windows of ``stream``.

    The last 5% of the stream is held out; validation runs at step 0, every
    ``eval_every`` steps, and after the last step. A run is marked diverged
    if any train loss is non-finite (the loop then stops early) or the final
    validation loss exceeds twice the initial one. With ``out_dir`` set,
    metrics.csv and rms.csv are written there.
    """
    if stream.vocab != model.cfg.vocab:
        raise ValueError(f"stream vocab {stream.vocab} != model vocab {model.cfg.vocab}")
    seq_len, batch = model.cfg.seq_len, cfg.batch
    train_ids, val_ids = split_stream(stream)
    tokens_per_step = batch * seq_len
    if train_ids.size < tokens_per_step + 1:
        raise ValueError(
            f"insufficient data: {train_ids.size} training tokens < one batch "
            f"({tokens_per_step + 1})"
        )
    if val_ids.size < seq_len + 1:
        raise ValueError(
            f"insufficient data: {val_ids.size} held-out tokens < one window ({seq_len + 1})"
        )
    steps_per_epoch = (train_ids.size - 1) // tokens_per_step
    if cfg.steps > steps_per_epoch and not cfg.allow_repeat:
        raise ValueError(
            f"insufficient data: {cfg.steps} steps need more than the "
            f"{steps_per_epoch} available single-pass batches; pass allow_repeat "
            f"to reuse data (leaves the under-fitting regime)"
        )
    if cfg.steps > steps_per_epoch:
        logger.warning(
            "repeating training data: %d steps over %d single-pass batches",
            cfg.steps, steps_per_epoch,
        )

    val_rows = _windows(val_ids, seq_len, max_rows=cfg.val_batches * batch)
    mults = lr_multipliers(model)
    state = init_state(model.params)
    result = TrainResult(0, False, math.nan, math.nan, math.nan, math.inf)

    def batch_at(step: int) -> np.ndarray:
        start = (step % steps_per_epoch) * tokens_per_step
        rows = [train_ids[start + j * seq_len: start + j * seq_len + seq_len + 1]
                for j in range(batch)]
        return np.stack(rows)

    def evaluate(step: int, lr: float, tokens: np.ndarray) -> None:
        loss = _val_loss(model, val_rows, batch)
        result.final_val_loss = loss
        result.best_val_loss = min(result.best_val_loss, loss)
        result.metrics.append({"step": step, "split": "val", "loss": loss,
                               "lr": lr, "grad_norm": ""})
        result.rms_rows.extend(
            {"step": r["step"], "tensor": r["site"], "role": r["role"],
             "rms": r["rms"], "abs_max": r["abs_max"]}
            for r in rms_report(model, tokens, step=step)
        )

    evaluate(0, cosine_schedule(0, cfg), batch_at(0))
    result.init_val_loss = result.final_val_loss

    for step in range(cfg.steps):
        tokens = batch_at(step)
        lr = cosine_schedule(step, cfg)
        for p in model.params.values():
            p.zero_grad()
        with Tape() as tape:
            loss = forward_loss(model, tokens)
            tape.backward(loss)
        train_loss = float(loss.data)
        grad_norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in model.params.values()))
        result.metrics.append({"step": step, "split": "train", "loss": train_loss,
                               "lr": lr, "grad_norm": grad_norm})
        result.final_train_loss = train_loss
        result.steps_run = step + 1
        if not math.isfinite(train_loss):
            logger.warning("stopping at step %d: non-finite training loss", step)
            result.diverged = True
            break
        adamw_step(model.params, None, state,
                   {n: lr * mults[n] for n in model.params},
                   beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
                   lambda_indep=cfg.weight_decay)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            evaluate(step + 1, cosine_schedule(step + 1, cfg), tokens)

    if not (math.isfinite(result.final_val_loss)
            and result.final_val_loss <= 2.0 * result.init_val_loss):
        result.diverged = True
    if out_dir is not None:
        write_csv(f"{out_dir}/metrics.csv", METRICS_COLUMNS, result.metrics)
        write_csv(f"{out_dir}/rms.csv", RMS_COLUMNS, result.rms_rows)
    return result


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def format_value(v) -> str:
    """Full round-trip decimal for floats; plain str otherwise."""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def write_csv(path: str, columns, rows) -> None:
    """Rows are dicts keyed by ``columns``; floats keep full precision so
    identical runs produce byte-identical files."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[c]) for c in columns])
