"""HP search strategies, the transfer-error metric, and LR-transfer reports.

Searches are decoupled from model training through a runner callable
``runner(assignment: dict, seed: int) -> (loss, diverged)`` so the same
strategies drive synthetic test surfaces and real training runs. Seeds are
derived from the assignment (not submission order), keeping results
deterministic under any execution order or worker count.

The independent search runs three phases: a 1D sweep of the step-size key
with every other knob at its default, one independent 1D sweep per
remaining knob at the phase-1 winner, and a single combined re-evaluation;
the cheaper of the phase-1 and combined assignments wins. Total cost is
exactly |step-size grid| + sum of the other grid sizes + 1 runs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng, fnv1a64
from .train import write_csv

logger = logging.getLogger(__name__)

INDEPENDENT = "independent"
RANDOM = "random"
STRATEGIES = (INDEPENDENT, RANDOM)

RESULTS_COLUMNS = ("strategy", "phase", "hp_json", "seed", "final_loss", "diverged")

ETA_KEY = "eta"


# ---------------------------------------------------------------------------
# Specs and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    """Grids are ordered value lists per HP name (log2-spaced by convention).
    ``defaults`` fills HPs not being swept in a given phase (1.0 if absent).
    """

    grids: dict
    strategy: str = INDEPENDENT
    random_n: int = 0
    defaults: dict = field(default_factory=dict)
    eta_key: str = ETA_KEY
    widths: tuple = ()
    base_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.grids:
            raise ValueError("at least one HP grid is required")
        normalized = {}
        for name, grid in self.grids.items():
            values = tuple(float(v) for v in grid)
            if not values:
                raise ValueError(f"grid for {name!r} is empty")
            if any(not (v > 0 and math.isfinite(v)) for v in values):
                raise ValueError(f"grid for {name!r} must be positive and finite, got {values}")
            normalized[name] = values
        object.__setattr__(self, "grids", normalized)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == RANDOM and self.random_n < 1:
            raise ValueError(f"random strategy needs random_n >= 1, got {self.random_n}")

    def default_for(self, name: str) -> float:
        return float(self.defaults.get(name, 1.0))


@dataclass(frozen=True)
class RunResult:
    strategy: str
    phase: str
    assignment: dict
    seed: int
    final_loss: float
    diverged: bool

    @property
    def hp_json(self) -> str:
        return json.dumps(self.assignment, sort_keys=True)

    @property
    def ranking_loss(self) -> float:
        """Loss used for argmin: diverged runs never win."""
        return math.inf if self.diverged else self.final_loss


@dataclass
class SearchOutcome:
    best_assignment: dict
    best_loss: float
    runs: list
    phase_log: list


def run_seed(base_seed: int, phase: str, assignment: dict, replica: int = 0) -> int:
    """Deterministic function of the assignment, not of submission order."""
    payload = json.dumps(assignment, sort_keys=True)
    return int(fnv1a64(f"{base_seed}:{phase}:{payload}:{replica}") & 0x7FFFFFFF)


def _execute_batch(runner, strategy: str, requests, map_fn) -> list:
    """requests: [(phase, assignment, seed)] -> ordered RunResults via map_fn
    (any map-like callable, e.g. an executor's map; runs are independent)."""

    def run_one(req):
        phase, assignment, seed = req
        loss, diverged = runner(dict(assignment), seed)
        loss = float(loss)
        if not math.isfinite(loss):
            diverged = True
        return RunResult(strategy, phase, dict(assignment), seed, loss, bool(diverged))

    return list(map_fn(run_one, requests))


def _argmin_run(runs) -> RunResult | None:
    """Lowest ranking loss; ties broken by earliest run (grid order), logged."""
    best = None
    for r in runs:
        if r.diverged:
            continue
        if best is None or r.ranking_loss < best.ranking_loss:
            best = r
        elif r.ranking_loss == best.ranking_loss:
            logger.info("argmin tie at loss %r: keeping earlier assignment %s over %s",
                        best.ranking_loss, best.hp_json, r.hp_json)
    return best


# ---------------------------------------------------------------------------
# Independent three-phase search
# ---------------------------------------------------------------------------


def independent_search(spec: SweepSpec, runner, seed: int = 0, map_fn=map) -> SearchOutcome:
    """Phase 1: 1D step-size sweep at defaults. Phase 2: an independent 1D
    sweep per remaining HP at the phase-1 winner (all phase-2 runs are
    mutually independent, so they go to map_fn as one batch). Phase 3: one
    run combining every phase-2 argmin; the better of phase 1 and phase 3 is
    returned. Diverged runs are recorded but never win an argmin.
    """
    if spec.eta_key not in spec.grids:
        raise ValueError(f"independent search requires a grid for {spec.eta_key!r}")
    others = [name for name in spec.grids if name != spec.eta_key]
    base = {name: spec.default_for(name) for name in others}
    runs, phase_log = [], []

    requests = []
    for value in spec.grids[spec.eta_key]:
        assignment = {spec.eta_key: value, **base}
        requests.append(("1", assignment, run_seed(seed, "1", assignment)))
    phase1 = _execute_batch(runner, spec.strategy, requests, map_fn)
    runs.extend(phase1)
    best1 = _argmin_run(phase1)
    if best1 is None:
        raise RuntimeError("every phase-1 run diverged; no usable step size")
    eta_star = best1.assignment[spec.eta_key]
    phase_log.append({"phase": "1", "runs": len(phase1),
                      "best": dict(best1.assignment), "loss": best1.final_loss})

    requests = []
    for name in others:
        for value in spec.grids[name]:
            assignment = {spec.eta_key: eta_star, **base, name: value}
            requests.append(("2", assignment, run_seed(seed, "2", assignment)))
    phase2 = _execute_batch(runner, spec.strategy, requests, map_fn)
    runs.extend(phase2)
    combined = {spec.eta_key: eta_star}
    cursor = 0
    for name in others:
        sweep_runs = phase2[cursor: cursor + len(spec.grids[name])]
        cursor += len(spec.grids[name])
        best_h = _argmin_run(sweep_runs)
        if best_h is None:
            logger.warning("phase-2 sweep for %r diverged everywhere; keeping default", name)
            combined[name] = spec.default_for(name)
        else:
            combined[name] = best_h.assignment[name]
        phase_log.append({"phase": "2", "hp": name, "runs": len(sweep_runs),
                          "best_value": combined[name]})

    final, = _execute_batch(runner, spec.strategy,
                            [("3", combined, run_seed(seed, "3", combined))], map_fn)
    runs.append(final)
    phase_log.append({"phase": "3", "runs": 1, "assignment": dict(combined),
                      "loss": final.final_loss, "diverged": final.diverged})

    if not final.diverged and final.final_loss < best1.final_loss:
        winner, winner_loss = final.assignment, final.final_loss
    else:
        winner, winner_loss = best1.assignment, best1.final_loss
    expected = sum(len(g) for g in spec.grids.values()) + 1
    assert len(runs) == expected, (len(runs), expected)
    return SearchOutcome(dict(winner), winner_loss, runs, phase_log)


# ---------------------------------------------------------------------------
# Random search
# ---------------------------------------------------------------------------


def random_search(spec: SweepSpec, runner, n: int, seed: int = 0, map_fn=map) -> list:
    """n i.i.d. uniform samples over the grid product, ranked best-first.
    Diverged runs rank last. The sample sequence is a pure function of seed.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = Rng(seed, stream=fnv1a64("random_search"))
    names = sorted(spec.grids)
    requests = []
    for i in range(n):
        assignment = {}
        for name in names:
            grid = spec.grids[name]
            assignment[name] = grid[int(rng.integers(0, len(grid)))]
        requests.append(("random", assignment, run_seed(seed, "random", assignment, replica=i)))
    results = _execute_batch(runner, spec.strategy, requests, map_fn)
    return sorted(results, key=lambda r: (r.ranking_loss, r.hp_json))


def subsample_best(results, k: int, seed: int = 0) -> RunResult:
    """Best run within a random k-subset (shorter-search simulation)."""
    if not results:
        raise ValueError("no results to subsample")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = Rng(seed, stream=fnv1a64("subsample"))
    pool = list(results)
    picked = []
    for _ in range(min(k, len(pool))):
        picked.append(pool.pop(int(rng.integers(0, len(pool)))))
    return min(picked, key=lambda r: (r.ranking_loss, r.hp_json))


# ---------------------------------------------------------------------------
# Transfer error (how much one HP's optimum depends on another's value)
# ---------------------------------------------------------------------------


def transfer_error(loss_grid) -> float:
    """Mean excess loss, along the fixed-HP axis, of re-tuning the transfer
    HP at each fixed-HP value and applying it at the global-argmin row.

    grid[f, t]: rows index the fixed HP, columns the transferred HP. With
    (f*, t*) the global argmin: err = sum over f != f* of
    grid[f*, argmin_t grid[f, :]] - grid[f*, t*], divided by n_rows - 1.
    Ties take the lowest index (logged). A single row returns 0 (empty sum).
    """
    grid = np.asarray(loss_grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"loss grid must be 2-d and non-empty, got shape {grid.shape}")
    if not np.isfinite(grid).all():
        raise ValueError("loss grid must be finite")
    n_fixed = grid.shape[0]
    if n_fixed == 1:
        return 0.0
    flat_star = int(grid.argmin())  # numpy argmin: lowest flat index on ties
    f_star, t_star = np.unravel_index(flat_star, grid.shape)
    if (grid == grid.flat[flat_star]).sum() > 1:
        logger.info("global argmin tie in transfer grid; using lowest index (%d, %d)",
                    f_star, t_star)
    err = 0.0
    for f in range(n_fixed):
        if f == f_star:
            continue
        row = grid[f]
        t_best = int(row.argmin())
        if (row == row[t_best]).sum() > 1:
            logger.info("row %d argmin tie in transfer grid; using lowest index %d", f, t_best)
        err += grid[f_star, t_best] - grid[f_star, t_star]
    return float(err / (n_fixed - 1))


def mean_pairwise_transfer_error(grids: dict) -> dict:
    """Per-pair transfer errors plus their mean, for a mapping
    ``(fixed_hp, transfer_hp) -> loss grid``."""
    if not grids:
        raise ValueError("no grids given")
    errors = {pair: transfer_error(grid) for pair, grid in grids.items()}
    return {"pairs": {f"{a}->{b}": e for (a, b), e in errors.items()},
            "mean": float(np.mean(list(errors.values())))}


# ---------------------------------------------------------------------------
# LR-transfer report across widths
# ---------------------------------------------------------------------------


def lr_transfer_report(widths, lr_grid, runner, *, replicas: int = 3, seed: int = 0,
                       map_fn=map):
    """Train every (width, lr) cell ``replicas`` times via
    ``runner(width, lr, seed) -> (loss, diverged)``; aggregate by mean.

    Returns (cells, summary): one cell row per (width, lr) with the replica
    mean and a 2-standard-error spread, and one summary row per width with
    its argmin LR and the drift, in grid steps, from the narrowest width's
    argmin. All (width, lr, replica) runs are independent and submitted to
    map_fn as one batch.
    """
    widths = [int(w) for w in widths]
    lr_grid = [float(lr) for lr in lr_grid]
    if not widths or not lr_grid:
        raise ValueError("need at least one width and one LR")
    if replicas < 1:
        raise ValueError(f"replicas must be >= 1, got {replicas}")

    requests = [(width, lr, rep,
                 run_seed(seed, f"lr_transfer.{width}", {"lr": lr}, replica=rep))
                for width in widths for lr in lr_grid for rep in range(replicas)]

    def run_one(req):
        width, lr, _rep, rep_seed = req
        loss, diverged = runner(width, lr, rep_seed)
        loss = float(loss)
        return loss, bool(diverged) or not math.isfinite(loss)

    outcomes = list(map_fn(run_one, requests))

    cells = []
    best_index = {}
    cursor = 0
    for width in widths:
        means = []
        for lr in lr_grid:
            chunk = outcomes[cursor: cursor + replicas]
            cursor += replicas
            losses = [loss for loss, diverged in chunk if not diverged]
            diverged_count = replicas - len(losses)
            if losses:
                mean = float(np.mean(losses))
                sem2 = (2.0 * float(np.std(losses, ddof=1)) / math.sqrt(len(losses))
                        if len(losses) > 1 else 0.0)
            else:
                mean, sem2 = math.inf, 0.0
            cells.append({"width": width, "lr": lr, "mean_loss": mean,
                          "sem2": sem2, "replicas": replicas,
                          "diverged": diverged_count})
            means.append(mean)
        if not any(math.isfinite(m) for m in means):
            raise RuntimeError(f"all cells diverged at width {width}")
        best_index[width] = means.index(min(means))
    anchor = best_index[widths[0]]
    summary = [{"width": w,
                "best_lr": lr_grid[best_index[w]],
                "best_loss": min(c["mean_loss"] for c in cells if c["width"] == w),
                "drift_steps": best_index[w] - anchor}
               for w in widths]
    return cells, summary


# ---------------------------------------------------------------------------
# Results CSV
# ---------------------------------------------------------------------------


def write_results_csv(path: str, runs) -> None:
    rows = [{"strategy": r.strategy, "phase": r.phase, "hp_json": r.hp_json,
             "seed": r.seed, "final_loss": r.final_loss, "diverged": r.diverged}
            for r in runs]
    write_csv(path, RESULTS_COLUMNS, rows)
