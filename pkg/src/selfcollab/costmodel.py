"""Training and inference cost accounting, symbolic and measured.

Symbolic bounds for a run of ``T0`` baseline epochs extended by ``Ts``
self-collaboration epochs:

    (T0 + Ts + 2) * P0  <  P_train  <  (T0 + 2 * Ts + 12) * P0

The constants 2 and 12 come from the re-boosting stage (two or four folds,
one epoch each) and are kept literal rather than generalized.
"""

from __future__ import annotations

import copy
import statistics
import time
import warnings
from dataclasses import dataclass

import torch

from .imagecore import FOLD_SETS


@dataclass(frozen=True)
class CostParams:
    T0: float
    Ts: float
    P0: float = 1.0
    P_inf: float = 1.0
    N: int = 8

    def __post_init__(self):
        if self.T0 <= 0 or self.P0 <= 0 or self.P_inf <= 0:
            raise ValueError("T0, P0 and P_inf must be positive")
        if self.Ts < 0:
            raise ValueError("Ts must be nonnegative")
        if self.N not in FOLD_SETS:
            raise ValueError(f"N must be one of {sorted(FOLD_SETS)}")


@dataclass(frozen=True)
class CostBounds:
    train_lower: float
    train_upper: float
    inference_sc: float
    inference_se: float

    @property
    def inference_ratio(self) -> float:
        return self.inference_se / self.inference_sc


def _train_range(p: CostParams) -> tuple:
    return (p.T0 + p.Ts + 2) * p.P0, (p.T0 + 2 * p.Ts + 12) * p.P0


def training_bounds(p: CostParams) -> CostBounds:
    if p.Ts >= p.T0:
        warnings.warn(f"Ts={p.Ts} >= T0={p.T0}: the bounds assume a short extension", stacklevel=2)
    return CostBounds(*_train_range(p), 1.0 * p.P_inf, p.N * p.P_inf)


def inference_costs(p: CostParams) -> CostBounds:
    """Self-collaboration adds no inference cost; an N-fold self-ensemble costs N passes."""
    return CostBounds(*_train_range(p), 1.0 * p.P_inf, p.N * p.P_inf)


# ---------------------------------------------------------------------------
# Measurement


@dataclass(frozen=True)
class StepCost:
    seconds: float
    stage: str
    folds: int
    reps: int


def _median_time(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def prepare_stage(state, stage: str, folds: int = 1):
    """Deep copy of ``state`` placed in ``stage`` with a snapshot of its restorer."""
    from .trainer import sc_replace

    clone = copy.deepcopy(state)
    clone.metrics = type(state.metrics)()
    clone.history = []
    clone.out_dir = None
    clone.stage = stage
    if stage != "basic":
        sc_replace(clone)
        clone.pl.set_folds(folds)
    return clone


def measure_step_cost(state, batch, reps: int = 5, warmup: int = 1) -> StepCost:
    """Median wall-clock of one training step, run on a copy of ``state``."""
    from .trainer import p2gan_step

    if reps < 5:
        raise ValueError("at least 5 repetitions are required")
    clone = copy.deepcopy(state)
    clone.metrics = type(state.metrics)()
    clone.history = []
    sec = _median_time(lambda: p2gan_step(clone, batch), reps, warmup)
    return StepCost(sec, clone.stage, clone.pl.fold_count, reps)


def measure_stage_costs(state, batch, folds=(2, 4), reps: int = 5, rounds: int = 3) -> dict:
    """Per-step cost of the basic, SC and each Reb-SC fold setting.

    Settings are measured ``rounds`` times in interleaved order and the
    minimum median is kept, which damps drift from other load on the host.
    """
    clones = {"basic": prepare_stage(state, "basic"), "sc": prepare_stage(state, "sc")}
    for k in folds:
        clones[f"rebsc{k}"] = prepare_stage(state, "rebsc", k)
    best = {}
    for _ in range(rounds):
        for name, clone in clones.items():
            c = measure_step_cost(clone, batch, reps)
            if name not in best or c.seconds < best[name].seconds:
                best[name] = c
    return best


@torch.no_grad()
def measure_inference_cost(restorer, y, n: int = 1, reps: int = 5, warmup: int = 1) -> float:
    """Median wall-clock of an ``n``-fold self-ensemble restoration of ``y``."""
    from .evaluate import self_ensemble_infer

    return _median_time(lambda: self_ensemble_infer(restorer, y, n), reps, warmup)


def measure_inference_ratios(restorer, y, ns=(2, 4, 8), reps: int = 5) -> dict:
    base = measure_inference_cost(restorer, y, 1, reps)
    return {n: measure_inference_cost(restorer, y, n, reps) / base for n in ns}


# ---------------------------------------------------------------------------
# Report


def containment(stage_costs: dict, tolerance: float = 0.2) -> dict:
    """Verdicts for the per-epoch cost claims, relative to the basic stage.

    SC should cost within ``(1, 2) * P0`` widened by ``tolerance``; each
    Reb-SC setting should cost more than the SC stage.
    """
    p0 = stage_costs["basic"].seconds
    ratio = stage_costs["sc"].seconds / p0
    out = {"sc_ratio": ratio,
           "sc_contained": (1 - tolerance) < ratio < 2 * (1 + tolerance)}
    reb = [c for name, c in stage_costs.items() if name.startswith("rebsc")]
    for c in reb:
        out[f"rebsc{c.folds}_ratio"] = c.seconds / p0
    if reb:
        out["rebsc_above_sc"] = all(c.seconds > stage_costs["sc"].seconds for c in reb)
    return out


def format_report(bounds: CostBounds | None = None, stage_costs: dict | None = None,
                  inference: dict | None = None, tolerance: float = 0.2) -> str:
    rows = []
    if bounds is not None:
        rows += [("train lower bound", f"{bounds.train_lower:g}"),
                 ("train upper bound", f"{bounds.train_upper:g}"),
                 ("inference SC", f"{bounds.inference_sc:g}"),
                 ("inference SE", f"{bounds.inference_se:g}"),
                 ("SE/SC ratio", f"{bounds.inference_ratio:.1f}")]
    if stage_costs:
        for name, c in stage_costs.items():
            rows.append((f"step {name} (k={c.folds})", f"{c.seconds * 1e3:.2f} ms"))
        v = containment(stage_costs, tolerance)
        rows.append(("SC/basic ratio", f"{v['sc_ratio']:.3f}"))
        rows.append(("SC within (1x, 2x) +-20%", "PASS" if v["sc_contained"] else "FAIL"))
    if inference:
        for n, r in sorted(inference.items()):
            rows.append((f"SE N={n} / single pass", f"{r:.2f}"))
    width = max((len(k) for k, _ in rows), default=0)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)
