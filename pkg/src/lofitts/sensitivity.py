"""Per-layer precision sensitivity sweep and greedy demotion search."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assignment import BASELINE, DEMOTED, LayerPrecision, PrecisionAssignment
from .metrics import ComparisonReport, compare, log_spectral_distance, pcc
from .pipeline import Pipeline, run_e2e

# LSD analysis window used for every sensitivity measurement
LSD_FRAME = 512
LSD_HOP = 256


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class LayerTrial:
    layer_id: str
    lsd_db: float
    pcc: float

    def to_dict(self) -> dict:
        return {"layer_id": self.layer_id, "lsd_db": self.lsd_db, "pcc": self.pcc}


@dataclass(frozen=True)
class SearchStep:
    layer_id: str
    cumulative_lsd_db: float
    accepted: bool

    def to_dict(self) -> dict:
        return {"layer_id": self.layer_id, "cumulative_lsd_db": self.cumulative_lsd_db, "accepted": self.accepted}


@dataclass
class SensitivityReport:
    trials: list[LayerTrial]
    assignment: Optional[PrecisionAssignment] = None
    steps: list[SearchStep] = field(default_factory=list)
    end_to_end: Optional[ComparisonReport] = None
    budget_db: Optional[float] = None

    @property
    def coverage_bfp8(self) -> float:
        return self.assignment.coverage_bfp8() if self.assignment is not None else 0.0

    @property
    def coverage_lofi(self) -> float:
        return self.assignment.coverage_lofi() if self.assignment is not None else 0.0

    def to_dict(self) -> dict:
        return {
            "budget_db": self.budget_db,
            "trials": [t.to_dict() for t in self.trials],
            "steps": [s.to_dict() for s in self.steps],
            "assignment": self.assignment.to_dict() if self.assignment is not None else None,
            "coverage_bfp8": self.coverage_bfp8,
            "coverage_lofi": self.coverage_lofi,
            "end_to_end": self.end_to_end.to_dict() if self.end_to_end is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)


def _lsd(samples: np.ndarray, reference: np.ndarray) -> float:
    return log_spectral_distance(samples, reference, LSD_FRAME, LSD_HOP)


def per_layer_sweep(
    pipeline: Pipeline,
    baseline: Optional[PrecisionAssignment] = None,
    demoted: LayerPrecision = DEMOTED,
    workers: int = 1,
) -> SensitivityReport:
    """Demote each layer alone and measure the end-to-end damage.

    Trials are independent; with ``workers > 1`` they run on a thread pool
    and are collected back in layer order, so the result does not depend on
    the worker count.
    """
    baseline = baseline or pipeline.baseline_assignment()
    if any(p != BASELINE for p in baseline.values()):
        raise SearchError("the sweep baseline must be all (BF16, HiFi4)")
    reference = run_e2e(pipeline, baseline).samples

    def trial(layer_id: str) -> LayerTrial:
        wave = run_e2e(pipeline, baseline.with_layers({layer_id: demoted})).samples
        return LayerTrial(layer_id, _lsd(wave, reference), pcc(wave, reference))

    ids = pipeline.layer_ids
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(trial, ids))
    else:
        trials = [trial(lid) for lid in ids]
    return SensitivityReport(trials)


def demotion_order(pipeline: Pipeline, sweep: SensitivityReport) -> list[str]:
    """Layers by ascending isolated LSD; ties go to the lower layer_id."""
    return [t.layer_id for t in sorted(sweep.trials, key=lambda t: (t.lsd_db, t.layer_id))]


def search(
    pipeline: Pipeline,
    lsd_budget_db: float,
    sweep: Optional[SensitivityReport] = None,
    demoted: LayerPrecision = DEMOTED,
) -> SensitivityReport:
    """One greedy pass of cumulative demotions gated on end-to-end LSD.

    Layers are tried least-sensitive first.  Each demotion is kept only if
    the whole pipeline, with every demotion kept so far plus this one, stays
    within ``lsd_budget_db`` of the baseline waveform.
    """
    if not lsd_budget_db > 0:
        raise SearchError(f"LSD budget must be > 0, got {lsd_budget_db}")
    baseline = pipeline.baseline_assignment()
    sweep = sweep or per_layer_sweep(pipeline, baseline, demoted)
    reference = run_e2e(pipeline, baseline).samples

    current = baseline
    steps = []
    for layer_id in demotion_order(pipeline, sweep):
        candidate = current.with_layers({layer_id: demoted})
        lsd = _lsd(run_e2e(pipeline, candidate).samples, reference)
        ok = lsd <= lsd_budget_db
        steps.append(SearchStep(layer_id, lsd, ok))
        if ok:
            current = candidate

    final = compare(run_e2e(pipeline, current).samples, reference, LSD_FRAME, LSD_HOP)
    if not final.log_spectral_distance_db <= lsd_budget_db:
        raise SearchError(
            f"final assignment measures {final.log_spectral_distance_db:.4f} dB, over the "
            f"{lsd_budget_db} dB budget"
        )
    return SensitivityReport(sweep.trials, current, steps, final,
                             None if math.isinf(lsd_budget_db) else lsd_budget_db)


def greedy_search(
    pipeline: Pipeline,
    lsd_budget_db: float,
    sweep: Optional[SensitivityReport] = None,
    demoted: LayerPrecision = DEMOTED,
) -> PrecisionAssignment:
    """Assignment found by :func:`search`."""
    return search(pipeline, lsd_budget_db, sweep, demoted).assignment
