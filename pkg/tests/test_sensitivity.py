from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from lofitts.assignment import BASELINE, DEMOTED, PrecisionAssignment
from lofitts.metrics import log_spectral_distance
from lofitts.pipeline import run_diffusion, run_e2e
from lofitts.sensitivity import SearchError, demotion_order, greedy_search, per_layer_sweep, search

GOLDEN = Path(__file__).parent / "golden"


def test_sweep_matches_golden(sweep):
    golden = json.loads((GOLDEN / "sweep_trials.json").read_text())
    assert [t.to_dict() for t in sweep.trials] == golden["trials"]


def test_sweep_trials_sane(pipeline, sweep):
    assert [t.layer_id for t in sweep.trials] == pipeline.layer_ids
    assert all(math.isfinite(t.lsd_db) and t.lsd_db >= 0 for t in sweep.trials)


def test_sweep_parallel_equals_sequential(pipeline, sweep):
    assert per_layer_sweep(pipeline, workers=4).trials == sweep.trials


def test_sweep_rejects_non_baseline(pipeline):
    with pytest.raises(SearchError):
        per_layer_sweep(pipeline, PrecisionAssignment.uniform(pipeline.layer_ids, DEMOTED))


def test_vocoder_demotion_leaves_latent(pipeline):
    base = pipeline.baseline_assignment()
    latent = run_diffusion(pipeline, base).values
    for lid in pipeline.vocoder_layer_ids:
        assert np.array_equal(run_diffusion(pipeline, base.with_layers({lid: DEMOTED})).values, latent)


def test_order_ascending_with_id_tiebreak(pipeline, sweep):
    order = demotion_order(pipeline, sweep)
    lsd = {t.layer_id: t.lsd_db for t in sweep.trials}
    keys = [(lsd[lid], lid) for lid in order]
    assert keys == sorted(keys)


def test_unbounded_budget_demotes_everything(pipeline, sweep):
    report = search(pipeline, math.inf, sweep)
    assert report.coverage_bfp8 == report.coverage_lofi == 1.0
    assert report.budget_db is None


def test_tiny_budget_demotes_nothing(pipeline, sweep):
    assignment = greedy_search(pipeline, 1e-9, sweep)
    assert all(p == BASELINE for p in assignment.values())


@pytest.mark.parametrize("budget", [0.0, -1.0])
def test_nonpositive_budget_rejected(pipeline, budget):
    with pytest.raises(SearchError):
        search(pipeline, budget)


def test_budget_sound_and_coverage_monotone(pipeline, sweep):
    reference = run_e2e(pipeline, pipeline.baseline_assignment()).samples
    previous = -1.0
    for budget in (0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 2.0):
        report = search(pipeline, budget, sweep)
        lsd = log_spectral_distance(run_e2e(pipeline, report.assignment).samples, reference)
        assert lsd <= budget
        assert report.coverage_lofi >= previous
        previous = report.coverage_lofi


def test_pinned_assignment_golden(pipeline, sweep):
    golden = PrecisionAssignment.from_json((GOLDEN / "pinned_assignment.json").read_text())
    assert greedy_search(pipeline, 1.0, sweep) == golden


def test_steps_recorded(pipeline, sweep):
    report = search(pipeline, 0.3, sweep)
    assert [s.layer_id for s in report.steps] == demotion_order(pipeline, sweep)
    accepted = {s.layer_id for s in report.steps if s.accepted}
    assert accepted == {lid for lid, p in report.assignment.items() if p == DEMOTED}
    json.loads(report.to_json())
