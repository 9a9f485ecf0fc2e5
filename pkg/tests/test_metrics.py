from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lofitts.metrics import ComparisonReport, MetricError, compare, log_spectral_distance, misalignment_demo, pcc
from oracles import lsd_loop


def signal(seed=0, n=2048):
    return np.random.default_rng(seed).standard_normal(n)


def test_pcc_basics():
    x = signal()
    assert pcc(x, x) == pytest.approx(1.0, abs=1e-15)
    assert pcc(x, -x) == pytest.approx(-1.0, abs=1e-15)
    y = signal(1)
    assert pcc(x, y) == pcc(y, x)


def test_pcc_rejections():
    with pytest.raises(MetricError):
        pcc(np.ones(10), signal(0, 10))
    with pytest.raises(MetricError):
        pcc(signal(0, 10), signal(0, 11))
    with pytest.raises(MetricError):
        pcc([1.0], [2.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_pcc_positive_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(64), rng.standard_normal(64)
    assert pcc(a * x + b, y) == pytest.approx(pcc(x, y), abs=1e-9)


def test_lsd_identity_and_gain():
    x = signal()
    assert log_spectral_distance(x, x) == 0.0
    assert log_spectral_distance(x, 2 * x) == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_lsd_symmetric():
    x, y = signal(0), signal(1)
    assert log_spectral_distance(x, y) == pytest.approx(log_spectral_distance(y, x), rel=1e-12)


def test_lsd_matches_loop_oracle():
    x = signal(2, 1536)
    y = x + 0.05 * signal(3, 1536)
    assert log_spectral_distance(x, y, 256, 128) == pytest.approx(lsd_loop(x, y, 256, 128), rel=1e-10)


def test_lsd_eps_floor():
    a = np.zeros(512)
    b = np.zeros(512)
    b[10] = 1.0
    assert log_spectral_distance(a, b, eps=1e-3) < log_spectral_distance(a, b, eps=1e-10)


def test_lsd_rejections():
    with pytest.raises(MetricError):
        log_spectral_distance(signal(0, 600), signal(0, 601))
    with pytest.raises(MetricError):
        log_spectral_distance(signal(), signal(), frame=500)
    with pytest.raises(MetricError):
        log_spectral_distance(signal(0, 100), signal(0, 100))


def test_sine_plus_quiet_tone_misaligns():
    t = np.arange(8192) / 24000
    clean = np.sin(2 * np.pi * 220 * t) + 1e-5 * signal(4, 8192)
    dirty = clean + 0.01 * np.sin(2 * np.pi * 4000 * t)
    assert pcc(dirty, clean) > 0.999
    assert log_spectral_distance(dirty, clean) > 0


def test_misalignment_demo():
    (clean, dirty), report = misalignment_demo()
    assert report.pcc >= 0.999
    assert report.log_spectral_distance_db >= 1.0
    assert report.l2_relative_error < 0.05
    assert not np.array_equal(clean, dirty)
    again = misalignment_demo()[1]
    assert again == report


def test_compare_and_json_keys():
    x = signal()
    y = x + 0.01 * signal(1)
    rep = compare(y, x)
    assert rep.max_relative_error == pytest.approx(np.abs(y - x).max() / np.abs(x).max())
    assert rep.l2_relative_error == pytest.approx(np.linalg.norm(y - x) / np.linalg.norm(x))
    d = json.loads(rep.to_json())
    assert set(d) == {"pcc", "max_rel_err", "l2_rel_err", "lsd_db"}
    assert ComparisonReport.from_dict(d) == rep
