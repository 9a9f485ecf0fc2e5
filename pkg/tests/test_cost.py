from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import pytest

from lofitts.cost import (
    L40S,
    P100,
    P150,
    CostError,
    CostScenario,
    DeviceProfile,
    audio_seconds_per_second,
    cost_gain,
    cost_table_csv,
    fleet,
)

GOLDEN = Path(__file__).parent / "golden"


def test_rates():
    assert audio_seconds_per_second(L40S) == 50
    assert audio_seconds_per_second(P150) == 20
    assert audio_seconds_per_second(DeviceProfile("rt", 1, 1, 5, 5)) == 1


def test_gains():
    assert cost_gain(P150, L40S) == Fraction(180, 70)
    assert round(float(cost_gain(P150, L40S)), 1) == 2.6
    assert cost_gain(P100, L40S) == Fraction(18, 5)
    assert cost_gain(L40S, L40S) == 1


def test_fleet_examples():
    ceil = CostScenario(rounding="ceil")
    paper = CostScenario(rounding="paper")
    assert fleet(L40S, ceil) == (11, 99000)
    assert fleet(P150, ceil) == (28, 39200)
    assert fleet(P150, paper) == (27, 37800)
    assert fleet(P100, paper) == (27, 27000)
    assert 3 <= fleet(L40S, paper)[1] / fleet(P100, paper)[1] <= 4


@pytest.mark.parametrize("need", [1, 49, 50, 51, 550, 999, 1001])
@pytest.mark.parametrize("device", [L40S, P150, P100])
def test_ceil_is_minimal(device, need):
    count, _ = fleet(device, CostScenario(audio_seconds_per_second=need))
    rate = audio_seconds_per_second(device)
    assert count * rate >= need
    assert (count - 1) * rate < need


@pytest.mark.parametrize("k", [Fraction(1, 3), 2, 7])
def test_scale_invariance(k):
    def scaled(d):
        return DeviceProfile(d.name, d.unit_cost * k, d.concurrency, d.latency)

    sc = CostScenario()
    assert fleet(scaled(P150), sc)[1] == k * fleet(P150, sc)[1]
    assert cost_gain(scaled(P150), scaled(L40S)) == cost_gain(P150, L40S)


def test_invalid_profiles_and_scenarios():
    with pytest.raises(CostError):
        DeviceProfile("x", 100, 0, 1)
    with pytest.raises(CostError):
        DeviceProfile("x", -1, 1, 1)
    with pytest.raises(CostError):
        CostScenario(concurrent_requests=0)
    with pytest.raises(CostError):
        CostScenario(rounding="floor")
    with pytest.raises(CostError):
        CostScenario.from_dict({"requests": 5})


def test_table_matches_golden():
    assert cost_table_csv() == (GOLDEN / "cost_table.csv").read_text()


def test_json_roundtrip():
    d = P150.to_dict()
    assert DeviceProfile.from_dict(d) == P150
    sc = CostScenario(rounding="paper")
    assert CostScenario.from_dict(sc.to_dict()) == sc
