from __future__ import annotations

import json
import time
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from lofitts import cost, repro
from lofitts.assignment import BASELINE, PrecisionAssignment
from lofitts.bfp import BFP8, BfpBlock, quantize_tensor
from lofitts.cli import main
from lofitts.dataflow import (
    ChannelClass,
    Delivery,
    GridConfig,
    compute_reduction,
    pipeline_graph,
    reference_layer_time,
    simulate,
    transfer_volume_reduction,
)
from lofitts.metrics import misalignment_demo
from lofitts.pipeline import PipelineConfig, run_e2e
from lofitts.sensitivity import LSD_FRAME, LSD_HOP, greedy_search
from oracles import bfp_block_oracle, lsd_loop

GOLDEN = Path(__file__).parent / "golden"


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


@pytest.mark.criterion(1, "device cost table")
def test_criterion_01_cost_table():
    with Timer() as t:
        crit = repro.cost_table()
    assert crit.passed, crit.detail
    # concurrency * audio seconds per request / latency
    assert Fraction(3 * 5) / Fraction("0.3") == 50
    assert Fraction(1 * 5) / Fraction("0.25") == 20
    assert cost.audio_seconds_per_second(cost.L40S) == 50
    assert cost.audio_seconds_per_second(cost.P150) == 20
    # (9000 / 50) / (1400 / 20) = 18 / 7
    assert cost.cost_gain(cost.P150, cost.L40S) == Fraction(18, 7)
    assert f"{float(Fraction(18, 7)):.1f}" == "2.6"
    assert cost.cost_gain(cost.P100, cost.L40S) == Fraction(18, 5)
    assert crit.artifacts["cost_table.csv"] == (GOLDEN / "cost_table.csv").read_text()
    assert t.seconds < 1.0


@pytest.mark.criterion(2, "fleet extrapolation")
def test_criterion_02_fleet():
    with Timer() as t:
        crit = repro.fleet()
    assert crit.passed, crit.detail
    # 550 * 5 = 2750 audio seconds within 5 s -> 550 audio-s/s required
    ceil_mode = cost.CostScenario(rounding="ceil")
    paper_mode = cost.CostScenario(rounding="paper")
    assert ceil_mode.required_rate() == 550
    assert cost.fleet(cost.L40S, ceil_mode) == (11, 99_000)
    # 550 / 20 = 27.5 is taken as 27 in the approximate mode
    assert cost.fleet(cost.P150, paper_mode) == (27, 37_800)
    assert cost.fleet(cost.P100, paper_mode) == (27, 27_000)
    assert cost.fleet(cost.P150, ceil_mode) == (28, 39_200)
    assert 3 <= cost.fleet(cost.L40S, paper_mode)[1] / cost.fleet(cost.P100, paper_mode)[1] <= 4
    assert t.seconds < 1.0


@pytest.mark.criterion(3, "channel bandwidth table")
def test_criterion_03_bandwidths():
    crit = repro.bandwidths()
    assert crit.passed
    expected = [94e12, 47e12, 24e12, 16e12, 5e12, 512e9, 1e12]
    order = ["SramLocal", "SramNeighbor", "SramMulticast", "SramGather3Hop",
             "SramGather10Hop", "DramRow", "EthernetColumn"]
    grid = GridConfig()
    for name, bw in zip(order, expected):
        assert grid.bandwidth_of(ChannelClass(name)) == bw


@pytest.mark.criterion(4, "BFP8 round-trip bound on 1e5 blocks")
def test_criterion_04_bfp_bound():
    with Timer() as t:
        crit = repro.bfp_bound(100_000)
    assert crit.passed, crit.detail
    assert crit.detail["blocks"] == 100_000
    assert t.seconds < 30.0
    # the same stream, cross-checked block by block against exact rational rounding
    x = np.random.default_rng(0).uniform(-1.0, 1.0, size=(100_000, 16))
    t = quantize_tensor(x[:2000])
    for i in range(0, 2000, 4):
        e, s, m = bfp_block_oracle(x[i].tolist(), BFP8.mantissa_bits, BFP8.exponent_bits)
        assert t.blocks[i] == BfpBlock(e, tuple(s), tuple(m))


@pytest.mark.criterion(5, "fidelity anchor on 1e3 tile pairs")
def test_criterion_05_fidelity():
    with Timer() as t:
        crit = repro.fidelity_anchor(1000)
    assert crit.passed, crit.detail
    assert crit.detail["hifi4_bit_exact"] == 1000
    assert crit.detail["lofi_bound_violations"] == 0
    assert 0 < crit.detail["lofi_worst_err_over_bound"] <= 1
    assert t.seconds < 60.0


@pytest.mark.criterion(6, "simulator conservation, dominance, monotonicity on 100 graphs")
def test_criterion_06_simulator_properties():
    with Timer() as t:
        crit = repro.simulator_properties(100)
    assert crit.passed, crit.detail
    assert crit.detail["graphs"] == 100
    assert t.seconds < 120.0
    # independent audit on a few fresh graphs: recount DRAM reads from the raw event list
    rng = np.random.default_rng(99)
    for _ in range(10):
        grid = GridConfig(rows=3, cols=3)
        graph = repro.random_graph(rng, grid)
        a = repro.random_assignment(rng, graph)
        for mode in Delivery:
            rep = simulate(graph, grid, a, mode, trace=True)
            dram = [ev for ev in rep.events if ev["channel"] == "DramRow"]
            assert sum(ev["bytes"] for ev in dram if ev["kind"] != "out_dram") == rep.dram_reads
            assert sum(ev["bytes"] for ev in dram if ev["kind"] == "out_dram") == rep.dram_writes


@pytest.mark.criterion(7, "layer-time calibration within 20% of 31 us")
def test_criterion_07_calibration():
    golden = json.loads(resources.files("lofitts").joinpath("data/calibration.json").read_text())
    crit = repro.calibration()
    assert crit.passed, crit.detail
    grid = GridConfig()
    assert grid.mac_rate == golden["mac_rate"]
    span = reference_layer_time(grid)
    assert abs(span - 31e-6) <= 0.2 * 31e-6
    assert span == pytest.approx(golden["fitted_span_s"], rel=1e-9)


@pytest.mark.criterion(8, "co-design witnesses")
def test_criterion_08_codesign(pipeline, sweep):
    with Timer() as t:
        crit = repro.codesign(1.0)
        assignment = greedy_search(pipeline, 1.0, sweep)
    assert crit.passed, crit.detail["checks"]
    pinned = PrecisionAssignment.from_dict(json.loads((GOLDEN / "pinned_assignment.json").read_text()))
    assert assignment == pinned
    assert pinned.coverage_bfp8() >= 0.80 and pinned.coverage_lofi() >= 0.95

    reference = run_e2e(pipeline, pipeline.baseline_assignment()).samples
    test = run_e2e(pipeline, pinned).samples
    assert lsd_loop(test, reference, LSD_FRAME, LSD_HOP) <= 1.0

    grid = GridConfig()
    graph = pipeline_graph(PipelineConfig(), grid)
    base = PrecisionAssignment.uniform(pipeline.layer_ids, BASELINE)
    assert transfer_volume_reduction(graph, grid, pinned, base)["reduction"] >= 1.8
    assert compute_reduction(pinned, base, graph)["diffusion"] == 4.0
    fusion = json.loads((GOLDEN / "vocoder_fusion.json").read_text())
    fused = PrecisionAssignment.from_dict(fusion["assignment"])
    assert compute_reduction(fused, base, graph)["vocoder"] == 8.0
    decomposition = fusion["vocoder_decomposition"]
    assert decomposition["fidelity_speedup"] * decomposition["tiles_fused_per_op"] == 8.0
    assert json.loads(crit.artifacts["vocoder_fusion.json"]) == fusion
    assert t.seconds < 300.0


@pytest.mark.criterion(9, "PCC/LSD misalignment witness")
def test_criterion_09_misalignment():
    crit = repro.misalignment()
    assert crit.passed, crit.detail
    (reference, test), report = misalignment_demo()
    assert np.corrcoef(reference, test)[0, 1] >= 0.999
    assert lsd_loop(test, reference, 512, 256) >= 1.0
    assert misalignment_demo()[1] == report


@pytest.mark.criterion(10, "repro all is byte-identical across runs")
def test_criterion_10_determinism(tmp_path):
    trees = []
    for name in ("a", "b"):
        root = tmp_path / name
        assert main(["repro", "all", "--out", str(root)]) == 0
        trees.append({p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    assert trees[0] == trees[1]
    assert len(trees[0]) >= 15
    summary = json.loads(trees[0]["acceptance.json"])
    assert summary["all_passed"] is True
