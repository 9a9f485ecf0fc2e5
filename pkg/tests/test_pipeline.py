from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from lofitts.assignment import DEMOTED, AssignmentError, LayerPrecision, PrecisionAssignment
from lofitts.pipeline import (
    LatentState,
    PipelineConfig,
    PipelineError,
    denoise_step,
    diffusion_trajectory,
    init_pipeline,
    latent_divergence,
    run_diffusion,
    run_e2e,
    vocode,
)
from oracles import bf16_bits_round


def straight_line(pipe) -> np.ndarray:
    """Full-precision synthesis written out step by step."""
    cfg = pipe.config

    def mm(h, w):
        acc = np.zeros((h.shape[0], w.shape[1]))
        for k in range(h.shape[1]):
            acc = acc + np.outer(h[:, k], w[k, :])
        return acc

    x = pipe.initial_noise.copy()
    for t in range(cfg.diffusion_steps):
        h = x + pipe.time_embedding[t]
        for i in range(cfg.denoiser_layers):
            z = mm(h, bf16_bits_round(pipe.denoiser_weights[i])) + pipe.denoiser_biases[i]
            h = np.tanh(z) if i + 1 < cfg.denoiser_layers else z
        x = x - h / cfg.diffusion_steps
    h = x
    for j in range(cfg.vocoder_layers):
        h = np.tanh(mm(h, bf16_bits_round(pipe.vocoder_weights[j])) + pipe.vocoder_biases[j])
    n = 2 * cfg.samples_per_frame
    window = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)])
    frames = mm(h, pipe.projection) * window
    hop = cfg.samples_per_frame
    out = np.zeros(hop * (cfg.frames + 1))
    for t in range(cfg.frames):
        out[t * hop : t * hop + n] += frames[t]
    return out[hop // 2 : hop // 2 + cfg.frames * hop]


def test_layer_count(pipeline):
    assert len(pipeline.layer_ids) == 52 == pipeline.config.n_layers
    assert len(set(pipeline.layer_ids)) == 52


def test_seed_determinism():
    a = init_pipeline(PipelineConfig(seed=3))
    b = init_pipeline(PipelineConfig(seed=3))
    c = init_pipeline(PipelineConfig(seed=4))
    assert a.weight_checksum() == b.weight_checksum() != c.weight_checksum()


def test_config_validation():
    with pytest.raises(PipelineError):
        PipelineConfig(frames=0)
    with pytest.raises(PipelineError):
        PipelineConfig.from_dict({"bogus": 1})


def test_full_precision_matches_straight_line(pipeline):
    wave = run_e2e(pipeline, pipeline.baseline_assignment())
    assert np.array_equal(wave.samples, straight_line(pipeline))


def test_waveform_shape(pipeline):
    wave = run_e2e(pipeline, pipeline.baseline_assignment())
    assert wave.samples.shape == (32 * 128,)
    assert np.isfinite(wave.samples).all()


def test_zero_fixed_point(pipeline):
    zero_net = pipeline.with_zero_biases()
    state = LatentState(0, np.zeros_like(pipeline.initial_noise))
    for prec in (LayerPrecision(), DEMOTED, LayerPrecision("BFP8", "HiFi2")):
        assignment = PrecisionAssignment.uniform(pipeline.layer_ids, prec)
        s = state
        for t in range(pipeline.config.diffusion_steps):
            s = denoise_step(zero_net, s, t, assignment)
            assert not s.values.any()


def test_step_mismatch(pipeline):
    with pytest.raises(PipelineError):
        denoise_step(pipeline, pipeline.initial_state(), 1, pipeline.baseline_assignment())


def test_missing_layers_listed(pipeline):
    partial = PrecisionAssignment({lid: LayerPrecision() for lid in pipeline.layer_ids[:-2]})
    with pytest.raises(AssignmentError, match="vocoder.l2"):
        run_e2e(pipeline, partial)


def test_vocoder_precision_cannot_touch_latent(pipeline):
    base = pipeline.baseline_assignment()
    voc = base.with_layers({lid: DEMOTED for lid in pipeline.vocoder_layer_ids})
    assert np.array_equal(run_diffusion(pipeline, base).values, run_diffusion(pipeline, voc).values)
    assert not np.array_equal(run_e2e(pipeline, base).samples, run_e2e(pipeline, voc).samples)


def test_later_steps_cannot_touch_earlier(pipeline):
    base = pipeline.baseline_assignment()
    late = base.with_layers({lid: DEMOTED for lid in pipeline.layer_ids if lid.startswith("diffusion.s5.")})
    a = diffusion_trajectory(pipeline, base)
    b = diffusion_trajectory(pipeline, late)
    for t in range(6):
        assert np.array_equal(a[t].values, b[t].values)
    assert not np.array_equal(a[6].values, b[6].values)


def test_divergence_trace_grows(pipeline):
    demoted = PrecisionAssignment.uniform(pipeline.layer_ids, DEMOTED)
    trace = latent_divergence(pipeline, demoted)
    assert len(trace) == 8
    assert trace[-1] >= trace[0] > 0


def test_random_assignments_stay_finite(pipeline):
    rng = np.random.default_rng(0)
    choices = [LayerPrecision(f, lvl) for f in ("BF16", "BFP8") for lvl in ("LoFi", "HiFi2", "HiFi3", "HiFi4")]
    for _ in range(5):
        a = PrecisionAssignment({lid: choices[rng.integers(len(choices))] for lid in pipeline.layer_ids})
        assert np.isfinite(run_e2e(pipeline, a).samples).all()


def test_concurrent_runs_agree(pipeline):
    demoted = PrecisionAssignment.uniform(pipeline.layer_ids, DEMOTED)
    jobs = [pipeline.baseline_assignment(), demoted] * 3
    with ThreadPoolExecutor(4) as pool:
        waves = list(pool.map(lambda a: run_e2e(pipeline, a).checksum(), jobs))
    assert waves == [run_e2e(pipeline, a).checksum() for a in jobs]


def test_vocode_from_state(pipeline):
    state = run_diffusion(pipeline, pipeline.baseline_assignment())
    assert vocode(pipeline, state, pipeline.baseline_assignment()).checksum() == \
        run_e2e(pipeline, pipeline.baseline_assignment()).checksum()


def test_stored_weights_read_only(pipeline):
    w = pipeline.stored_weight("denoiser", 0, "BFP8")
    with pytest.raises(ValueError):
        w[0, 0] = 1.0
