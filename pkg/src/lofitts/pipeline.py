"""Seeded desk-scale diffusion acoustic model plus overlap-add vocoder.

The denoiser is an MLP applied once per diffusion step to a persistent
``frames x latent_dim`` latent; the vocoder is a stack of tanh layers followed
by a fixed projection onto a bank of sinusoids, assembled into a waveform by
50%-overlap Hann overlap-add.  Each unrolled layer (``denoiser_layers`` per
step plus ``vocoder_layers``) is a separately assignable precision site.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .assignment import BASELINE, AssignmentError, PrecisionAssignment
from .bfp import BFP8, bfp_roundtrip, round_scalar
from .fidelity import fidelity_matmul, reference_matmul


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    latent_dim: int = 64
    frames: int = 32
    diffusion_steps: int = 8
    denoiser_layers: int = 6
    vocoder_layers: int = 4
    samples_per_frame: int = 128
    sample_rate: int = 24000
    # None means 1 / diffusion_steps
    step_size: Optional[float] = None
    # LoFi keeps this many leading weight bits; see README for why not 2
    weight_chunk_bits: int = 5
    activation_chunk_bits: int = 14

    def __post_init__(self) -> None:
        for name in ("latent_dim", "frames", "diffusion_steps", "denoiser_layers",
                     "vocoder_layers", "samples_per_frame", "sample_rate",
                     "weight_chunk_bits", "activation_chunk_bits"):
            if getattr(self, name) < 1:
                raise PipelineError(f"{name} must be >= 1")
        if self.samples_per_frame % 2:
            raise PipelineError("samples_per_frame must be even")

    @property
    def alpha(self) -> float:
        return 1.0 / self.diffusion_steps if self.step_size is None else self.step_size

    @property
    def n_layers(self) -> int:
        return self.denoiser_layers * self.diffusion_steps + self.vocoder_layers

    @property
    def n_samples(self) -> int:
        return self.frames * self.samples_per_frame

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PipelineError(f"unknown pipeline config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LatentState:
    step_index: int
    values: np.ndarray


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.samples, dtype="<f8").tobytes()).hexdigest()


def denoiser_layer_id(step: int, layer: int) -> str:
    return f"diffusion.s{step}.l{layer}"


def vocoder_layer_id(layer: int) -> str:
    return f"vocoder.l{layer}"


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


@dataclass(frozen=True, eq=False)
class Pipeline:
    config: PipelineConfig
    denoiser_weights: tuple[np.ndarray, ...]
    denoiser_biases: tuple[np.ndarray, ...]
    time_embedding: np.ndarray
    vocoder_weights: tuple[np.ndarray, ...]
    vocoder_biases: tuple[np.ndarray, ...]
    projection: np.ndarray
    initial_noise: np.ndarray
    _stored: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        for fmt, fn in (("BF16", lambda w: round_scalar(w, "BF16")), ("BFP8", lambda w: bfp_roundtrip(w, BFP8))):
            self._stored[fmt] = (
                tuple(fn(w) for w in self.denoiser_weights),
                tuple(fn(w) for w in self.vocoder_weights),
            )
        for arrays in self._stored.values():
            for group in arrays:
                for w in group:
                    w.setflags(write=False)

    @property
    def layer_ids(self) -> list[str]:
        cfg = self.config
        ids = [denoiser_layer_id(t, i) for t in range(cfg.diffusion_steps) for i in range(cfg.denoiser_layers)]
        return ids + [vocoder_layer_id(j) for j in range(cfg.vocoder_layers)]

    @property
    def diffusion_layer_ids(self) -> list[str]:
        return self.layer_ids[: self.config.denoiser_layers * self.config.diffusion_steps]

    @property
    def vocoder_layer_ids(self) -> list[str]:
        return self.layer_ids[self.config.denoiser_layers * self.config.diffusion_steps :]

    def baseline_assignment(self) -> PrecisionAssignment:
        return PrecisionAssignment.uniform(self.layer_ids, BASELINE)

    def stored_weight(self, kind: str, index: int, fmt: str) -> np.ndarray:
        """Weight matrix as the layer sees it after storage in ``fmt``."""
        denoise, vocode = self._stored[fmt]
        return (denoise if kind == "denoiser" else vocode)[index]

    def weight_checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (*self.denoiser_weights, *self.denoiser_biases, self.time_embedding,
                    *self.vocoder_weights, *self.vocoder_biases, self.projection, self.initial_noise):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def with_zero_biases(self) -> "Pipeline":
        """Copy with every additive term (biases, time embedding) zeroed."""
        return Pipeline(
            self.config,
            self.denoiser_weights,
            tuple(np.zeros_like(b) for b in self.denoiser_biases),
            np.zeros_like(self.time_embedding),
            self.vocoder_weights,
            tuple(np.zeros_like(b) for b in self.vocoder_biases),
            self.projection,
            self.initial_noise,
        )

    def initial_state(self) -> LatentState:
        return LatentState(0, self.initial_noise.copy())

    def _matmul(self, h: np.ndarray, kind: str, index: int, layer_id: str, assignment) -> np.ndarray:
        prec = assignment[layer_id]
        w = self.stored_weight(kind, index, prec.storage_format)
        cfg = self.config
        return fidelity_matmul(h, w, prec.fidelity, (cfg.activation_chunk_bits, cfg.weight_chunk_bits))

    def denoiser_output(self, state: LatentState, assignment: PrecisionAssignment) -> np.ndarray:
        cfg = self.config
        t = state.step_index
        h = state.values + self.time_embedding[t]
        for i in range(cfg.denoiser_layers):
            z = self._matmul(h, "denoiser", i, denoiser_layer_id(t, i), assignment) + self.denoiser_biases[i]
            h = np.tanh(z) if i < cfg.denoiser_layers - 1 else z
        return h


def init_pipeline(config: PipelineConfig = PipelineConfig()) -> Pipeline:
    """Materialize all weights from a PCG64 generator seeded with ``config.seed``."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d = config.latent_dim
    frame_len = 2 * config.samples_per_frame

    den_w = tuple(rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(config.denoiser_layers))
    den_b = tuple(0.1 * rng.standard_normal(d) for _ in range(config.denoiser_layers))
    temb = 0.5 * rng.standard_normal((config.diffusion_steps, d))
    voc_w = tuple(1.5 * rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(config.vocoder_layers))
    voc_b = tuple(0.1 * rng.standard_normal(d) for _ in range(config.vocoder_layers))

    # sinusoid bank: log-spaced partials with 1/f roll-off
    freqs = np.geomspace(80.0, 0.4 * config.sample_rate, d) * rng.uniform(0.97, 1.03, d)
    phases = rng.uniform(0, 2 * np.pi, d)
    n = np.arange(frame_len) / config.sample_rate
    amp = (freqs[0] / freqs) ** 0.5
    proj = amp[:, None] * np.sin(2 * np.pi * freqs[:, None] * n[None, :] + phases[:, None]) / np.sqrt(d)

    noise = rng.standard_normal((config.frames, d))
    return Pipeline(config, den_w, den_b, temb, voc_w, voc_b, proj, noise)


def _check_assignment(pipeline: Pipeline, assignment: PrecisionAssignment, layer_ids) -> None:
    missing = [lid for lid in layer_ids if lid not in assignment]
    if missing:
        raise AssignmentError(f"assignment is missing layers: {missing}")


def denoise_step(pipeline: Pipeline, state: LatentState, step: int, assignment: PrecisionAssignment) -> LatentState:
    cfg = pipeline.config
    if step != state.step_index:
        raise PipelineError(f"step {step} does not match state step_index {state.step_index}")
    if not 0 <= step < cfg.diffusion_steps:
        raise PipelineError(f"step {step} outside [0, {cfg.diffusion_steps})")
    _check_assignment(pipeline, assignment, [denoiser_layer_id(step, i) for i in range(cfg.denoiser_layers)])
    f = pipeline.denoiser_output(state, assignment)
    return LatentState(step + 1, state.values - cfg.alpha * f)


def diffusion_trajectory(pipeline: Pipeline, assignment: PrecisionAssignment) -> list[LatentState]:
    """All latents from the initial noise through the final step."""
    _check_assignment(pipeline, assignment, pipeline.diffusion_layer_ids)
    states = [pipeline.initial_state()]
    for t in range(pipeline.config.diffusion_steps):
        states.append(denoise_step(pipeline, states[-1], t, assignment))
    return states


def run_diffusion(pipeline: Pipeline, assignment: PrecisionAssignment) -> LatentState:
    return diffusion_trajectory(pipeline, assignment)[-1]


def vocode(pipeline: Pipeline, state: LatentState, assignment: PrecisionAssignment) -> Waveform:
    cfg = pipeline.config
    _check_assignment(pipeline, assignment, pipeline.vocoder_layer_ids)
    h = state.values
    for j in range(cfg.vocoder_layers):
        h = np.tanh(pipeline._matmul(h, "vocoder", j, vocoder_layer_id(j), assignment) + pipeline.vocoder_biases[j])
    frames = reference_matmul(h, pipeline.projection) * _hann(2 * cfg.samples_per_frame)
    hop = cfg.samples_per_frame
    buf = np.zeros((cfg.frames + 1) * hop)
    for t in range(cfg.frames):
        buf[t * hop : t * hop + 2 * hop] += frames[t]
    return Waveform(buf[hop // 2 : hop // 2 + cfg.n_samples], cfg.sample_rate)


def run_e2e(pipeline: Pipeline, assignment: PrecisionAssignment) -> Waveform:
    _check_assignment(pipeline, assignment, pipeline.layer_ids)
    return vocode(pipeline, run_diffusion(pipeline, assignment), assignment)


def latent_divergence(pipeline: Pipeline, assignment: PrecisionAssignment,
                      baseline: Optional[PrecisionAssignment] = None) -> list[float]:
    """L2 distance between the two trajectories after each step 1..T."""
    baseline = baseline or pipeline.baseline_assignment()
    test = diffusion_trajectory(pipeline, assignment)
    ref = diffusion_trajectory(pipeline, baseline)
    return [float(np.linalg.norm(a.values - b.values)) for a, b in zip(test[1:], ref[1:])]
