"""Few-step shortcut generation, guided velocities, the DDPM/DDIM baseline
engine, and wall-clock latency measurement."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffnet import PolicyNetwork, forward, mse
from .shortcut import (
    ActionChunk,
    NumericalError,
    StepSizeGrid,
    TrainingSet,
    as_streams,
    sample_noise_flat,
    shortcut_step,
    wrap_rotations,
)

ENGINES = ("shortcut", "ddim")


@dataclass
class NoiseSchedule:
    """Linear variance schedule for the baseline engine.

    The default range is the standard 1000-step linear schedule rescaled to
    ``T`` steps (betas multiplied by 1000 / T) so that ``alpha_bar[T]`` is
    close to zero.
    """

    T: int = 100
    beta_start: float | None = None
    beta_end: float | None = None
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        scale = 1000.0 / self.T
        if self.beta_start is None:
            self.beta_start = 1e-4 * scale
        if self.beta_end is None:
            self.beta_end = 2e-2 * scale
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.betas = betas
        # alpha_bar[0] = 1 is the clean endpoint; alpha_bar[t] for t = 1..T
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])


@dataclass
class SamplerConfig:
    num_steps: int
    guidance: float = 0.0
    mode: str | None = None
    engine: str = "shortcut"
    grid: StepSizeGrid = field(default_factory=StepSizeGrid)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be positive, got {self.num_steps}")
        if self.guidance < 0:
            raise ValueError(f"guidance weight must be non-negative, got {self.guidance}")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")

    @property
    def step_size(self) -> float:
        return 1.0 / self.num_steps

    @property
    def step_condition(self) -> float:
        """Step-size value fed to the network: nearest grid level of 1/n."""
        return self.grid.query_value(self.grid.nearest(self.step_size))


def guided_velocity(net: PolicyNetwork, At, O, C, t, d, w: float = 0.0) -> np.ndarray:
    """``(1 + w) s(C) - w s(null)``; a single conditional call when ``w = 0``."""
    if w < 0:
        raise ValueError(f"guidance weight must be non-negative, got {w}")
    cond = forward(net, At, O, C, t, d)
    if w == 0.0:
        return cond
    n = 1 if np.ndim(At) == 1 else len(At)
    uncond = forward(net, At, O, np.full(n, net.num_tasks, dtype=np.int64), t, d)
    return (1.0 + w) * cond - w * uncond


def _check_net(net: PolicyNetwork) -> None:
    if not net.params:
        raise NumericalError("network parameters are missing")


def _check_output(v: np.ndarray) -> np.ndarray:
    # a NaN or inf parameter on the evaluated path always reaches the output,
    # which is far cheaper to scan than every parameter on every call
    if not np.all(np.isfinite(v)):
        raise NumericalError("network produced a non-finite output; parameters are likely non-finite")
    return v


def generate(net: PolicyNetwork, O, C, cfg: SamplerConfig, rng: np.random.Generator) -> ActionChunk:
    """Integrate from a noise chunk at t = 0 to t = 1 in ``cfg.num_steps`` equal steps."""
    _check_net(net)
    H = net.action_dim // 7
    x = sample_noise_flat(rng, 1, H)[0]
    n = cfg.num_steps
    d = cfg.step_size
    d_cond = cfg.step_condition
    for i in range(n):
        v = _check_output(guided_velocity(net, x, O, C, i * d, d_cond, cfg.guidance))
        x = shortcut_step(x, v, d)
    return ActionChunk.from_flat(x)


# -- baseline engine ---------------------------------------------------------


def ddpm_forward_noise(x0, t: int, schedule: NoiseSchedule, rng: np.random.Generator | None = None,
                       eps=None) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form marginal ``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    x0 = np.asarray(x0, dtype=float)
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"diffusion step must lie in [1, {schedule.T}]")
    if eps is None:
        eps = rng.normal(0.0, 1.0, size=x0.shape)
    ab = schedule.alpha_bar[t_arr]
    if np.ndim(ab) == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def ddim_timesteps(num_steps: int, T: int) -> np.ndarray:
    """Uniformly strided descending sub-schedule ``T = tau_0 > ... > tau_n = 0``."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in [1, {T}]")
    return np.round(np.linspace(T, 0, num_steps + 1)).astype(int)


def ddim_sample(net_eps: PolicyNetwork, O, C, num_steps: int, schedule: NoiseSchedule,
                rng: np.random.Generator, guidance: float = 0.0) -> ActionChunk:
    """Deterministic DDIM (eta = 0) from ``x_T ~ N(0, I)``.

    Rotation log coordinates are treated as Euclidean until the final wrap.
    """
    _check_net(net_eps)
    x = rng.normal(0.0, 1.0, size=net_eps.action_dim)
    taus = ddim_timesteps(num_steps, schedule.T)
    ab = schedule.alpha_bar
    for tau, prev in zip(taus[:-1], taus[1:]):
        eps = _check_output(guided_velocity(net_eps, x, O, C, tau / schedule.T, 0.0, guidance))
        x0 = (x - np.sqrt(1.0 - ab[tau]) * eps) / np.sqrt(ab[tau])
        x = np.sqrt(ab[prev]) * x0 + np.sqrt(1.0 - ab[prev]) * eps
    return ActionChunk.from_flat(wrap_rotations(x))


@dataclass
class DiffusionBatch:
    x0: np.ndarray
    eps: np.ndarray
    xt: np.ndarray
    obs: np.ndarray
    cond: np.ndarray
    step: np.ndarray

    def __len__(self) -> int:
        return len(self.step)


def build_ddpm_batch(dataset: TrainingSet, rng, batch_size: int,
                     schedule: NoiseSchedule) -> DiffusionBatch:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    streams = as_streams(rng)
    idx = streams.data.integers(0, len(dataset), size=batch_size)
    x0 = dataset.actions[idx]
    step = streams.t.integers(1, schedule.T + 1, size=batch_size)
    eps = streams.noise.normal(0.0, 1.0, size=x0.shape)
    xt, _ = ddpm_forward_noise(x0, step, schedule, eps=eps)
    return DiffusionBatch(x0, eps, xt, dataset.obs[idx], dataset.task[idx].copy(), step)


def ddpm_loss(net: PolicyNetwork, batch: DiffusionBatch, schedule: NoiseSchedule):
    """Noise-prediction MSE and its gradients."""
    pred, tape = forward(net, batch.xt, batch.obs, batch.cond, batch.step / schedule.T, 0.0,
                         record=True)
    resid = pred - batch.eps
    bad = ~np.all(np.isfinite(resid), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NumericalError(f"non-finite loss contribution at record {i}", record=i)
    loss, dpred = mse(pred, batch.eps)
    return loss, tape.backward(dpred)


# -- policies and timing -----------------------------------------------------


def sample(net: PolicyNetwork, O, C, cfg: SamplerConfig, rng: np.random.Generator) -> ActionChunk:
    if cfg.engine == "shortcut":
        return generate(net, O, C, cfg, rng)
    return ddim_sample(net, O, C, cfg.num_steps, cfg.schedule, rng, cfg.guidance)


def as_policy(net: PolicyNetwork, cfg: SamplerConfig):
    """Wrap a network as ``policy(obs, cond, rng) -> ActionChunk``."""

    def policy(obs, cond, rng):
        return sample(net, obs, cond, cfg, rng)

    return policy


@dataclass
class LatencyStats:
    engine: str
    steps: int
    median_ms: float
    mean_ms: float
    std_ms: float
    repeats: int


def time_inference(net: PolicyNetwork, O, C, cfg: SamplerConfig, repeats: int,
                   warmup: int = 5, seed: int = 0) -> LatencyStats:
    """Per-chunk wall-clock latency; the first ``warmup`` calls are discarded."""
    if repeats < 30:
        raise ValueError(f"repeats must be at least 30, got {repeats}")
    rng = np.random.default_rng(seed)
    for _ in range(warmup):
        sample(net, O, C, cfg, rng)
    times = np.empty(repeats)
    for i in range(repeats):
        start = time.perf_counter()
        chunk = sample(net, O, C, cfg, rng)
        chunk.R  # export to rotation matrices is part of the per-chunk cost
        times[i] = time.perf_counter() - start
    times *= 1e3
    return LatencyStats(cfg.engine, cfg.num_steps, float(np.median(times)),
                        float(np.mean(times)), float(np.std(times)), repeats)


LATENCY_HEADER = ("engine", "steps", "median_ms", "mean_ms", "std_ms", "repeats")


def format_latency_table(stats: list[LatencyStats], sep: str = "\t") -> str:
    lines = [sep.join(LATENCY_HEADER)]
    for s in stats:
        lines.append(sep.join([s.engine, str(s.steps), f"{s.median_ms:.4f}", f"{s.mean_ms:.4f}",
                               f"{s.std_ms:.4f}", str(s.repeats)]))
    return "\n".join(lines) + "\n"


__all__ = [
    "NoiseSchedule", "SamplerConfig", "LatencyStats", "DiffusionBatch", "generate",
    "guided_velocity",
    "ddpm_forward_noise", "ddim_timesteps", "ddim_sample", "build_ddpm_batch", "ddpm_loss",
    "sample", "as_policy", "time_inference", "format_latency_table",
]
