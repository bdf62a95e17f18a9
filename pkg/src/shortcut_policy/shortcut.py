"""Shortcut flow-matching objective on pose action chunks.

A pose is stored as 7 numbers ``(r1, r2, r3, s1, s2, s3, g)``: a canonical
rotation vector, a translation, and a gripper scalar. A chunk of ``H`` poses
is flattened pose-major. Rotations live in log coordinates for the whole
diffusion path, so interpolation and velocity are linear in every slot; the
only nonlinearity is the re-wrap of rotation slots into the pi-ball after a
step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import so3
from .diffnet import PolicyNetwork, TaskCondition, condition_rows, forward, mse

POSE_WIDTH = 7
K_SPLIT = 0.25
P_DROP = 0.1

STREAM_IDS = {"noise": 1, "t": 2, "d": 3, "dropout": 4, "data": 5, "init": 6}


class NumericalError(FloatingPointError):
    def __init__(self, message: str, record: int | None = None):
        super().__init__(message)
        self.record = record


@dataclass
class PoseAction:
    r: np.ndarray
    s: np.ndarray
    g: float

    @property
    def R(self) -> np.ndarray:
        return so3.exp_map(self.r)


@dataclass
class ActionChunk:
    """``H`` poses: rotation vectors ``r`` (H, 3), translations ``s`` (H, 3), gripper ``g`` (H,)."""

    r: np.ndarray
    s: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).reshape(-1, 3)
        self.s = np.asarray(self.s, dtype=float).reshape(-1, 3)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        if not (len(self.r) == len(self.s) == len(self.g)):
            raise ValueError("rotation, translation and gripper tracks differ in length")

    @property
    def H(self) -> int:
        return len(self.g)

    @property
    def R(self) -> np.ndarray:
        """Rotations as (H, 3, 3) matrices."""
        return so3.exp_map(self.r)

    def pose(self, k: int) -> PoseAction:
        return PoseAction(self.r[k].copy(), self.s[k].copy(), float(self.g[k]))

    @property
    def final(self) -> PoseAction:
        return self.pose(self.H - 1)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.r, self.s, self.g[:, None]], axis=1).ravel()

    @classmethod
    def from_flat(cls, x: np.ndarray) -> "ActionChunk":
        x = np.asarray(x, dtype=float).reshape(-1, POSE_WIDTH)
        return cls(x[:, 0:3], x[:, 3:6], x[:, 6])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ActionChunk):
            return NotImplemented
        return bool(np.array_equal(self.flat(), other.flat()))


def rotation_mask(H: int) -> np.ndarray:
    mask = np.zeros((H, POSE_WIDTH), dtype=bool)
    mask[:, :3] = True
    return mask.ravel()


def wrap_rotations(x: np.ndarray) -> np.ndarray:
    """Re-wrap the rotation slots of flat chunks (shape (..., 7H)) into the pi-ball."""
    x = np.array(x, dtype=float)
    poses = x.reshape(x.shape[:-1] + (-1, POSE_WIDTH))
    poses[..., :3] = so3.wrap_to_ball(poses[..., :3])
    return poses.reshape(x.shape)


def _flat(a) -> np.ndarray:
    return a.flat() if isinstance(a, ActionChunk) else np.asarray(a, dtype=float)


def _like(template, x: np.ndarray):
    return ActionChunk.from_flat(x) if isinstance(template, ActionChunk) else x


@dataclass
class StepSizeGrid:
    """Dyadic step sizes ``1, 1/2, ..., 2^-(M-1)`` plus the flow query ``d = 0``.

    The finest level is evaluated through the instantaneous-velocity query
    (``query_value``), so it needs no separate training signal.
    """

    M: int = 7

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("grid needs at least two levels")

    @property
    def values(self) -> np.ndarray:
        return 2.0 ** -np.arange(self.M)

    @property
    def finest(self) -> float:
        return 2.0 ** -(self.M - 1)

    @property
    def max_steps(self) -> int:
        return 2 ** (self.M - 1)

    @property
    def consistency_levels(self) -> np.ndarray:
        # levels m whose doubled step 2 * 2^-m is still on the grid
        return np.arange(1, self.M)

    def contains(self, d: float) -> bool:
        return d == 0.0 or bool(np.any(self.values == d))

    def nearest(self, d: float) -> float:
        vals = self.values
        return float(vals[int(np.argmin(np.abs(vals - d)))])

    def query_value(self, d) -> np.ndarray | float:
        d_arr = np.asarray(d, dtype=float)
        out = np.where(d_arr == self.finest, 0.0, d_arr)
        return float(out) if out.ndim == 0 else out


@dataclass
class RngStreams:
    """One generator per purpose, each seeded with ``seed ^ stream_id``."""

    noise: np.random.Generator
    t: np.random.Generator
    d: np.random.Generator
    dropout: np.random.Generator
    data: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        return cls(**{name: np.random.default_rng(seed ^ STREAM_IDS[name])
                      for name in ("noise", "t", "d", "dropout", "data")})

    @classmethod
    def single(cls, rng: np.random.Generator) -> "RngStreams":
        return cls(rng, rng, rng, rng, rng)

    def state(self) -> dict:
        return {name: getattr(self, name).bit_generator.state
                for name in ("noise", "t", "d", "dropout", "data")}

    @classmethod
    def from_state(cls, state: dict) -> "RngStreams":
        gens = {}
        for name, st in state.items():
            g = np.random.default_rng()
            g.bit_generator.state = st
            gens[name] = g
        return cls(**gens)


def as_streams(rng) -> RngStreams:
    return rng if isinstance(rng, RngStreams) else RngStreams.single(rng)


def sample_noise_flat(rng: np.random.Generator, n: int, H: int) -> np.ndarray:
    """``n`` flat noise chunks: N(0, 1) everywhere, rotation slots wrapped."""
    x = rng.normal(0.0, 1.0, size=(n, H, POSE_WIDTH))
    x[..., :3] = so3.wrap_to_ball(x[..., :3])
    return x.reshape(n, H * POSE_WIDTH)


def sample_noise_chunk(rng: np.random.Generator, H: int) -> ActionChunk:
    if H < 1:
        raise ValueError(f"horizon must be positive, got {H}")
    return ActionChunk.from_flat(sample_noise_flat(rng, 1, H)[0])


def interpolate_chunk(A0, A1, t):
    """``(1 - t) A0 + t A1`` slot-wise; for rotations this is the log-linear path."""
    x0, x1 = _flat(A0), _flat(A1)
    if x0.shape != x1.shape:
        raise ValueError(f"chunk shapes differ: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=float)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return _like(A0, (1.0 - t) * x0 + t * x1)


def velocity_target(A0, A1) -> np.ndarray:
    """Constant velocity of the straight path from noise ``A0`` to data ``A1``."""
    x0, x1 = _flat(A0), _flat(A1)
    if x0.shape != x1.shape:
        raise ValueError(f"chunk shapes differ: {x0.shape} vs {x1.shape}")
    return x1 - x0


def shortcut_step(At, v, d):
    """Advance by ``v * d`` and re-wrap rotation slots. ``d = 0`` is the identity."""
    x = _flat(At)
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("step size must be non-negative")
    if d.ndim == 1 and x.ndim == 2:
        d = d[:, None]
    if not np.any(d):
        return _like(At, x.copy())
    return _like(At, wrap_rotations(x + np.asarray(v, dtype=float) * d))


def self_consistency_target(net: PolicyNetwork, At, O, C, t, d, d_query=None) -> np.ndarray:
    """Average of two chained half-steps: ``(s(A, t, d) + s(A', t + d, d)) / 2``.

    ``d_query`` is the step-size value fed to the network (defaults to ``d``);
    the step actually taken is always ``d``. The result carries no gradient.
    """
    x = _flat(At)
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0) or np.any(t + 2.0 * d > 1.0 + 1e-12):
        raise ValueError("self-consistency target needs d > 0 and t + 2d <= 1")
    dq = d if d_query is None else np.asarray(d_query, dtype=float)
    v1 = forward(net, x, O, C, t, dq)
    x_mid = shortcut_step(x, v1, d)
    v2 = forward(net, x_mid, O, C, t + d, dq)
    return 0.5 * (v1 + v2)


def apply_condition_dropout(C: TaskCondition, rng: np.random.Generator, p_drop: float) -> TaskCondition:
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    # always consume one draw so p_drop = 0 leaves the stream aligned
    return C.null() if rng.random() < p_drop else C


def dropout_rows(rows: np.ndarray, rng: np.random.Generator, p_drop: float, num_tasks: int) -> np.ndarray:
    """Vectorized condition dropout on embedding-row indices."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    drop = rng.random(len(rows)) < p_drop
    return np.where(drop, num_tasks, rows)


@dataclass
class TrainingSet:
    """Demonstrations packed into arrays: flat chunks, observations, task ids."""

    actions: np.ndarray
    obs: np.ndarray
    task: np.ndarray

    def __len__(self) -> int:
        return len(self.task)

    @property
    def H(self) -> int:
        return self.actions.shape[1] // POSE_WIDTH

    @classmethod
    def from_demos(cls, demos: Sequence) -> "TrainingSet":
        if not demos:
            raise ValueError("dataset is empty")
        return cls(
            np.stack([d.chunk.flat() for d in demos]),
            np.stack([np.asarray(d.observation, dtype=float) for d in demos]),
            np.array([d.task_id for d in demos], dtype=np.int64),
        )


@dataclass
class ShortcutBatch:
    """Flow-matching records first, then self-consistency records.

    All fields are row-aligned arrays; ``d`` is 0 for flow records.
    """

    a1: np.ndarray
    a0: np.ndarray
    obs: np.ndarray
    cond: np.ndarray
    t: np.ndarray
    d: np.ndarray
    n_flow: int

    def __len__(self) -> int:
        return len(self.t)

    @property
    def n_consistency(self) -> int:
        return len(self) - self.n_flow

    def records(self, which: str) -> list[tuple]:
        sl = slice(0, self.n_flow) if which == "flow" else slice(self.n_flow, None)
        fields = (self.a1[sl], self.obs[sl], self.cond[sl], self.t[sl], self.a0[sl])
        if which == "flow":
            return list(zip(*fields))
        return list(zip(*fields, self.d[sl]))

    @property
    def flow_records(self) -> list[tuple]:
        return self.records("flow")

    @property
    def consistency_records(self) -> list[tuple]:
        return self.records("consistency")


def build_batch(dataset, rng, batch_size: int, grid: StepSizeGrid,
                k: float = K_SPLIT) -> ShortcutBatch:
    data = dataset if isinstance(dataset, TrainingSet) else TrainingSet.from_demos(dataset)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    streams = as_streams(rng)
    n_cons = int(round(k * batch_size))
    n_flow = batch_size - n_cons

    idx = streams.data.integers(0, len(data), size=batch_size)
    a0 = sample_noise_flat(streams.noise, batch_size, data.H)
    t_flow = streams.t.uniform(0.0, 1.0, size=n_flow)
    levels = grid.consistency_levels
    m = levels[streams.d.integers(0, len(levels), size=n_cons)]
    d = 2.0 ** -m.astype(float)
    # t = j d with j in [0, 2^m - 2] so that t + 2d <= 1
    j = streams.t.integers(0, 2**m - 1)
    t_cons = j * d
    return ShortcutBatch(
        a1=data.actions[idx],
        a0=a0,
        obs=data.obs[idx],
        cond=data.task[idx].copy(),
        t=np.concatenate([t_flow, t_cons]),
        d=np.concatenate([np.zeros(n_flow), d]),
        n_flow=n_flow,
    )


@dataclass
class LossReport:
    loss: float
    flow: float
    consistency: float
    grads: dict = field(repr=False, default_factory=dict)


def shortcut_targets(net: PolicyNetwork, batch: ShortcutBatch, grid: StepSizeGrid | None = None):
    """Inputs and regression targets for one batch.

    Returns ``(At, t, d_query, target)`` row-aligned with the batch.
    """
    nf = batch.n_flow
    At = interpolate_chunk(batch.a0, batch.a1, batch.t)
    target = np.empty_like(At)
    target[:nf] = velocity_target(batch.a0[:nf], batch.a1[:nf])
    d_query = np.zeros(len(batch))
    if batch.n_consistency:
        sl = slice(nf, None)
        d = batch.d[sl]
        dq = d if grid is None else grid.query_value(d)
        target[sl] = self_consistency_target(net, At[sl], batch.obs[sl], batch.cond[sl],
                                             batch.t[sl], d, dq)
        d_query[sl] = 2.0 * d
    return At, batch.t, d_query, target


def shortcut_loss(net: PolicyNetwork, batch: ShortcutBatch, mode: str | None = None,
                  grid: StepSizeGrid | None = None) -> LossReport:
    """Mean-squared shortcut objective over all records, with exact gradients.

    Flow records regress ``net(At, t, 0)`` onto ``A1 - A0``; consistency
    records regress ``net(At, t, 2d)`` onto the stop-gradient two-half-step
    target. Rotation, translation and gripper residuals share unit weight.
    """
    At, t, d_query, target = shortcut_targets(net, batch, grid)
    pred, tape = forward(net, At, batch.obs, batch.cond, t, d_query, mode=mode, record=True)
    resid = pred - target
    bad = ~np.all(np.isfinite(resid), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NumericalError(f"non-finite loss contribution at record {i}", record=i)
    loss, dpred = mse(pred, target)
    grads = tape.backward(dpred)
    nf = batch.n_flow
    flow = float(np.mean(resid[:nf] ** 2)) if nf else 0.0
    cons = float(np.mean(resid[nf:] ** 2)) if batch.n_consistency else 0.0
    return LossReport(loss, flow, cons, grads)


__all__ = [
    "ActionChunk", "PoseAction", "TaskCondition", "StepSizeGrid", "ShortcutBatch",
    "TrainingSet", "RngStreams", "NumericalError", "LossReport", "condition_rows",
    "sample_noise_chunk", "sample_noise_flat", "interpolate_chunk", "velocity_target",
    "shortcut_step", "self_consistency_target", "apply_condition_dropout", "dropout_rows",
    "build_batch", "shortcut_loss", "shortcut_targets", "wrap_rotations", "rotation_mask",
]
