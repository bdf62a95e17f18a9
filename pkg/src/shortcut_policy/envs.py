"""Scripted toy manipulation tasks sharing one tabletop scene.

Scene objects, by index: 0 bottle, 1 apple, 2 cup, 3 cup mat, 4-5 distractors.

* task 0, reorient: rotate the bottle upright in place
* task 1, reach-lift: reach the apple and lift it 0.2 units
* task 2, place: carry the cup onto the mat, keeping its orientation

Episodes are open-loop: one chunk is generated and its final pose is scored.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import so3
from .diffnet import PolicyNetwork, TaskCondition
from .shortcut import POSE_WIDTH, ActionChunk, PoseAction, sample_noise_chunk

HORIZON = 8
N_OBJECTS = 6
N_DISTRACTORS = 2
MIN_SEPARATION = 0.1
MAX_TILT = np.pi / 2
HOME = np.array([0.5, 0.5, 0.5])
LIFT = 0.2
EPS_S = 0.05
EPS_R = 0.1
OBS_DIM = N_OBJECTS * 7

TASK_OBJECTS = {0: (0,), 1: (1,), 2: (2, 3)}
TASK_NAMES = {0: "reorient", 1: "reach-lift", 2: "place"}


class SceneError(RuntimeError):
    pass


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    eps_s: float = EPS_S
    eps_R: float = EPS_R

    def __post_init__(self):
        if self.task_id not in TASK_NAMES:
            raise ValueError(f"unknown task id {self.task_id}")
        if self.eps_s <= 0 or self.eps_R <= 0:
            raise ValueError("success tolerances must be positive")

    @property
    def name(self) -> str:
        return TASK_NAMES[self.task_id]

    @property
    def expert(self) -> str:
        return f"scripted-{self.name}"


TASKS = {i: TaskSpec(i) for i in TASK_NAMES}


@dataclass
class Scene:
    positions: np.ndarray  # (N_OBJECTS, 3)
    rotvecs: np.ndarray  # (N_OBJECTS, 3), canonical rotation vectors
    distractor: np.ndarray  # (N_OBJECTS,) bool
    seed: int | None = None

    @property
    def orientations(self) -> np.ndarray:
        return so3.exp_map(self.rotvecs)

    @property
    def distractor_count(self) -> int:
        return int(self.distractor.sum())

    @property
    def task_objects(self) -> dict[int, tuple[int, ...]]:
        return TASK_OBJECTS

    def observation(self) -> np.ndarray:
        return np.concatenate([self.positions.ravel(), self.rotvecs.ravel(),
                               self.distractor.astype(float)])

    @classmethod
    def from_observation(cls, obs) -> "Scene":
        obs = np.asarray(obs, dtype=float)
        if obs.shape != (OBS_DIM,):
            raise ValueError(f"observation has shape {obs.shape}, expected ({OBS_DIM},)")
        n = N_OBJECTS
        return cls(obs[:3 * n].reshape(n, 3).copy(), obs[3 * n:6 * n].reshape(n, 3).copy(),
                   obs[6 * n:] > 0.5)


def _random_rotvec(rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, MAX_TILT)


def make_scene(rng, max_tries: int = 1000) -> Scene:
    """Uniform placement in the unit cube with rejection on pairwise separation."""
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    positions: list[np.ndarray] = []
    for _ in range(N_OBJECTS):
        for _attempt in range(max_tries):
            p = rng.uniform(0.0, 1.0, size=3)
            if all(np.linalg.norm(p - q) >= MIN_SEPARATION for q in positions):
                positions.append(p)
                break
        else:
            raise SceneError(f"could not place object {len(positions)} after {max_tries} tries")
    rotvecs = np.stack([_random_rotvec(rng) for _ in range(N_OBJECTS)])
    distractor = np.zeros(N_OBJECTS, dtype=bool)
    distractor[N_OBJECTS - N_DISTRACTORS:] = True
    return Scene(np.stack(positions), rotvecs, distractor, seed)


def goal_pose(task: TaskSpec, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Scene-dependent goal translation and rotation matrix."""
    if task.task_id == 0:
        return scene.positions[0].copy(), np.eye(3)
    if task.task_id == 1:
        return scene.positions[1] + np.array([0.0, 0.0, LIFT]), np.eye(3)
    return scene.positions[3].copy(), so3.exp_map(scene.rotvecs[2])


def expert_chunk(task: TaskSpec, scene: Scene, H: int = HORIZON) -> ActionChunk:
    if H < 4:
        raise ValueError("expert scripts need a horizon of at least 4")
    for obj in TASK_OBJECTS[task.task_id]:
        if obj >= len(scene.positions) or scene.distractor[obj]:
            raise SceneError(f"scene lacks object {obj} needed by task {task.name}")
    k = np.arange(H)
    alpha = k / (H - 1)
    g = np.ones(H)
    if task.task_id == 0:
        p = scene.positions[0]
        r = (1.0 - alpha)[:, None] * scene.rotvecs[0]
        s = np.tile(p, (H, 1))
        g[0] = 0.0
    elif task.task_id == 1:
        p = scene.positions[1]
        reach = H - 3
        s = np.empty((H, 3))
        s[:reach + 1] = HOME + (k[:reach + 1] / reach)[:, None] * (p - HOME)
        s[reach + 1] = p + np.array([0.0, 0.0, LIFT / 2])
        s[reach + 2] = p + np.array([0.0, 0.0, LIFT])
        r = np.zeros((H, 3))
        g[:reach] = 0.0
    else:
        start, target = scene.positions[2], scene.positions[3]
        s = (1.0 - alpha)[:, None] * start + alpha[:, None] * target
        r = np.tile(scene.rotvecs[2], (H, 1))
        g[0] = 0.0
    return ActionChunk(r, s, g)


def pose_errors(task: TaskSpec, final: PoseAction, scene: Scene) -> tuple[float, float]:
    s_goal, R_goal = goal_pose(task, scene)
    return (float(np.linalg.norm(np.asarray(final.s) - s_goal)),
            so3.geodesic_distance(final.R, R_goal))


def success(task: TaskSpec, final: PoseAction, scene: Scene) -> bool:
    """Closed thresholds on translation error and geodesic rotation error."""
    if not (np.all(np.isfinite(final.r)) and np.all(np.isfinite(final.s))):
        return False
    ds, dR = pose_errors(task, final, scene)
    return ds <= task.eps_s and dR <= task.eps_R


# -- demonstrations ------------------------------------------------------------


@dataclass
class Demonstration:
    task_id: int
    observation: np.ndarray
    chunk: ActionChunk

    def __eq__(self, other) -> bool:
        if not isinstance(other, Demonstration):
            return NotImplemented
        return (self.task_id == other.task_id
                and np.array_equal(self.observation, other.observation)
                and self.chunk == other.chunk)


def collect_demos(task: TaskSpec, n: int, rng: np.random.Generator, H: int = HORIZON) -> list[Demonstration]:
    demos = []
    for _ in range(n):
        scene = make_scene(rng)
        demos.append(Demonstration(task.task_id, scene.observation(), expert_chunk(task, scene, H)))
    return demos


DATA_MAGIC = "SDPDATA"
DATA_VERSION = "v1"


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def write_dataset(path, demos: Sequence[Demonstration], H: int = HORIZON,
                  obs_dim: int = OBS_DIM) -> None:
    lines = [f"{DATA_MAGIC} {DATA_VERSION} H={H} obs_dim={obs_dim}"]
    for i, demo in enumerate(demos):
        if demo.chunk.H != H or len(demo.observation) != obs_dim:
            raise DatasetError(f"demonstration {i} does not match H={H} obs_dim={obs_dim}")
        lines.append(f"{demo.task_id}|{_fmt(demo.observation)}|{_fmt(demo.chunk.flat())}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_header(path) -> tuple[int, int]:
    with open(path) as fh:
        first = fh.readline()
    return _parse_header(first)


def _parse_header(line: str) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != DATA_MAGIC:
        raise DatasetError("missing SDPDATA header", line=1)
    if parts[1] != DATA_VERSION:
        raise DatasetError(f"unsupported dataset version {parts[1]!r}", line=1)
    try:
        H = int(parts[2].removeprefix("H="))
        obs_dim = int(parts[3].removeprefix("obs_dim="))
    except ValueError:
        raise DatasetError("malformed header fields", line=1) from None
    return H, obs_dim


def read_dataset(path) -> list[Demonstration]:
    text = Path(path).read_text()
    lines = text.split("\n")
    if not lines or not lines[0]:
        raise DatasetError("empty file", line=1)
    H, obs_dim = _parse_header(lines[0])
    if lines[-1] == "":
        lines = lines[:-1]
    elif len(lines) > 1:
        raise DatasetError("record is not newline-terminated (truncated file?)", line=len(lines))
    demos = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("|")
        if len(fields) != 3:
            raise DatasetError(f"expected 3 '|'-separated fields, got {len(fields)}", line=lineno)
        try:
            task_id = int(fields[0])
            obs = np.array([float(x) for x in fields[1].split()])
            flat = np.array([float(x) for x in fields[2].split()])
        except ValueError as exc:
            raise DatasetError(f"unparsable number ({exc})", line=lineno) from None
        if obs.shape != (obs_dim,):
            raise DatasetError(f"observation has {obs.size} values, expected {obs_dim}", line=lineno)
        if flat.shape != (H * POSE_WIDTH,):
            raise DatasetError(f"chunk has {flat.size} values, expected {H * POSE_WIDTH}", line=lineno)
        if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(flat))):
            raise DatasetError("non-finite value in record", line=lineno)
        try:
            chunk = ActionChunk.from_flat(flat)
        except ValueError as exc:
            raise DatasetError(str(exc), line=lineno) from None
        demos.append(Demonstration(task_id, obs, chunk))
    return demos


# -- evaluation ------------------------------------------------------------------

Policy = Callable[[np.ndarray, TaskCondition, np.random.Generator], ActionChunk]


def expert_policy(task: TaskSpec) -> Policy:
    """Scripted expert reading the scene back from the observation."""

    def policy(obs, cond, rng):
        return expert_chunk(task, Scene.from_observation(obs))

    return policy


def noise_policy(H: int = HORIZON) -> Policy:
    def policy(obs, cond, rng):
        return sample_noise_chunk(rng, H)

    return policy


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SDP_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_episodes(policy, task: TaskSpec, episodes: int, rng: np.random.Generator,
                      label: int | None = None, cfg=None) -> np.ndarray:
    """Per-episode success flags; ``label`` overrides the condition fed to the policy."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    if isinstance(policy, PolicyNetwork):
        from .sampler import as_policy

        if cfg is None:
            raise ValueError("a sampler config is required to evaluate a network")
        policy = as_policy(policy, cfg)
    cond = TaskCondition(task.task_id if label is None else label)
    seeds = rng.integers(0, 2**63 - 1, size=episodes)

    def run(i: int) -> bool:
        scene = make_scene(np.random.default_rng([int(seeds[i]), 0]))
        chunk = policy(scene.observation(), cond, np.random.default_rng([int(seeds[i]), 1]))
        return success(task, chunk.final, scene)

    workers = min(_threads(), episodes)
    if workers == 1:
        flags = [run(i) for i in range(episodes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flags = list(pool.map(run, range(episodes)))
    return np.array(flags, dtype=bool)


def evaluate_policy(policy, task: TaskSpec, cfg, episodes: int, rng: np.random.Generator,
                    label: int | None = None) -> float:
    """Success rate of ``policy`` (a network sampled with ``cfg`` or a callable)."""
    flags = evaluate_episodes(policy, task, episodes, rng, label=label, cfg=cfg)
    return float(flags.mean())
