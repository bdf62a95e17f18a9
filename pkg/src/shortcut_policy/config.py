"""Flat ``key = value`` run configuration with typed validation.

Lines starting with ``#`` are comments. Lists are comma-separated. Every
key has a default; unknown keys and malformed values are rejected at load.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .diffnet import MODES


class ConfigError(ValueError):
    pass


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


# key -> (parser, comment shown in the default file)
_SCHEMA = {
    "seeds": (_ints, "training seeds; one checkpoint per seed and engine"),
    "tasks": (_ints, "task labels to generate, train and evaluate (0 reorient, 1 reach-lift, 2 place)"),
    "demos": (_int, "demonstrations per task"),
    "data_seed": (_int, "seed for scene sampling during gen-data"),
    "epochs": (_int, "training epochs"),
    "batches_per_epoch": (_int, "minibatches per epoch; 0 means one pass over the dataset"),
    "batch_size": (_int, "records per minibatch"),
    "lr": (_float, "peak AdamW learning rate"),
    "lr_schedule": (str, "constant or cosine (decay to 0 over the whole run)"),
    "weight_decay": (_float, "decoupled AdamW weight decay"),
    "k_split": (_float, "self-consistency share of each shortcut batch"),
    "grid_levels": (_int, "step-size grid size M; d ranges over 1, 1/2, ..., 2^-(M-1)"),
    "p_drop": (_float, "probability of replacing the task label by the null token"),
    "mode": (str, "conditioning mode: action-concat, obs-concat or film"),
    "film_time": (_bool, "film mode only: FiLM layers also see the t and d embeddings"),
    "hidden": (_ints, "hidden layer widths"),
    "engines": (_strs, "engines to train and evaluate: shortcut, ddim"),
    "diffusion_steps": (_int, "T of the baseline noise schedule"),
    "steps": (_ints, "sampling step counts evaluated for every engine"),
    "episodes": (_int, "evaluation episodes per (task, engine, steps, seed)"),
    "guidance": (_float, "classifier-free guidance weight w (0 disables the unconditional pass)"),
    "confusion": (_bool, "evaluate every model under every task label (multi-task runs)"),
    "confusion_steps": (_int, "shortcut step count used for the label confusion matrix"),
    "bench_repeats": (_int, "timed repeats per latency measurement (at least 30)"),
    "checkpoint_every": (_int, "also save a resumable checkpoint every N epochs; 0 saves the final one only"),
}

# keys that do not change what a training run produces
_EVAL_ONLY = {"steps", "episodes", "guidance", "confusion", "confusion_steps", "bench_repeats",
              "checkpoint_every"}


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    tasks: tuple[int, ...] = (0, 1, 2)
    demos: int = 100
    data_seed: int = 0
    epochs: int = 500
    batches_per_epoch: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    weight_decay: float = 0.1
    k_split: float = 0.25
    grid_levels: int = 7
    p_drop: float = 0.1
    mode: str = "film"
    film_time: bool = False
    hidden: tuple[int, ...] = (256, 256, 256)
    engines: tuple[str, ...] = ("shortcut", "ddim")
    diffusion_steps: int = 100
    steps: tuple[int, ...] = (10, 5, 3, 2, 1)
    episodes: int = 100
    guidance: float = 0.0
    confusion: bool = True
    confusion_steps: int = 10
    bench_repeats: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, key: str, why: str):
            if not ok:
                raise ConfigError(f"{key}: {why} (got {getattr(self, key)!r})")

        need(len(self.seeds) > 0 and all(s >= 0 for s in self.seeds), "seeds", "need non-negative seeds")
        need(len(set(self.seeds)) == len(self.seeds), "seeds", "duplicate seed")
        need(len(self.tasks) > 0 and all(t in (0, 1, 2) for t in self.tasks), "tasks", "labels must be 0, 1 or 2")
        need(len(set(self.tasks)) == len(self.tasks), "tasks", "duplicate task")
        need(self.demos >= 1, "demos", "refusing an empty dataset")
        need(self.data_seed >= 0, "data_seed", "must be non-negative")
        need(self.epochs >= 1, "epochs", "must be positive")
        need(self.batches_per_epoch >= 0, "batches_per_epoch", "must be non-negative")
        need(self.batch_size >= 4, "batch_size", "must be at least 4")
        need(self.lr > 0, "lr", "must be positive")
        need(self.lr_schedule in ("constant", "cosine"), "lr_schedule", "expected constant or cosine")
        need(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        need(0.0 < self.k_split < 1.0, "k_split", "must lie strictly inside (0, 1)")
        need(2 <= self.grid_levels <= 12, "grid_levels", "must lie in [2, 12]")
        need(0.0 <= self.p_drop <= 1.0, "p_drop", "must lie in [0, 1]")
        need(self.mode in MODES, "mode", f"expected one of {MODES}")
        need(len(self.hidden) > 0 and all(h > 0 for h in self.hidden), "hidden", "widths must be positive")
        need(len(self.engines) > 0 and all(e in ("shortcut", "ddim") for e in self.engines),
             "engines", "expected shortcut and/or ddim")
        need(len(set(self.engines)) == len(self.engines), "engines", "duplicate engine")
        need(self.diffusion_steps >= 2, "diffusion_steps", "must be at least 2")
        need(len(self.steps) > 0 and all(1 <= n <= self.diffusion_steps for n in self.steps),
             "steps", "step counts must lie in [1, diffusion_steps]")
        need(self.episodes >= 1, "episodes", "must be positive")
        need(self.guidance >= 0, "guidance", "must be non-negative")
        need(self.confusion_steps >= 1, "confusion_steps", "must be positive")
        need(self.bench_repeats >= 30, "bench_repeats", "must be at least 30")
        need(self.checkpoint_every >= 0, "checkpoint_every", "must be non-negative")

    def replace(self, **changes) -> "RunConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return RunConfig(**values)

    def items(self) -> list[tuple[str, str]]:
        return [(f.name, _format(getattr(self, f.name))) for f in fields(self)]

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    @property
    def hash(self) -> str:
        """Digest of every field; stamped on metrics rows."""
        return _digest(self.items())

    @property
    def training_hash(self) -> str:
        """Digest of the fields that determine a trained checkpoint.

        Seeds and engines are excluded: each checkpoint file is specific to one
        seed and engine already.
        """
        return _digest([(k, v) for k, v in self.items()
                        if k not in _EVAL_ONLY and k not in ("seeds", "engines")])


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _digest(items) -> str:
    text = "".join(f"{k}={v}\n" for k, v in items)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        parser = _SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def default_config_text() -> str:
    """The default configuration with one comment line per key."""
    lines = ["# shortcut-policy run configuration", ""]
    for key, value in RunConfig().items():
        lines.append(f"# {_SCHEMA[key][1]}")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
