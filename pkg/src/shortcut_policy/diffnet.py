"""Conditional MLP velocity model with reverse-mode gradients and AdamW.

The network maps ``(A, O, C, t, d)`` to a vector the size of ``A``. Every
call is batched over rows; single vectors are promoted to a batch of one.
Gradients are computed by replaying a :class:`GradientTape` recorded during
the forward pass.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

MODES = ("action-concat", "obs-concat", "film")
ACTIVATIONS = ("silu", "tanh")

CHECKPOINT_MAGIC = b"SDPCKPT v1\n"


@dataclass(frozen=True)
class TaskCondition:
    """Integer task label; ``is_null`` selects the unconditional embedding row."""

    task_id: int
    is_null: bool = False

    def row(self, num_tasks: int) -> int:
        if self.is_null:
            return num_tasks
        if not 0 <= self.task_id < num_tasks:
            raise ValueError(f"task_id {self.task_id} outside [0, {num_tasks})")
        return self.task_id

    def null(self) -> "TaskCondition":
        return TaskCondition(self.task_id, True)


def condition_rows(cond, num_tasks: int, n: int) -> np.ndarray:
    """Normalize a condition argument to an int array of embedding-table rows.

    Accepts a TaskCondition, a sequence of them, or an int array of rows
    (where ``num_tasks`` denotes the null token).
    """
    if isinstance(cond, TaskCondition):
        return np.full(n, cond.row(num_tasks), dtype=np.int64)
    if isinstance(cond, (list, tuple)) and cond and isinstance(cond[0], TaskCondition):
        rows = np.array([c.row(num_tasks) for c in cond], dtype=np.int64)
    else:
        rows = np.asarray(cond, dtype=np.int64)
        if rows.ndim == 0:
            rows = np.full(n, int(rows), dtype=np.int64)
    if rows.shape != (n,):
        raise ValueError(f"C has {rows.shape[0] if rows.ndim else 0} entries, expected {n}")
    if rows.min(initial=0) < 0 or rows.max(initial=0) > num_tasks:
        raise ValueError(f"C rows must lie in [0, {num_tasks}]")
    return rows


@lru_cache(maxsize=None)
def _frequencies(n: int) -> np.ndarray:
    freqs = np.logspace(0.0, 4.0, n)
    freqs.flags.writeable = False
    return freqs


def embed_scalar(x, dim: int) -> np.ndarray:
    """Sinusoidal features ``[sin(x w_0), cos(x w_0), sin(x w_1), ...]``.

    Frequencies are log-spaced over [1, 1e4]. ``x`` may be a scalar or an
    array; the feature axis is appended last.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    freqs = _frequencies(dim // 2)
    ang = np.asarray(x, dtype=float)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "silu":
        return z * _sigmoid(z)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "silu":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    return 1.0 - np.tanh(z) ** 2


@dataclass
class PolicyNetwork:
    action_dim: int
    obs_dim: int
    num_tasks: int
    hidden: tuple[int, ...] = (256, 256, 256)
    mode: str = "action-concat"
    time_dim: int = 32
    step_dim: int = 32
    cond_dim: int = 16
    activation: str = "silu"
    skip: bool = True
    film_time: bool = False  # film mode: modulate with [cond, t, d] embeddings, not cond alone
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown conditioning mode {self.mode!r}; expected one of {MODES}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def create(cls, rng: np.random.Generator, action_dim: int, obs_dim: int,
               num_tasks: int, **kwargs) -> "PolicyNetwork":
        net = cls(action_dim, obs_dim, num_tasks, **kwargs)
        net.params = net._init_params(rng)
        return net

    @property
    def input_width(self) -> int:
        width = self.action_dim + self.obs_dim + self.time_dim + self.step_dim
        if self.mode != "film":
            width += self.cond_dim
        return width

    @property
    def film_width(self) -> int:
        return self.cond_dim + (self.time_dim + self.step_dim if self.film_time else 0)

    @property
    def output_width(self) -> int:
        return self.action_dim

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def architecture(self) -> dict:
        return {
            "action_dim": self.action_dim,
            "obs_dim": self.obs_dim,
            "num_tasks": self.num_tasks,
            "hidden": list(self.hidden),
            "mode": self.mode,
            "time_dim": self.time_dim,
            "step_dim": self.step_dim,
            "cond_dim": self.cond_dim,
            "activation": self.activation,
            "skip": self.skip,
            "film_time": self.film_time,
        }

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        widths = [self.input_width, *self.hidden, self.output_width]
        params: dict[str, np.ndarray] = {
            "cond": rng.normal(0.0, 1.0, (self.num_tasks + 1, self.cond_dim))
        }
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if i == len(widths) - 2:
                # zero output layer: the initial velocity field is identically 0
                params[f"W{i}"] = np.zeros((fan_in, fan_out))
            else:
                params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))
            params[f"b{i}"] = np.zeros(fan_out)
        if self.skip:
            # linear input-to-output path, zero-initialized like the output layer
            params["Wskip"] = np.zeros((self.input_width, self.output_width))
        if self.mode == "film":
            for i, width in enumerate(self.hidden):
                params[f"film_gW{i}"] = np.zeros((self.film_width, width))
                params[f"film_gb{i}"] = np.ones(width)
                params[f"film_bW{i}"] = np.zeros((self.film_width, width))
                params[f"film_bb{i}"] = np.zeros(width)
        return params

    def copy(self) -> "PolicyNetwork":
        clone = PolicyNetwork(**self.architecture())
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params.values())


class GradientTape:
    """Forward intermediates for one batched evaluation; replayable once."""

    def __init__(self, net: PolicyNetwork, rows: np.ndarray, emb: np.ndarray):
        self.net = net
        self.rows = rows
        self.emb = emb
        self.inputs: list[np.ndarray] = []
        self.pre: list[np.ndarray] = []
        self.post: list[np.ndarray] = []
        self.gammas: list[np.ndarray] = []
        self.film_in: np.ndarray | None = None
        self.cond_slice: slice | None = None
        self._used = False

    def backward(self, dout: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given ``dout = dloss/doutput``."""
        if self._used:
            raise RuntimeError("backward already called on this tape")
        self._used = True
        net, P = self.net, self.net.params
        dout = np.atleast_2d(np.asarray(dout, dtype=float))
        L = net.n_layers - 1
        grads: dict[str, np.ndarray] = {}

        grads[f"W{L}"] = self.inputs[L].T @ dout
        grads[f"b{L}"] = dout.sum(axis=0)
        dx = dout @ P[f"W{L}"].T
        demb = np.zeros_like(self.emb)
        for i in range(L - 1, -1, -1):
            if net.mode == "film":
                h = self.post[i]
                dgamma = dx * h
                grads[f"film_gW{i}"] = self.film_in.T @ dgamma
                grads[f"film_gb{i}"] = dgamma.sum(axis=0)
                grads[f"film_bW{i}"] = self.film_in.T @ dx
                grads[f"film_bb{i}"] = dx.sum(axis=0)
                dfilm = dgamma @ P[f"film_gW{i}"].T + dx @ P[f"film_bW{i}"].T
                demb += dfilm[:, :net.cond_dim]
                dx = dx * self.gammas[i]
            dz = dx * _act_grad(net.activation, self.pre[i])
            grads[f"W{i}"] = self.inputs[i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dx = dz @ P[f"W{i}"].T
        if net.skip:
            grads["Wskip"] = self.inputs[0].T @ dout
            dx = dx + dout @ P["Wskip"].T
        if self.cond_slice is not None:
            demb += dx[:, self.cond_slice]
        dtable = np.zeros_like(P["cond"])
        np.add.at(dtable, self.rows, demb)
        grads["cond"] = dtable
        return grads


def _as_batch(name: str, x, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{name} has shape {x.shape}, expected (..., {width})")
    return x


def forward(net: PolicyNetwork, A, O, C, t, d, mode: str | None = None,
            record: bool = False):
    """Evaluate the velocity model.

    Returns the output array (a vector for unbatched ``A``), or
    ``(output, tape)`` when ``record`` is true.
    """
    if mode is not None and mode != net.mode:
        raise ValueError(f"network was built for mode {net.mode!r}, got {mode!r}")
    single = np.ndim(A) == 1
    A = _as_batch("A_flat", A, net.action_dim)
    n = A.shape[0]
    O = _as_batch("O", O, net.obs_dim)
    if O.shape[0] != n:
        if O.shape[0] != 1:
            raise ValueError(f"O has {O.shape[0]} rows, expected {n}")
        O = np.broadcast_to(O, (n, net.obs_dim))
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    d = np.broadcast_to(np.asarray(d, dtype=float), (n,))
    rows = condition_rows(C, net.num_tasks, n)

    P = net.params
    emb = P["cond"][rows]
    t_emb = embed_scalar(t, net.time_dim)
    d_emb = embed_scalar(d, net.step_dim)
    tape = GradientTape(net, rows, emb) if record else None
    if net.mode == "action-concat":
        x = np.concatenate([A, emb, O, t_emb, d_emb], axis=1)
        cond_slice = slice(net.action_dim, net.action_dim + net.cond_dim)
    elif net.mode == "obs-concat":
        x = np.concatenate([A, O, emb, t_emb, d_emb], axis=1)
        start = net.action_dim + net.obs_dim
        cond_slice = slice(start, start + net.cond_dim)
    else:
        x = np.concatenate([A, O, t_emb, d_emb], axis=1)
        cond_slice = None

    L = net.n_layers - 1
    x_in = x
    film_in = None
    if net.mode == "film":
        film_in = np.concatenate([emb, t_emb, d_emb], axis=1) if net.film_time else emb
        if tape is not None:
            tape.film_in = film_in
    for i in range(L):
        z = x @ P[f"W{i}"] + P[f"b{i}"]
        h = _act(net.activation, z)
        if tape is not None:
            tape.inputs.append(x)
            tape.pre.append(z)
            tape.post.append(h)
        if net.mode == "film":
            gamma = film_in @ P[f"film_gW{i}"] + P[f"film_gb{i}"]
            beta = film_in @ P[f"film_bW{i}"] + P[f"film_bb{i}"]
            if tape is not None:
                tape.gammas.append(gamma)
            h = gamma * h + beta
        x = h
    out = x @ P[f"W{L}"] + P[f"b{L}"]
    if net.skip:
        out = out + x_in @ P["Wskip"]
    if tape is not None:
        tape.inputs.append(x)
        tape.cond_slice = cond_slice
    if single:
        out = out[0]
    return (out, tape) if record else out


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


@dataclass
class AdamWState:
    lr: float = 1e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adamw_step(state: AdamWState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One AdamW update applied in place; returns ``params``.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        p -= state.lr * update
    return params


def add_grads(total: dict[str, np.ndarray] | None, grads: dict[str, np.ndarray],
              scale: float = 1.0) -> dict[str, np.ndarray]:
    if total is None:
        return {k: scale * g for k, g in grads.items()}
    for k, g in grads.items():
        if k in total:
            total[k] += scale * g
        else:
            total[k] = scale * g
    return total


# -- checkpoint container -----------------------------------------------------
#
# Layout:
#   line 1   b"SDPCKPT v1\n"
#   line 2   UTF-8 JSON header, sorted keys, terminated by "\n"
#   rest     little-endian float64 arrays, row-major, in the order listed
#            by header["arrays"] (parameters, then Adam first moments "m:",
#            then second moments "v:")
#   trailer  8-byte little-endian length of the payload, then its SHA-256


def _array_order(net: PolicyNetwork, opt: AdamWState | None) -> list[tuple[str, np.ndarray]]:
    items = [(k, net.params[k]) for k in sorted(net.params)]
    if opt is not None and opt.m:
        items += [(f"m:{k}", opt.m[k]) for k in sorted(opt.m)]
        items += [(f"v:{k}", opt.v[k]) for k in sorted(opt.v)]
    return items


def save_checkpoint(path, net: PolicyNetwork, opt: AdamWState | None = None,
                    config_hash: str = "", meta: dict | None = None) -> None:
    items = _array_order(net, opt)
    header = {
        "architecture": net.architecture(),
        "config_hash": config_hash,
        "meta": meta or {},
        "optimizer": opt.hyperparameters() if opt is not None else None,
        "arrays": [[name, list(arr.shape)] for name, arr in items],
    }
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in items)
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    blob += payload
    blob += struct.pack("<Q", len(payload)) + hashlib.sha256(payload).digest()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[PolicyNetwork, AdamWState | None, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    body = raw[len(CHECKPOINT_MAGIC):]
    nl = body.index(b"\n")
    header = json.loads(body[:nl].decode())
    payload = body[nl + 1:-40]
    (length,) = struct.unpack("<Q", body[-40:-32])
    if length != len(payload) or hashlib.sha256(payload).digest() != body[-32:]:
        raise ValueError(f"{path}: checkpoint payload is truncated or corrupt")

    arch = header["architecture"]
    net = PolicyNetwork(**arch)
    opt = None
    if header["optimizer"] is not None:
        opt = AdamWState(**header["optimizer"])
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
        if name.startswith("m:"):
            opt.m[name[2:]] = arr
        elif name.startswith("v:"):
            opt.v[name[2:]] = arr
        else:
            net.params[name] = arr
    return net, opt, header
