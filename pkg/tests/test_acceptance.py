"""End-to-end acceptance suite: one test per criterion, each printing a
PASS/FAIL line with the measured numbers.

The toy-task criteria train full-size models through the CLI and take tens of
minutes on one CPU core. Run just this file with ``pytest tests/test_acceptance.py -s``.
"""

import time

import numpy as np
import pytest

from shortcut_policy import cli, envs, so3
from shortcut_policy.diffnet import PolicyNetwork, TaskCondition, forward, mse
from shortcut_policy.sampler import SamplerConfig, generate, time_inference
from shortcut_policy.shortcut import (
    StepSizeGrid, TrainingSet, build_batch, self_consistency_target, shortcut_loss,
    shortcut_targets,
)

from oracles import central_difference, quat_from_rotvec, quat_to_matrix

pytestmark = pytest.mark.acceptance


def verdict(capsys, number, name, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


def run(*args):
    return cli.main([str(a) for a in args])


def read_rows(path):
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def summary_means(out):
    return {(int(r["task"]), r["engine"], int(r["steps"])): float(r["mean"])
            for r in read_rows(out / "summary.tsv")}


# -- 1. geometry -------------------------------------------------------------------


def test_geometry_suite(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_trip = worst_ortho = worst_det = worst_quat = worst_end = 0.0
    for _ in range(10_000):
        axis = rng.normal(size=3)
        angle = rng.uniform(0.0, np.pi - 1e-6)
        r = angle * axis / np.linalg.norm(axis)
        R = so3.exp_map(r)
        worst_trip = max(worst_trip, float(np.max(np.abs(so3.log_map(R) - r))))
        worst_ortho = max(worst_ortho, float(np.max(np.abs(R.T @ R - np.eye(3)))))
        worst_det = max(worst_det, abs(float(np.linalg.det(R)) - 1.0))
        worst_quat = max(worst_quat, float(np.max(np.abs(R - quat_to_matrix(quat_from_rotvec(r))))))
    for _ in range(1000):
        R0 = so3.exp_map(rng.uniform(-1.8, 1.8, 3))
        R1 = so3.exp_map(rng.uniform(-1.8, 1.8, 3))
        worst_end = max(worst_end,
                        float(np.max(np.abs(so3.interp_log(R0, R1, 0.0) - R0))),
                        float(np.max(np.abs(so3.interp_log(R0, R1, 1.0) - R1))))
    elapsed = time.perf_counter() - start
    ok = (worst_trip < 1e-8 and worst_ortho < 1e-9 and worst_det < 1e-9 and worst_quat < 1e-9
          and worst_end < 1e-9 and elapsed < 10)
    detail = (f"round-trip {worst_trip:.1e}, orthogonality {worst_ortho:.1e}, det {worst_det:.1e}, "
              f"interp endpoints {worst_end:.1e}, {elapsed:.1f} s")
    assert verdict(capsys, 1, "geometry", ok, detail)


# -- 2. gradients -----------------------------------------------------------------


def gradient_errors(seed):
    rng = np.random.default_rng(seed)
    H = 2
    net = PolicyNetwork.create(rng, 7 * H, 5, 3, hidden=(16, 32, 16), time_dim=4, step_dim=4, cond_dim=4)
    for p in net.params.values():
        p += rng.normal(0.0, 0.3, p.shape)
    data = TrainingSet(rng.uniform(-1, 1, (6, net.action_dim)), rng.uniform(size=(6, 5)),
                       rng.integers(0, 3, 6))
    grid = StepSizeGrid(4)
    batch = build_batch(data, rng, 12, grid)
    batch.cond[0] = net.num_tasks
    report = shortcut_loss(net, batch, grid=grid)
    At, t, dq, target = shortcut_targets(net, batch, grid)

    def loss():
        return mse(forward(net, At, batch.obs, batch.cond, t, dq), target)[0]

    # each entry must satisfy |g - fd| <= max(1e-4 |fd|, 1e-7); worst is the
    # largest ratio of the error to its allowance, so passing means worst <= 1
    worst, count = 0.0, 0
    for name, p in net.params.items():
        for index in np.ndindex(p.shape):
            fd = central_difference(loss, net.params, name, index)
            g = report.grads[name][index]
            worst = max(worst, abs(g - fd) / max(1e-4 * abs(fd), 1e-7))
            count += 1
    return worst, count


def test_gradient_suite(capsys):
    start = time.perf_counter()
    results = [gradient_errors(seed) for seed in range(5)]
    elapsed = time.perf_counter() - start
    worst = max(w for w, _ in results)
    ok = worst <= 1.0 and elapsed < 60
    detail = f"worst error / allowance {worst:.2e} over {sum(c for _, c in results)} entries, 5 seeds, {elapsed:.1f} s"
    assert verdict(capsys, 2, "gradients", ok, detail)


# -- 3. self-consistency exactness ---------------------------------------------------


class ConstantField:
    """Network stand-in whose velocity ignores every input."""

    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)

    def __call__(self, net, A, O, C, t, d, mode=None, record=False):
        rows = 1 if np.ndim(A) == 1 else len(A)
        return np.tile(self.v, (rows, 1)) if np.ndim(A) == 2 else self.v.copy()


def test_self_consistency_exactness(capsys, monkeypatch):
    from shortcut_policy import sampler, shortcut

    start = time.perf_counter()
    rng = np.random.default_rng(3)
    H = envs.HORIZON
    net = PolicyNetwork.create(rng, 7 * H, envs.OBS_DIM, 3, hidden=(8,))
    worst_resid = 0.0
    for _ in range(50):
        v = rng.normal(0.0, 0.05, 7 * H)
        monkeypatch.setattr(shortcut, "forward", ConstantField(v))
        At = rng.normal(0.0, 0.3, (4, 7 * H))
        At.reshape(4, H, 7)[..., :3] = 0.0
        t = np.array([0.0, 0.25, 0.5, 0.125])
        d = np.array([0.5, 0.25, 0.25, 0.0625])
        target = self_consistency_target(net, At, np.zeros((4, envs.OBS_DIM)), np.zeros(4, int), t, d)
        worst_resid = max(worst_resid, float(np.max(np.abs(target - v))))

    # straight-line data: the exact field (A1 - A) / (1 - t) carries any start to A1
    scene = envs.make_scene(np.random.default_rng(4))
    a1 = envs.expert_chunk(envs.TASKS[1], scene).flat()
    a1.reshape(H, 7)[:, :3] = 0.0

    def straight(net, A, O, C, t, d, mode=None, record=False):
        return (a1 - A) / (1.0 - t)

    monkeypatch.setattr(sampler, "forward", straight)
    outs = [generate(net, scene.observation(), TaskCondition(1), SamplerConfig(n),
                     np.random.default_rng(5)).flat() for n in (1, 2, 4, 8, 16)]
    spread = max(float(np.max(np.abs(o - outs[0]))) for o in outs)
    elapsed = time.perf_counter() - start
    ok = worst_resid < 1e-12 and spread < 1e-9 and elapsed < 10
    detail = f"consistency residual {worst_resid:.1e}, step-count spread {spread:.1e}, {elapsed:.1f} s"
    assert verdict(capsys, 3, "self-consistency", ok, detail)


# -- toy-task experiments ----------------------------------------------------------

REACH_LIFT = """\
seeds = 0,1,2
tasks = 1
demos = 100
epochs = 500
engines = shortcut
steps = 10,2,1
episodes = 100
"""


@pytest.fixture(scope="module")
def reach_lift(tmp_path_factory):
    root = tmp_path_factory.mktemp("reach_lift")
    cfg = root / "run.cfg"
    cfg.write_text(REACH_LIFT)
    out = root / "out"
    start = time.perf_counter()
    for verb in ("gen-data", "train", "eval"):
        assert run(verb, "--config", cfg, "--out", out) == cli.EXIT_OK
    return root, out, time.perf_counter() - start


def test_reach_lift_few_step(capsys, reach_lift):
    _, out, elapsed = reach_lift
    means = summary_means(out)
    s10, s2, s1 = (means[1, "shortcut", n] for n in (10, 2, 1))
    ok = s10 >= 0.90 and s2 >= s10 - 0.05 and s1 >= s10 - 0.15 and elapsed < 30 * 60
    detail = f"10-step {s10:.3f}, 2-step {s2:.3f}, 1-step {s1:.3f}, {elapsed / 60:.1f} min"
    assert verdict(capsys, 4, "reach-lift few-step", ok, detail)


MULTI_TASK = """\
seeds = 0
tasks = 0,1,2
demos = 100
epochs = 500
engines = shortcut
steps = 10
episodes = 100
confusion = true
confusion_steps = 10
"""


def test_conditional_specificity(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(MULTI_TASK)
    out = tmp_path / "out"
    start = time.perf_counter()
    for verb in ("gen-data", "train", "eval"):
        assert run(verb, "--config", cfg, "--out", out) == cli.EXIT_OK
    elapsed = time.perf_counter() - start
    rates = {(int(r["task"]), int(r["label"])): float(r["mean"])
             for r in read_rows(out / "confusion.tsv")}
    correct = [rates[k, k] for k in range(3)]
    wrong = [rates[k, j] for k in range(3) for j in range(3) if j != k]
    ok = min(correct) >= 0.80 and max(wrong) < 0.20 and elapsed < 45 * 60
    detail = (f"correct label {', '.join(f'{c:.2f}' for c in correct)}; "
              f"worst wrong label {max(wrong):.2f}; {elapsed / 60:.1f} min")
    assert verdict(capsys, 5, "conditional specificity", ok, detail)


def test_baseline_parity(capsys, reach_lift):
    root, out, shortcut_elapsed = reach_lift
    cfg = root / "run.cfg"
    cfg.write_text(REACH_LIFT.replace("engines = shortcut", "engines = shortcut,ddim"))
    start = time.perf_counter()
    for verb in ("train", "eval"):
        assert run(verb, "--config", cfg, "--out", out) == cli.EXIT_OK
    elapsed = shortcut_elapsed + time.perf_counter() - start
    means = summary_means(out)
    s2, d10 = means[1, "shortcut", 2], means[1, "ddim", 10]
    ok = s2 >= d10 - 0.05 and elapsed < 60 * 60
    detail = f"shortcut 2-step {s2:.3f} vs DDIM-10 {d10:.3f}, {elapsed / 60:.1f} min"
    assert verdict(capsys, 6, "baseline parity", ok, detail)


# -- 7. latency ------------------------------------------------------------------


def test_speedup(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    widths = dict(hidden=(256, 256, 256))
    net_shortcut = PolicyNetwork.create(rng, 7 * envs.HORIZON, envs.OBS_DIM, 3, **widths)
    net_ddim = PolicyNetwork.create(rng, 7 * envs.HORIZON, envs.OBS_DIM, 3, **widths)
    for net in (net_shortcut, net_ddim):
        for p in net.params.values():
            p += rng.normal(0.0, 0.05, p.shape)
    scene = envs.make_scene(np.random.default_rng(8))
    obs, cond = scene.observation(), TaskCondition(1)
    one = time_inference(net_shortcut, obs, cond, SamplerConfig(1), repeats=200)
    ten = time_inference(net_ddim, obs, cond, SamplerConfig(10, engine="ddim"), repeats=200)
    elapsed = time.perf_counter() - start
    ratio = one.median_ms / ten.median_ms
    ok = ratio <= 0.25 and elapsed < 5 * 60
    detail = (f"1-step shortcut {one.median_ms:.3f} ms vs 10-step DDIM {ten.median_ms:.3f} ms "
              f"(ratio {ratio:.3f}, 200 repeats), {elapsed:.1f} s")
    assert verdict(capsys, 7, "speedup", ok, detail)


# -- 8. determinism --------------------------------------------------------------

SMALL = """\
seeds = 0,1
tasks = 1,2
demos = 30
epochs = 20
batches_per_epoch = 10
batch_size = 64
hidden = 64,64
engines = shortcut,ddim
steps = 10,2,1
episodes = 30
"""


def snapshot(out):
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_pipeline_determinism(capsys, tmp_path):
    start = time.perf_counter()
    snaps = []
    for name in ("first", "second"):
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(SMALL)
        out = tmp_path / name
        for verb in ("gen-data", "train", "eval"):
            assert run(verb, "--config", cfg, "--out", out) == cli.EXIT_OK
        snaps.append(snapshot(out))
    elapsed = time.perf_counter() - start
    same = snaps[0].keys() == snaps[1].keys() and all(snaps[0][k] == snaps[1][k] for k in snaps[0])
    ok = same and len(snaps[0]) > 0 and elapsed < 30 * 60
    detail = f"{len(snaps[0])} output files, {'identical' if same else 'DIFFER'}, {elapsed:.1f} s"
    assert verdict(capsys, 8, "determinism", ok, detail)
