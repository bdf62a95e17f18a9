"""Command-line front end.

Verbs: ``gen-data``, ``train``, ``eval``, ``bench``, ``report``. Every verb
reads the same run configuration and works inside one output directory::

    <out>/config.txt                  resolved configuration
    <out>/data/task_<id>.sdp          demonstrations per task
    <out>/data/merged.sdp             all configured tasks, in config order
    <out>/checkpoints/<engine>_seed<s>.ckpt
    <out>/logs/<engine>_seed<s>.tsv   per-epoch training loss
    <out>/metrics.tsv                 one row per (task, engine, steps, seed)
    <out>/summary.tsv                 mean and population std across seeds
    <out>/confusion.tsv               success under every task label
    <out>/bench.tsv                   latency table with speedup ratios
    <out>/report.md

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import envs
from .config import ConfigError, RunConfig, load_config
from .diffnet import TaskCondition, load_checkpoint, save_checkpoint
from .sampler import NoiseSchedule, SamplerConfig, as_policy, time_inference
from .shortcut import NumericalError, RngStreams, StepSizeGrid, TrainingSet
from .train import TrainSettings, TrainState, init_state, train

log = logging.getLogger("shortcut_policy")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

METRICS_HEADER = ("config_hash", "task", "engine", "steps", "seed", "success", "episodes",
                  "horizon", "obs_dim")
SUMMARY_HEADER = ("task", "engine", "steps", "mean", "std", "seeds")
CONFUSION_HEADER = ("task", "label", "steps", "mean", "std", "seeds")
LOSS_HEADER = ("epoch", "loss", "flow", "consistency")
BENCH_HEADER = ("engine", "steps", "median_ms", "mean_ms", "std_ms", "repeats", "speedup_vs_ddim10")


class DataError(RuntimeError):
    pass


class UsageError(RuntimeError):
    pass


# -- paths -----------------------------------------------------------------------


def task_file(out: Path, task: int) -> Path:
    return out / "data" / f"task_{task}.sdp"


def merged_file(out: Path) -> Path:
    return out / "data" / "merged.sdp"


def checkpoint_file(out: Path, engine: str, seed: int) -> Path:
    return out / "checkpoints" / f"{engine}_seed{seed}.ckpt"


def loss_log_file(out: Path, engine: str, seed: int) -> Path:
    return out / "logs" / f"{engine}_seed{seed}.tsv"


def _mkdir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc.strerror}") from None


def _write(path: Path, text: str) -> None:
    _mkdir(path.parent)
    try:
        path.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def _tsv(header, rows) -> str:
    lines = ["\t".join(header)]
    lines += ["\t".join(str(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _rate(x: float) -> str:
    return f"{x:.4f}"


# -- gen-data ----------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    demos_by_task = {}
    for task_id in cfg.tasks:
        rng = np.random.default_rng([cfg.data_seed, task_id])
        demos_by_task[task_id] = envs.collect_demos(envs.TASKS[task_id], cfg.demos, rng)
    _mkdir(out / "data")
    merged = []
    try:
        for task_id, demos in demos_by_task.items():
            envs.write_dataset(task_file(out, task_id), demos)
            merged.extend(demos)
            print(f"task {task_id} ({envs.TASK_NAMES[task_id]}): {len(demos)} demos")
        envs.write_dataset(merged_file(out), merged)
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc}") from None
    print(f"merged: {len(merged)} demos -> {merged_file(out)}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------


def train_settings(cfg: RunConfig, engine: str) -> TrainSettings:
    return TrainSettings(
        engine=engine, epochs=cfg.epochs, batch_size=cfg.batch_size,
        batches_per_epoch=cfg.batches_per_epoch, lr=cfg.lr, lr_schedule=cfg.lr_schedule,
        weight_decay=cfg.weight_decay, k_split=cfg.k_split, grid_levels=cfg.grid_levels,
        p_drop=cfg.p_drop, mode=cfg.mode, film_time=cfg.film_time, hidden=cfg.hidden,
        diffusion_steps=cfg.diffusion_steps, num_tasks=len(envs.TASKS),
    )


def _load_training_set(out: Path) -> tuple[TrainingSet, str]:
    path = merged_file(out)
    if not path.exists():
        raise DataError(f"dataset {path} not found; run gen-data first")
    demos = envs.read_dataset(path)
    if not demos:
        raise DataError(f"dataset {path} is empty")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    return TrainingSet.from_demos(demos), digest


def _log_lines(history) -> list[str]:
    return [f"{e}\t{loss!r}\t{flow!r}\t{cons!r}" for e, loss, flow, cons in history]


def _read_log(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    lines = path.read_text().splitlines()[1:]
    return lines[:upto]


def _save(path: Path, state: TrainState, cfg: RunConfig, engine: str, seed: int, data_digest: str):
    meta = {"engine": engine, "seed": seed, "epoch": state.epoch, "data": data_digest,
            "streams": state.streams.state()}
    save_checkpoint(path, state.net, state.opt, cfg.training_hash, meta)


def _resume_state(path: Path, cfg: RunConfig, data_digest: str) -> TrainState | None:
    if not path.exists():
        return None
    net, opt, header = _read_checkpoint(path)
    if header["config_hash"] != cfg.training_hash:
        raise DataError(f"{path}: checkpoint config hash {header['config_hash']} does not match "
                        f"the current configuration ({cfg.training_hash})")
    if header["meta"].get("data") != data_digest:
        raise DataError(f"{path}: checkpoint was trained on a different dataset")
    streams = RngStreams.from_state(header["meta"]["streams"])
    return TrainState(net, opt, streams, epoch=int(header["meta"]["epoch"]))


def cmd_train(cfg: RunConfig, out: Path) -> int:
    data, digest = _load_training_set(out)
    print(f"dataset: {len(data)} records, tasks {sorted(set(data.task.tolist()))}")
    for engine in cfg.engines:
        settings = train_settings(cfg, engine)
        for seed in cfg.seeds:
            ckpt = checkpoint_file(out, engine, seed)
            log_path = loss_log_file(out, engine, seed)
            state = _resume_state(ckpt, cfg, digest)
            if state is not None and state.epoch >= cfg.epochs:
                print(f"{engine} seed {seed}: up to date ({ckpt})")
                continue
            start = 0 if state is None else state.epoch
            prior = _read_log(log_path, start)
            if state is not None:
                print(f"{engine} seed {seed}: resuming at epoch {start}")
            _mkdir(ckpt.parent)

            if state is None:
                state = init_state(data, seed, settings)

            def persist(st=state):
                _write(log_path, _tsv(LOSS_HEADER, [])
                       + "".join(line + "\n" for line in prior + _log_lines(st.history)))
                _save(ckpt, st, cfg, engine, seed, digest)

            def checkpoint_hook(epoch, *losses, every=cfg.checkpoint_every):
                if every and (epoch + 1) % every == 0 and epoch + 1 < cfg.epochs:
                    persist()

            try:
                train(data, seed, settings, state=state, on_epoch=checkpoint_hook)
            except NumericalError as exc:
                raise NumericalError(f"{engine} seed {seed}: {exc}", exc.record) from exc
            persist()
            final = state.history[-1][1] if state.history else float("nan")
            print(f"{engine} seed {seed}: {cfg.epochs} epochs, final loss {final:.6f} -> {ckpt}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------


def _read_checkpoint(path: Path):
    try:
        net, opt, meta = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from None
    if not net.is_finite():
        raise NumericalError(f"{path}: checkpoint holds non-finite parameters")
    return net, opt, meta


def _load_models(cfg: RunConfig, out: Path) -> dict:
    missing = [checkpoint_file(out, e, s) for e in cfg.engines for s in cfg.seeds
               if not checkpoint_file(out, e, s).exists()]
    if missing:
        raise DataError("missing checkpoints: " + ", ".join(str(p) for p in missing))
    models = {}
    for engine in cfg.engines:
        for seed in cfg.seeds:
            path = checkpoint_file(out, engine, seed)
            net, _, header = _read_checkpoint(path)
            if header["config_hash"] != cfg.training_hash:
                raise DataError(f"{path}: trained with configuration {header['config_hash']}, "
                                f"current is {cfg.training_hash}")
            models[engine, seed] = net
    return models


def sampler_config(cfg: RunConfig, engine: str, steps: int) -> SamplerConfig:
    return SamplerConfig(steps, guidance=cfg.guidance, engine=engine,
                         grid=StepSizeGrid(cfg.grid_levels), schedule=NoiseSchedule(cfg.diffusion_steps))


def make_policy(net, cfg: RunConfig, engine: str, steps: int):
    return as_policy(net, sampler_config(cfg, engine, steps))


def _episode_rng(seed: int, task: int) -> np.random.Generator:
    # the same evaluation scenes for every engine and step count of a (seed, task)
    return np.random.default_rng([seed, task, 0x5EED])


def _mean_std(rates) -> tuple[float, float]:
    arr = np.asarray(rates, dtype=float)
    return float(arr.mean()), float(arr.std())


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    models = _load_models(cfg, out)
    rows, summary = [], []
    for task_id in cfg.tasks:
        task = envs.TASKS[task_id]
        for engine in cfg.engines:
            for steps in cfg.steps:
                rates = []
                for seed in cfg.seeds:
                    policy = make_policy(models[engine, seed], cfg, engine, steps)
                    rate = envs.evaluate_policy(policy, task, None, cfg.episodes,
                                                _episode_rng(seed, task_id))
                    rates.append(rate)
                    rows.append((cfg.hash, task_id, engine, steps, seed, _rate(rate), cfg.episodes,
                                 envs.HORIZON, envs.OBS_DIM))
                mean, std = _mean_std(rates)
                summary.append((task_id, engine, steps, _rate(mean), _rate(std), len(rates)))
                print(f"task {task_id} {engine:8s} steps {steps:3d}: {mean:.3f} +- {std:.3f}")
    _write(out / "metrics.tsv", _tsv(METRICS_HEADER, rows))
    _write(out / "summary.tsv", _tsv(SUMMARY_HEADER, summary))

    if cfg.confusion and len(cfg.tasks) > 1 and "shortcut" in cfg.engines:
        conf = []
        for task_id in cfg.tasks:
            for label in cfg.tasks:
                rates = []
                for seed in cfg.seeds:
                    policy = make_policy(models["shortcut", seed], cfg, "shortcut", cfg.confusion_steps)
                    rates.append(envs.evaluate_policy(policy, envs.TASKS[task_id], None, cfg.episodes,
                                                      _episode_rng(seed, task_id), label=label))
                mean, std = _mean_std(rates)
                conf.append((task_id, label, cfg.confusion_steps, _rate(mean), _rate(std), len(rates)))
        _write(out / "confusion.tsv", _tsv(CONFUSION_HEADER, conf))
    print(f"metrics: {len(rows)} rows -> {out / 'metrics.tsv'}")
    return EXIT_OK


# -- bench ------------------------------------------------------------------------


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    seed = cfg.seeds[0]
    nets = {}
    for engine in cfg.engines:
        path = checkpoint_file(out, engine, seed)
        if not path.exists():
            raise DataError(f"missing checkpoint: {path}")
        nets[engine] = _read_checkpoint(path)[0]
    # sampling cost depends only on the network widths, so a shortcut net
    # stands in for the baseline reference when no baseline was trained
    ref_net = nets.get("ddim", next(iter(nets.values())))
    scene = envs.make_scene(np.random.default_rng([seed, 0xBE]))
    obs, cond = scene.observation(), TaskCondition(cfg.tasks[0])

    reference = time_inference(ref_net, obs, cond, sampler_config(cfg, "ddim", 10), cfg.bench_repeats)
    stats = [time_inference(net, obs, cond, sampler_config(cfg, engine, n), cfg.bench_repeats)
             for engine, net in nets.items() for n in cfg.steps]
    stats.sort(key=lambda s: -s.median_ms)
    rows = [(s.engine, s.steps, f"{s.median_ms:.4f}", f"{s.mean_ms:.4f}", f"{s.std_ms:.4f}",
             s.repeats, f"{reference.median_ms / s.median_ms:.3f}") for s in stats]
    text = _tsv(BENCH_HEADER, rows)
    _write(out / "bench.tsv", text)
    print(text, end="")
    return EXIT_OK


# -- report -------------------------------------------------------------------------


def _read_tsv(path: Path) -> list[dict]:
    if not path.exists():
        raise DataError(f"metrics file {path} not found")
    lines = path.read_text().splitlines()
    if not lines:
        raise DataError(f"metrics file {path} is empty")
    header = lines[0].split("\t")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        values = line.split("\t")
        if len(values) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, found {len(values)}")
        rows.append(dict(zip(header, values)))
    return rows


def render_report(metrics: list[dict], confusion: list[dict] | None) -> str:
    horizons = {r["horizon"] for r in metrics}
    obs_dims = {r["obs_dim"] for r in metrics}
    if len(horizons) > 1 or len(obs_dims) > 1:
        raise DataError(f"inconsistent inputs: horizons {sorted(horizons)}, obs_dims {sorted(obs_dims)}")

    grouped: dict = {}
    for r in metrics:
        key = (int(r["task"]), r["engine"], int(r["steps"]))
        grouped.setdefault(key, []).append(float(r["success"]))
    lines = ["# Success rates", ""]
    if metrics:
        lines.append(f"Horizon {horizons.pop()}, observation width {obs_dims.pop()}, "
                     f"config {', '.join(sorted({r['config_hash'] for r in metrics}))}.")
        lines.append("")
    for task_id in sorted({k[0] for k in grouped}):
        cols = sorted({k[2] for k in grouped if k[0] == task_id}, reverse=True)
        lines.append(f"## Task {task_id} ({envs.TASK_NAMES[task_id]})")
        lines.append("")
        lines.append("| engine | " + " | ".join(f"{n} step" + ("s" if n != 1 else "") for n in cols) + " |")
        lines.append("|---" * (len(cols) + 1) + "|")
        for engine in sorted({k[1] for k in grouped if k[0] == task_id}):
            cells = []
            for n in cols:
                rates = grouped.get((task_id, engine, n))
                if rates is None:
                    cells.append("-")
                else:
                    mean, std = _mean_std(rates)
                    cells.append(f"{mean:.3f} ± {std:.3f} (n={len(rates)})")
            lines.append(f"| {engine} | " + " | ".join(cells) + " |")
        lines.append("")
    if confusion:
        labels = sorted({int(r["label"]) for r in confusion})
        steps = confusion[0]["steps"]
        lines.append(f"## Label confusion (shortcut, {steps} steps)")
        lines.append("")
        lines.append("Rows: scene task scored by its own predicate. Columns: label fed to the policy.")
        lines.append("")
        lines.append("| task | " + " | ".join(f"label {j}" for j in labels) + " |")
        lines.append("|---" * (len(labels) + 1) + "|")
        table = {(int(r["task"]), int(r["label"])): r for r in confusion}
        for i in sorted({int(r["task"]) for r in confusion}):
            cells = [f"{float(table[i, j]['mean']):.3f} ± {float(table[i, j]['std']):.3f}"
                     if (i, j) in table else "-" for j in labels]
            lines.append(f"| {i} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def cmd_report(cfg: RunConfig, out: Path, inputs: list[str]) -> int:
    paths = [Path(p) for p in inputs] or [out / "metrics.tsv"]
    metrics: list[dict] = []
    for path in paths:
        rows = _read_tsv(path)
        missing = set(METRICS_HEADER) - set(rows[0]) if rows else set()
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        metrics.extend(rows)
    if not metrics:
        raise DataError("no metrics rows to report")
    conf_path = paths[0].parent / "confusion.tsv"
    confusion = _read_tsv(conf_path) if conf_path.exists() else None
    text = render_report(metrics, confusion)
    _write(out / "report.md", text)
    print(text, end="")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file (defaults apply otherwise)")
    common.add_argument("--seed", type=_seed_list, help="comma-separated seeds; overrides the config")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="shortcut-policy", description="Shortcut diffusion policy toy harness.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate demonstration datasets")
    sub.add_parser("train", parents=[common], help="train one model per seed and engine")
    sub.add_parser("eval", parents=[common], help="evaluate success rates across step counts")
    sub.add_parser("bench", parents=[common], help="measure sampling latency")
    rep = sub.add_parser("report", parents=[common], help="render a markdown summary")
    rep.add_argument("metrics", nargs="*", help="metrics files (default: <out>/metrics.tsv)")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.replace(seeds=args.seed)
    except (UsageError, ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.verb != "report":
            _write(out / "config.txt", cfg.to_text())
        if args.verb == "gen-data":
            return cmd_gen_data(cfg, out)
        if args.verb == "train":
            return cmd_train(cfg, out)
        if args.verb == "eval":
            return cmd_eval(cfg, out)
        if args.verb == "bench":
            return cmd_bench(cfg, out)
        return cmd_report(cfg, out, args.metrics)
    except (DataError, envs.DatasetError, envs.SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
