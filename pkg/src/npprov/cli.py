"""Command-line driver: train, eval, audit-variance, sample-tasks, export-plot.

Every option may also come from a ``key=value`` file given with ``--config``;
flags override the file. Exit codes: 0 success, 1 usage, 2 data, 3 numeric.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .kernels import DegenerateInputError
from .offgrid import OffGridModel
from .ongrid import OnGridModel, load_idx_images
from .taskgen import EmptyDataError, ParseError, Task, load_smart_meter, read_task_archive
from .train import (FULL_PROTOCOL, SUITES, CheckpointError, TaskSource, TrainConfig, TrainingAborted,
                    atomic_write, build_model, eval_seed, evaluate, evaluate_images, model_from_checkpoint,
                    ood_variance_audit, save_checkpoint, train, write_records)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get("NPPROV_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"NPPROV_SEED must be an integer, got {raw!r}") from None


def _train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=["eq", "matern", "weakly-periodic", "smartmeter", "mnist"])
    p.add_argument("--model", choices=["np-prov", "convcnp"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--tasks-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--points-per-unit", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--data-path")
    p.add_argument("--full", action="store_true", default=None,
                   help="use the long protocol (200 epochs of 256 tasks, lr 5e-4, 64 points per unit)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="npprov", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value file; flags take precedence")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    p = command("train", "train a model and write a checkpoint plus its loss trace")
    _train_options(p)

    p = command("eval", "evaluate a checkpoint on one suite")
    p.add_argument("--checkpoint")
    p.add_argument("--suite", choices=SUITES)
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--data-path")

    p = command("audit-variance", "compare predicted std before and after scaling values by 10")
    p.add_argument("--checkpoint")
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--data-path")

    p = command("sample-tasks", "write a task archive")
    p.add_argument("--dataset", choices=["eq", "matern", "weakly-periodic", "smartmeter"])
    p.add_argument("--suite", choices=SUITES)
    p.add_argument("--count", type=int)
    p.add_argument("--data-path")

    p = command("export-plot", "write grid, context and target rows for one task")
    p.add_argument("--checkpoint")
    p.add_argument("--task-index", type=int)
    p.add_argument("--suite", choices=SUITES)
    p.add_argument("--archive", help="take the task from this archive instead of sampling it")
    p.add_argument("--data-path")
    return parser


DEFAULTS = {
    "train": {**{k: v for k, v in TrainConfig().__dict__.items() if k != "seed"}, "full": False},
    "eval": dict(suite="in-range", n_tasks=512, repeats=1),
    "audit-variance": dict(n_tasks=100),
    "sample-tasks": dict(dataset="eq", suite="in-range", count=16),
    "export-plot": dict(task_index=0, suite="in-range"),
}
REQUIRED = {
    "train": ("out",), "eval": ("checkpoint", "out"), "audit-variance": ("checkpoint", "out"),
    "sample-tasks": ("out",), "export-plot": ("checkpoint", "out"),
}


def read_config_file(path) -> dict[str, str]:
    items = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise DataError(f"cannot read config file {path}: {err.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        items[key.strip().replace("-", "_")] = value.strip()
    return items


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge defaults, the config file and flags into one typed mapping."""
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    cfg = {"seed": _default_seed(), **DEFAULTS[args.command]}
    explicit = set()
    if args.config:
        for key, raw in read_config_file(args.config).items():
            if key not in actions:
                raise UsageError(f"unknown configuration key {key!r} for {args.command}")
            act = actions[key]
            if isinstance(act, argparse._StoreTrueAction):
                value = raw.lower() in ("1", "true", "yes")
            else:
                try:
                    value = act.type(raw) if act.type else raw
                except ValueError:
                    raise UsageError(f"bad value {raw!r} for {key}") from None
                if act.choices and value not in act.choices:
                    raise UsageError(f"bad value {raw!r} for {key}; choose from {list(act.choices)}")
            cfg[key] = value
            explicit.add(key)
    for key in actions:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
            explicit.add(key)
    if cfg.get("full"):
        for key, value in FULL_PROTOCOL.items():
            if key not in explicit:
                cfg[key] = value
    missing = [k for k in REQUIRED[args.command] if not cfg.get(k)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def echo(command: str, cfg: dict, out) -> None:
    print(f"# npprov {command}", file=out)
    for key in sorted(cfg):
        print(f"{key}={cfg[key]}", file=out)
    out.flush()


def _train_config(cfg: dict) -> TrainConfig:
    keys = {f for f in TrainConfig.__dataclass_fields__}
    kw = {k: v for k, v in cfg.items() if k in keys and v is not None}
    try:
        return TrainConfig(**kw)
    except ValueError as err:
        raise UsageError(str(err)) from None


def _series(dataset: str, data_path):
    if dataset != "smartmeter":
        return None
    if not data_path:
        raise UsageError("smartmeter tasks need --data-path")
    return load_smart_meter(data_path)


def cmd_train(cfg: dict, out) -> None:
    tc = _train_config(cfg)
    model = build_model(tc)
    if tc.dataset == "mnist":
        result = train(model, tc, images=load_idx_images(tc.data_path))
    else:
        source = TaskSource(tc.dataset, tc.seed, "in-range", _series(tc.dataset, tc.data_path))
        result = train(model, tc, source,
                       on_epoch=lambda e, v: print(f"epoch {e + 1} loss {v:.6f}", file=out, flush=True))
    save_checkpoint(result.params, tc, cfg["out"])
    atomic_write(cfg["out"] + ".trace", "".join(
        f"{i + 1},{_num(v)}\n" for i, v in enumerate(result.trace)).encode())
    print(f"wrote {cfg['out']}", file=out)


def _load(cfg: dict):
    path = cfg["checkpoint"]
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return model_from_checkpoint(path)


def _data_path(cfg: dict, tc: TrainConfig):
    return cfg.get("data_path") or tc.data_path


def cmd_eval(cfg: dict, out) -> None:
    model, tc = _load(cfg)
    if isinstance(model, OnGridModel):
        if cfg["suite"] != "in-range":
            raise UsageError("image checkpoints support only the in-range suite")
        report = evaluate_images(model, load_idx_images(_data_path(cfg, tc)), cfg["n_tasks"],
                                 cfg["repeats"], cfg["seed"])
    else:
        report = evaluate(model, cfg["suite"], cfg["n_tasks"], cfg["repeats"], tc.dataset, cfg["seed"],
                          _series(tc.dataset, _data_path(cfg, tc)))
    rec = {**report.to_record(), "config": tc.to_strings(), "note": "evaluation repeated, training run once"}
    write_records([rec], cfg["out"])
    print(f"{report.suite} mean_ll={report.mean_ll:.6f} std_ll={report.std_ll:.6f}", file=out)


def cmd_audit(cfg: dict, out) -> None:
    model, tc = _load(cfg)
    if isinstance(model, OnGridModel):
        raise UsageError("audit-variance applies to 1-D checkpoints")
    source = TaskSource(tc.dataset, eval_seed(cfg["seed"], 0), "in-range", _series(tc.dataset, _data_path(cfg, tc)))
    factor = 1.5 if tc.dataset == "smartmeter" else 10.0
    audit = ood_variance_audit(model, cfg["n_tasks"], source, factor)
    write_records([audit.to_record()], cfg["out"])
    print(f"max_std_diff={_num(audit.max_std_diff)}", file=out)


def cmd_sample(cfg: dict, out) -> None:
    source = TaskSource(cfg["dataset"], cfg["seed"], cfg["suite"], _series(cfg["dataset"], cfg.get("data_path")))
    tasks = [source(i) for i in range(cfg["count"])]
    write_records((t.to_record() for t in tasks), cfg["out"])
    print(f"wrote {len(tasks)} tasks to {cfg['out']}", file=out)


def _num(v) -> str:
    return repr(float(v))


def plot_rows(model: OffGridModel, task: Task) -> list[str]:
    grid = model.grid_for(task)
    on_grid = model.predict(Task(task.x_context, task.y_context, grid, np.zeros_like(grid)), x_grid=grid)
    at_target = model.predict(task, x_grid=grid)
    rows = ["kind,x,y,mean,std"]
    rows += [f"grid,{_num(x)},,{_num(m)},{_num(s)}" for x, m, s in zip(grid, on_grid.mean, on_grid.std)]
    rows += [f"context,{_num(x)},{_num(y)},," for x, y in zip(task.x_context, task.y_context)]
    rows += [f"target,{_num(x)},{_num(y)},{_num(m)},{_num(s)}"
             for x, y, m, s in zip(task.x_target, task.y_target, at_target.mean, at_target.std)]
    return rows


def cmd_export(cfg: dict, out) -> None:
    model, tc = _load(cfg)
    if isinstance(model, OnGridModel):
        raise UsageError("export-plot applies to 1-D checkpoints")
    k = cfg["task_index"]
    if k < 0:
        raise UsageError("--task-index must be nonnegative")
    if cfg.get("archive"):
        tasks = read_task_archive(cfg["archive"])
        if k >= len(tasks):
            raise DataError(f"archive has {len(tasks)} tasks, index {k} requested")
        task = tasks[k]
    else:
        task = TaskSource(tc.dataset, cfg["seed"], cfg["suite"], _series(tc.dataset, _data_path(cfg, tc)))(k)
    rows = plot_rows(model, task)
    atomic_write(cfg["out"], ("\n".join(rows) + "\n").encode())
    print(f"wrote {len(rows) - 1} rows to {cfg['out']}", file=out)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "audit-variance": cmd_audit,
            "sample-tasks": cmd_sample, "export-plot": cmd_export}


def _fail(kind: str, code: int, err) -> int:
    reason = " ".join(str(err).split())
    print(f"error: kind={kind} code={code} reason={json.dumps(reason)}", file=sys.stderr)
    return code


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args, parser)
        echo(args.command, cfg, out)
        COMMANDS[args.command](cfg, out)
    except UsageError as err:
        return _fail("usage", EXIT_USAGE, err)
    except (DataError, ParseError, EmptyDataError, CheckpointError, DegenerateInputError,
            FileNotFoundError, KeyError) as err:
        return _fail("data", EXIT_DATA, err)
    except OSError as err:
        return _fail("data", EXIT_DATA, f"{getattr(err, 'filename', '')}: {err.strerror or err}")
    except (T.NumericFault, TrainingAborted, FloatingPointError) as err:
        return _fail("numeric", EXIT_NUMERIC, err)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
