"""Training, evaluation suites, the OOD variance audit and checkpoints."""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from . import rng as _rng
from .kernels import LOG_2PI, GaussianPrediction, KernelSpec, gaussian_loglik, gp_posterior
from .offgrid import GridSpec, OffGridModel, Prediction
from .ongrid import OnGridModel, sample_mask
from .taskgen import (SMARTMETER_COMPACT, SMARTMETER_RANGE, SYNTHETIC_COMPACT, SYNTHETIC_RANGE,
                      SmartMeterSeries, Task, TaskConfig, compacted_context_task,
                      compacted_smartmeter_task, load_smart_meter, ood_x_config, ood_y_scale,
                      sample_smartmeter_task, sample_synthetic_task)

log = logging.getLogger(__name__)

SYNTHETIC_DATASETS = ("eq", "matern", "weakly-periodic")
DATASETS = SYNTHETIC_DATASETS + ("smartmeter", "mnist")
SUITES = ("in-range", "ood-x", "ood-y", "compacted")
# Evaluation streams live far above any training seed.
EVAL_SEED_OFFSET = 1 << 40


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; carries the last good parameters."""

    def __init__(self, message: str, params: dict, trace: list[float]):
        super().__init__(message)
        self.params = params
        self.trace = trace


FULL_PROTOCOL = dict(epochs=200, tasks_per_epoch=256, learning_rate=5e-4, points_per_unit=64)


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "eq"
    model: str = "np-prov"
    epochs: int = 30
    tasks_per_epoch: int = 64
    batch_size: int = 16
    # Tuned for the short desk budget (120 Adam steps); see README.
    learning_rate: float = 1e-2
    seed: int = 0
    points_per_unit: int = 32
    margin: float = 0.1
    clip_norm: float = 10.0
    dtype: str = "float32"
    data_path: str = ""

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if self.model not in ("np-prov", "convcnp"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.dataset == "mnist" and self.model != "np-prov":
            raise ValueError("the image dataset supports only the np-prov model")
        for name in ("epochs", "tasks_per_epoch", "batch_size", "points_per_unit"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0 or not self.clip_norm > 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.dataset in ("smartmeter", "mnist") and not self.data_path:
            raise ValueError(f"dataset {self.dataset!r} needs data_path")

    @classmethod
    def full_protocol(cls, **kw) -> "TrainConfig":
        """200 epochs of 256 tasks at the long-run learning rate and grid."""
        return cls(**{**FULL_PROTOCOL, **kw})

    def to_strings(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_strings(cls, items: Mapping[str, str]) -> "TrainConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in items.items():
            if key not in types:
                raise KeyError(f"unknown configuration key {key!r}")
            kind = types[key]
            kw[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
        return cls(**kw)

    @property
    def float_type(self):
        return np.dtype(self.dtype).type


# ---------------------------------------------------------------------------
# models and task sources

def build_model(cfg: TrainConfig):
    dtype = np.dtype(cfg.dtype).type
    if cfg.dataset == "mnist":
        return OnGridModel.create(seed=cfg.seed, dtype=dtype)
    grid = GridSpec(cfg.points_per_unit, cfg.margin)
    return OffGridModel.create(cfg.model, seed=cfg.seed, grid=grid, dtype=dtype)


def kernel_for(dataset: str) -> KernelSpec:
    return KernelSpec.parse(dataset)


class TaskSource:
    """Seed-indexed tasks for one dataset and evaluation suite."""

    def __init__(self, dataset: str, base_seed: int, suite: str = "in-range",
                 series: SmartMeterSeries | None = None):
        if suite not in SUITES:
            raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
        if dataset not in SYNTHETIC_DATASETS + ("smartmeter",):
            raise ValueError(f"dataset {dataset!r} has no 1-D task source")
        if dataset == "smartmeter" and series is None:
            raise ValueError("smartmeter tasks need a loaded series")
        self.dataset, self.suite, self.series = dataset, suite, series
        smart = dataset == "smartmeter"
        lo, hi = SMARTMETER_RANGE if smart else SYNTHETIC_RANGE
        self.cfg = TaskConfig(x_low=lo, x_high=hi, base_seed=base_seed)
        if suite == "ood-x":
            self.cfg = ood_x_config(self.cfg, smartmeter=smart)
        self.y_factor = (1.5 if smart else 10.0) if suite == "ood-y" else 1.0

    def __call__(self, index: int) -> Task:
        if self.dataset == "smartmeter":
            if self.suite == "compacted":
                task = compacted_smartmeter_task(self.series, self.cfg, index)
            else:
                task = sample_smartmeter_task(self.series, self.cfg, index)
        elif self.suite == "compacted":
            task = compacted_context_task(kernel_for(self.dataset), SYNTHETIC_COMPACT, self.cfg, index)
        else:
            task = sample_synthetic_task(kernel_for(self.dataset), self.cfg, index)
        return task if self.y_factor == 1.0 else ood_y_scale(task, self.y_factor)

    @property
    def intervals(self):
        return SMARTMETER_COMPACT if self.dataset == "smartmeter" else SYNTHETIC_COMPACT


def task_source(cfg: TrainConfig, suite: str = "in-range", base_seed: int | None = None) -> TaskSource:
    series = load_smart_meter(cfg.data_path) if cfg.dataset == "smartmeter" else None
    seed = cfg.seed if base_seed is None else base_seed
    return TaskSource(cfg.dataset, seed, suite, series)


class GPOracle:
    """The exact GP posterior, packaged like a model."""

    kind = "gp-oracle"

    def __init__(self, spec: KernelSpec):
        self.spec = spec

    def predict(self, task: Task) -> Prediction:
        pred = gp_posterior(self.spec, task.x_context, task.y_context, task.x_target)
        return Prediction(pred.mean, pred.std, 0.0)


# ---------------------------------------------------------------------------
# objective and optimiser

def loss(prediction: Prediction, task: Task) -> float:
    """Negative per-point log-likelihood of the targets plus the reconstruction loss."""
    ll = gaussian_loglik(task.y_target, GaussianPrediction(prediction.mean, prediction.std))
    return -ll + prediction.recon_loss


def loss_tensor(mean: T.Tensor, std: T.Tensor, recon: T.Tensor, y) -> T.Tensor:
    y = np.asarray(y, dtype=mean.dtype)
    z = T.div(T.sub(y, mean), std)
    nll = T.mean(T.add(T.add(T.log(std), 0.5 * LOG_2PI), T.mul(T.mul(z, z), 0.5)))
    return T.add(nll, recon)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise T.NumericFault(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise T.ShapeError(f"gradient {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return norm


def offgrid_batch(model: OffGridModel, tasks: Sequence[Task]) -> tuple[float, dict]:
    """Mean loss over ``tasks`` and its gradient (one graph per task)."""
    total = 0.0
    acc = {k: np.zeros_like(v) for k, v in model.params.items()}
    for task in tasks:
        params = model.tensors(trainable=True)
        mean, std, recon = model.forward(task, params)
        value = loss_tensor(mean, std, recon, task.y_target)
        grads = T.backward(value, params)
        total += float(value.data)
        for k, g in grads.items():
            acc[k] += g
    n = len(tasks)
    return total / n, {k: g / np.asarray(n, dtype=g.dtype) for k, g in acc.items()}


def ongrid_batch(model: OnGridModel, images: np.ndarray, masks: np.ndarray) -> tuple[float, dict]:
    params = model.tensors(trainable=True)
    value = model.loss(images, masks, params)
    return float(value.data), T.backward(value, params)


@dataclass
class TrainResult:
    params: dict
    trace: list[float]          # mean loss per epoch
    batch_losses: list[float]


def _run(model, cfg: TrainConfig, batches: Callable[[int], Iterable], step: Callable,
         on_epoch=None) -> TrainResult:
    state = AdamState()
    trace, batch_losses = [], []
    good = {k: v.copy() for k, v in model.params.items()}
    for epoch in range(cfg.epochs):
        losses = []
        for batch in batches(epoch):
            value, grads = step(batch)
            if not np.isfinite(value):
                model.params = good
                raise TrainingAborted(f"non-finite loss in epoch {epoch + 1}", good, trace)
            clip_by_global_norm(grads, cfg.clip_norm)
            try:
                adam_step(model.params, grads, state, cfg.learning_rate)
            except T.NumericFault as err:
                model.params = good
                raise TrainingAborted(f"epoch {epoch + 1}: {err}", good, trace) from err
            losses.append(value)
            batch_losses.append(value)
        trace.append(float(np.mean(losses)))
        good = {k: v.copy() for k, v in model.params.items()}
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, trace[-1])
        if on_epoch is not None:
            on_epoch(epoch, trace[-1])
    return TrainResult(model.params, trace, batch_losses)


def train(model, cfg: TrainConfig, source: TaskSource | None = None, images: np.ndarray | None = None,
          on_epoch=None) -> TrainResult:
    """Optimise the model in place; deterministic given ``cfg``.

    Each epoch draws ``tasks_per_epoch`` tasks (or images) in batches of
    ``batch_size``; every batch yields one Adam step on the batch-mean loss.
    A numeric fault restores the parameters from the end of the last
    completed epoch and raises :class:`TrainingAborted`.
    """
    bs = cfg.batch_size
    if isinstance(model, OnGridModel):
        if images is None:
            raise ValueError("on-grid training needs an image array")
        images = np.asarray(images, dtype=model.dtype)
        h, w = images.shape[-2:]

        def batches(epoch):
            order = _rng.stream(cfg.seed, epoch, _rng.SHUFFLE).permutation(len(images))
            per_epoch = min(cfg.tasks_per_epoch, len(images))
            for start in range(0, per_epoch, bs):
                idx = order[start:start + bs]
                masks = np.stack([sample_mask(h, w, epoch * len(images) + int(i), cfg.seed) for i in idx])
                yield images[idx], masks.astype(model.dtype)

        return _run(model, cfg, batches, lambda b: ongrid_batch(model, *b), on_epoch)

    source = source or task_source(cfg)

    def batches(epoch):
        base = epoch * cfg.tasks_per_epoch
        for start in range(0, cfg.tasks_per_epoch, bs):
            stop = min(start + bs, cfg.tasks_per_epoch)
            yield [source(base + i) for i in range(start, stop)]

    return _run(model, cfg, batches, lambda b: offgrid_batch(model, b), on_epoch)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    suite: str
    mean_ll: float
    std_ll: float
    n_tasks: int
    repeats: int
    mean_ctx_std: float = float("nan")
    recon_loss: float = float("nan")
    max_std_diff_under_y_scale: float = float("nan")

    def to_record(self) -> dict:
        return dataclasses.asdict(self)


def eval_seed(seed: int, repeat: int) -> int:
    return EVAL_SEED_OFFSET + seed * 1024 + repeat


def _std_at(model, xc, yc, xq) -> np.ndarray:
    return model.predict(Task(xc, yc, xq, np.zeros(len(xq)))).std


def evaluate(model, suite: str, n_tasks: int, repeats: int = 1, dataset: str = "eq", seed: int = 0,
             series: SmartMeterSeries | None = None, tasks: Sequence[Task] | None = None) -> EvalReport:
    """Mean +- std (over repeats) of the per-task average target log-likelihood.

    Each repeat draws fresh seeded tasks. Auxiliary statistics (std at the
    context points, reconstruction loss, std change under the y-scale
    transform) come from the first repeat.
    """
    if repeats < 1 or n_tasks < 1:
        raise ValueError("n_tasks and repeats must be positive")
    factor = 1.5 if dataset == "smartmeter" else 10.0
    means, ctx_std, recon, diffs = [], [], [], []
    for rep in range(repeats):
        if tasks is not None and rep == 0:
            batch = list(tasks)
        else:
            src = TaskSource(dataset, eval_seed(seed, rep), suite, series)
            batch = [src(i) for i in range(n_tasks)]
        lls = np.empty(len(batch))
        for i, task in enumerate(batch):
            pred = model.predict(task)
            lls[i] = gaussian_loglik(task.y_target, GaussianPrediction(pred.mean, pred.std))
            if rep == 0:
                recon.append(pred.recon_loss)
                ctx_std.append(float(np.mean(_std_at(model, task.x_context, task.y_context, task.x_context))))
                scaled = ood_y_scale(task, factor)
                diffs.append(float(np.max(np.abs(model.predict(scaled).std - pred.std))))
        # fixed sequential order keeps the reduction reproducible
        means.append(float(np.sum(lls) / len(lls)))
    return EvalReport(suite, float(np.mean(means)), float(np.std(means)), len(batch), repeats,
                      float(np.mean(ctx_std)), float(np.mean(recon)), float(np.max(diffs)))


@dataclass
class VarianceAudit:
    model: str
    n_tasks: int
    factor: float
    max_std_diff: float
    per_task_max_diff: list
    mean_ctx_std: float
    mean_ctx_std_scaled: float

    def to_record(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "VarianceAudit":
        return cls(**rec)


def ood_variance_audit(model, n_tasks: int, source: TaskSource | None = None, factor: float = 10.0,
                       tasks: Sequence[Task] | None = None) -> VarianceAudit:
    """Compare predicted std before and after multiplying every value by ``factor``."""
    if tasks is None:
        source = source or TaskSource("eq", EVAL_SEED_OFFSET)
        tasks = [source(i) for i in range(n_tasks)]
    per_task, ctx, ctx_scaled = [], [], []
    for task in tasks:
        scaled = ood_y_scale(task, factor)
        diff = np.abs(model.predict(scaled).std - model.predict(task).std)
        per_task.append(float(np.max(diff)))
        ctx.append(float(np.mean(_std_at(model, task.x_context, task.y_context, task.x_context))))
        ctx_scaled.append(float(np.mean(_std_at(model, scaled.x_context, scaled.y_context, scaled.x_context))))
    return VarianceAudit(getattr(model, "kind", "?"), len(per_task), float(factor), max(per_task),
                         per_task, float(np.mean(ctx)), float(np.mean(ctx_scaled)))


def write_records(records: Iterable[dict], path) -> None:
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode())


def read_records(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"NPPV"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def encode_checkpoint(params: Mapping[str, np.ndarray], config: Mapping[str, str]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    lines = []
    for key, value in config.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"config entry {key!r} cannot be encoded as a key=value line")
        lines.append(f"{key}={value}")
    text = "\n".join(lines).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"parameter {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        code = _DTYPE_CODES[arr.dtype]
        buf.write(struct.pack("<B", code))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def decode_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedCheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, have {len(raw) - pos}")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (text_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        text = take(text_len, "config").decode("utf-8")
    except UnicodeDecodeError as err:
        raise CheckpointError(f"config block is not UTF-8: {err}") from None
    config = {}
    for line in filter(None, text.split("\n")):
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"config line {line!r} is not key=value")
        config[key] = value
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as err:
            raise CheckpointError(f"tensor name is not UTF-8: {err}") from None
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        (code,) = struct.unpack("<B", take(1, f"dtype of {name}"))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(size * dt.itemsize, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after the last tensor")
    return params, config


def save_checkpoint(params: Mapping[str, np.ndarray], cfg, path) -> None:
    config = cfg.to_strings() if isinstance(cfg, TrainConfig) else dict(cfg)
    atomic_write(path, encode_checkpoint(params, config))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode_checkpoint(Path(path).read_bytes())


def model_from_checkpoint(path):
    """Rebuild the model recorded in a checkpoint; returns ``(model, TrainConfig)``."""
    params, config = load_checkpoint(path)
    try:
        cfg = TrainConfig.from_strings(config)
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"checkpoint config is invalid: {err}") from None
    model = build_model(cfg)
    missing = set(model.params) ^ set(params)
    if missing:
        raise CheckpointError(f"checkpoint parameters do not match the model: {sorted(missing)[:5]}")
    for k, v in params.items():
        if v.shape != model.params[k].shape:
            raise CheckpointError(f"parameter {k!r} has shape {v.shape}, model expects {model.params[k].shape}")
    model.params = params
    return model, cfg


def evaluate_images(model: OnGridModel, images: np.ndarray, n_tasks: int, repeats: int = 1,
                    seed: int = 0) -> EvalReport:
    """Per-pixel log-likelihood of whole images given random context masks."""
    images = np.asarray(images, dtype=model.dtype)
    if repeats < 1 or n_tasks < 1:
        raise ValueError("n_tasks and repeats must be positive")
    n_tasks = min(n_tasks, len(images))
    h, w = images.shape[-2:]
    means, recon, diffs = [], [], []
    for rep in range(repeats):
        lls = np.empty(n_tasks)
        for i in range(n_tasks):
            mask = sample_mask(h, w, i, eval_seed(seed, rep)).astype(model.dtype)
            mu, sigma, rec = model.forward(images[i][None], mask[None])
            mu, sigma = mu.data.astype(np.float64), sigma.data.astype(np.float64)
            z = (images[i] - mu[0]) / sigma[0]
            lls[i] = float(np.mean(-np.log(sigma[0]) - 0.5 * LOG_2PI - 0.5 * z * z))
            if rep == 0:
                recon.append(float(rec.data))
                scaled = model.forward(10.0 * images[i][None], mask[None])[1].data
                diffs.append(float(np.max(np.abs(scaled.astype(np.float64) - sigma))))
        means.append(float(np.sum(lls) / n_tasks))
    return EvalReport("in-range", float(np.mean(means)), float(np.std(means)), n_tasks, repeats,
                      float("nan"), float(np.mean(recon)), float(np.max(diffs)))
