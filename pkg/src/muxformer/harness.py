"""Training, evaluation, throughput benchmarking and FLOPs reporting."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tape, backward
from .costmodel import FlopsReport, compare_flops, flops_per_image
from .data import Dataset, load_dataset, make_mux_batches
from .losses import LossConfig, TeacherEmbeddings, cross_entropy, load_teacher, random_teacher, total_loss
from .models import ModelConfig, ModelState, MuxBatch, build_model, forward, load_checkpoint, save_checkpoint
from .nn import ConfigError
from .optim import AdamW, OptimizerConfig

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "epoch", "total", "ce", "smooth", "clip", "retrieval", "lr"]
LOSS_TERMS = ("ce", "smooth", "clip", "retrieval")


class TrainingError(RuntimeError):
    """Training hit a non-finite value."""


@dataclass(frozen=True)
class DataSpec:
    path: str
    format: str = "idx-ubyte"
    labels_path: str | None = None
    pad_to: int | None = None
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None
    num_classes: int | None = None
    offset: int = 0
    limit: int | None = None

    def load(self) -> Dataset:
        return load_dataset(self.path, self.format, labels_path=self.labels_path, pad_to=self.pad_to,
                            mean=self.mean, std=self.std, num_classes=self.num_classes,
                            offset=self.offset, limit=self.limit)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    train_data: DataSpec | None = None
    val_data: DataSpec | None = None
    teacher_path: str | None = None
    output_dir: str = "runs"
    eval_every: int = 1
    flip: bool = False

    def validate(self) -> "TrainConfig":
        self.model.validate()
        self.loss.validate(self.model.n_mux)
        self.optimizer.validate()
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size % self.model.n_mux:
            raise ConfigError(f"batch_size {self.batch_size} must be divisible by n_mux {self.model.n_mux}")
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        if "model" in data:
            data["model"] = ModelConfig.from_dict(data["model"])
        if "loss" in data:
            data["loss"] = LossConfig.from_dict(data["loss"])
        if "optimizer" in data:
            data["optimizer"] = OptimizerConfig.from_dict(data["optimizer"])
        for key in ("train_data", "val_data"):
            if data.get(key) is not None:
                spec = dict(data[key])
                for k in ("mean", "std"):
                    if spec.get(k) is not None:
                        spec[k] = tuple(spec[k])
                data[key] = DataSpec(**spec)
        return cls(**data)

    def run_name(self) -> str:
        """Config hash + seed; output locations do not affect the hash."""
        body = self.to_dict()
        body.pop("output_dir", None)
        digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]
        return f"{digest}-seed{self.seed}"


def load_config_file(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_train_config(path) -> TrainConfig:
    """Read a TrainConfig JSON; relative dataset and teacher paths resolve against its directory."""
    base = Path(path).resolve().parent
    data = load_config_file(path)

    def resolve(p):
        return p if p is None or Path(p).is_absolute() else str(base / p)

    for key in ("train_data", "val_data"):
        if data.get(key):
            data[key] = dict(data[key], path=resolve(data[key]["path"]),
                             labels_path=resolve(data[key].get("labels_path")))
    if data.get("teacher_path"):
        data["teacher_path"] = resolve(data["teacher_path"])
    return TrainConfig.from_dict(data)


def model_config_from_file(path) -> ModelConfig:
    """A model config from either a bare ModelConfig JSON or a TrainConfig JSON."""
    data = load_config_file(path)
    if "model" in data:
        data = data["model"]
    return ModelConfig.from_dict(data).validate()


@dataclass
class TrainRecord:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    state: ModelState | None = field(default=None, repr=False)


def _first_non_finite(terms, grads: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray]) -> str | None:
    for name, t in terms.items():
        if not np.all(np.isfinite(t.data)):
            return f"loss.{name}"
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            return f"grad.{name}"
    for name in sorted(params):
        if not np.all(np.isfinite(params[name])):
            return f"param.{name}"
    return None


def train_step(state: ModelState, batch: MuxBatch, loss_cfg: LossConfig, opt: AdamW,
               teacher: TeacherEmbeddings | None = None) -> dict:
    """One forward/backward/update; returns the loss components and accuracy counts."""
    with Tape() as tape:
        leaves = state.leaves()
        out = forward(state, batch, leaves)
        total, terms = total_loss(state, leaves, batch, out, loss_cfg, teacher)
    trainable = state.trainable
    all_grads = backward(total, tape, wrt=[leaves[k] for k in trainable])
    grads = {k: all_grads[leaves[k].node_id] for k in trainable}
    bad = _first_non_finite({"total": total, **terms}, grads, state.params)
    if bad is not None:
        raise TrainingError(f"non-finite value in {bad} at optimizer step {opt.t + 1}")
    lr = opt.step(state.params, grads)
    labels = batch.flat_labels()
    pred = out.logits.data.argmax(axis=1)
    row = {"total": float(total.data), "lr": lr, "correct": int((pred == labels).sum()),
           "count": int(labels.size)}
    for name in LOSS_TERMS:
        row[name] = float(terms[name].data) if name in terms else 0.0
    return row


def fit_state(state: ModelState, train_ds: Dataset, loss_cfg: LossConfig, opt_cfg: OptimizerConfig,
              epochs: int, batch_size: int, seed: int, teacher: TeacherEmbeddings | None = None,
              flip: bool = False, on_step: Callable[[dict], None] | None = None,
              on_epoch: Callable[[int, ModelState], None] | None = None) -> AdamW:
    """Train ``state`` in place; batches for epoch ``e`` use seed ``seed + e``."""
    n = state.config.n_mux
    steps_per_epoch = len(train_ds) // batch_size
    opt = AdamW(opt_cfg, total_steps=epochs * steps_per_epoch)
    step = 0
    for epoch in range(epochs):
        for batch in make_mux_batches(train_ds, n, batch_size, seed=seed + epoch, shuffle=True, flip=flip):
            row = train_step(state, batch, loss_cfg, opt, teacher)
            step += 1
            row.update(step=step, epoch=epoch)
            if on_step is not None:
                on_step(row)
        if on_epoch is not None:
            on_epoch(epoch, state)
    return opt


def _teacher_for(cfg: TrainConfig, datasets: Sequence[Dataset]) -> TeacherEmbeddings | None:
    if not cfg.loss.lambda_clip:
        return None
    if cfg.teacher_path:
        return load_teacher(cfg.teacher_path)
    if cfg.model.teacher_dim <= 0:
        raise ConfigError("lambda_clip > 0 requires model.teacher_dim > 0 or a teacher_path")
    ids = np.unique(np.concatenate([d.ids for d in datasets]))
    return random_teacher(ids, cfg.model.teacher_dim, cfg.seed)


def train(cfg: TrainConfig) -> TrainRecord:
    """Run a full training job, writing a metrics CSV and checkpoints under ``output_dir``."""
    cfg.validate()
    if cfg.train_data is None:
        raise ConfigError("train_data is required")
    train_ds = cfg.train_data.load()
    val_ds = cfg.val_data.load() if cfg.val_data is not None else None
    if train_ds.num_classes != cfg.model.num_classes:
        raise ConfigError(f"dataset has {train_ds.num_classes} classes, model expects {cfg.model.num_classes}")
    teacher = _teacher_for(cfg, [d for d in (train_ds, val_ds) if d is not None])
    state = build_model(cfg.model, cfg.seed)

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = cfg.run_name()
    record = TrainRecord(metrics_path=str(out_dir / f"{name}.csv"),
                         checkpoint_path=str(out_dir / f"{name}.muxf"), state=state)
    fh = open(record.metrics_path, "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    epoch_start = [time.perf_counter()]
    running = {"correct": 0, "count": 0}

    def on_step(row):
        writer.writerow([row["step"], row["epoch"]] + [repr(row[k]) for k in METRIC_FIELDS[2:]])
        running["correct"] += row["correct"]
        running["count"] += row["count"]
        record.steps.append({k: row[k] for k in METRIC_FIELDS})

    def on_epoch(epoch, st):
        info = {"epoch": epoch,
                "train_running_accuracy": running["correct"] / max(running["count"], 1),
                "seconds": time.perf_counter() - epoch_start[0]}
        running.update(correct=0, count=0)
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            if val_ds is not None:
                ev = evaluate(st, val_ds, cfg.batch_size)
                info.update(val_accuracy=ev["top1"], val_loss=ev["mean_loss"])
            save_checkpoint(st, record.checkpoint_path)
        log.info("epoch %d: %s", epoch, info)
        record.epochs.append(info)
        epoch_start[0] = time.perf_counter()

    try:
        fit_state(state, train_ds, cfg.loss, cfg.optimizer, cfg.epochs, cfg.batch_size, cfg.seed,
                  teacher=teacher, flip=cfg.flip, on_step=on_step, on_epoch=on_epoch)
    finally:
        fh.close()
    return record


def evaluate(checkpoint, dataset: Dataset, batch_size: int = 128) -> dict:
    """Top-1 accuracy, per-slot accuracy and mean CE over all complete mux batches."""
    state = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    cfg = state.config
    if dataset.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, checkpoint expects {cfg.num_classes}")
    n = cfg.n_mux
    batch_size = max(n, batch_size - batch_size % n)
    if len(dataset) < batch_size:
        batch_size = len(dataset) - len(dataset) % n
    correct = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=np.int64)
    loss_sum, rows = 0.0, 0
    for batch in make_mux_batches(dataset, n, batch_size, shuffle=False):
        logits = forward(state, batch).logits
        labels = batch.flat_labels()
        loss_sum += float(cross_entropy(logits, labels).data) * labels.size
        rows += labels.size
        hit = logits.data.argmax(axis=1) == labels
        g = batch.group_size
        for i in range(n):
            correct[i] += int(hit[i * g:(i + 1) * g].sum())
            seen[i] += g
    per_slot = (correct / np.maximum(seen, 1)).tolist()
    return {"top1": float(correct.sum() / max(seen.sum(), 1)), "per_slot": per_slot,
            "mean_loss": loss_sum / max(rows, 1), "count": int(seen.sum())}


def matched_vit(cfg: ModelConfig) -> ModelConfig:
    return cfg.replace(variant="vit", n_mux=1, tokenizer="cnn", concat_point=0)


def _synthetic_batch(cfg: ModelConfig, batch_size: int, seed: int) -> MuxBatch:
    rng = np.random.default_rng(seed)
    shape = (batch_size // cfg.n_mux, cfg.channels, cfg.image_size, cfg.image_size)
    return MuxBatch([rng.standard_normal(shape).astype(np.float32) for _ in range(cfg.n_mux)])


def _time_pair(states: Sequence[ModelState], batch_size: int, repeats: int, warmup: int,
               seed: int) -> list[list[float]]:
    """Alternate timed passes over ``states`` so machine drift hits each equally."""
    batches = [_synthetic_batch(s.config, batch_size, seed) for s in states]
    for _ in range(warmup):
        for s, b in zip(states, batches):
            forward(s, b)
    times: list[list[float]] = [[] for _ in states]
    for _ in range(repeats):
        for s, b, out in zip(states, batches, times):
            t0 = time.perf_counter()
            forward(s, b)
            out.append(time.perf_counter() - t0)
    return times


def bench_throughput(cfg: ModelConfig, batch_sizes: Sequence[int] = (64,), repeats: int = 5,
                     warmup: int = 1, threads: int | None = 1, seed: int = 0) -> dict:
    """Median-of-``repeats`` inference images/sec for ``cfg`` and its matched ViT.

    Warmup passes are not timed. ``threads`` caps BLAS threads (``None``
    leaves the library default).
    """
    cfg.validate()
    vit_cfg = matched_vit(cfg)
    state, vit_state = build_model(cfg, seed), build_model(vit_cfg, seed)
    results = {}
    with threadpool_limits(limits=threads):
        for bs in batch_sizes:
            if bs % cfg.n_mux:
                raise ConfigError(f"batch size {bs} is not divisible by n_mux {cfg.n_mux}")
            t_model, t_vit = _time_pair([state, vit_state], bs, repeats, warmup, seed)
            ips = bs / statistics.median(t_model)
            vit_ips = bs / statistics.median(t_vit)
            results[bs] = {"images_per_sec": ips, "vit_images_per_sec": vit_ips,
                           "speedup": ips / vit_ips, "times": t_model, "vit_times": t_vit}
    return results


def report_flops(configs: Sequence[ModelConfig], names: Sequence[str] | None = None,
                 as_csv: bool = False) -> str:
    """Text (or CSV) FLOPs reports, plus savings of each config against the first."""
    names = list(names) if names is not None else [c.variant for c in configs]
    reports: list[FlopsReport] = [flops_per_image(c) for c in configs]
    if as_csv:
        lines = ["config,stage,flops,share"]
        for name, rep in zip(names, reports):
            for row in rep.to_csv().splitlines()[1:]:
                lines.append(f"{name},{row}")
        return "\n".join(lines) + "\n"
    parts = [rep.as_text(name) for name, rep in zip(names, reports)]
    if len(configs) > 1:
        parts.append(f"savings vs {names[0]}:")
        for name, cfg in zip(names[1:], configs[1:]):
            cmp = compare_flops(cfg, configs[0])
            parts.append(f"  {name:<28} {cmp['percent_savings']:7.2f}%  (ratio {cmp['ratio']:.4f})")
    return "\n".join(parts) + "\n"
