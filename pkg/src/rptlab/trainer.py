"""Training loop, evaluation, few-shot subsets and the fine-tuning baseline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import serialize
from . import tasks as tk
from . import tensor as T
from .errors import ContractError, NumericError
from .model import Batch, PromptModel, collate
from .optim import AdamWConfig, OptimState, adamw_step

METRIC_KEYS = ("epoch", "split", "task", "metric", "value", "wall_ms", "config_hash")


@dataclass
class TrainConfig:
    lr: float = 0.3
    batch: int = 8
    epochs: int = 15
    seed: int = 1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    clip_norm: float | None = None
    eval_batch: int = 128
    record_wall_time: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError(f"lr must be non-negative, got {self.lr}")
        if self.batch < 1 or self.epochs < 0:
            raise ContractError("batch must be >= 1 and epochs >= 0")

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(lr=self.lr, weight_decay=self.weight_decay, beta1=self.beta1, beta2=self.beta2,
                           eps=self.eps, bias_correction=self.bias_correction, clip_norm=self.clip_norm)


def default_epochs(n_prompt: int) -> int:
    """15 epochs for short prompts, 20 for long ones (100 tokens)."""
    return 20 if n_prompt >= 100 else 15


FINE_TUNE_EPOCHS = 30


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    task: str
    metric: str
    value: float
    wall_ms: int = 0
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in METRIC_KEYS}, separators=(", ", ": "))

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        obj = json.loads(line)
        return cls(**{k: obj[k] for k in METRIC_KEYS})


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    best_epoch: int
    best_metric: float
    best_state: dict[str, np.ndarray]
    epoch_states: list[dict[str, np.ndarray]] = field(default_factory=list)

    def curve(self, split: str = "val", metric: str = "accuracy") -> list[float]:
        return [r.value for r in self.records if r.split == split and r.metric == metric]


def config_hash(obj) -> str:
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    raw = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(raw).hexdigest()[:12]


class _FormatCache:
    """Formatted examples per (task, split, n), computed once per model layout."""

    def __init__(self, model: PromptModel, task: tk.TaskSpec):
        self.model, self.task = model, task
        self._cache: dict[str, list[tk.Formatted]] = {}

    def get(self, split: str) -> list[tk.Formatted]:
        if split not in self._cache:
            m = self.model
            self._cache[split] = [
                tk.format_example(m.arch, m.n_prompt, ex, self.task.verbalizer, m.backbone.config.max_len)
                for ex in self.task.split(split)
            ]
        return self._cache[split]


def iter_batches(formatted: Sequence[tk.Formatted], examples: Sequence[tk.Example], order: Iterable[int],
                 size: int) -> Iterable[Batch]:
    order = list(order)
    for i in range(0, len(order), size):
        idx = order[i:i + size]
        yield collate([formatted[j] for j in idx], [examples[j].label for j in idx])


def evaluate(model: PromptModel, task: tk.TaskSpec, split: str = "val", epoch: int = 0,
             cfg_hash: str = "", eval_batch: int = 128) -> MetricsRecord:
    """Accuracy on a split; deterministic, no dropout, no graph."""
    examples = task.split(split)
    formatted = _FormatCache(model, task).get(split)
    return _evaluate(model, task, split, examples, formatted, epoch, cfg_hash, eval_batch)


def _evaluate(model, task, split, examples, formatted, epoch, cfg_hash, eval_batch) -> MetricsRecord:
    correct = 0
    for batch in iter_batches(formatted, examples, range(len(examples)), eval_batch):
        correct += int(model.predict_correct(batch).sum())
    return MetricsRecord(epoch, split, task.name, "accuracy", correct / len(examples), 0, cfg_hash)


def train_loop(model: PromptModel, task: tk.TaskSpec, cfg: TrainConfig, run_dir: str | Path | None = None,
               fine_tune: bool = False, cfg_hash: str | None = None, keep_epoch_states: bool = False,
               checkpoint_header: dict | None = None) -> TrainResult:
    """Optimise every trainable tensor of ``model`` on ``task``'s train split.

    Unless ``fine_tune`` is set, the backbone must be frozen. After each epoch
    the validation split is scored and the task-specific state checkpointed;
    the best epoch is the highest validation accuracy, earliest on ties.
    """
    if not task.train:
        raise ContractError(f"task {task.name!r} has an empty train split")
    if not fine_tune and not model.backbone.frozen:
        raise ContractError("backbone must be frozen for prompt tuning (use fine_tune=True otherwise)")
    cfg_hash = cfg_hash if cfg_hash is not None else config_hash(cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    params = model.trainable()
    opt_cfg = cfg.adamw()
    state = OptimState()
    fmt = _FormatCache(model, task)
    train_fmt, val_fmt = fmt.get("train"), fmt.get("val")
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    records: list[MetricsRecord] = []
    epoch_states = []
    best_epoch, best_metric, best_state = 0, -np.inf, model.task_state()
    if fine_tune:
        snapshot = lambda: {k: p.data.copy() for k, p in model.parameters().items()}  # noqa: E731
    else:
        snapshot = model.task_state
    start = time.perf_counter()

    def wall() -> int:
        return int((time.perf_counter() - start) * 1000) if cfg.record_wall_time else 0

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(task.train))
        total, count = 0.0, 0
        for batch in iter_batches(train_fmt, task.train, order, cfg.batch):
            for p in params:
                p.grad = None
            loss = model.loss(batch, training=True, rng=dropout_rng)
            if not np.isfinite(loss.data):
                raise NumericError(f"loss became non-finite at epoch {epoch} on {task.name}")
            loss.backward()
            adamw_step(params, state, opt_cfg)
            total += loss.item() * len(batch)
            count += len(batch)
        for p in params:
            p.grad = None
        records.append(MetricsRecord(epoch, "train", task.name, "loss", total / count, wall(), cfg_hash))
        val = _evaluate(model, task, "val", task.val, val_fmt, epoch, cfg_hash, cfg.eval_batch)
        val.wall_ms = wall()
        records.append(val)
        snap = snapshot()
        if keep_epoch_states:
            epoch_states.append(snap)
        if val.value > best_metric:
            best_epoch, best_metric, best_state = epoch, val.value, snap
        if run_dir is not None:
            serialize.save(run_dir / f"epoch-{epoch}.ckpt", snap, {**(checkpoint_header or {}), "epoch": epoch})
    if run_dir is not None and cfg.epochs:
        serialize.save(run_dir / "best.ckpt", best_state, {**(checkpoint_header or {}), "epoch": best_epoch})
    if cfg.epochs == 0:
        best_metric = float("nan")
    return TrainResult(records, best_epoch, float(best_metric), best_state, epoch_states)


def fine_tune_mode(model: PromptModel, task: tk.TaskSpec, cfg: TrainConfig | None = None,
                   run_dir: str | Path | None = None) -> TrainResult:
    """Full-parameter baseline: trains an unfrozen copy of the backbone.

    The caller's backbone is never touched. Defaults to 30 epochs.
    """
    cfg = cfg or TrainConfig(epochs=FINE_TUNE_EPOCHS)
    backbone = model.backbone.copy()
    backbone.unfreeze()
    tuned = PromptModel(backbone, model.prompt, model.spec, model.reparam, model.head)
    return train_loop(tuned, task, cfg, run_dir=run_dir, fine_tune=True)


def best_epoch(records: Sequence[MetricsRecord], metric: str = "accuracy") -> tuple[int, float]:
    """Highest validation value; ties go to the earliest epoch."""
    best = (0, -np.inf)
    for r in records:
        if r.split == "val" and r.metric == metric and r.value > best[1]:
            best = (r.epoch, r.value)
    return best


def few_shot_subset(task: tk.TaskSpec, k: int, seed: int) -> tk.TaskSpec:
    """A copy of ``task`` whose train split has exactly ``k`` examples per class.

    The choice depends only on (task name, task seed, k, seed), so every method
    compared on the same arguments trains on identical data.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    key = _subset_key(task, k, seed)
    if key in _SUBSET_CACHE:
        ids = _SUBSET_CACHE[key]
    else:
        rng = np.random.default_rng([seed, task.seed, k, tk.TASK_NAMES.index(task.name)
                                     if task.name in tk.TASK_NAMES else 99])
        ids = []
        for c in range(task.classes):
            members = [i for i, ex in enumerate(task.train) if ex.label == c]
            if len(members) < k:
                raise ContractError(f"task {task.name!r} has only {len(members)} examples of class {c}; need {k}")
            ids.extend(int(i) for i in rng.choice(members, size=k, replace=False))
        ids.sort()
        _SUBSET_CACHE[key] = ids
    train = [task.train[i] for i in ids]
    return dataclasses.replace(task, train=train)


_SUBSET_CACHE: dict[tuple, list[int]] = {}


def _subset_key(task: tk.TaskSpec, k: int, seed: int) -> tuple:
    return (task.name, task.seed, len(task.train), k, seed)


def write_metrics(path: str | Path, records: Sequence[MetricsRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_json() + "\n" for r in records))
    return path


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    return [MetricsRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
