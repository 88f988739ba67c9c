"""Run configuration, run directories, sweeps and reports.

A :class:`RunConfig` is one fully specified experiment: backbone, method,
prompt layout, optimisation settings, task and seed. :func:`run` executes it
into a self-describing directory. The sweep helpers expand a base config along
one axis, run every (cell, task, seed), and summarise into a
:class:`SweepReport`; failed runs stay in the report with their error text.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from . import serialize
from . import tasks as tk
from .backbone import Backbone, BackboneConfig
from .errors import ConfigError, ContractError, NumericError
from .model import PromptModel
from .pretrain import pretrain_backbone
from .reparam import (INIT_STRATEGIES, PromptBank, ReparamNet, ReparamSpec, bake, count_params, init_prompt,
                      load_prompt, save_prompt)
from .tensor import Parameter
from .trainer import (FINE_TUNE_EPOCHS, MetricsRecord, TrainConfig, TrainResult, default_epochs, evaluate,
                      few_shot_subset, fine_tune_mode, train_loop, write_metrics)

METHODS = ("pt", "res-pt", "mlp-pt", "lstm-pt", "fine-tune")
METHOD_KIND = {"pt": "identity", "res-pt": "residual-mlp", "mlp-pt": "mlp-no-skip", "lstm-pt": "lstm",
               "fine-tune": "identity"}
DEFAULT_LR = {"pt": 0.3, "res-pt": 0.7, "mlp-pt": 0.7, "lstm-pt": 0.7, "fine-tune": 1e-3}
DEFAULT_SEEDS = (1, 2, 3, 4, 5)
LR_GRID = (0.001, 0.01, 0.03, 0.3, 10.0)
WIDTH_GRID = (5, 10, 50, 100, 400, 1500)
FEWSHOT_KS = (5, 20, 100)
PROMPT_LENGTHS = (2, 10, 100)
RUNS_ENV = "RPT_RUNS_DIR"


def runs_root(root: str | Path | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(RUNS_ENV, "runs"))


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    method: str = "res-pt"
    # backbone: either a checkpoint path or a config pretrained on demand
    backbone_path: str = ""
    arch: str = "encoder-decoder"
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn: int = 128
    max_len: int = 128
    pretrain_steps: int = 6000
    pretrain_seed: int = 1000
    # prompt and reparameterization
    n: int = 10
    m: int = 400
    shared: bool = True
    init: str = "sampled-vocab"
    lstm_hidden: int = 300
    lstm_dropout: float = 0.05
    # optimisation
    lr: float | None = None
    epochs: int | None = None
    batch: int = 8
    seed: int = 1
    weight_decay: float = 0.01
    save_checkpoints: bool = True
    # data
    tasks: tuple[str, ...] = tk.TASK_NAMES
    suite_seed: int = 0
    train_size: int = 400
    val_size: int = 100
    k: int | None = None

    def __post_init__(self):
        validate(self)

    @property
    def effective_lr(self) -> float:
        return DEFAULT_LR[self.method] if self.lr is None else self.lr

    @property
    def effective_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return FINE_TUNE_EPOCHS if self.method == "fine-tune" else default_epochs(self.n)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(arch=self.arch, layers=self.layers, d=self.d, heads=self.heads, ffn=self.ffn,
                              vocab=tk.VOCAB_SIZE, max_len=self.max_len)

    def reparam_spec(self) -> ReparamSpec:
        kind = METHOD_KIND[self.method]
        if kind == "identity":
            return ReparamSpec(kind="identity")
        if kind == "lstm":
            return ReparamSpec(kind="lstm", lstm_hidden=self.lstm_hidden, lstm_dropout=self.lstm_dropout)
        return ReparamSpec(kind=kind, m=self.m, shared=self.shared)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.effective_lr, batch=self.batch, epochs=self.effective_epochs, seed=self.seed,
                           weight_decay=self.weight_decay)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def run_id(self) -> str:
        task = self.tasks[0] if len(self.tasks) == 1 else "suite"
        shot = f"-k{self.k}" if self.k is not None else ""
        return f"{self.method}-{task}-n{self.n}{shot}-s{self.seed}-{config_digest(self)}"


# dotted key -> attribute; the order here is the serialization order
KEYS: dict[str, str] = {
    "method": "method",
    "backbone.path": "backbone_path",
    "backbone.arch": "arch",
    "backbone.layers": "layers",
    "backbone.d": "d",
    "backbone.heads": "heads",
    "backbone.ffn": "ffn",
    "backbone.max_len": "max_len",
    "backbone.pretrain_steps": "pretrain_steps",
    "backbone.pretrain_seed": "pretrain_seed",
    "prompt.n": "n",
    "prompt.init": "init",
    "reparam.m": "m",
    "reparam.shared": "shared",
    "reparam.lstm_hidden": "lstm_hidden",
    "reparam.lstm_dropout": "lstm_dropout",
    "train.lr": "lr",
    "train.epochs": "epochs",
    "train.batch": "batch",
    "train.seed": "seed",
    "train.weight_decay": "weight_decay",
    "train.save_checkpoints": "save_checkpoints",
    "task.names": "tasks",
    "task.suite_seed": "suite_seed",
    "task.train_size": "train_size",
    "task.val_size": "val_size",
    "task.k": "k",
}
ATTR_TO_KEY = {v: k for k, v in KEYS.items()}


def _check(ok: bool, key: str, msg: str, value) -> None:
    if not ok:
        raise ConfigError(f"{key}: {msg} (got {value!r})")


def validate(cfg: RunConfig) -> None:
    """Field-level validation; raises ConfigError naming the dotted key."""
    _check(cfg.method in METHODS, "method", f"must be one of {', '.join(METHODS)}", cfg.method)
    _check(cfg.arch in ("encoder-only", "encoder-decoder"), "backbone.arch",
           "must be encoder-only or encoder-decoder", cfg.arch)
    for attr in ("layers", "pretrain_steps", "train_size"):
        _check(getattr(cfg, attr) >= 0, ATTR_TO_KEY[attr], "must be >= 0", getattr(cfg, attr))
    for attr in ("d", "heads", "ffn", "max_len", "batch", "val_size", "lstm_hidden"):
        _check(getattr(cfg, attr) >= 1, ATTR_TO_KEY[attr], "must be >= 1", getattr(cfg, attr))
    _check(cfg.d % cfg.heads == 0, "backbone.d", f"must be divisible by backbone.heads={cfg.heads}", cfg.d)
    _check(cfg.n >= (0 if cfg.method == "fine-tune" else 1), "prompt.n", "must be >= 1 for prompt methods", cfg.n)
    _check(cfg.init in INIT_STRATEGIES, "prompt.init", f"must be one of {', '.join(INIT_STRATEGIES)}", cfg.init)
    _check(cfg.m >= 1, "reparam.m", "must be >= 1", cfg.m)
    _check(cfg.shared or cfg.method in ("res-pt", "mlp-pt"), "reparam.shared",
           "separate networks exist only for res-pt and mlp-pt", cfg.shared)
    _check(0 <= cfg.lstm_dropout < 1, "reparam.lstm_dropout", "must be in [0, 1)", cfg.lstm_dropout)
    _check(cfg.lr is None or (math.isfinite(cfg.lr) and cfg.lr >= 0), "train.lr", "must be a finite number >= 0",
           cfg.lr)
    _check(cfg.epochs is None or cfg.epochs >= 0, "train.epochs", "must be >= 0", cfg.epochs)
    _check(cfg.weight_decay >= 0, "train.weight_decay", "must be >= 0", cfg.weight_decay)
    _check(len(cfg.tasks) >= 1, "task.names", "must name at least one task", cfg.tasks)
    for name in cfg.tasks:
        _check(name in tk.TASK_NAMES, "task.names", f"unknown task; choose from {', '.join(tk.TASK_NAMES)}", name)
    _check(cfg.k is None or cfg.k >= 1, "task.k", "must be >= 1", cfg.k)
    if cfg.k is not None:
        _check(cfg.k <= cfg.train_size // 2, "task.k", f"needs 2*k <= task.train_size={cfg.train_size}", cfg.k)
    fixed = cfg.n + 3 + (1 if cfg.arch == "encoder-decoder" else 0) + 1
    _check(fixed + 2 * tk.PAIR_LEN <= cfg.max_len and fixed + tk.SENT_LEN <= cfg.max_len, "backbone.max_len",
           f"too short for a {cfg.n}-token prompt plus the task inputs", cfg.max_len)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(attr: str, raw: str):
    key = ATTR_TO_KEY[attr]
    raw = raw.strip()
    ftype = {f.name: f.type for f in dataclasses.fields(RunConfig)}[attr]
    if raw.lower() == "none" and "None" in ftype:
        return None
    try:
        if attr == "tasks":
            return tuple(t.strip() for t in raw.split(",") if t.strip())
        if ftype.startswith("bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if ftype.startswith("int"):
            return int(raw)
        if ftype.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype.split(' ')[0]}") from None
    return raw


def parse_pairs(pairs: Iterable[tuple[str, str]], base: RunConfig | None = None) -> RunConfig:
    changes = {}
    for key, raw in pairs:
        if key not in KEYS:
            raise ConfigError(f"{key}: unknown config key")
        changes[KEYS[key]] = _parse_value(KEYS[key], raw)
    return dataclasses.replace(base or RunConfig(), **changes)


def _split_line(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}: expected key = value, got {line!r}")
    key, raw = line.split("=", 1)
    return key.strip(), raw.strip()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored.

    A ``[section]`` line prefixes the following keys with ``section.``.
    """
    pairs = []
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        key, raw = _split_line(line, f"line {lineno}")
        pairs.append((f"{section}.{key}" if section else key, raw))
    return parse_pairs(pairs, base)


def parse_overrides(items: Sequence[str], base: RunConfig) -> RunConfig:
    return parse_pairs([_split_line(item, "override") for item in items], base)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{key} = {_format_value(getattr(cfg, attr))}\n" for key, attr in KEYS.items())


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_overrides(overrides, parse_config(text))


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:12]


# -- shared inputs: backbones and tasks ------------------------------------------------

_BACKBONES: dict[str, Backbone] = {}


def backbone_cache_path(cfg: RunConfig, root: Path) -> Path:
    bc = cfg.backbone_config()
    key = f"{bc.to_json()}|steps={cfg.pretrain_steps}|seed={cfg.pretrain_seed}"
    return Path(root) / "_cache" / f"backbone-{hashlib.sha256(key.encode()).hexdigest()[:12]}.rptl"


def get_backbone(cfg: RunConfig, root: str | Path | None = None) -> Backbone:
    """The frozen backbone for ``cfg``: loaded from ``backbone.path`` or pretrained once and cached."""
    root = runs_root(root)
    path = Path(cfg.backbone_path) if cfg.backbone_path else backbone_cache_path(cfg, root)
    key = str(path.resolve())
    if key not in _BACKBONES:
        if path.exists():
            bb = Backbone.load(path)
        elif cfg.backbone_path:
            raise ConfigError(f"backbone.path: no such file {cfg.backbone_path!r}")
        else:
            bb, result = pretrain_backbone(cfg.backbone_config(), steps=cfg.pretrain_steps, seed=cfg.pretrain_seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            bb.save(path)
            path.with_suffix(".json").write_text(json.dumps(dataclasses.asdict(result), indent=1, sort_keys=True))
        bb.freeze()
        _BACKBONES[key] = bb
    return _BACKBONES[key]


def get_task(cfg: RunConfig, name: str, root: str | Path | None = None) -> tk.TaskSpec:
    cache = runs_root(root) / "_cache" / "tasks"
    task = tk.load_or_generate(cache, name, cfg.suite_seed, cfg.train_size, cfg.val_size)
    if cfg.k is not None:
        task = few_shot_subset(task, cfg.k, cfg.seed)
    return task


def build_model(cfg: RunConfig, backbone: Backbone) -> PromptModel:
    """Fresh task-specific state on top of ``backbone`` (prompt, reparam net, head)."""
    spec = cfg.reparam_spec()
    d = backbone.config.d
    bank = net = None
    if cfg.n > 0 and cfg.method != "fine-tune":
        bank = init_prompt(cfg.init, cfg.n, backbone.p("tok_emb").data, cfg.seed)
        if spec.kind != "identity":
            net = ReparamNet(spec, d, cfg.n, cfg.seed)
    head = None
    if backbone.config.arch == "encoder-only":
        rng = np.random.default_rng([cfg.seed, 7])
        head = Parameter(rng.normal(0.0, 0.02, size=(2, d)), "head.w")
    return PromptModel(backbone, bank, spec, net, head)


# -- single runs -----------------------------------------------------------------------

STAMP = {"package": "rptlab", "version": __version__, "record_format": serialize.VERSION}


@dataclass
class RunOutcome:
    config: RunConfig
    task: str
    run_dir: Path | None
    best_epoch: int = 0
    best_metric: float = float("nan")
    curve: list[float] = field(default_factory=list)
    error: str | None = None
    backbone_digest_before: str = ""
    backbone_digest_after: str = ""

    @property
    def ok(self) -> bool:
        return self.error is None


def run(cfg: RunConfig, run_dir: str | Path | None = None, root: str | Path | None = None) -> list[RunOutcome]:
    """Train ``cfg`` on each selected task; one run directory per task.

    Directory layout: ``config.txt`` (snapshot), ``stamp.json``,
    ``metrics.jsonl``, ``epoch-{k}.ckpt``, ``best.ckpt`` and, for prompt
    methods, ``baked.prompt``.
    """
    root = runs_root(root)
    outcomes = []
    for name in cfg.tasks:
        one = cfg.replace(tasks=(name,))
        target = Path(run_dir) if run_dir is not None and len(cfg.tasks) == 1 else None
        if target is None:
            target = (Path(run_dir) if run_dir is not None else root) / one.run_id()
        outcomes.append(run_single(one, target, root))
    return outcomes


def run_single(cfg: RunConfig, run_dir: Path, root: Path | None = None) -> RunOutcome:
    if len(cfg.tasks) != 1:
        raise ContractError("run_single needs exactly one task")
    root = runs_root(root)
    backbone = get_backbone(cfg, root)
    task = get_task(cfg, cfg.tasks[0], root)
    model = build_model(cfg, backbone)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(serialize_config(cfg))
    (run_dir / "stamp.json").write_text(json.dumps(STAMP, sort_keys=True) + "\n")
    header = {"run_config": serialize_config(cfg)}
    before = backbone.digest()
    tcfg = cfg.train_config()
    ckpt_dir = run_dir if cfg.save_checkpoints else None
    if cfg.method == "fine-tune":
        result = fine_tune_mode(model, task, tcfg, run_dir=ckpt_dir)
    else:
        result = train_loop(model, task, tcfg, run_dir=ckpt_dir, cfg_hash=config_digest(cfg),
                            checkpoint_header=header)
    write_metrics(run_dir / "metrics.jsonl", result.records)
    if cfg.method != "fine-tune":
        model.load_task_state(result.best_state)
        if not cfg.save_checkpoints:
            serialize.save(run_dir / "best.ckpt", result.best_state, {**header, "epoch": result.best_epoch})
        save_prompt(run_dir / "baked.prompt", model.spec, bake(model.spec, model.reparam, model.prompt))
    after = backbone.digest()
    if before != after:
        raise ContractError(f"backbone changed during a prompt-tuning run ({run_dir})")
    return RunOutcome(cfg, cfg.tasks[0], run_dir, result.best_epoch, result.best_metric, result.curve(),
                      None, before, after)


def load_run(run_dir: str | Path, root: str | Path | None = None, baked: bool = False) -> tuple[RunConfig, PromptModel]:
    """Rebuild the model of a finished run from its directory (best epoch state)."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.txt")
    backbone = get_backbone(cfg, root)
    if cfg.method == "fine-tune":
        _, state = serialize.load(run_dir / "best.ckpt")
        tuned = backbone.copy()
        tuned.load_state_dict({k: v for k, v in state.items() if k.startswith("backbone.")})
        tuned.freeze()
        model = build_model(cfg, tuned)
        model.load_task_state(state)
        return cfg, model
    model = build_model(cfg, backbone)
    if baked:
        spec, bank, _ = load_prompt(run_dir / "baked.prompt")
        head = None
        if model.head is not None:
            _, state = serialize.load(run_dir / "best.ckpt")
            head = Parameter(state["head.w"], "head.w")
        return cfg, PromptModel(backbone, bank, spec, None, head)
    _, state = serialize.load(run_dir / "best.ckpt")
    model.load_task_state(state)
    return cfg, model


def bake_run(run_dir: str | Path, root: str | Path | None = None) -> Path:
    run_dir = Path(run_dir)
    cfg, model = load_run(run_dir, root)
    if model.prompt is None:
        raise ConfigError("method: fine-tune runs have no prompt to bake")
    return save_prompt(run_dir / "baked.prompt", model.spec, bake(model.spec, model.reparam, model.prompt))


def evaluate_run(run_dir: str | Path, split: str = "val", baked: bool = False,
                 root: str | Path | None = None) -> MetricsRecord:
    cfg, model = load_run(run_dir, root, baked=baked)
    task = get_task(cfg, cfg.tasks[0], root)
    return evaluate(model, task, split, cfg_hash=config_digest(cfg))


# -- sweeps ------------------------------------------------------------------------------

@dataclass
class Cell:
    """All runs sharing one grid value and one method (over tasks and seeds)."""
    method: str
    value: object
    runs: list[RunOutcome] = field(default_factory=list)
    trainable: int | None = None

    @property
    def failures(self) -> list[RunOutcome]:
        return [r for r in self.runs if not r.ok]

    def seed_scores(self) -> dict[int, float]:
        """Suite-average best validation accuracy per seed (seeds with any failure excluded)."""
        by_seed: dict[int, list[float]] = {}
        bad = {r.config.seed for r in self.failures}
        for r in self.runs:
            if r.ok and r.config.seed not in bad:
                by_seed.setdefault(r.config.seed, []).append(r.best_metric)
        return {s: float(np.mean(v)) for s, v in sorted(by_seed.items())}

    def task_scores(self) -> dict[str, float]:
        by_task: dict[str, list[float]] = {}
        for r in self.runs:
            if r.ok:
                by_task.setdefault(r.task, []).append(r.best_metric)
        return {t: float(np.mean(v)) for t, v in by_task.items()}

    @property
    def mean(self) -> float:
        scores = list(self.seed_scores().values())
        return float(np.mean(scores)) if scores else float("nan")

    @property
    def stdev(self) -> float | None:
        scores = list(self.seed_scores().values())
        return float(statistics.stdev(scores)) if len(scores) >= 2 else None


@dataclass
class SweepReport:
    axis: str
    grid: list
    cells: list[Cell]
    seeds: list[int]

    def cell(self, method: str, value) -> Cell:
        for c in self.cells:
            if c.method == method and c.value == value:
                return c
        raise KeyError((method, value))

    def methods(self) -> list[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    def winners(self) -> dict:
        out = {}
        for v in self.grid:
            best = [c for c in self.cells if c.value == v and not math.isnan(c.mean)]
            out[v] = max(best, key=lambda c: c.mean).method if best else None
        return out

    def grid_variance(self, method: str) -> float:
        """Population variance, across the grid, of the seed-averaged suite accuracy."""
        means = [c.mean for c in self.cells if c.method == method]
        return float(np.var(means)) if means else float("nan")

    def to_dict(self) -> dict:
        winners = self.winners()
        cells = []
        for c in self.cells:
            cells.append({
                "method": c.method, "value": c.value, "mean": c.mean, "stdev": c.stdev,
                "trainable": c.trainable, "runs": len(c.runs), "seed_scores": c.seed_scores(),
                "task_scores": c.task_scores(), "winner": winners.get(c.value) == c.method,
                "failures": [{"task": r.task, "seed": r.config.seed, "error": r.error} for r in c.failures],
            })
        return {"axis": self.axis, "grid": self.grid, "seeds": self.seeds, "cells": cells,
                "grid_variance": {m: self.grid_variance(m) for m in self.methods()}}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "value", "method", "mean", "stdev", "runs", "failed", "trainable", "winner"])
        winners = self.winners()
        for c in self.cells:
            w.writerow([self.axis, c.value, c.method, _fmt(c.mean), _fmt(c.stdev), len(c.runs), len(c.failures),
                        "" if c.trainable is None else c.trainable, int(winners.get(c.value) == c.method)])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6f}"


def _safe_run(args: tuple[RunConfig, str, str]) -> RunOutcome:
    cfg, run_dir, root = args
    try:
        return run_single(cfg, Path(run_dir), Path(root))
    except (ConfigError, NumericError, ContractError, FloatingPointError) as exc:
        return RunOutcome(cfg, cfg.tasks[0], Path(run_dir), error=f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # noqa: BLE001 - the sweep must keep going and report the cell
        tail = traceback.format_exception_only(type(exc), exc)[-1].strip()
        return RunOutcome(cfg, cfg.tasks[0], Path(run_dir), error=tail)


def run_grid(name: str, cells: Sequence[tuple[str, object, RunConfig]], seeds: Sequence[int],
             root: str | Path | None = None, workers: int = 1,
             progress: Callable[[RunOutcome], None] | None = None) -> tuple[list[Cell], Path]:
    """Run every (cell, task, seed) combination under ``{root}/sweeps/{name}``."""
    root = runs_root(root)
    sweep_dir = root / "sweeps" / name
    sweep_dir.mkdir(parents=True, exist_ok=True)
    jobs, owners = [], []
    out_cells = []
    for method, value, base in cells:
        cell = Cell(method, value)
        out_cells.append(cell)
        for seed in seeds:
            for task in base.tasks:
                cfg = base.replace(seed=seed, tasks=(task,))
                jobs.append((cfg, str(sweep_dir / "runs" / cfg.run_id()), str(root)))
                owners.append(cell)
    # pretrain (or load) shared backbones up front so workers only read them
    for _, _, base in cells:
        get_backbone(base, root)
    log = sweep_dir / "progress.log"
    with ExitStack() as stack, log.open("a") as fh:
        if workers > 1:
            pool = stack.enter_context(ProcessPoolExecutor(max_workers=workers))
            results = pool.map(_safe_run, jobs)
        else:
            results = map(_safe_run, jobs)
        for cell, outcome in zip(owners, results):
            cell.runs.append(outcome)
            status = "ok" if outcome.ok else f"FAILED {outcome.error}"
            fh.write(f"{outcome.config.run_id()} {status} best={outcome.best_metric:.4f}\n")
            fh.flush()
            if progress:
                progress(outcome)
    return out_cells, sweep_dir


def _finish(report: SweepReport, sweep_dir: Path) -> SweepReport:
    (sweep_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, default=str) + "\n")
    (sweep_dir / "report.csv").write_text(report.to_csv())
    return report


def _sweep_name(axis: str, base: RunConfig) -> str:
    return f"{axis}-{config_digest(base)}"


def sweep_lr(base: RunConfig, grid: Sequence[float] = LR_GRID, seeds: Sequence[int] = DEFAULT_SEEDS,
             methods: Sequence[str] = ("pt", "res-pt"), root=None, workers: int = 1) -> SweepReport:
    if not grid:
        raise ConfigError("grid: must hold at least one learning rate")
    cells = [(m, float(lr), base.replace(method=m, lr=float(lr))) for m in methods for lr in grid]
    out, sweep_dir = run_grid(_sweep_name("lr", base), cells, seeds, root, workers)
    return _finish(SweepReport("lr", [float(v) for v in grid], out, list(seeds)), sweep_dir)


def ablate_width(base: RunConfig, widths: Sequence[int] = WIDTH_GRID, seeds: Sequence[int] = DEFAULT_SEEDS,
                 root=None, workers: int = 1) -> SweepReport:
    if base.method != "res-pt":
        raise ConfigError("method: the width ablation runs res-pt only")
    cells = [("res-pt", int(m), base.replace(m=int(m))) for m in widths]
    out, sweep_dir = run_grid(_sweep_name("width", base), cells, seeds, root, workers)
    for c in out:
        c.trainable = count_params(base.replace(m=c.value).reparam_spec(), base.d, base.n)[0]
    return _finish(SweepReport("m", [int(v) for v in widths], out, list(seeds)), sweep_dir)


def ablate_sharing(base: RunConfig, sizes: Sequence[int] = (200, 400), seeds: Sequence[int] = DEFAULT_SEEDS,
                   root=None, workers: int = 1) -> SweepReport:
    """Shared vs separate networks at several train-split sizes (small and large tasks)."""
    if base.method != "res-pt":
        raise ConfigError("method: the sharing ablation runs res-pt only")
    cells = []
    for size in sizes:
        for shared in (True, False):
            cells.append(("shared" if shared else "separate", int(size),
                          base.replace(shared=shared, train_size=int(size))))
    out, sweep_dir = run_grid(_sweep_name("sharing", base), cells, seeds, root, workers)
    for c in out:
        c.trainable = count_params(base.replace(shared=c.method == "shared").reparam_spec(), base.d, base.n)[0]
    return _finish(SweepReport("train_size", [int(s) for s in sizes], out, list(seeds)), sweep_dir)


def ablate_prompt_len(base: RunConfig, lengths: Sequence[int] = PROMPT_LENGTHS,
                      seeds: Sequence[int] = DEFAULT_SEEDS, methods: Sequence[str] = ("pt", "res-pt"),
                      root=None, workers: int = 1) -> SweepReport:
    cells = [(m, int(n), base.replace(method=m, n=int(n))) for m in methods for n in lengths]
    out, sweep_dir = run_grid(_sweep_name("prompt-len", base), cells, seeds, root, workers)
    for c in out:
        c.trainable = count_params(base.replace(method=c.method).reparam_spec(), base.d, c.value)[0]
    return _finish(SweepReport("n", [int(n) for n in lengths], out, list(seeds)), sweep_dir)


def fewshot(base: RunConfig, ks: Sequence[int] = FEWSHOT_KS, seeds: Sequence[int] = DEFAULT_SEEDS,
            methods: Sequence[str] = ("pt", "res-pt"), root=None, workers: int = 1) -> SweepReport:
    cells = [(m, int(k), base.replace(method=m, k=int(k))) for m in methods for k in ks]
    out, sweep_dir = run_grid(_sweep_name("fewshot", base), cells, seeds, root, workers)
    return _finish(SweepReport("k", [int(k) for k in ks], out, list(seeds)), sweep_dir)


def compare_methods(base: RunConfig, methods: Sequence[str] = ("pt", "res-pt", "mlp-pt"),
                    seeds: Sequence[int] = DEFAULT_SEEDS, root=None, workers: int = 1) -> SweepReport:
    """Each method at its default settings; the report keeps full per-epoch curves."""
    cells = [(m, m, base.replace(method=m)) for m in methods]
    out, sweep_dir = run_grid(_sweep_name("methods", base), cells, seeds, root, workers)
    return _finish(SweepReport("method", list(methods), out, list(seeds)), sweep_dir)


# -- convergence ---------------------------------------------------------------------------

def mean_curves(cell: Cell) -> dict[str, np.ndarray]:
    """Per task, the validation-accuracy curve averaged over seeds."""
    by_task: dict[str, list[list[float]]] = {}
    for r in cell.runs:
        if r.ok:
            by_task.setdefault(r.task, []).append(r.curve)
    return {t: np.mean(np.array(curves), axis=0) for t, curves in by_task.items()}


def epochs_to_reach(curve: Sequence[float], target: float) -> float:
    """First (1-based) epoch whose value reaches ``target``; infinity if none does."""
    for i, v in enumerate(curve, 1):
        if v >= target - 1e-12:
            return float(i)
    return math.inf


# -- reports -----------------------------------------------------------------------------

SUMMARY_HEADER = ["task", "method", "runs", "mean", "stdev", "best_epoch_mean"]
CURVE_HEADER = ["task", "method", "epoch", "mean", "stdev", "runs"]


def _find_runs(paths: Sequence[str | Path]) -> list[Path]:
    found = []
    for p in paths:
        p = Path(p)
        if (p / "metrics.jsonl").exists() or (p / "config.txt").exists():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(q.parent for q in p.rglob("config.txt")))
        else:
            found.append(p)
    return list(dict.fromkeys(found))


def report(paths: Sequence[str | Path], out_dir: str | Path) -> dict:
    """Aggregate run directories into ``summary.csv`` and ``convergence.csv``.

    Unreadable runs are listed in a ``#``-prefixed footer of ``summary.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, str], list[tuple[float, int, list[float]]]] = {}
    problems = []
    for run_dir in _find_runs(paths):
        try:
            cfg = load_config(run_dir / "config.txt")
            records = [MetricsRecord.from_json(line)
                       for line in (run_dir / "metrics.jsonl").read_text().splitlines() if line.strip()]
            val = [r for r in records if r.split == "val" and r.metric == "accuracy"]
            if not val:
                raise ValueError("no validation records")
            best = max(val, key=lambda r: (r.value, -r.epoch))
            curve = [r.value for r in sorted(val, key=lambda r: r.epoch)]
            groups.setdefault((val[0].task, cfg.method), []).append((best.value, best.epoch, curve))
        except (OSError, ValueError, KeyError, TypeError, ConfigError) as exc:
            problems.append(f"{run_dir}: {type(exc).__name__}: {exc}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    summary = []
    for (task, method), rows in sorted(groups.items()):
        vals = [r[0] for r in rows]
        sd = statistics.stdev(vals) if len(vals) >= 2 else None
        row = [task, method, len(rows), float(np.mean(vals)), sd, float(np.mean([r[1] for r in rows]))]
        summary.append(dict(zip(SUMMARY_HEADER, row)))
        w.writerow([task, method, len(rows), _fmt(row[3]), _fmt(sd), _fmt(row[5])])
    for p in problems:
        buf.write(f"# skipped {p}\n")
    (out_dir / "summary.csv").write_text(buf.getvalue())
    cbuf = io.StringIO()
    cw = csv.writer(cbuf, lineterminator="\n")
    cw.writerow(CURVE_HEADER)
    for (task, method), rows in sorted(groups.items()):
        width = min(len(r[2]) for r in rows)
        arr = np.array([r[2][:width] for r in rows])
        for e in range(width):
            sd = float(arr[:, e].std(ddof=1)) if len(rows) >= 2 else None
            cw.writerow([task, method, e + 1, _fmt(float(arr[:, e].mean())), _fmt(sd), len(rows)])
    (out_dir / "convergence.csv").write_text(cbuf.getvalue())
    return {"summary": summary, "problems": problems, "out_dir": str(out_dir)}
