"""Synthetic task suite, vocabulary, verbalizers and input formatting.

The vocabulary is a fixed table of 64 ids. Ids below ``CONTENT_START`` are
reserved markers; the rest are content tokens that sentences are built from.
Four binary tasks share one sentence distribution wherever possible, so a
model cannot tell them apart from the sentence alone: that is the job of the
(hard) task tag during backbone pretraining and of the soft prompt during
prompt tuning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError

VOCAB_SIZE = 64

PAD, CLS, SEP, EOS, MASK = 0, 1, 2, 3, 4
TRUE_WORD, FALSE_WORD = 5, 6
DESC_S1, DESC_S2 = 7, 8
# task tags only appear in the pretraining corpus
TAGS = {"parity": 9, "contains": 10, "majority": 11, "pair-perm": 12}
CONTENT_START = 13
CONTENT = np.arange(CONTENT_START, VOCAB_SIZE)

MARKED = np.arange(13, 21)
PATTERN = (21, 22)
MAJ_X = np.arange(23, 29)
MAJ_Y = np.arange(29, 35)

SENT_LEN = 8
PAIR_LEN = 5

TOKEN_NAMES = {PAD: "[PAD]", CLS: "[CLS]", SEP: "[SEP]", EOS: "[EOS]", MASK: "[MASK]",
               TRUE_WORD: "True", FALSE_WORD: "False", DESC_S1: "sentence1:", DESC_S2: "sentence2:"}
TOKEN_NAMES.update({v: f"[TAG:{k}]" for k, v in TAGS.items()})


@dataclass(frozen=True)
class Example:
    sentence1: tuple[int, ...]
    label: int
    sentence2: tuple[int, ...] | None = None
    uid: int = 0

    @property
    def is_pair(self) -> bool:
        return self.sentence2 is not None


@dataclass(frozen=True)
class Verbalizer:
    """Maps class labels to label-token sequences (each ending in ``[EOS]``)."""

    words: tuple[tuple[int, ...], ...] = ((FALSE_WORD, EOS), (TRUE_WORD, EOS))

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ConfigError("verbalizer must be injective")
        for seq in self.words:
            if not seq or any(not 0 <= t < VOCAB_SIZE for t in seq):
                raise ConfigError(f"verbalizer tokens {seq} outside the vocabulary")

    def __call__(self, label: int) -> tuple[int, ...]:
        return self.words[label]

    def decode(self, tokens: Sequence[int]) -> int | None:
        """Label whose token sequence equals ``tokens`` exactly, else None."""
        tokens = tuple(int(t) for t in tokens)
        for label, seq in enumerate(self.words):
            if seq == tokens:
                return label
        return None

    @property
    def num_classes(self) -> int:
        return len(self.words)


DEFAULT_VERBALIZER = Verbalizer()


@dataclass
class TaskSpec:
    name: str
    train: list[Example]
    val: list[Example]
    classes: int = 2
    kind: str = "classification"
    metric: str = "accuracy"
    seed: int = 0
    verbalizer: Verbalizer = field(default_factory=Verbalizer)

    def __post_init__(self):
        if not self.val:
            raise ContractError(f"task {self.name!r} has an empty validation split")
        for ex in self.train + self.val:
            if not 0 <= ex.label < self.classes:
                raise ContractError(f"task {self.name!r}: label {ex.label} outside [0, {self.classes})")

    def split(self, name: str) -> list[Example]:
        if name == "train":
            return self.train
        if name in ("val", "validation"):
            return self.val
        raise ContractError(f"unknown split {name!r}")


# -- example generators ------------------------------------------------------------

def _fill(rng: np.random.Generator, pool: np.ndarray, n: int) -> np.ndarray:
    return rng.choice(pool, size=n)


def _gen_parity(rng: np.random.Generator, label: int) -> Example:
    count = 1 if label else 2
    sent = _fill(rng, np.setdiff1d(CONTENT, MARKED), SENT_LEN)
    where = rng.choice(SENT_LEN, size=count, replace=False)
    sent[where] = rng.choice(MARKED, size=count)
    return Example(tuple(int(t) for t in sent), label)


def _has_pattern(sent: Sequence[int]) -> bool:
    a, b = PATTERN
    return any(sent[i] == a and sent[i + 1] == b for i in range(len(sent) - 1))


def _gen_contains(rng: np.random.Generator, label: int) -> Example:
    a, b = PATTERN
    sent = _fill(rng, np.setdiff1d(CONTENT, PATTERN), SENT_LEN)
    if label:
        i = int(rng.integers(0, SENT_LEN - 1))
        sent[i], sent[i + 1] = a, b
    elif rng.random() < 0.5:
        # hard negative: both pattern tokens present but never adjacent in order
        i, j = rng.choice(SENT_LEN, size=2, replace=False)
        while j == i + 1:
            i, j = rng.choice(SENT_LEN, size=2, replace=False)
        sent[i], sent[j] = a, b
    return Example(tuple(int(t) for t in sent), label)


def _gen_majority(rng: np.random.Generator, label: int) -> Example:
    total = int(rng.choice([1, 3, 5]))
    more = total // 2 + 1 + int(rng.integers(0, total - total // 2))
    kx, ky = (more, total - more) if label else (total - more, more)
    sent = _fill(rng, np.setdiff1d(CONTENT, np.concatenate([MAJ_X, MAJ_Y])), SENT_LEN)
    where = rng.choice(SENT_LEN, size=total, replace=False)
    sent[where[:kx]] = rng.choice(MAJ_X, size=kx)
    sent[where[kx:]] = rng.choice(MAJ_Y, size=ky)
    return Example(tuple(int(t) for t in sent), label)


def _gen_pair_perm(rng: np.random.Generator, label: int) -> Example:
    s1 = _fill(rng, CONTENT, PAIR_LEN)
    s2 = rng.permutation(s1)
    if not label:
        where = rng.choice(PAIR_LEN, size=3, replace=False)
        s2[where] = rng.choice(np.setdiff1d(CONTENT, s1), size=3, replace=False)
    return Example(tuple(int(t) for t in s1), label, tuple(int(t) for t in s2))


GENERATORS: dict[str, Callable[[np.random.Generator, int], Example]] = {
    "parity": _gen_parity,
    "contains": _gen_contains,
    "majority": _gen_majority,
    "pair-perm": _gen_pair_perm,
}
TASK_NAMES = tuple(GENERATORS)


def _balanced(rng: np.random.Generator, gen, size: int, classes: int, start_uid: int) -> list[Example]:
    labels = np.arange(size) % classes
    rng.shuffle(labels)
    out = []
    for i, lab in enumerate(labels):
        ex = gen(rng, int(lab))
        out.append(Example(ex.sentence1, ex.label, ex.sentence2, uid=start_uid + i))
    return out


def generate_task(name: str, seed: int, train_size: int = 400, val_size: int = 100) -> TaskSpec:
    if name not in GENERATORS:
        raise ConfigError(f"unknown task {name!r}; choose from {', '.join(TASK_NAMES)}")
    # task index keeps streams of different tasks independent under one seed
    rng = np.random.default_rng([seed, TASK_NAMES.index(name)])
    gen = GENERATORS[name]
    train = _balanced(rng, gen, train_size, 2, 0)
    val = _balanced(rng, gen, val_size, 2, train_size)
    return TaskSpec(name=name, train=train, val=val, seed=seed)


def generate_suite(seed: int = 0, train_size: int = 400, val_size: int = 100,
                   names: Sequence[str] | None = None) -> list[TaskSpec]:
    return [generate_task(n, seed, train_size, val_size) for n in (names or TASK_NAMES)]


# -- task cache ----------------------------------------------------------------------

def _example_to_json(ex: Example) -> dict:
    out = {"uid": ex.uid, "sentence1": list(ex.sentence1), "label": ex.label}
    if ex.sentence2 is not None:
        out["sentence2"] = list(ex.sentence2)
    return out


def _example_from_json(obj: dict) -> Example:
    s2 = obj.get("sentence2")
    return Example(tuple(obj["sentence1"]), int(obj["label"]), None if s2 is None else tuple(s2),
                   uid=int(obj["uid"]))


def task_to_json(task: TaskSpec) -> dict:
    return {
        "name": task.name,
        "kind": task.kind,
        "classes": task.classes,
        "seed": task.seed,
        "train": [_example_to_json(e) for e in task.train],
        "val": [_example_to_json(e) for e in task.val],
    }


def task_from_json(obj: dict) -> TaskSpec:
    return TaskSpec(name=obj["name"], kind=obj["kind"], classes=obj["classes"], seed=obj["seed"],
                    train=[_example_from_json(e) for e in obj["train"]],
                    val=[_example_from_json(e) for e in obj["val"]])


def cache_path(cache_dir: str | Path, seed: int, name: str) -> Path:
    return Path(cache_dir) / f"suite-{seed}" / f"{name}.json"


def load_or_generate(cache_dir: str | Path | None, name: str, seed: int,
                     train_size: int = 400, val_size: int = 100) -> TaskSpec:
    """Read a task from the on-disk cache, generating and storing it on a miss."""
    if cache_dir is None:
        return generate_task(name, seed, train_size, val_size)
    path = cache_path(cache_dir, seed, name)
    if train_size != 400 or val_size != 100:
        path = path.with_name(f"{name}-{train_size}-{val_size}.json")
    if path.exists():
        return task_from_json(json.loads(path.read_text()))
    task = generate_task(name, seed, train_size, val_size)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(task_to_json(task)))
    return task


# -- formatting ----------------------------------------------------------------------

@dataclass(frozen=True)
class Formatted:
    """Token layout for one example.

    ``ids`` has length ``max_len``; the ``n_prompt`` slots starting at
    ``prompt_start`` hold ``PAD`` and are replaced by prompt rows at embed
    time. ``mask`` is True on real positions (prompt slots included).
    """

    ids: np.ndarray
    mask: np.ndarray
    prompt_start: int
    n_prompt: int
    length: int
    cls_pos: int | None = None
    labels: tuple[int, ...] | None = None

    @property
    def slots(self) -> range:
        return range(self.prompt_start, self.prompt_start + self.n_prompt)


def _truncate(s1: list[int], s2: list[int] | None, budget: int) -> tuple[list[int], list[int] | None]:
    """Drop tail tokens, longest sentence first, until both fit in ``budget``."""
    s1 = list(s1)
    s2 = None if s2 is None else list(s2)
    while len(s1) + (len(s2) if s2 is not None else 0) > budget:
        if s2 is not None and len(s2) >= len(s1) and s2:
            s2.pop()
        else:
            s1.pop()
    return s1, s2


def _pack(body: list[int], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[:len(body)] = body
    mask = np.zeros(max_len, dtype=bool)
    mask[:len(body)] = True
    return ids, mask


def format_encoder_only(n: int, ex: Example, max_len: int = 128) -> Formatted:
    """``[CLS] P'_1..P'_n s1 ([SEP] s2) [EOS]`` padded to ``max_len``."""
    if n < 0 or n + 3 > max_len:
        raise ConfigError(f"prompt length {n} does not fit max_len {max_len}")
    fixed = 1 + n + 1 + (1 if ex.is_pair else 0)
    s1, s2 = _truncate(ex.sentence1, ex.sentence2, max_len - fixed)
    body = [CLS] + [PAD] * n + s1
    if s2 is not None:
        body += [SEP] + s2
    body.append(EOS)
    ids, mask = _pack(body, max_len)
    return Formatted(ids, mask, prompt_start=1, n_prompt=n, length=len(body), cls_pos=0)


def format_encoder_decoder(n: int, ex: Example, verbalizer: Verbalizer = DEFAULT_VERBALIZER,
                           max_len: int = 128) -> Formatted:
    """``P'_1..P'_n sentence1: s1 (sentence2: s2) [EOS]``; target is the verbalized label."""
    if n < 0 or n + 3 > max_len:
        raise ConfigError(f"prompt length {n} does not fit max_len {max_len}")
    fixed = n + 1 + 1 + (1 if ex.is_pair else 0)
    s1, s2 = _truncate(ex.sentence1, ex.sentence2, max_len - fixed)
    body = [PAD] * n + [DESC_S1] + s1
    if s2 is not None:
        body += [DESC_S2] + s2
    body.append(EOS)
    ids, mask = _pack(body, max_len)
    return Formatted(ids, mask, prompt_start=0, n_prompt=n, length=len(body),
                     labels=verbalizer(ex.label))


def format_example(arch: str, n: int, ex: Example, verbalizer: Verbalizer = DEFAULT_VERBALIZER,
                   max_len: int = 128) -> Formatted:
    if arch == "encoder-only":
        return format_encoder_only(n, ex, max_len)
    if arch == "encoder-decoder":
        return format_encoder_decoder(n, ex, verbalizer, max_len)
    raise ConfigError(f"unknown arch {arch!r}")


def render(ids: Sequence[int]) -> str:
    """Human-readable token string, for debugging and the demos."""
    return " ".join(TOKEN_NAMES.get(int(t), str(int(t))) for t in ids)
