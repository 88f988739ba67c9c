"""A frozen backbone plus the task-specific pieces tuned on top of it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tasks as tk
from . import tensor as T
from .backbone import Backbone
from .errors import ConfigError, ContractError
from .reparam import PromptBank, ReparamNet, ReparamSpec, apply_reparam
from .tensor import Parameter, Tensor


@dataclass
class Batch:
    ids: np.ndarray              # [B, L], prompt slots hold PAD
    mask: np.ndarray             # [B, L]
    prompt_start: int
    n_prompt: int
    labels: np.ndarray           # [B] class labels
    label_tokens: np.ndarray | None = None   # [B, T] verbalized labels (encoder-decoder)
    cls_pos: int = 0

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate(items: Sequence[tk.Formatted], labels: Sequence[int]) -> Batch:
    """Stack formatted examples, trimming columns that are padding in every row.

    Trimming never changes results: padded keys receive exactly zero
    attention weight.
    """
    if not items:
        raise ContractError("cannot collate an empty batch")
    first = items[0]
    width = max(f.length for f in items)
    ids = np.stack([f.ids[:width] for f in items])
    mask = np.stack([f.mask[:width] for f in items])
    label_tokens = None
    if first.labels is not None:
        label_tokens = np.array([f.labels for f in items], dtype=np.int64)
    return Batch(ids, mask, first.prompt_start, first.n_prompt, np.asarray(labels, dtype=np.int64),
                 label_tokens, first.cls_pos if first.cls_pos is not None else 0)


class PromptModel:
    """Backbone + prompt bank + optional reparameterization + optional head.

    ``prompt`` may be live (trainable P with a network) or baked (P' stored
    directly, ``reparam`` None). ``head`` is the ``[C, d]`` classification
    matrix used by encoder-only backbones.
    """

    def __init__(self, backbone: Backbone, prompt: PromptBank | None = None,
                 spec: ReparamSpec | None = None, reparam: ReparamNet | None = None,
                 head: Parameter | None = None):
        self.backbone = backbone
        self.prompt = prompt
        self.spec = spec or ReparamSpec(kind="identity")
        self.reparam = reparam
        self.head = head
        self.arch = backbone.config.arch
        if self.arch == "encoder-only" and head is None:
            raise ConfigError("encoder-only models need a classification head")
        if prompt is not None and prompt.baked and reparam is not None:
            raise ContractError("a baked prompt must not carry a reparameterization network")

    @property
    def n_prompt(self) -> int:
        return 0 if self.prompt is None else self.prompt.n

    def parameters(self) -> dict[str, Parameter]:
        out = dict(self.backbone.params)
        if self.prompt is not None:
            out[self.prompt.P.name] = self.prompt.P
        if self.reparam is not None:
            out.update(self.reparam.params)
        if self.head is not None:
            out[self.head.name] = self.head
        return out

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters().values() if p.trainable]

    def task_state(self) -> dict[str, np.ndarray]:
        """Copies of every non-backbone tensor (prompt, reparam, head)."""
        return {k: p.data.copy() for k, p in self.parameters().items() if not k.startswith("backbone.")}

    def load_task_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for k, v in state.items():
            if k.startswith("backbone."):
                continue
            params[k].data = np.array(v, dtype=np.float64)

    # -- forward -----------------------------------------------------------------
    def prompt_embeddings(self, training: bool = False, rng: np.random.Generator | None = None) -> Tensor | None:
        if self.prompt is None:
            return None
        if self.prompt.baked:
            return self.prompt.P
        return apply_reparam(self.spec, self.reparam, self.prompt.P, training=training, rng=rng)

    def embed(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Token embeddings with the prompt rows spliced into their slots."""
        bb = self.backbone
        n = batch.n_prompt
        if n != self.n_prompt:
            raise ContractError(f"batch formatted for {n} prompt slots, model has {self.n_prompt}")
        if n == 0:
            return bb.embed(batch.ids)
        B = len(batch)
        s = batch.prompt_start
        P = self.prompt_embeddings(training, rng)
        pieces = []
        if s > 0:
            pieces.append(bb.embed(batch.ids[:, :s]))
        pieces.append(T.broadcast_to(T.reshape(P, (1,) + P.shape), (B,) + P.shape))
        if batch.ids.shape[1] > s + n:
            pieces.append(bb.embed(batch.ids[:, s + n:]))
        return T.concat(pieces, axis=1)

    def class_logits(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        """Encoder-only: ``[B, C]`` logits from the [CLS] state."""
        x = self.embed(batch, training, rng)
        return self.backbone.classify_logits(x, batch.mask, self.head, batch.cls_pos)

    def seq2seq_logits(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        x = self.embed(batch, training, rng)
        return self.backbone.seq2seq_logits(x, batch.mask, batch.label_tokens)

    def logits(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        if self.arch == "encoder-only":
            return self.class_logits(batch, training, rng)
        return self.seq2seq_logits(batch, training, rng)

    def loss(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        """Mean over the batch of the per-example negative log-likelihood."""
        if self.arch == "encoder-only":
            return T.cross_entropy(self.class_logits(batch, training, rng), batch.labels, reduction="mean")
        logits = self.seq2seq_logits(batch, training, rng)
        return T.cross_entropy(logits, batch.label_tokens, reduction="sum") * (1.0 / len(batch))

    def predict_correct(self, batch: Batch) -> np.ndarray:
        """Per-example correctness: argmax class, or exact match of greedy decoding.

        For the decoder, greedy decoding reproduces the reference exactly iff the
        teacher-forced argmax is right at every label position, so one
        teacher-forced pass is enough.
        """
        with T.no_grad():
            logits = self.logits(batch).data
        if self.arch == "encoder-only":
            return logits.argmax(axis=-1) == batch.labels
        return (logits.argmax(axis=-1) == batch.label_tokens).all(axis=1)

    def greedy_labels(self, batch: Batch, verbalizer: tk.Verbalizer = tk.DEFAULT_VERBALIZER) -> list[int | None]:
        """Decode label strings greedily and map them back through the verbalizer."""
        steps = batch.label_tokens.shape[1] if batch.label_tokens is not None else 2
        with T.no_grad():
            x = self.embed(batch)
        out = self.backbone.greedy_decode(x, batch.mask, steps)
        return [verbalizer.decode(row) for row in out]
