"""Synthetic pretraining so that a frozen backbone has informative features.

The corpus is drawn from the same task generators as the suite, with an
independent seed. Two objectives are mixed, three quarters tagged and one quarter
denoising:

* tagged task generation: a task tag token (``[TAG:parity]`` ...) precedes
  the formatted sentence and the model must produce the verbalized label,
  at the ``[CLS]`` slot (encoder-only) or through the decoder
  (encoder-decoder). This is the stand-in for a multi-task pretrained checkpoint
  and it is what soft prompts later learn to imitate.
* denoising: masked-token prediction (encoder-only) or span-copy denoising
  (encoder-decoder, one to three tokens replaced by a single ``[MASK]``).

A random run of content tokens of length 0..``max_prefix`` precedes every
input so that the backbone sees content at shifted positions, the way it will
once soft prompts are prepended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tasks as tk
from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .optim import AdamW, AdamWConfig


@dataclass
class PretrainBatch:
    ids: np.ndarray            # [B, L]
    mask: np.ndarray           # [B, L]
    targets: np.ndarray        # enc-only: [B, L] (-100 = ignore); enc-dec: [B, T]
    tagged: np.ndarray         # [B] bool
    task_index: np.ndarray     # [B]


@dataclass
class PretrainResult:
    steps: int
    final_loss: float
    token_accuracy: float           # held-out masked/target token accuracy
    tagged_accuracy: dict[str, float] = field(default_factory=dict)
    chance: float = 1.0 / tk.VOCAB_SIZE


def _pad(rows: list[list[int]], fill: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def sample_batch(rng: np.random.Generator, arch: str, batch: int, max_prefix: int = 16,
                 mask_rate: float = 0.15) -> PretrainBatch:
    names = tk.TASK_NAMES
    inputs, targets, tagged, tidx = [], [], [], []
    for i in range(batch):
        ti = int(rng.integers(len(names)))
        ex = tk.GENERATORS[names[ti]](rng, int(rng.integers(2)))
        is_tagged = i % 4 != 3
        prefix = [int(t) for t in rng.choice(tk.CONTENT, size=int(rng.integers(0, max_prefix + 1)))]
        s1, s2 = list(ex.sentence1), None if ex.sentence2 is None else list(ex.sentence2)
        label_word = tk.DEFAULT_VERBALIZER(ex.label)[0]
        tag = [tk.TAGS[names[ti]]] if is_tagged else []
        if arch == "encoder-only":
            body = [tk.CLS] + prefix + tag + s1 + ([tk.SEP] + s2 if s2 is not None else []) + [tk.EOS]
            tgt = [-100] * len(body)
            if is_tagged:
                tgt[0] = label_word
            else:
                for j, tok in enumerate(body):
                    if tok >= tk.CONTENT_START and rng.random() < mask_rate:
                        tgt[j] = tok
                        body[j] = tk.MASK
            inputs.append(body)
            targets.append(tgt)
        else:
            if is_tagged:
                body = prefix + tag + [tk.DESC_S1] + s1
                if s2 is not None:
                    body += [tk.DESC_S2] + s2
                body.append(tk.EOS)
                tgt = list(tk.DEFAULT_VERBALIZER(ex.label))
            else:
                span = int(rng.integers(1, 4))
                a = int(rng.integers(0, len(s1) - span + 1))
                tgt = s1[a:a + span] + [tk.EOS]
                body = prefix + [tk.DESC_S1] + s1[:a] + [tk.MASK] + s1[a + span:]
                if s2 is not None:
                    body += [tk.DESC_S2] + s2
                body.append(tk.EOS)
            inputs.append(body)
            targets.append(tgt)
        tagged.append(is_tagged)
        tidx.append(ti)
    ids = _pad(inputs, tk.PAD)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, r in enumerate(inputs):
        mask[i, :len(r)] = True
    return PretrainBatch(ids, mask, _pad(targets, -100), np.array(tagged), np.array(tidx))


def batch_loss(bb: Backbone, b: PretrainBatch) -> tuple[T.Tensor, T.Tensor]:
    """Returns ``(loss, logits)``; loss is mean cross-entropy over target tokens."""
    x = bb.embed(b.ids)
    if bb.config.arch == "encoder-only":
        logits = bb.mlm_logits(bb.encode(x, b.mask))
    else:
        logits = bb.seq2seq_logits(x, b.mask, b.targets)
    return T.cross_entropy(logits, b.targets, reduction="mean", ignore_index=-100), logits


def evaluate_pretraining(bb: Backbone, seed: int, batches: int = 8, batch: int = 64) -> tuple[float, dict[str, float]]:
    """Held-out token accuracy and per-task accuracy on tagged examples."""
    rng = np.random.default_rng([seed, 104729])
    hit = total = 0
    per_hit = np.zeros(len(tk.TASK_NAMES))
    per_tot = np.zeros(len(tk.TASK_NAMES))
    with T.no_grad():
        for _ in range(batches):
            b = sample_batch(rng, bb.config.arch, batch)
            _, logits = batch_loss(bb, b)
            pred = logits.data.argmax(axis=-1)
            keep = b.targets != -100
            hit += int(((pred == b.targets) & keep).sum())
            total += int(keep.sum())
            ok = np.where(keep, pred == b.targets, True).all(axis=1)
            for i in np.flatnonzero(b.tagged):
                per_tot[b.task_index[i]] += 1
                per_hit[b.task_index[i]] += ok[i]
    per_task = {n: float(per_hit[i] / max(per_tot[i], 1)) for i, n in enumerate(tk.TASK_NAMES)}
    return hit / max(total, 1), per_task


def pretrain_backbone(config: BackboneConfig, steps: int = 6000, batch: int = 32, lr: float = 2e-3,
                      seed: int = 1000, warmup: int = 100, log_every: int = 0) -> tuple[Backbone, PretrainResult]:
    """Train a fresh backbone on the synthetic corpus.

    ``seed`` drives the corpus stream and should differ from any suite seed.
    The returned backbone is left unfrozen; callers freeze it. ``steps=0``
    returns the initialization untouched.
    """
    bb = Backbone(config)
    opt = AdamW(bb.params.values(), AdamWConfig(lr=lr, weight_decay=0.01))
    rng = np.random.default_rng([seed, 15485863])
    loss_val = float("nan")
    for step in range(steps):
        # warmup then cosine decay to 10% of the peak
        if step < warmup:
            opt.cfg.lr = lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(steps - warmup, 1)
            opt.cfg.lr = lr * (0.1 + 0.45 * (1 + math.cos(math.pi * frac)))
        b = sample_batch(rng, config.arch, batch)
        opt.zero_grad()
        loss, _ = batch_loss(bb, b)
        loss.backward()
        opt.step()
        loss_val = loss.item()
        if log_every and (step + 1) % log_every == 0:
            print(f"pretrain step {step + 1}/{steps} loss {loss_val:.4f}", flush=True)
    for p in bb.params.values():
        p.grad = None
    if steps:
        acc, per_task = evaluate_pretraining(bb, seed + 1)
    else:
        acc, per_task = float("nan"), {}
    return bb, PretrainResult(steps=steps, final_loss=loss_val, token_accuracy=acc, tagged_accuracy=per_task)


def pooled_features(bb: Backbone, examples, batch: int = 64) -> np.ndarray:
    """Mean of the encoder states over real positions, no prompt: ``[N, d]``.

    These are the inputs of a linear probe that checks the frozen features
    carry task information.
    """
    out = []
    with T.no_grad():
        for i in range(0, len(examples), batch):
            fm = [tk.format_example(bb.config.arch, 0, ex, max_len=bb.config.max_len) for ex in examples[i:i + batch]]
            width = max(f.length for f in fm)
            ids = np.stack([f.ids[:width] for f in fm])
            mask = np.stack([f.mask[:width] for f in fm])
            h = bb.encode(bb.embed(ids), mask).data
            w = mask[..., None].astype(np.float64)
            out.append((h * w).sum(axis=1) / w.sum(axis=1))
    return np.concatenate(out, axis=0)
