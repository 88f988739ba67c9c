"""Tiny pre-norm transformer backbone.

Two architectures share the encoder stack:

* ``encoder-only``: BERT-style; a task head reads the final ``[CLS]`` state.
* ``encoder-decoder``: T5-style; a causal decoder with cross-attention
  generates verbalized labels.

Every module works on already-embedded inputs (``[B, L, d]``), so callers are
free to splice soft-prompt rows into the sequence before encoding.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialize
from . import tensor as T
from .errors import ConfigError, ContractError, LengthError
from .tensor import Parameter, Tensor

ARCHS = ("encoder-only", "encoder-decoder")


@dataclass(frozen=True)
class BackboneConfig:
    arch: str = "encoder-decoder"
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn: int = 128
    vocab: int = 64
    max_len: int = 128
    dec_len: int = 16
    eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.layers < 0 or self.ffn <= 0 or self.vocab <= 0 or self.max_len <= 0:
            raise ConfigError("layers, ffn, vocab and max_len must be positive")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "BackboneConfig":
        return cls(**obj)


def _causal_bias(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), T.MASK_FILL), k=1)


def key_bias(mask: np.ndarray) -> np.ndarray:
    """``[B, L]`` boolean mask -> additive ``[B, 1, 1, L]`` attention bias."""
    return np.where(np.asarray(mask, dtype=bool), 0.0, T.MASK_FILL)[:, None, None, :]


class Backbone:
    def __init__(self, config: BackboneConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self._init_params(np.random.default_rng([config.seed, 7919]))

    # -- construction --------------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name=f"backbone.{name}")
        self.params[p.name] = p
        return p

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d, f, V = c.d, c.ffn, c.vocab
        out_scale = 1.0 / np.sqrt(2 * max(c.layers, 1))

        def w(fan_in, *shape, scale=1.0):
            return rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)

        self._add("tok_emb", rng.normal(0.0, 0.3, size=(V, d)))
        self._add("enc.pos", rng.normal(0.0, 0.1, size=(c.max_len, d)))

        def block(prefix, cross=False):
            self._add(f"{prefix}.ln1.g", np.ones(d))
            self._add(f"{prefix}.ln1.b", np.zeros(d))
            self._add(f"{prefix}.attn.wqkv", w(d, d, 3 * d))
            self._add(f"{prefix}.attn.bqkv", np.zeros(3 * d))
            self._add(f"{prefix}.attn.wo", w(d, d, d, scale=out_scale))
            self._add(f"{prefix}.attn.bo", np.zeros(d))
            if cross:
                self._add(f"{prefix}.lnx.g", np.ones(d))
                self._add(f"{prefix}.lnx.b", np.zeros(d))
                self._add(f"{prefix}.xattn.wq", w(d, d, d))
                self._add(f"{prefix}.xattn.bq", np.zeros(d))
                self._add(f"{prefix}.xattn.wkv", w(d, d, 2 * d))
                self._add(f"{prefix}.xattn.bkv", np.zeros(2 * d))
                self._add(f"{prefix}.xattn.wo", w(d, d, d, scale=out_scale))
                self._add(f"{prefix}.xattn.bo", np.zeros(d))
            self._add(f"{prefix}.ln2.g", np.ones(d))
            self._add(f"{prefix}.ln2.b", np.zeros(d))
            self._add(f"{prefix}.ff.w1", w(d, d, f))
            self._add(f"{prefix}.ff.b1", np.zeros(f))
            self._add(f"{prefix}.ff.w2", w(f, f, d, scale=out_scale))
            self._add(f"{prefix}.ff.b2", np.zeros(d))

        for i in range(c.layers):
            block(f"enc.{i}")
        if c.layers:
            self._add("enc.ln_f.g", np.ones(d))
            self._add("enc.ln_f.b", np.zeros(d))
        if c.arch == "encoder-only":
            self._add("mlm.w", w(d, d, V))
            self._add("mlm.b", np.zeros(V))
        else:
            self._add("dec.pos", rng.normal(0.0, 0.1, size=(c.dec_len, d)))
            for i in range(c.layers):
                block(f"dec.{i}", cross=True)
            self._add("dec.ln_f.g", np.ones(d))
            self._add("dec.ln_f.b", np.zeros(d))
            self._add("lm.w", w(d, d, V))
            self._add("lm.b", np.zeros(V))

    def p(self, name: str) -> Parameter:
        return self.params[f"backbone.{name}"]

    # -- freezing / state --------------------------------------------------------
    @property
    def frozen(self) -> bool:
        return not any(p.trainable for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.trainable = False

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.trainable = True

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"backbone state is missing {sorted(missing)[:3]}...")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ContractError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def digest(self) -> str:
        return serialize.digest(self.state_dict())

    def copy(self) -> "Backbone":
        other = Backbone.__new__(Backbone)
        other.config = self.config
        other.params = {k: Parameter(p.data, k, p.trainable) for k, p in self.params.items()}
        return other

    def save(self, path: str | Path) -> Path:
        return serialize.save(path, self.state_dict(), {"backbone_config": self.config.to_json()})

    @classmethod
    def load(cls, path: str | Path) -> "Backbone":
        header, tensors = serialize.load(path)
        if "backbone_config" not in header:
            raise ContractError(f"{path}: no backbone_config header")
        bb = cls(BackboneConfig.from_json(header["backbone_config"]))
        bb.load_state_dict(tensors)
        return bb

    # -- forward pieces -----------------------------------------------------------
    def embed(self, ids: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.p("tok_emb"), ids)

    def _heads_split(self, x: Tensor, parts: int) -> list[Tensor]:
        B, L, _ = x.shape
        H = self.config.heads
        dh = self.config.d // H
        x = T.transpose(T.reshape(x, (B, L, parts, H, dh)), (2, 0, 3, 1, 4))
        return [x[i] for i in range(parts)]

    def _merge(self, x: Tensor) -> Tensor:
        B, H, L, dh = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.p(f"{name}.g"), self.p(f"{name}.b"), self.config.eps)

    def _self_attn(self, h: Tensor, prefix: str, bias: np.ndarray) -> Tensor:
        a = self._ln(h, f"{prefix}.ln1")
        q, k, v = self._heads_split(T.linear(a, self.p(f"{prefix}.attn.wqkv"), self.p(f"{prefix}.attn.bqkv")), 3)
        o = self._merge(T.attention(q, k, v, bias))
        return h + T.linear(o, self.p(f"{prefix}.attn.wo"), self.p(f"{prefix}.attn.bo"))

    def _cross_attn(self, h: Tensor, enc: Tensor, prefix: str, bias: np.ndarray) -> Tensor:
        a = self._ln(h, f"{prefix}.lnx")
        (q,) = self._heads_split(T.linear(a, self.p(f"{prefix}.xattn.wq"), self.p(f"{prefix}.xattn.bq")), 1)
        k, v = self._heads_split(T.linear(enc, self.p(f"{prefix}.xattn.wkv"), self.p(f"{prefix}.xattn.bkv")), 2)
        o = self._merge(T.attention(q, k, v, bias))
        return h + T.linear(o, self.p(f"{prefix}.xattn.wo"), self.p(f"{prefix}.xattn.bo"))

    def _ffn(self, h: Tensor, prefix: str) -> Tensor:
        a = self._ln(h, f"{prefix}.ln2")
        a = T.relu(T.linear(a, self.p(f"{prefix}.ff.w1"), self.p(f"{prefix}.ff.b1")))
        return h + T.linear(a, self.p(f"{prefix}.ff.w2"), self.p(f"{prefix}.ff.b2"))

    def encode(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Run the encoder on embedded input ``x`` (``[L,d]`` or ``[B,L,d]``).

        ``mask`` is True on real positions; masked keys are never attended to.
        With zero layers the output is just ``x`` plus positional embeddings
        (the final norm belongs to the stack).
        """
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
            mask = np.asarray(mask)[None]
        L = x.shape[1]
        if L > self.config.max_len:
            raise LengthError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        h = x + self.p("enc.pos")[:L]
        bias = key_bias(mask)
        for i in range(self.config.layers):
            h = self._self_attn(h, f"enc.{i}", bias)
            h = self._ffn(h, f"enc.{i}")
        if self.config.layers:
            h = self._ln(h, "enc.ln_f")
        return T.reshape(h, h.shape[1:]) if squeeze else h

    def classify_logits(self, x: Tensor, mask: np.ndarray, w: Tensor, cls_pos: int = 0) -> Tensor:
        """``w_c . h_[CLS]`` for every class c; ``w`` is ``[C, d]``."""
        if w.shape[0] < 2:
            raise ConfigError("classification head needs at least two classes")
        h = self.encode(x, mask)
        h_cls = h[..., cls_pos, :]
        return T.linear(h_cls, T.transpose(w, (1, 0)))

    def encode_classify(self, x: Tensor, mask: np.ndarray, w: Tensor, cls_pos: int = 0) -> Tensor:
        return T.softmax(self.classify_logits(x, mask, w, cls_pos), axis=-1)

    def mlm_logits(self, h: Tensor) -> Tensor:
        return T.linear(h, self.p("mlm.w"), self.p("mlm.b"))

    def decode_logits(self, enc: Tensor, enc_mask: np.ndarray, dec_ids: np.ndarray) -> Tensor:
        """Teacher-forced decoder logits ``[B, T, V]`` for decoder inputs ``dec_ids``."""
        if self.config.arch != "encoder-decoder":
            raise ConfigError("decode_logits needs an encoder-decoder backbone")
        dec_ids = np.asarray(dec_ids)
        Tn = dec_ids.shape[1]
        if Tn > self.config.dec_len:
            raise LengthError(f"decoder length {Tn} exceeds dec_len {self.config.dec_len}")
        h = self.embed(dec_ids) + self.p("dec.pos")[:Tn]
        self_bias = _causal_bias(Tn)[None, None]
        cross_bias = key_bias(enc_mask)
        for i in range(self.config.layers):
            h = self._self_attn(h, f"dec.{i}", self_bias)
            h = self._cross_attn(h, enc, f"dec.{i}", cross_bias)
            h = self._ffn(h, f"dec.{i}")
        h = self._ln(h, "dec.ln_f")
        return T.linear(h, self.p("lm.w"), self.p("lm.b"))

    def seq2seq_logits(self, x: Tensor, mask: np.ndarray, labels: np.ndarray) -> Tensor:
        labels = np.asarray(labels)
        enc = self.encode(x, mask)
        return self.decode_logits(enc, mask, shift_right(labels))

    def seq2seq_nll(self, x: Tensor, mask: np.ndarray, labels, reduction: str = "mean") -> Tensor:
        """Teacher-forced NLL of ``labels``, summed over label positions.

        ``x`` may be ``[L,d]`` with ``labels`` a 1-D sequence, or batched. For a
        batch, ``reduction`` combines per-example sums (``mean`` or ``sum``).
        Entries equal to -100 in ``labels`` are ignored (padding).
        """
        labels = np.asarray(labels, dtype=np.int64)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
            mask = np.asarray(mask)[None]
            labels = labels[None]
        if labels.shape[-1] == 0 or not (labels != -100).any():
            raise ContractError("seq2seq_nll: empty label sequence")
        if labels.max() >= self.config.vocab:
            raise IndexError("label token outside the vocabulary")
        logits = self.seq2seq_logits(x, mask, labels)
        total = T.cross_entropy(logits, labels, reduction="sum", ignore_index=-100)
        if reduction == "mean":
            return total * (1.0 / labels.shape[0])
        return total

    def greedy_decode(self, x: Tensor, mask: np.ndarray, steps: int) -> np.ndarray:
        """Greedy argmax decoding for ``steps`` tokens; returns ``[B, steps]`` ids."""
        with T.no_grad():
            if x.ndim == 2:
                x = T.reshape(x, (1,) + x.shape)
                mask = np.asarray(mask)[None]
            enc = self.encode(x, mask)
            B = x.shape[0]
            out = np.zeros((B, 0), dtype=np.int64)
            for _ in range(steps):
                dec_in = np.concatenate([np.full((B, 1), DECODER_START, dtype=np.int64), out], axis=1)
                logits = self.decode_logits(enc, mask, dec_in)
                nxt = logits.data[:, -1, :].argmax(axis=-1)
                out = np.concatenate([out, nxt[:, None]], axis=1)
        return out


DECODER_START = 0  # T5 convention: the pad id starts decoding


def shift_right(labels: np.ndarray) -> np.ndarray:
    """Decoder inputs for teacher forcing: start token then ``labels[:-1]``."""
    labels = np.asarray(labels, dtype=np.int64)
    dec = np.empty_like(labels)
    dec[:, 0] = DECODER_START
    dec[:, 1:] = np.where(labels[:, :-1] == -100, DECODER_START, labels[:, :-1])
    return dec


def freeze(backbone: Backbone) -> None:
    backbone.freeze()


def config_to_json(config: BackboneConfig) -> str:
    return json.dumps(config.to_json(), sort_keys=True)
