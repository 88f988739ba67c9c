"""Soft prompts and their reparameterization networks.

A :class:`PromptBank` stores the raw prompt matrix ``P`` (n x d). A
:class:`ReparamNet` maps it to the matrix actually fed to the backbone:

``identity``      P' = P
``mlp-no-skip``   P'_i = LN(relu(P_i W_down + b_down) W_up + b_up)
``residual-mlp``  P'_i = LN(relu(P_i W_down + b_down) W_up + b_up) + P_i
``lstm``          P' = proj(biLSTM(P)), mixing information across tokens

MLP kinds act on each prompt row independently, with one shared network or
one network per row. After training, :func:`bake` evaluates the network once
and keeps only P'.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialize
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Parameter, Tensor

KINDS = ("identity", "residual-mlp", "mlp-no-skip", "lstm")
MLP_KINDS = ("residual-mlp", "mlp-no-skip")
INIT_STRATEGIES = ("random-uniform", "sampled-vocab")


@dataclass(frozen=True)
class ReparamSpec:
    kind: str = "residual-mlp"
    m: int = 400
    shared: bool = True
    bias: bool = False
    lstm_hidden: int = 300
    lstm_dropout: float = 0.05
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"reparam kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind in MLP_KINDS and self.m < 1:
            raise ConfigError(f"bottleneck m must be >= 1, got {self.m}")
        if not self.shared and self.kind not in MLP_KINDS:
            raise ConfigError("separate (unshared) networks are only defined for MLP kinds")
        if self.kind == "lstm" and (self.lstm_hidden < 1 or not 0 <= self.lstm_dropout < 1):
            raise ConfigError("lstm_hidden must be >= 1 and lstm_dropout in [0, 1)")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ReparamSpec":
        return cls(**obj)


@dataclass
class PromptBank:
    P: Parameter
    init: str
    seed: int
    baked: bool = False
    source_ids: tuple[int, ...] | None = None

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def d(self) -> int:
        return self.P.shape[1]


def init_prompt(strategy: str, n: int, embeddings: np.ndarray, seed: int) -> PromptBank:
    """Fresh n-token prompt.

    ``random-uniform`` draws every entry from U[-0.5, 0.5]; ``sampled-vocab``
    copies n rows of the token-embedding table chosen uniformly over the
    whole vocabulary.
    """
    if n < 1:
        raise ContractError(f"prompt length must be >= 1, got {n}")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    rng = np.random.default_rng([seed, 31337])
    V, d = embeddings.shape
    if strategy == "random-uniform":
        return PromptBank(Parameter(rng.uniform(-0.5, 0.5, size=(n, d)), "prompt.P"), strategy, seed)
    if strategy == "sampled-vocab":
        ids = rng.integers(0, V, size=n)
        return PromptBank(Parameter(embeddings[ids].copy(), "prompt.P"), strategy, seed,
                          source_ids=tuple(int(i) for i in ids))
    raise ConfigError(f"unknown init strategy {strategy!r}; choose from {INIT_STRATEGIES}")


class ReparamNet:
    """Trainable weights of the reparameterization function for one prompt."""

    def __init__(self, spec: ReparamSpec, d: int, n: int, seed: int = 0):
        self.spec, self.d, self.n = spec, d, n
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng([seed, 27644437])
        if spec.kind in MLP_KINDS:
            self._init_mlp(rng)
        elif spec.kind == "lstm":
            self._init_lstm(rng)

    def _add(self, name: str, value) -> Parameter:
        p = Parameter(value, f"reparam.{name}")
        self.params[p.name] = p
        return p

    def _init_mlp(self, rng: np.random.Generator) -> None:
        d, m = self.d, self.spec.m
        lead = () if self.spec.shared else (self.n,)
        self._add("W_down", rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=lead + (d, m)))
        self._add("W_up", rng.uniform(-1 / np.sqrt(m), 1 / np.sqrt(m), size=lead + (m, d)))
        if self.spec.bias:
            self._add("b_down", np.zeros(lead + (m,)))
            self._add("b_up", np.zeros(lead + (d,)))
        self._add("ln.g", np.ones(lead + (d,)))
        self._add("ln.b", np.zeros(lead + (d,)))

    def _init_lstm(self, rng: np.random.Generator) -> None:
        d, h = self.d, self.spec.lstm_hidden
        k = 1 / np.sqrt(h)
        for direction in ("fwd", "bwd"):
            self._add(f"lstm.{direction}.W_ih", rng.uniform(-k, k, size=(d, 4 * h)))
            self._add(f"lstm.{direction}.W_hh", rng.uniform(-k, k, size=(h, 4 * h)))
            self._add(f"lstm.{direction}.b", np.zeros(4 * h))
        k2 = 1 / np.sqrt(2 * h)
        self._add("proj.W", rng.uniform(-k2, k2, size=(2 * h, d)))
        self._add("proj.b", np.zeros(d))

    def p(self, name: str) -> Parameter:
        return self.params[f"reparam.{name}"]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state or state[k].shape != p.shape:
                raise ContractError(f"reparam state mismatch for {k}")
            p.data = np.array(state[k], dtype=np.float64)

    # -- forward ---------------------------------------------------------------
    def __call__(self, P: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return apply_reparam(self.spec, self, P, training=training, rng=rng)

    def _mlp(self, P: Tensor) -> Tensor:
        s = self.spec
        b_down = self.p("b_down") if s.bias else None
        b_up = self.p("b_up") if s.bias else None
        if s.shared:
            h = T.relu(T.linear(P, self.p("W_down"), b_down))
            u = T.linear(h, self.p("W_up"), b_up)
        else:
            n, d = P.shape
            h = T.reshape(T.matmul(T.reshape(P, (n, 1, d)), self.p("W_down")), (n, s.m))
            if b_down is not None:
                h = h + b_down
            h = T.relu(h)
            u = T.reshape(T.matmul(T.reshape(h, (n, 1, s.m)), self.p("W_up")), (n, d))
            if b_up is not None:
                u = u + b_up
        z = T.layer_norm(u, self.p("ln.g"), self.p("ln.b"), s.eps)
        return z + P if s.kind == "residual-mlp" else z

    def _lstm_direction(self, xw: Tensor, direction: str, order: range) -> list[Tensor]:
        hdim = self.spec.lstm_hidden
        W_hh = self.p(f"lstm.{direction}.W_hh")
        h = T.Tensor(np.zeros((1, hdim)))
        c = T.Tensor(np.zeros((1, hdim)))
        outs: list[Tensor | None] = [None] * len(order)
        for i in order:
            g = xw[i:i + 1] + T.matmul(h, W_hh)
            gi = T.sigmoid(g[:, :hdim])
            gf = T.sigmoid(g[:, hdim:2 * hdim])
            gg = T.tanh(g[:, 2 * hdim:3 * hdim])
            go = T.sigmoid(g[:, 3 * hdim:])
            c = gf * c + gi * gg
            h = go * T.tanh(c)
            outs[i] = h
        return outs

    def _lstm(self, P: Tensor, training: bool, rng: np.random.Generator | None) -> Tensor:
        n = P.shape[0]
        fwd = self._lstm_direction(
            T.linear(P, self.p("lstm.fwd.W_ih"), self.p("lstm.fwd.b")), "fwd", range(n))
        bwd = self._lstm_direction(
            T.linear(P, self.p("lstm.bwd.W_ih"), self.p("lstm.bwd.b")), "bwd", range(n - 1, -1, -1))
        # outs were stored by token index, so both lists are in token order
        hs = T.concat([T.concat(fwd, axis=0), T.concat(bwd, axis=0)], axis=1)
        hs = T.dropout(hs, self.spec.lstm_dropout, training, rng)
        return T.linear(hs, self.p("proj.W"), self.p("proj.b"))


def apply_reparam(spec: ReparamSpec, net: ReparamNet | None, P: Tensor, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Map the raw prompt ``P`` (n x d) to the reparameterized prompt P'."""
    if P.ndim != 2:
        raise DimensionError(f"prompt must be n x d, got {P.shape}")
    if spec.kind == "identity":
        return P
    if net is None or net.spec != spec:
        raise ContractError("reparam network missing or built for a different spec")
    if P.shape[1] != net.d or (not spec.shared and P.shape[0] != net.n):
        raise DimensionError(f"prompt {P.shape} does not fit a network built for n={net.n}, d={net.d}")
    if spec.kind in MLP_KINDS:
        return net._mlp(P)
    return net._lstm(P, training, rng)


def bake(spec: ReparamSpec, net: ReparamNet | None, bank: PromptBank) -> PromptBank:
    """Project the prompt through the network once and drop the network."""
    with T.no_grad():
        P_prime = apply_reparam(spec, net, bank.P, training=False)
    return PromptBank(Parameter(P_prime.data, "prompt.baked", trainable=False), bank.init, bank.seed,
                      baked=True, source_ids=bank.source_ids)


def count_params(spec: ReparamSpec, d: int, n: int) -> tuple[int, int]:
    """``(trainable, task-specific at inference)`` parameter counts.

    For a shared MLP this is ``2dm + 2d + dn`` (no projection biases by default);
    separate MLPs multiply the network term by ``n``. Inference only ever
    keeps the ``dn`` baked prompt values.
    """
    prompt = d * n
    if spec.kind == "identity":
        net = 0
    elif spec.kind in MLP_KINDS:
        m = spec.m
        per = 2 * d * m + 2 * d + ((m + d) if spec.bias else 0)
        net = per if spec.shared else n * per
    else:
        h = spec.lstm_hidden
        net = 2 * (d * 4 * h + h * 4 * h + 4 * h) + 2 * h * d + d
    return net + prompt, prompt


# -- prompt checkpoints ----------------------------------------------------------

def _prompt_header(spec: ReparamSpec, bank: PromptBank) -> dict:
    return {"spec": spec.to_json(), "n": bank.n, "d": bank.d, "init": bank.init,
            "seed": bank.seed, "baked": bank.baked}


def save_prompt(path: str | Path, spec: ReparamSpec, bank: PromptBank, net: ReparamNet | None = None) -> Path:
    """Write a prompt file; a baked bank is stored as the single record ``prompt.baked``."""
    header = _prompt_header(spec, bank)
    if bank.baked:
        return serialize.save(path, {"prompt.baked": bank.P.data}, header)
    tensors = {"prompt.P": bank.P.data}
    if net is not None:
        tensors.update(net.state_dict())
    return serialize.save(path, tensors, header)


def load_prompt(path: str | Path) -> tuple[ReparamSpec, PromptBank, ReparamNet | None]:
    header, tensors = serialize.load(path)
    spec = ReparamSpec.from_json(header["spec"])
    if header.get("baked"):
        if list(tensors) != ["prompt.baked"]:
            raise ContractError(f"{path}: baked prompt files hold exactly one record 'prompt.baked'")
        bank = PromptBank(Parameter(tensors["prompt.baked"], "prompt.baked", trainable=False),
                          header["init"], header["seed"], baked=True)
        return spec, bank, None
    bank = PromptBank(Parameter(tensors["prompt.P"], "prompt.P"), header["init"], header["seed"])
    net = None
    if spec.kind != "identity":
        net = ReparamNet(spec, header["d"], header["n"])
        net.load_state_dict({k: v for k, v in tensors.items() if k.startswith("reparam.")})
    return spec, bank, net
