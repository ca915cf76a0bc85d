"""Tiny frozen-backbone text classifier with prompt and LoRA tuning.

The classifier embeds tokens, prepends ``prompt_len`` virtual prompt rows,
mean-pools, applies one tanh layer and a linear head::

    h      = mean(P_1..P_p, E[t_1]..E[t_L])
    z      = tanh(W1_eff h + b1)
    logits = W2 z + b2

``W1_eff`` is ``W1`` for the ``full`` and ``prompt`` strategies and
``W1 + (alpha / r) B A diag(mask)`` for ``lora``, where ``mask`` is an
inverted-dropout mask on the pooled input (train mode only).

Everything is float64 and gradients are exact closed-form backprop.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, fields, replace

import numpy as np

from fedpeft import rng as _rng
from fedpeft.errors import ConfigError, ContractError, InputError

STRATEGIES = ("full", "prompt", "lora")
BACKBONE = ("E", "W1", "b1")
HEAD = ("W2", "b2")
TENSOR_ORDER = ("E", "W1", "b1", "W2", "b2", "P", "A", "B")

# Trainable-parameter counts of the reference XLM-R base runs (5 clients, 10 rounds).
REFERENCE_COUNTS = {
    "full": (278_655_764, 278_655_764),
    "prompt": (278_655_764, 1_202_708),
    "lora": (278_655_764, 1_491_476),
}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 1000
    embed_dim: int = 64
    hidden_dim: int = 64
    num_classes: int = 4
    prompt_len: int = 1
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    strategy: str = "prompt"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim"):
            _check_int(name, getattr(self, name), 1)
        _check_int("num_classes", self.num_classes, 2)
        _check_int("prompt_len", self.prompt_len, 0)
        _check_int("seed", self.seed, 0)
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "lora":
            _check_int("lora_rank", self.lora_rank, 1)
            if not (isinstance(self.lora_alpha, (int, float)) and self.lora_alpha > 0):
                raise ConfigError("lora_alpha", "must be a positive real")
            if not (isinstance(self.lora_dropout, (int, float)) and 0 <= self.lora_dropout < 1):
                raise ConfigError("lora_dropout", "must lie in [0, 1)")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown key")
        return cls(**data)


def _check_int(name, value, lo):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < lo:
        raise ConfigError(name, f"must be an integer >= {lo}, got {value!r}")


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: int
    language: str

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise InputError("example has an empty token sequence")


@dataclass
class ParameterSet:
    """Named float64 tensors plus the set of names that are trainable."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    trainable: frozenset[str]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def frozen(self) -> frozenset[str]:
        return frozenset(self.tensors) - self.trainable

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].copy() for k in TENSOR_ORDER if k in self.trainable}

    def with_tensors(self, updates: Mapping[str, np.ndarray]) -> "ParameterSet":
        tensors = dict(self.tensors)
        for name, value in updates.items():
            if name not in tensors:
                raise ContractError(f"unknown tensor {name!r}")
            tensors[name] = np.array(value, dtype=np.float64)
        return ParameterSet(self.config, tensors, self.trainable)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.trainable)

    def with_strategy(self, strategy: str) -> "ParameterSet":
        """Reinterpret the same weights under another strategy (drops A/B unless lora)."""
        config = replace(self.config, strategy=strategy)
        tensors = {k: v.copy() for k, v in self.tensors.items() if strategy == "lora" or k not in ("A", "B")}
        if strategy == "lora" and "A" not in tensors:
            raise ContractError("cannot switch to lora without A and B tensors")
        return ParameterSet(config, tensors, trainable_names(strategy, tensors))


def trainable_names(strategy: str, tensors: Mapping[str, np.ndarray] | None = None) -> frozenset[str]:
    if strategy == "full":
        return frozenset(tensors) if tensors is not None else frozenset(TENSOR_ORDER[:6])
    if strategy == "prompt":
        return frozenset({"P", *HEAD})
    return frozenset({"A", "B", *HEAD})


def init_model(config: ModelConfig) -> ParameterSet:
    """Deterministic initialization; B starts at zero so the LoRA delta vanishes."""
    V, d, dh, S, p = (config.vocab_size, config.embed_dim, config.hidden_dim,
                      config.num_classes, config.prompt_len)

    def normal(name, shape, std):
        return _rng.stream(config.seed, "init", name).normal(0.0, std, size=shape)

    tensors = {
        "E": normal("E", (V, d), 1.0 / math.sqrt(d)),
        "W1": normal("W1", (dh, d), 1.0 / math.sqrt(d)),
        "b1": np.zeros(dh),
        "W2": normal("W2", (S, dh), 1.0 / math.sqrt(dh)),
        "b2": np.zeros(S),
        "P": normal("P", (p, d), 1.0 / math.sqrt(d)),
    }
    if config.strategy == "lora":
        r = config.lora_rank
        tensors["A"] = normal("A", (r, d), 0.02)
        tensors["B"] = np.zeros((dh, r))
    return ParameterSet(config, tensors, trainable_names(config.strategy, tensors))


@dataclass(frozen=True)
class TokenBatch:
    """Examples packed into a padded token matrix (padding id is -1)."""

    tokens: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    languages: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "TokenBatch":
        idx = np.asarray(idx, dtype=np.int64)
        lengths = self.lengths[idx]
        width = int(lengths.max()) if len(idx) else 0
        return TokenBatch(self.tokens[idx, :width], lengths, self.labels[idx],
                          tuple(self.languages[i] for i in idx))


def encode(examples: Sequence[Example] | TokenBatch) -> TokenBatch:
    if isinstance(examples, TokenBatch):
        return examples
    n = len(examples)
    lengths = np.fromiter((len(ex.tokens) for ex in examples), dtype=np.int64, count=n)
    width = int(lengths.max()) if n else 0
    tokens = np.full((n, width), -1, dtype=np.int64)
    for i, ex in enumerate(examples):
        tokens[i, : lengths[i]] = ex.tokens
    labels = np.fromiter((ex.label for ex in examples), dtype=np.int64, count=n)
    return TokenBatch(tokens, lengths, labels, tuple(ex.language for ex in examples))


def _check_tokens(params: ParameterSet, tb: TokenBatch):
    V = params.config.vocab_size
    valid = tb.tokens[tb.tokens >= 0]
    if valid.size and (valid.max() >= V):
        raise InputError(f"token id {int(valid.max())} out of range [0, {V})")
    if np.any(tb.tokens < -1):
        raise InputError(f"token id {int(tb.tokens.min())} out of range [0, {V})")


def _dropout_mask(config: ModelConfig, n: int, rng: np.random.Generator | None):
    q = config.lora_dropout
    if config.strategy != "lora" or q == 0:
        return None
    if rng is None:
        raise ContractError("train-mode lora forward with dropout needs a generator")
    keep = rng.random((n, config.embed_dim)) >= q
    return keep / (1.0 - q)


def _forward(params: ParameterSet, tb: TokenBatch, mode: str, rng):
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_tokens(params, tb)
    cfg = params.config
    E, P = params["E"], params["P"]
    padded = np.vstack([E, np.zeros((1, E.shape[1]))])
    tok = np.where(tb.tokens < 0, E.shape[0], tb.tokens)
    n = (tb.lengths + P.shape[0]).astype(np.float64)
    h = (padded[tok].sum(axis=1) + P.sum(axis=0)) / n[:, None]
    u = h @ params["W1"].T
    mask = hm = None
    if "A" in params.tensors:
        mask = _dropout_mask(cfg, len(tb), rng) if mode == "train" else None
        hm = h if mask is None else h * mask
        u = u + cfg.lora_scale * ((hm @ params["A"].T) @ params["B"].T)
    z = np.tanh(u + params["b1"])
    logits = z @ params["W2"].T + params["b2"]
    return logits, dict(tok=tok, n=n, h=h, hm=hm, mask=mask, z=z)


def forward(params: ParameterSet, example: Example | Sequence[Example] | TokenBatch,
            mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    """Logits for one example (S-vector) or for a batch (N x S)."""
    single = isinstance(example, Example)
    tb = encode([example] if single else example)
    logits, _ = _forward(params, tb, mode, rng)
    return logits[0] if single else logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_and_grad(params: ParameterSet, batch: Sequence[Example] | TokenBatch,
                  rng: np.random.Generator | None = None,
                  mode: str = "train") -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over ``batch`` and its gradient w.r.t. trainable tensors."""
    tb = encode(batch)
    if len(tb) == 0:
        raise InputError("loss_and_grad needs a non-empty batch")
    logits, c = _forward(params, tb, mode, rng)
    N = len(tb)
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(N), tb.labels].mean())

    want = params.trainable
    g_logits = np.exp(logp)
    g_logits[np.arange(N), tb.labels] -= 1.0
    g_logits /= N
    z, h = c["z"], c["h"]
    grads: dict[str, np.ndarray] = {}
    if "W2" in want:
        grads["W2"] = g_logits.T @ z
    if "b2" in want:
        grads["b2"] = g_logits.sum(axis=0)
    if not want - set(HEAD):
        return loss, grads

    du = (g_logits @ params["W2"]) * (1.0 - z * z)
    if "b1" in want:
        grads["b1"] = du.sum(axis=0)
    if "W1" in want:
        grads["W1"] = du.T @ h
    dh = du @ params["W1"]
    if "A" in params.tensors:
        s = params.config.lora_scale
        A, B, hm, mask = params["A"], params["B"], c["hm"], c["mask"]
        duB = du @ B
        if "B" in want:
            grads["B"] = s * (du.T @ (hm @ A.T))
        if "A" in want:
            grads["A"] = s * (duB.T @ hm)
        dhm = s * (duB @ A)
        dh = dh + (dhm if mask is None else dhm * mask)
    dpool = dh / c["n"][:, None]
    if "P" in want:
        p = params["P"].shape[0]
        grads["P"] = np.repeat(dpool.sum(axis=0, keepdims=True), p, axis=0)
    if "E" in want:
        V, d = params["E"].shape
        dE = np.zeros((V + 1, d))
        width = c["tok"].shape[1]
        np.add.at(dE, c["tok"].ravel(), np.repeat(dpool, width, axis=0))
        grads["E"] = dE[:V]
    return loss, grads


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr", f"must be positive, got {self.lr!r}")


def adamw_step(params: ParameterSet, grads: Mapping[str, np.ndarray],
               state: OptimizerState) -> tuple[ParameterSet, OptimizerState]:
    """One decoupled-weight-decay Adam step; returns new objects, inputs untouched."""
    for name in grads:
        if name not in params.tensors:
            raise ContractError(f"gradient for unknown tensor {name!r}")
        if name not in params.trainable:
            raise ContractError(f"gradient for frozen tensor {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1.0 - b1**t, 1.0 - b2**t
    new_m, new_v, updates = dict(state.m), dict(state.v), {}
    for name in sorted(grads):
        g = grads[name]
        theta = params[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat, v_hat = m / bc1, v / bc2
        decayed = theta - state.lr * state.weight_decay * theta
        updates[name] = decayed - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return params.with_tensors(updates), new_state


def count_params(config: ModelConfig | str, strategy: str | None = None) -> tuple[int, int]:
    """(total, trainable) parameter counts.

    Pass the preset name ``"paper-table4"`` instead of a config to get the
    stored XLM-R base counts.
    """
    if isinstance(config, str):
        if config != "paper-table4":
            raise ConfigError("preset", f"unknown preset {config!r}")
        if strategy not in REFERENCE_COUNTS:
            raise ConfigError("strategy", f"must be one of {STRATEGIES}, got {strategy!r}")
        return REFERENCE_COUNTS[strategy]
    strategy = strategy or config.strategy
    if strategy not in STRATEGIES:
        raise ConfigError("strategy", f"must be one of {STRATEGIES}, got {strategy!r}")
    V, d, dh, S, p = (config.vocab_size, config.embed_dim, config.hidden_dim,
                      config.num_classes, config.prompt_len)
    sizes = {"E": V * d, "W1": dh * d, "b1": dh, "W2": S * dh, "b2": S, "P": p * d}
    if strategy == "lora":
        sizes["A"] = config.lora_rank * d
        sizes["B"] = dh * config.lora_rank
    total = sum(sizes.values())
    trainable = sum(sizes[k] for k in trainable_names(strategy, sizes))
    return total, trainable


@dataclass(frozen=True)
class EvalResult:
    per_language: dict[str, float]
    overall: float

    @property
    def mean(self) -> float:
        """Unweighted mean over languages (the "Avg" column)."""
        return float(np.mean(list(self.per_language.values())))


def predict(params: ParameterSet, dataset: Sequence[Example] | TokenBatch) -> np.ndarray:
    # argmax returns the first maximal index, which is the lowest-class tie rule
    return np.argmax(forward(params, encode(dataset), mode="eval"), axis=1)


def evaluate(params: ParameterSet, dataset: Sequence[Example] | TokenBatch) -> EvalResult:
    tb = encode(dataset)
    if len(tb) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    correct = predict(params, tb) == tb.labels
    langs = np.array(tb.languages)
    per_language = {lang: float(correct[langs == lang].mean()) for lang in sorted(set(tb.languages))}
    return EvalResult(per_language, float(correct.mean()))
