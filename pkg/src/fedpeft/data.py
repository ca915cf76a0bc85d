"""Synthetic multilingual data, JSONL ingestion and client partitioning.

Vocabulary layout of a synthetic dataset::

    [0, S*M)          class marker tokens, class c owns [c*M, (c+1)*M)
    [S*M, V)          background region, split into per-language ranges

Each example carries ``markers_per_example`` markers of its class, so the
label is recoverable by counting markers in every language.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedpeft import rng as _rng
from fedpeft.errors import ConfigError, InputError
from fedpeft.model import Example

Dataset = list[Example]


@dataclass(frozen=True)
class LanguageSpec:
    name: str
    background_range: tuple[int, int]  # half-open [lo, hi)
    zipf_exponent: float = 1.1
    base_mix: float = 0.3

    def __post_init__(self):
        lo, hi = self.background_range
        if not lo < hi:
            raise ConfigError("background_range", f"empty range for {self.name!r}")
        if not self.zipf_exponent > 0:
            raise ConfigError("zipf_exponent", f"must be positive for {self.name!r}")
        if not 0 <= self.base_mix <= 1:
            raise ConfigError("base_mix", f"must lie in [0, 1] for {self.name!r}")


@dataclass(frozen=True)
class DatasetSpec:
    languages: tuple[LanguageSpec, ...]
    examples_per_language: Mapping[str, int]
    vocab_size: int = 1000
    num_classes: int = 4
    seq_len: tuple[int, int] = (8, 16)  # inclusive
    markers_per_class: int = 4
    markers_per_example: int = 4
    base_exponent: float = 1.0
    seed: int = 0

    @property
    def marker_region(self) -> int:
        return self.num_classes * self.markers_per_class

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes", "must be >= 2")
        if self.markers_per_class < 1:
            raise ConfigError("markers_per_class", "must be >= 1")
        if self.markers_per_example < 1:
            raise ConfigError("markers_per_example", "must be >= 1")
        lo, hi = self.seq_len
        if not 1 <= lo <= hi:
            raise ConfigError("seq_len", f"invalid range {self.seq_len}")
        if self.markers_per_example > lo:
            raise ConfigError("markers_per_example", "exceeds the minimum sequence length")
        if self.vocab_size <= self.marker_region:
            raise ConfigError("vocab_size", "leaves no room for background tokens")
        names = [lang.name for lang in self.languages]
        if len(set(names)) != len(names):
            raise ConfigError("languages", "duplicate language names")
        if set(self.examples_per_language) != set(names):
            raise ConfigError("examples_per_language", "must list exactly the configured languages")
        for name, count in self.examples_per_language.items():
            if count < 0:
                raise ConfigError("examples_per_language", f"negative count for {name!r}")
        spans = sorted(lang.background_range for lang in self.languages)
        for lo_, hi_ in spans:
            if lo_ < self.marker_region or hi_ > self.vocab_size:
                raise ConfigError("background_range", f"[{lo_}, {hi_}) leaves the background region")
        for (_, hi_a), (lo_b, _) in zip(spans, spans[1:]):
            if lo_b < hi_a:
                raise ConfigError("background_range", "language ranges overlap")


def default_languages(vocab_size: int = 1000, marker_region: int = 16,
                      names: Sequence[str] = ("en", "es", "fr", "de", "ru")) -> tuple[LanguageSpec, ...]:
    """Evenly split background ranges; later languages share less with the base distribution."""
    width = (vocab_size - marker_region) // len(names)
    out = []
    for i, name in enumerate(names):
        lo = marker_region + i * width
        out.append(LanguageSpec(name, (lo, lo + width), zipf_exponent=1.1,
                                base_mix=round(0.5 - 0.4 * i / max(len(names) - 1, 1), 6)))
    return tuple(out)


def _zipf(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def background_distribution(spec: DatasetSpec, lang: LanguageSpec) -> np.ndarray:
    """Probabilities over the background region ``[S*M, V)`` for one language."""
    start = spec.marker_region
    base = _zipf(spec.vocab_size - start, spec.base_exponent)
    own = np.zeros_like(base)
    lo, hi = lang.background_range
    own[lo - start: hi - start] = _zipf(hi - lo, lang.zipf_exponent)
    probs = (1.0 - lang.base_mix) * own + lang.base_mix * base
    return probs / probs.sum()


def generate_synthetic(spec: DatasetSpec) -> Dataset:
    spec.validate()
    S, M, k = spec.num_classes, spec.markers_per_class, spec.markers_per_example
    start = spec.marker_region
    lo_len, hi_len = spec.seq_len
    per_lang: dict[str, list[Example]] = {}
    for lang in spec.languages:
        n = spec.examples_per_language[lang.name]
        g = _rng.stream(spec.seed, "synthetic", lang.name)
        labels = g.integers(0, S, size=n)
        lengths = g.integers(lo_len, hi_len + 1, size=n)
        background = start + g.choice(spec.vocab_size - start, size=int(lengths.sum()),
                                      p=background_distribution(spec, lang))
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        examples = []
        for i in range(n):
            seq = background[offsets[i]: offsets[i + 1]].copy()
            pos = g.choice(lengths[i], size=k, replace=False)
            seq[pos] = labels[i] * M + g.integers(0, M, size=k)
            examples.append(Example(tuple(int(t) for t in seq), int(labels[i]), lang.name))
        per_lang[lang.name] = examples

    # interleave languages in a seeded order
    order = [name for lang in spec.languages for name in [lang.name] * len(per_lang[lang.name])]
    order = [order[i] for i in _rng.stream(spec.seed, "synthetic", "order").permutation(len(order))]
    cursors = {name: iter(exs) for name, exs in per_lang.items()}
    return [next(cursors[name]) for name in order]


def marker_oracle(example: Example, num_classes: int, markers_per_class: int) -> int:
    """Predict the class whose markers occur most often (ties toward lower class)."""
    counts = [0] * num_classes
    for t in example.tokens:
        if t < num_classes * markers_per_class:
            counts[t // markers_per_class] += 1
    return int(np.argmax(counts))


def word_token(word: str, vocab_size: int, reserved: int = 0) -> int:
    """Token id of ``word``: FNV-1a 64 hash folded into ``[reserved, vocab_size)``."""
    return reserved + _rng.fnv1a64(word) % (vocab_size - reserved)


def ingest_jsonl(path: str | Path, vocab_size: int, num_classes: int, reserved: int = 0) -> Dataset:
    """Read ``{"text", "label", "language"}`` records.

    A record that already carries an integer ``tokens`` array (as written by
    :func:`write_jsonl`) keeps those ids; otherwise ``text`` is hashed word by
    word.
    """
    if not 0 <= reserved < vocab_size:
        raise ConfigError("reserved", "must lie in [0, vocab_size)")
    out: Dataset = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{where}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise InputError(f"{where}: record must be a JSON object")
            for key, typ in (("text", str), ("label", int), ("language", str)):
                if key not in rec:
                    raise InputError(f"{where}: missing field {key!r}")
                if not isinstance(rec[key], typ) or isinstance(rec[key], bool):
                    raise InputError(f"{where}: field {key!r} must be {typ.__name__}")
            label = rec["label"]
            if not 0 <= label < num_classes:
                raise InputError(f"{where}: label {label} outside [0, {num_classes})")
            if "tokens" in rec:
                tokens = rec["tokens"]
                if (not isinstance(tokens, list)
                        or not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens)
                        or any(not 0 <= t < vocab_size for t in tokens)):
                    raise InputError(f"{where}: tokens must be integers in [0, {vocab_size})")
            else:
                tokens = [word_token(w, vocab_size, reserved) for w in rec["text"].split()]
            if not tokens:
                raise InputError(f"{where}: record has no tokens")
            out.append(Example(tuple(tokens), label, rec["language"]))
    return out


def write_jsonl(dataset: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            rec = {"text": " ".join(f"tok{t}" for t in ex.tokens), "label": ex.label,
                   "language": ex.language, "tokens": list(ex.tokens)}
            fh.write(json.dumps(rec) + "\n")


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    examples: tuple[Example, ...]

    @property
    def size(self) -> int:
        return len(self.examples)


@dataclass(frozen=True)
class Partition:
    shards: tuple[ClientShard, ...]
    mode: str
    alpha: float | None = None
    indices: tuple[tuple[int, ...], ...] = field(default=(), repr=False)


def largest_remainder(n: int, proportions: np.ndarray) -> np.ndarray:
    """Integer allocation of ``n`` items summing to exactly ``n``."""
    quotas = n * np.asarray(proportions, dtype=np.float64)
    counts = np.floor(quotas).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        # kind="stable" breaks equal remainders toward the lower client id
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition(dataset: Sequence[Example], K: int, mode: str = "iid",
              alpha: float | None = None, seed: int = 0) -> Partition:
    """Split ``dataset`` across ``K`` clients.

    ``iid`` shuffles globally and cuts equal-as-possible chunks. ``noniid``
    draws, per language, client proportions from Dirichlet(alpha) and
    allocates that language's examples by largest remainder. Within a shard
    examples keep their original dataset order.
    """
    if isinstance(K, bool) or not isinstance(K, (int, np.integer)) or K < 1:
        raise ConfigError("K", f"must be a positive integer, got {K!r}")
    N = len(dataset)
    if K > N:
        raise InputError(f"cannot split {N} examples across {K} clients")
    if mode == "iid":
        perm = _rng.stream(seed, "partition", "iid").permutation(N)
        buckets = [sorted(chunk.tolist()) for chunk in np.array_split(perm, K)]
    elif mode == "noniid":
        if alpha is None or not alpha > 0 or not math.isfinite(alpha):
            raise ConfigError("alpha", f"must be a positive real for noniid, got {alpha!r}")
        by_lang: dict[str, list[int]] = {}
        for i, ex in enumerate(dataset):
            by_lang.setdefault(ex.language, []).append(i)
        buckets = [[] for _ in range(K)]
        for lang in sorted(by_lang):
            idx = np.array(by_lang[lang])
            idx = idx[_rng.stream(seed, "partition", "shuffle", lang).permutation(len(idx))]
            props = _rng.stream(seed, "partition", "dirichlet", lang).dirichlet(np.full(K, float(alpha)))
            if not np.all(np.isfinite(props)):
                raise InputError(f"Dirichlet draw degenerate for alpha={alpha}")
            counts = largest_remainder(len(idx), props)
            for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                buckets[k].extend(chunk.tolist())
        buckets = [sorted(b) for b in buckets]
    else:
        raise ConfigError("mode", f"must be 'iid' or 'noniid', got {mode!r}")
    shards = tuple(ClientShard(k, tuple(dataset[i] for i in b)) for k, b in enumerate(buckets))
    return Partition(shards, mode, alpha, tuple(tuple(b) for b in buckets))


def language_entropy(examples: Sequence[Example]) -> float:
    """Shannon entropy (nats) of the language shares; 0 for an empty shard."""
    counts = np.array(list(Counter(ex.language for ex in examples).values()), dtype=np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def subsample_language(dataset: Sequence[Example], language: str, n: int, seed: int = 0) -> Dataset:
    idx = [i for i, ex in enumerate(dataset) if ex.language == language]
    if not idx:
        raise InputError(f"unknown language {language!r}")
    if not 0 <= n <= len(idx):
        raise InputError(f"cannot keep {n} of {len(idx)} {language!r} examples")
    keep = set(_rng.stream(seed, "subsample", language).choice(idx, size=n, replace=False).tolist())
    return [ex for i, ex in enumerate(dataset) if ex.language != language or i in keep]


def split_by_language(dataset: Sequence[Example], test_fraction: float, val_fraction: float,
                      seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Per-language seeded train/validation/test split, original order kept."""
    if not (0 <= test_fraction < 1 and 0 <= val_fraction < 1 and test_fraction + val_fraction < 1):
        raise ConfigError("split", "fractions must be in [0, 1) and sum below 1")
    role = np.zeros(len(dataset), dtype=np.int8)  # 0 train, 1 val, 2 test
    by_lang: dict[str, list[int]] = {}
    for i, ex in enumerate(dataset):
        by_lang.setdefault(ex.language, []).append(i)
    for lang, idx in by_lang.items():
        perm = np.array(idx)[_rng.stream(seed, "split", lang).permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        n_val = int(round(val_fraction * len(idx)))
        role[perm[:n_test]] = 2
        role[perm[n_test:n_test + n_val]] = 1
    parts: tuple[Dataset, Dataset, Dataset] = ([], [], [])
    for r, ex in zip(role, dataset):
        parts[r].append(ex)
    return parts


def languages_of(dataset: Iterable[Example]) -> list[str]:
    return sorted({ex.language for ex in dataset})
