"""Distance of downstream languages from a token-weighted pretraining mix.

The composite vector is the token-count-weighted mean of per-language
feature vectors; the distance of a language is ``-ln cos(v, V_p)``.

Cosines are evaluated in exact rational arithmetic on the float inputs and
rounded once, so exactly proportional vectors give bit-identical distances.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from fedpeft.errors import DomainError, InputError


@dataclass(frozen=True)
class LanguageVector:
    language: str
    features: np.ndarray

    def __post_init__(self):
        if not np.any(self.features):
            raise InputError(f"feature vector of {self.language!r} has zero norm")


@dataclass(frozen=True)
class CorpusWeights:
    counts: Mapping[str, int]

    def __post_init__(self):
        for lang, count in self.counts.items():
            if isinstance(count, bool) or not isinstance(count, int) or count < 0:
                raise InputError(f"token count of {lang!r} must be a non-negative integer, got {count!r}")
        if self.total <= 0:
            raise InputError("token counts sum to zero")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def weight(self, language: str) -> float:
        return self.counts[language] / self.total


@dataclass(frozen=True)
class CompositeVector:
    features: np.ndarray
    weights: CorpusWeights


Registry = dict[str, LanguageVector]


def load_vectors(path: str | Path) -> Registry:
    """Read ``language,f1,...,fF`` CSV rows into a registry."""
    registry: Registry = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "language" or len(header) < 2:
            raise InputError(f"{path}: header must be 'language,f1,...,fF'")
        width = len(header)
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise InputError(f"{path}: row {rowno} has {len(row)} cells, expected {width}")
            if any(cell.strip() == "" for cell in row):
                raise InputError(f"{path}: row {rowno} has an empty cell")
            lang = row[0].strip()
            if lang in registry:
                raise InputError(f"{path}: row {rowno} duplicates language {lang!r}")
            try:
                feats = np.array([float(c) for c in row[1:]], dtype=np.float64)
            except ValueError:
                raise InputError(f"{path}: row {rowno} has a non-numeric feature") from None
            if not np.all(np.isfinite(feats)):
                raise InputError(f"{path}: row {rowno} has a non-finite feature")
            try:
                registry[lang] = LanguageVector(lang, feats)
            except InputError as exc:
                raise InputError(f"{path}: row {rowno}: {exc}") from None
    return registry


def load_counts(path: str | Path) -> CorpusWeights:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object {{language: count}}")
    return CorpusWeights(data)


def composite_vector(registry: Mapping[str, LanguageVector], weights: CorpusWeights) -> CompositeVector:
    """``sum_i (T_i / T_total) V_i``, computed exactly and rounded once per coordinate."""
    missing = sorted(set(weights.counts) - set(registry))
    if missing:
        raise InputError(f"no feature vector for weighted language(s) {missing}")
    dims = {registry[lang].features.shape for lang in weights.counts}
    if len(dims) > 1:
        raise InputError(f"feature dimensions differ: {sorted(dims)}")
    (dim,) = dims
    acc = [Fraction(0)] * dim[0]
    for lang in sorted(weights.counts):
        count = weights.counts[lang]
        if count == 0:
            continue
        for j, x in enumerate(registry[lang].features):
            acc[j] += count * Fraction(float(x))
    total = weights.total
    return CompositeVector(np.array([float(a / total) for a in acc]), weights)


def _sqrt_fraction(q: Fraction) -> float:
    """Correctly rounded sqrt of a non-negative rational."""
    n, d = q.numerator, q.denominator
    k = max(0, (d.bit_length() - n.bit_length()) // 2 + 64)
    scaled = n << (2 * k)
    s = math.isqrt(scaled // d)
    sticky = 0 if s * s * d == scaled else 1
    return (2 * s + sticky) / (1 << (k + 1))


def _as_array(v) -> np.ndarray:
    if isinstance(v, (LanguageVector, CompositeVector)):
        return v.features
    return np.asarray(v, dtype=np.float64)


def cosine(v, w) -> float:
    a = [Fraction(float(x)) for x in _as_array(v)]
    b = [Fraction(float(x)) for x in _as_array(w)]
    if len(a) != len(b):
        raise InputError(f"dimension mismatch: {len(a)} vs {len(b)}")
    na = sum(x * x for x in a)
    nb = sum(x * x for x in b)
    if na == 0 or nb == 0:
        raise InputError("cosine undefined for a zero-norm vector")
    dot = sum(x * y for x, y in zip(a, b))
    c = _sqrt_fraction(min(dot * dot / (na * nb), Fraction(1)))
    return c if dot >= 0 else -c


def phi_from_cosine(cos: float) -> float:
    if not cos > 0:
        raise DomainError("distance undefined for non-positive similarity")
    return max(0.0, -math.log(min(cos, 1.0)))


def distance(v, composite) -> float:
    """``-ln cos(v, V_p)``; zero iff ``v`` is a positive multiple of ``V_p``."""
    return phi_from_cosine(cosine(v, composite))


@dataclass(frozen=True)
class RankRow:
    language: str
    cosine: float
    phi: float | None

    @property
    def defined(self) -> bool:
        return self.phi is not None


def rank_languages(registry: Mapping[str, LanguageVector], weights: CorpusWeights) -> list[RankRow]:
    """All registry languages by ascending distance; undefined distances last."""
    composite = composite_vector(registry, weights)
    rows = []
    for lang in sorted(registry):
        c = cosine(registry[lang], composite)
        rows.append(RankRow(lang, c, phi_from_cosine(c) if c > 0 else None))
    return sorted(rows, key=lambda r: (not r.defined, r.phi if r.defined else 0.0, r.language))


def write_rank_csv(rows: Sequence[RankRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(format_rank_csv(rows))


def format_rank_csv(rows: Sequence[RankRow]) -> str:
    lines = ["language,cosine,phi"]
    for r in rows:
        lines.append(f"{r.language},{r.cosine!r},{'undefined' if r.phi is None else repr(r.phi)}")
    return "\n".join(lines) + "\n"
