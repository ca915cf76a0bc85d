"""JSON run configuration: validation, default resolution and echo.

Layout (every section optional except where noted)::

    {
      "seed": 0,
      "paradigm": "fed_noniid",            # or a list of paradigms
      "output_dir": "runs/demo",
      "model": {ModelConfig fields except seed},
      "federation": {FederationConfig fields except seed},
      "data": {"synthetic": {...}} | {"jsonl": "path", "reserved": 0},
      "split": {"test_fraction": 0.2, "val_fraction": 0.1},
      "subsample": {"de": 50}
    }

Unknown keys anywhere raise :class:`ConfigError` naming the dotted key.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from fedpeft.data import (Dataset, DatasetSpec, LanguageSpec, default_languages, generate_synthetic,
                          ingest_jsonl)
from fedpeft.errors import ConfigError
from fedpeft.federation import PARADIGMS, ExperimentConfig, FederationConfig
from fedpeft.model import ModelConfig

TOP_KEYS = {"seed", "paradigm", "output_dir", "model", "federation", "data", "split", "subsample"}
SYNTHETIC_KEYS = {"languages", "examples_per_language", "seq_len", "markers_per_class",
                  "markers_per_example", "base_exponent"}
LANGUAGE_KEYS = {"name", "background_range", "zipf_exponent", "base_mix"}


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig
    paradigms: tuple[str, ...]
    seed: int
    output_dir: str | None = None
    synthetic: DatasetSpec | None = None
    jsonl: str | None = None
    reserved: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def model(self) -> ModelConfig:
        return self.experiment.model

    @property
    def federation(self) -> FederationConfig:
        return self.experiment.federation

    def load_dataset(self) -> Dataset:
        if self.synthetic is not None:
            return generate_synthetic(self.synthetic)
        return ingest_jsonl(self.jsonl, self.model.vocab_size, self.model.num_classes, self.reserved)

    def echo(self) -> dict:
        """The fully resolved configuration, defaults included."""
        model = asdict(self.model)
        fed = asdict(self.federation)
        out: dict[str, Any] = {
            "seed": self.seed,
            "paradigm": list(self.paradigms),
            "output_dir": self.output_dir,
            "model": model,
            "federation": fed,
            "split": {"test_fraction": self.experiment.test_fraction,
                      "val_fraction": self.experiment.val_fraction},
            "subsample": dict(sorted(self.experiment.subsample.items())),
        }
        if self.synthetic is not None:
            spec = self.synthetic
            out["data"] = {"synthetic": {
                "languages": [{"name": l.name, "background_range": list(l.background_range),
                               "zipf_exponent": l.zipf_exponent, "base_mix": l.base_mix}
                              for l in spec.languages],
                "examples_per_language": dict(spec.examples_per_language),
                "seq_len": list(spec.seq_len),
                "markers_per_class": spec.markers_per_class,
                "markers_per_example": spec.markers_per_example,
                "base_exponent": spec.base_exponent,
            }}
        else:
            out["data"] = {"jsonl": self.jsonl, "reserved": self.reserved}
        return out


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a JSON object")
    return value


def _reject_unknown(section: dict, allowed, prefix: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}", "unknown key")


def _int(value, key, lo=0):
    if isinstance(value, bool) or not isinstance(value, int) or value < lo:
        raise ConfigError(key, f"must be an integer >= {lo}, got {value!r}")
    return value


def _real(value, key):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"must be a number, got {value!r}")
    return float(value)


def _build(cls, section: dict, prefix: str, **extra):
    allowed = {f.name for f in fields(cls)} - {"seed"}
    _reject_unknown(section, allowed, prefix)
    try:
        return cls(**section, **extra)
    except ConfigError as exc:
        raise ConfigError(f"{prefix}{exc.key}", str(exc).split(": ", 1)[-1]) from None
    except TypeError as exc:
        raise ConfigError(prefix.rstrip(".") or "config", str(exc)) from None


def _synthetic(section: dict, model: ModelConfig, seed: int) -> DatasetSpec:
    p = "data.synthetic."
    _reject_unknown(section, SYNTHETIC_KEYS, p)
    M = _int(section.get("markers_per_class", 4), p + "markers_per_class", 1)
    region = model.num_classes * M
    langs_raw = section.get("languages", ["en", "es", "fr", "de", "ru"])
    if not isinstance(langs_raw, list) or not langs_raw:
        raise ConfigError(p + "languages", "must be a non-empty list")
    if all(isinstance(x, str) for x in langs_raw):
        languages = default_languages(model.vocab_size, region, tuple(langs_raw))
    else:
        languages = []
        for i, item in enumerate(langs_raw):
            key = f"{p}languages[{i}]"
            if not isinstance(item, dict):
                raise ConfigError(key, "must be a name or an object")
            _reject_unknown(item, LANGUAGE_KEYS, key + ".")
            if "name" not in item or "background_range" not in item:
                raise ConfigError(key, "needs 'name' and 'background_range'")
            rng_ = item["background_range"]
            if not (isinstance(rng_, list) and len(rng_) == 2):
                raise ConfigError(key + ".background_range", "must be [lo, hi]")
            languages.append(LanguageSpec(
                str(item["name"]), (_int(rng_[0], key + ".background_range"),
                                    _int(rng_[1], key + ".background_range")),
                _real(item.get("zipf_exponent", 1.1), key + ".zipf_exponent"),
                _real(item.get("base_mix", 0.3), key + ".base_mix")))
        languages = tuple(languages)
    count = section.get("examples_per_language", 2000)
    if isinstance(count, dict):
        counts = {str(k): _int(v, f"{p}examples_per_language.{k}") for k, v in count.items()}
    else:
        counts = {l.name: _int(count, p + "examples_per_language") for l in languages}
    seq = section.get("seq_len", [8, 16])
    if not (isinstance(seq, list) and len(seq) == 2):
        raise ConfigError(p + "seq_len", "must be [min, max]")
    spec = DatasetSpec(
        languages=languages, examples_per_language=counts,
        vocab_size=model.vocab_size, num_classes=model.num_classes,
        seq_len=(_int(seq[0], p + "seq_len", 1), _int(seq[1], p + "seq_len", 1)),
        markers_per_class=M,
        markers_per_example=_int(section.get("markers_per_example", 4), p + "markers_per_example", 1),
        base_exponent=_real(section.get("base_exponent", 1.0), p + "base_exponent"),
        seed=seed)
    try:
        spec.validate()
    except ConfigError as exc:
        raise ConfigError(p + exc.key, str(exc).split(": ", 1)[-1]) from None
    return spec


def parse_run_config(raw: Any, base_dir: str | Path = ".", seed: int | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    _reject_unknown(raw, TOP_KEYS, "")
    seed = _int(raw.get("seed", 0) if seed is None else seed, "seed")

    paradigm = raw.get("paradigm", "fed_noniid")
    paradigms = [paradigm] if isinstance(paradigm, str) else paradigm
    if not isinstance(paradigms, list) or not paradigms:
        raise ConfigError("paradigm", "must be a paradigm name or a non-empty list")
    for p in paradigms:
        if p not in PARADIGMS:
            raise ConfigError("paradigm", f"must be one of {PARADIGMS}, got {p!r}")

    model = _build(ModelConfig, _section(raw, "model"), "model.", seed=seed)
    fed = _build(FederationConfig, _section(raw, "federation"), "federation.", seed=seed)

    split = _section(raw, "split")
    _reject_unknown(split, {"test_fraction", "val_fraction"}, "split.")
    test_fraction = _real(split.get("test_fraction", 0.2), "split.test_fraction")
    val_fraction = _real(split.get("val_fraction", 0.1), "split.val_fraction")
    if not (0 <= test_fraction < 1 and 0 <= val_fraction < 1 and test_fraction + val_fraction < 1):
        raise ConfigError("split", "fractions must be in [0, 1) and sum below 1")

    subsample = {str(k): _int(v, f"subsample.{k}") for k, v in _section(raw, "subsample").items()}

    data = _section(raw, "data") or {"synthetic": {}}
    _reject_unknown(data, {"synthetic", "jsonl", "reserved"}, "data.")
    synthetic = jsonl = None
    reserved = 0
    if "synthetic" in data and "jsonl" in data:
        raise ConfigError("data", "give either 'synthetic' or 'jsonl', not both")
    if "jsonl" in data:
        if not isinstance(data["jsonl"], str):
            raise ConfigError("data.jsonl", "must be a path string")
        jsonl = str((Path(base_dir) / data["jsonl"]).resolve())
        reserved = _int(data.get("reserved", 0), "data.reserved")
        if reserved >= model.vocab_size:
            raise ConfigError("data.reserved", "must be below model.vocab_size")
    else:
        if "reserved" in data:
            raise ConfigError("data.reserved", "only valid with 'jsonl'")
        synth = data.get("synthetic", {})
        if not isinstance(synth, dict):
            raise ConfigError("data.synthetic", "must be a JSON object")
        synthetic = _synthetic(synth, model, seed)
        for lang, n in subsample.items():
            if lang not in synthetic.examples_per_language:
                raise ConfigError(f"subsample.{lang}", "unknown language")

    output_dir = raw.get("output_dir")
    if output_dir is not None:
        if not isinstance(output_dir, str):
            raise ConfigError("output_dir", "must be a path string")
        output_dir = str(Path(base_dir) / output_dir)

    experiment = ExperimentConfig(model, fed, test_fraction, val_fraction, subsample)
    return RunConfig(experiment, tuple(paradigms), seed, output_dir, synthetic, jsonl, reserved)


def load_run_config(path: str | Path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON ({exc.msg})") from None
    return parse_run_config(raw, path.parent, seed)
