import sys
from pathlib import Path

import numpy as np
import pytest

from fedpeft.data import DatasetSpec, default_languages, generate_synthetic
from fedpeft.model import Example, ModelConfig, ParameterSet, trainable_names

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
sys.path.insert(0, str(HERE / "oracles"))


def explicit_params(config: ModelConfig, **tensors) -> ParameterSet:
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    return ParameterSet(config, arrays, trainable_names(config.strategy, arrays))


def zero_params(config: ModelConfig) -> ParameterSet:
    V, d, dh, S, p = (config.vocab_size, config.embed_dim, config.hidden_dim,
                      config.num_classes, config.prompt_len)
    t = dict(E=np.zeros((V, d)), W1=np.zeros((dh, d)), b1=np.zeros(dh),
             W2=np.zeros((S, dh)), b2=np.zeros(S), P=np.zeros((p, d)))
    if config.strategy == "lora":
        t.update(A=np.zeros((config.lora_rank, d)), B=np.zeros((dh, config.lora_rank)))
    return explicit_params(config, **t)


def random_batch(rng, V, S, n, length=None, languages=("xx",)):
    out = []
    for i in range(n):
        L = length or int(rng.integers(1, 8))
        out.append(Example(tuple(int(t) for t in rng.integers(0, V, L)), int(rng.integers(0, S)),
                           languages[i % len(languages)]))
    return out


def small_spec(per_language=200, seed=0, names=("en", "es", "fr")) -> DatasetSpec:
    langs = default_languages(1000, 16, names)
    return DatasetSpec(langs, {l.name: per_language for l in langs}, seed=seed)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(small_spec())


# acceptance criteria: one summary line per criterion, built from pytest's own outcomes
_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= report.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail" and v not in entry["details"]]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        detail = f"  ({'; '.join(e['details'])})" if e["details"] else ""
        terminalreporter.write_line(f"[{'PASS' if e['ok'] else 'FAIL'}] {number:2d}. {e['title']}{detail}")
    passed = sum(e["ok"] for e in _CRITERIA.values())
    terminalreporter.write_line(f"{passed}/{len(_CRITERIA)} criteria passed")
