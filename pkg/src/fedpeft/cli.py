"""Command-line entry point: ``fedpeft <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

from fedpeft import costmodel, langdist, plotting
from fedpeft.config import load_run_config
from fedpeft.data import ingest_jsonl, languages_of, partition, write_jsonl
from fedpeft.errors import ConfigError, FedPeftError, InputError
from fedpeft.federation import prepare_splits, run_experiment, worker_count
from fedpeft.model import STRATEGIES, count_params

log = logging.getLogger("fedpeft")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class UsageError(FedPeftError):
    """Bad command-line arguments or unreadable input files."""


def _out_dir(args, config=None) -> Path:
    out = args.out or (config.output_dir if config is not None else None)
    if not out:
        raise UsageError("no output directory: pass --out or set output_dir in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_jsonl(records, path: Path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def _write_csv(rows: list[dict], columns: list[str], path: Path):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", restval="")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    path.write_text(buf.getvalue(), encoding="utf-8")


def _load_config(args):
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_run_config(args.config, args.seed)


def cmd_run(args) -> int:
    config = _load_config(args)
    worker_count()  # fail fast on a bad FEDPEFT_THREADS
    out = _out_dir(args, config)
    dataset = config.load_dataset()
    (out / "config-echo.json").write_text(json.dumps(config.echo(), indent=2) + "\n", encoding="utf-8")
    reports, history = [], []
    for paradigm in config.paradigms:
        log.info("running %s (%s)", paradigm, config.model.strategy)
        report = run_experiment(paradigm, dataset, config.experiment)
        reports.append(report)
        history.extend(report.history)
    _write_jsonl(history, out / "history.jsonl")
    langs = languages_of(dataset)
    _write_csv([r.summary_row() for r in reports], ["paradigm", "strategy", *langs, "Avg"], out / "summary.csv")
    if args.figures:
        plotting.plot_rounds(history, out / "rounds.png")
    for r in reports:
        print(f"{r.paradigm:12s} {r.strategy:7s} Avg={r.average:.4f}")
    return EXIT_OK


def cmd_distance(args) -> int:
    for p in (args.vectors, args.counts):
        if not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")
    registry = langdist.load_vectors(args.vectors)
    weights = langdist.load_counts(args.counts)
    rows = langdist.rank_languages(registry, weights)
    text = langdist.format_rank_csv(rows)
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args)
        (out / "distance.csv").write_text(text, encoding="utf-8")
        if args.figures:
            plotting.plot_distance(rows, out / "distance.png")
    return EXIT_OK


def cmd_cost(args) -> int:
    strategies = STRATEGIES if args.strategy == "all" else (args.strategy,)
    if args.trainable is not None:
        if args.preset:
            raise UsageError("--preset and --trainable are mutually exclusive")
        table = {args.strategy if args.strategy != "all" else "custom": (args.total, args.trainable)}
        baseline_params = args.total
    else:
        preset = args.preset or "paper-table4"
        table = {s: count_params(preset, s) for s in strategies}
        baseline_params = count_params(preset, "full")[1]

    def report(n):
        return costmodel.comm_cost(costmodel.CostQuery(n, args.m, args.rounds, args.bytes_per_scalar,
                                                       args.directions))

    baseline = report(baseline_params) if baseline_params else None
    rows = []
    for name, (total, trainable) in table.items():
        rep = report(trainable)
        rows.append({
            "strategy": name,
            "trainable_params": trainable,
            "total_params": total,
            "trainable_fraction": costmodel.trainable_fraction(trainable, total) if total else None,
            "per_round_bytes": rep.per_round_bytes,
            "total_bytes": rep.total_bytes,
            "megabytes": rep.megabytes,
            "reduction_pct": (costmodel.reduction_pct(rep, baseline)
                              if baseline is not None and baseline.total_bytes else None),
        })
    lines = [costmodel.format_table(rows), ""]
    for r in rows:
        frac = "n/a" if r["trainable_fraction"] is None else f"{100 * r['trainable_fraction']:.4f}%"
        red = "n/a" if r["reduction_pct"] is None else f"{r['reduction_pct']:.2f}%"
        lines.append(f"{r['strategy']}: {r['total_bytes']:,} bytes ({r['megabytes']:.2f} MB), "
                     f"trainable fraction {frac}, reduction vs full {red}")
    text = "\n".join(lines) + "\n"
    payload = {"clients_per_round": args.m, "rounds": args.rounds, "bytes_per_scalar": args.bytes_per_scalar,
               "directions": args.directions, "rows": rows}
    sys.stdout.write(json.dumps(payload, indent=2) + "\n" if args.json else text)
    if args.out:
        out = _out_dir(args)
        (out / "cost.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        (out / "cost.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def _parse_sizes(raw: str) -> list[int]:
    try:
        sizes = [int(s) for s in raw.replace(" ", "").split(",") if s]
    except ValueError:
        raise ConfigError("sizes", f"must be comma-separated integers, got {raw!r}") from None
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigError("sizes", "must be a non-empty list of positive integers")
    return sizes


def cmd_ablate(args) -> int:
    config = _load_config(args)
    sizes = _parse_sizes(args.sizes)
    dataset = config.load_dataset()
    if args.language not in languages_of(dataset):
        raise ConfigError("language", f"unknown language {args.language!r}")
    others = {k: v for k, v in config.experiment.subsample.items() if k != args.language}
    train, _, _ = prepare_splits(dataset, replace(config.experiment, subsample=others))
    available = sum(ex.language == args.language for ex in train)
    too_big = [s for s in sizes if s > available]
    if too_big:
        raise ConfigError("sizes", f"{too_big} exceed the {available} {args.language!r} training examples")
    fed_paradigm = next((p for p in config.paradigms if p.startswith("fed_")), "fed_noniid")
    out = _out_dir(args, config)
    rows = []
    for size in sizes:
        experiment = replace(config.experiment, subsample={**others, args.language: size})
        mono = run_experiment("monolingual", dataset, experiment).per_language[args.language]
        fed = run_experiment(fed_paradigm, dataset, experiment).per_language[args.language]
        rows.append({"size": size, "monolingual_accuracy": mono, "federated_accuracy": fed})
        log.info("size %d: monolingual %.4f, %s %.4f", size, mono, fed_paradigm, fed)
    _write_csv(rows, ["size", "monolingual_accuracy", "federated_accuracy"], out / "ablation.csv")
    if args.figures:
        plotting.plot_ablation(rows, args.language, out / "ablation.png")
    for r in rows:
        print(f"{r['size']:>6d}  mono={r['monolingual_accuracy']:.4f}  fed={r['federated_accuracy']:.4f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    if config.synthetic is None:
        raise ConfigError("data.synthetic", "gen-data needs a synthetic data section")
    if not args.out:
        raise UsageError("gen-data needs --out FILE.jsonl")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset = config.load_dataset()
    write_jsonl(dataset, out)
    print(f"wrote {len(dataset)} examples to {out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    if not Path(args.data).is_file():
        raise UsageError(f"data file not found: {args.data}")
    dataset = ingest_jsonl(args.data, args.vocab_size, args.num_classes)
    part = partition(dataset, args.clients, args.mode, args.alpha if args.mode == "noniid" else None,
                     args.seed or 0)
    out = _out_dir(args)
    langs = languages_of(dataset)
    counts = {}
    for shard in part.shards:
        write_jsonl(shard.examples, out / f"client_{shard.client_id:03d}.jsonl")
        counts[shard.client_id] = Counter(ex.language for ex in shard.examples)
    rows = [{"client_id": c, "size": sum(counts[c].values()), **{l: counts[c].get(l, 0) for l in langs}}
            for c in sorted(counts)]
    _write_csv(rows, ["client_id", "size", *langs], out / "partition.csv")
    if args.figures:
        plotting.plot_partition(counts, langs, out / "partition.png")
    for r in rows:
        print(f"client {r['client_id']}: {r['size']} examples")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpeft", description="Federated prompt/LoRA tuning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--out", help="output directory (or file for gen-data)")
        p.add_argument("--seed", type=int, help="override the configuration seed")
        p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True,
                       help="render PNG figures next to the CSV outputs")

    p = sub.add_parser("run", help="run the configured paradigm(s)")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("distance", help="rank languages by distance to the pretraining mix")
    p.add_argument("--vectors", required=True, help="CSV language,f1,...,fF")
    p.add_argument("--counts", required=True, help="JSON {language: token count}")
    common(p, config=False)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("cost", help="parameter and communication cost report")
    p.add_argument("--strategy", choices=[*STRATEGIES, "all"], default="all")
    p.add_argument("--preset", choices=["paper-table4"])
    p.add_argument("--trainable", type=int, help="explicit trainable parameter count")
    p.add_argument("--total", type=int, help="explicit total parameter count (reduction baseline)")
    p.add_argument("--m", "--clients", dest="m", type=int, default=5, help="clients per round")
    p.add_argument("--rounds", "-T", dest="rounds", type=int, default=10)
    p.add_argument("--bytes-per-scalar", type=int, default=4)
    p.add_argument("--directions", type=int, default=2)
    p.add_argument("--json", action="store_true", help="print JSON instead of the text table")
    p.add_argument("--out", help="also write cost.json and cost.txt here")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("ablate", help="accuracy vs training-set size for one language")
    common(p)
    p.add_argument("--language", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated sizes, e.g. 1000,100,30")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-data", help="write the configured synthetic dataset as JSONL")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("partition", help="split a JSONL dataset across clients")
    p.add_argument("--data", required=True)
    p.add_argument("--clients", "-K", dest="clients", type=int, required=True)
    p.add_argument("--mode", choices=["iid", "noniid"], default="noniid")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--num-classes", type=int, default=4)
    common(p, config=False)
    p.set_defaults(func=cmd_partition)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
