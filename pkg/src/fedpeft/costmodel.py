"""Parameter-efficiency and communication-cost accounting.

Transmission model: every round each of the ``m`` selected clients
downloads and uploads the trainable tensors, ``bytes_per_scalar`` bytes per
scalar.  Megabytes are 10**6 bytes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from fedpeft.errors import ConfigError, InputError
from fedpeft.model import REFERENCE_COUNTS, STRATEGIES

MB = 10**6


@dataclass(frozen=True)
class CostQuery:
    trainable_params: int
    clients_per_round: int = 5
    rounds: int = 10
    bytes_per_scalar: int = 4
    directions: int = 2

    def __post_init__(self):
        for name in ("trainable_params", "clients_per_round", "bytes_per_scalar", "directions"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if isinstance(self.rounds, bool) or not isinstance(self.rounds, int) or self.rounds < 0:
            raise ConfigError("rounds", f"must be a non-negative integer, got {self.rounds!r}")


@dataclass(frozen=True)
class CostReport:
    query: CostQuery
    per_round_bytes: int
    total_bytes: int

    @property
    def megabytes(self) -> float:
        return self.total_bytes / MB

    def to_dict(self) -> dict:
        return {**asdict(self.query), "per_round_bytes": self.per_round_bytes,
                "total_bytes": self.total_bytes, "megabytes": self.megabytes}


def round_bytes(trainable_params: int, clients: int, bytes_per_scalar: int = 4, directions: int = 2) -> int:
    return directions * clients * bytes_per_scalar * trainable_params


def comm_cost(q: CostQuery) -> CostReport:
    per_round = round_bytes(q.trainable_params, q.clients_per_round, q.bytes_per_scalar, q.directions)
    return CostReport(q, per_round, per_round * q.rounds)


def reduction_pct(candidate: CostReport, baseline: CostReport) -> float:
    if baseline.total_bytes <= 0:
        raise InputError("baseline transmits zero bytes; reduction is undefined")
    return 100.0 * (1.0 - candidate.total_bytes / baseline.total_bytes)


def trainable_fraction(trainable: int, total: int) -> float:
    if not 0 < trainable <= total:
        raise InputError(f"need 0 < trainable <= total, got {trainable} / {total}")
    return trainable / total


def reference_table(clients_per_round: int = 5, rounds: int = 10, bytes_per_scalar: int = 4,
                    directions: int = 2) -> list[dict]:
    """Rows of the reference parameter/communication table for all strategies."""
    full = comm_cost(CostQuery(REFERENCE_COUNTS["full"][1], clients_per_round, rounds,
                               bytes_per_scalar, directions))
    rows = []
    for strategy in STRATEGIES:
        total, trainable = REFERENCE_COUNTS[strategy]
        report = comm_cost(CostQuery(trainable, clients_per_round, rounds, bytes_per_scalar, directions))
        rows.append({
            "strategy": strategy,
            "trainable_params": trainable,
            "total_params": total,
            "trainable_fraction": trainable_fraction(trainable, total),
            "megabytes": report.megabytes,
            "reduction_pct": reduction_pct(report, full) if full.total_bytes else 0.0,
        })
    return rows


def format_table(rows: list[dict]) -> str:
    """Two-column text table: trainable parameters and communication cost."""
    head = ("", "# Trainable Params", "Communication Cost")
    body = [(r["strategy"], f"{r['trainable_params']:,}", f"{r['megabytes']:,.2f} MB") for r in rows]
    widths = [max(len(row[i]) for row in [head, *body]) for i in range(3)]
    line = lambda row: " | ".join(cell.ljust(w) if i == 0 else cell.rjust(w)
                                   for i, (cell, w) in enumerate(zip(row, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(head), sep, *(line(row) for row in body)])
