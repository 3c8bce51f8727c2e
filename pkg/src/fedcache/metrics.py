"""User-accuracy metrics, communication-to-target and speed-up ratios."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument

UNREACHED = None


@dataclass
class RoundRecord:
    round: int
    ua: list[float]
    bytes_up: int  # cumulative, including initialisation traffic
    bytes_down: int

    @property
    def avg_ua(self) -> float:
        return float(np.mean(self.ua))

    @property
    def total_bytes(self) -> int:
        return self.bytes_up + self.bytes_down


@dataclass
class MetricsReport:
    algorithm: str
    records: list[RoundRecord] = field(default_factory=list)
    init_bytes_up: int = 0
    acc_targets: tuple[float, ...] = ()

    @property
    def maua(self) -> float:
        return maua(self)

    @property
    def acc_at(self) -> dict[float, int | None]:
        return {t: comm_to_reach(self, t) for t in self.acc_targets}

    def to_csv(self) -> str:
        """``round, avg_ua, maua, bytes_up, bytes_down`` per round plus a summary line."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "avg_ua", "maua", "bytes_up", "bytes_down"])
        best = -1.0
        for rec in sorted(self.records, key=lambda r: r.round):
            best = max(best, rec.avg_ua)
            w.writerow([rec.round, repr(rec.avg_ua), repr(best), rec.bytes_up, rec.bytes_down])
        last = max(self.records, key=lambda r: r.round) if self.records else None
        w.writerow([
            "summary",
            self.algorithm,
            repr(self.maua) if self.records else "",
            last.bytes_up if last else 0,
            last.bytes_down if last else 0,
        ])
        return buf.getvalue()


def _sorted(report: MetricsReport) -> list[RoundRecord]:
    return sorted(report.records, key=lambda r: r.round)


def maua(report: MetricsReport) -> float:
    """Maximum over rounds of the across-client average user accuracy."""
    if not report.records:
        raise InvalidArgument("report has no rounds")
    return max(rec.avg_ua for rec in _sorted(report))


def comm_to_reach(report: MetricsReport, target: float) -> int | None:
    """Cumulative bytes (both directions) at the first round whose average UA reaches ``target``."""
    for rec in _sorted(report):
        if rec.avg_ua >= target:
            return rec.total_bytes
    return UNREACHED


def speedup(base_bytes: float | None, this_bytes: float | None) -> float | None:
    """Ratio of the baseline's communication to this method's; None when either is unreached."""
    if base_bytes is None or this_bytes is None:
        return None
    if this_bytes <= 0:
        raise InvalidArgument("this_bytes must be positive")
    return base_bytes / this_bytes


def format_speedup(ratio: float | None) -> str:
    return "-" if ratio is None else f"x{round(ratio, 1):.1f}"


def read_csv_report(text: str) -> MetricsReport:
    """Rebuild a report (per-round averages only) from :meth:`MetricsReport.to_csv` output."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:5] != ["round", "avg_ua", "maua", "bytes_up", "bytes_down"]:
        raise InvalidArgument("not a metrics CSV")
    algorithm = "unknown"
    records = []
    for row in rows[1:]:
        if row and row[0] == "summary":
            algorithm = row[1]
            continue
        records.append(RoundRecord(int(row[0]), [float(row[1])], int(row[3]), int(row[4])))
    return MetricsReport(algorithm, records)


def comparison_table(reports: Sequence[tuple[str, MetricsReport]], target: float) -> str:
    """Text table: Method | MAUA (%) | Comm. (G) | Speed-up, relative to the costliest method."""
    reached = {name: comm_to_reach(r, target) for name, r in reports}
    costs = [b for b in reached.values() if b is not None]
    base = max(costs) if costs else None
    lines = [f"{'Method':<24}{'MAUA (%)':>10}{'Comm. (G)':>12}{'Speed-up':>10}"]
    for name, rep in reports:
        b = reached[name]
        comm = "-" if b is None else f"{b / 1e9:.4f}"
        lines.append(
            f"{name:<24}{100 * rep.maua:>10.2f}{comm:>12}{format_speedup(speedup(base, b)):>10}"
        )
    return "\n".join(lines) + "\n"


def median(values: Iterable[float]) -> float:
    return float(np.median(list(values)))
