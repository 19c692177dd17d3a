"""Age-prediction metrics: MAE, cumulative score, per-age-group tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("metrics need at least one subject")
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} targets vs {yhat.size} predictions")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(np.abs(y - yhat).tolist()) / y.size


def cs(y, yhat, alpha: float) -> float:
    """Percentage of subjects with absolute error <= alpha."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    y, yhat = _pair(y, yhat)
    return 100.0 * np.count_nonzero(np.abs(y - yhat) <= alpha) / y.size


def cs_curve(y, yhat, alpha_max: float = 2.0, step: float = 0.1) -> list[tuple[float, float]]:
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    n = int(np.floor(alpha_max / step + 1e-9))
    alphas = [round(i * step, 10) for i in range(n + 1)]
    return [(a, cs(y, yhat, a)) for a in alphas]


@dataclass
class GroupRow:
    label: str
    lo: float
    hi: float
    count: int
    mae: float | None  # None when the bin is empty


def check_bins(bins: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Validate a bin list: nonempty, each ``lo < hi``, no overlaps."""
    if not bins:
        raise ValueError("empty bin list")
    bins = [(float(lo), float(hi)) for lo, hi in bins]
    for lo, hi in bins:
        if not lo < hi:
            raise ValueError(f"bin {lo}-{hi} is empty or reversed")
    order = sorted(bins)
    for (a_lo, a_hi), (b_lo, _) in zip(order, order[1:]):
        if b_lo < a_hi:
            raise ValueError(f"overlapping bins [{a_lo}, {a_hi}) and [{b_lo}, ...)")
    return bins


def parse_bins(spec: str) -> list[tuple[float, float]]:
    """``"0-1,1-2,2-3"`` -> ``[(0, 1), (1, 2), (2, 3)]``."""
    bins = []
    for part in spec.split(","):
        lo, sep, hi = part.strip().partition("-")
        if not sep:
            raise ValueError(f"bad bin {part!r}; expected lo-hi")
        bins.append((float(lo), float(hi)))
    return check_bins(bins)


def _label(lo: float, hi: float) -> str:
    f = lambda v: str(int(v)) if float(v).is_integer() else str(v)
    return f"{f(lo)}-{f(hi)}"


def group_mae(y, yhat, bins: Sequence[tuple[float, float]]) -> tuple[list[GroupRow], int]:
    """Per-bin MAE with membership ``lo <= y < hi`` (last bin closed at ``hi``).

    Returns the table and the number of subjects falling outside every bin.
    """
    bins = check_bins(bins)
    y, yhat = _pair(y, yhat)
    err = np.abs(y - yhat)
    last = len(bins) - 1
    covered = np.zeros(y.size, dtype=bool)
    rows = []
    for i, (lo, hi) in enumerate(bins):
        member = (y >= lo) & ((y <= hi) if i == last else (y < hi))
        member &= ~covered
        covered |= member
        n = int(member.sum())
        rows.append(GroupRow(_label(lo, hi), lo, hi, n, math.fsum(err[member].tolist()) / n if n else None))
    return rows, int((~covered).sum())


@dataclass
class EvalReport:
    model: str
    n: int
    overall_mae: float
    group_mae: list[GroupRow]
    mean_of_group_mae: float | None
    outside_bins: int
    cs_samples: list[tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["cs_samples"] = [{"alpha": a, "cs_percent": round(p, 2)} for a, p in self.cs_samples]
        return json.dumps(d, indent=2)


def evaluate(y, yhat, bins, model: str = "", alpha_max: float = 2.0, step: float = 0.1) -> EvalReport:
    groups, outside = group_mae(y, yhat, bins)
    filled = [g.mae for g in groups if g.mae is not None]
    return EvalReport(
        model=model,
        n=int(np.size(y)),
        overall_mae=mae(y, yhat),
        group_mae=groups,
        mean_of_group_mae=float(np.mean(filled)) if filled else None,
        outside_bins=outside,
        cs_samples=cs_curve(y, yhat, alpha_max, step),
    )


def _num(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def write_cs_csv(report: EvalReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "cs_percent"])
        for a, p in report.cs_samples:
            w.writerow([f"{a:.2f}", f"{p:.2f}"])


def group_table_rows(reports: Sequence[EvalReport]) -> list[list[str]]:
    """Comparison table: one row per model, one column per age group, then Average.

    ``Average`` is the subject-weighted overall MAE.  ``Mean of groups`` and the
    per-bin counts are appended so both readings are available.
    """
    labels = [g.label for g in reports[0].group_mae]
    header = ["Method"] + labels + ["Average", "Mean of groups"] + [f"n {lab}" for lab in labels]
    rows = [header]
    for r in reports:
        if [g.label for g in r.group_mae] != labels:
            raise ValueError("reports use different bins")
        rows.append(
            [r.model]
            + [_num(g.mae) for g in r.group_mae]
            + [_num(r.overall_mae), _num(r.mean_of_group_mae)]
            + [str(g.count) for g in r.group_mae]
        )
    return rows


def write_group_csv(reports: Sequence[EvalReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(group_table_rows(reports))


def format_group_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text rendering of :func:`group_table_rows` (counts omitted)."""
    rows = group_table_rows(reports)
    n_cols = len(reports[0].group_mae) + 3
    rows = [r[:n_cols] for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(n_cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
