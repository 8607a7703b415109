"""Report tables and figures from stored run records.

Per-method rows carry mean NoQ over all runs, SR, and mean PSNR over the
successful runs; optional pairings add Case-Both query averages restricted to
the examples both methods solved. Output comes in three forms: a plain-text
table, CSV, and bar-chart PNGs rendered next to the CSV.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .harness import RunRecord
from .metrics import noq_case_both


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n: int
    successes: int
    sr_pct: float
    mean_noq: float            # Case-All: failures included
    mean_noq_success: Optional[float]  # successes only, for the filtered view
    median_noq: float
    mean_psnr: Optional[float]
    mean_l0: Optional[float]
    mean_l2: Optional[float]
    mean_linf: Optional[float]


def _mean(values: Sequence[float]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def _median(values: Sequence[float]) -> float:
    vals = sorted(values)
    n = len(vals)
    mid = n // 2
    return float(vals[mid]) if n % 2 else (vals[mid - 1] + vals[mid]) / 2.0


def summarize(records: Sequence[RunRecord]) -> List[MethodSummary]:
    """One summary row per method, sorted by method name."""
    if not records:
        raise ValueError("no records to summarize")
    by_method: Dict[str, List[RunRecord]] = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r)
    rows = []
    for method in sorted(by_method):
        rs = by_method[method]
        wins = [r for r in rs if r.success]
        finite_psnr = [
            r.psnr_db for r in wins if r.psnr_db is not None and math.isfinite(r.psnr_db)
        ]
        rows.append(
            MethodSummary(
                method=method,
                n=len(rs),
                successes=len(wins),
                sr_pct=100.0 * len(wins) / len(rs),
                mean_noq=sum(r.noq for r in rs) / len(rs),
                mean_noq_success=_mean([r.noq for r in wins]),
                median_noq=_median([r.noq for r in rs]),
                mean_psnr=_mean(finite_psnr),
                mean_l0=_mean([r.l0 for r in wins]),
                mean_l2=_mean([r.l2 for r in wins]),
                mean_linf=_mean([r.linf for r in wins]),
            )
        )
    return rows


def format_text_table(summaries: Sequence[MethodSummary]) -> str:
    """Human-readable table; SR formatted like 97.80%, PSNR to 2 decimals."""
    header = (
        f"{'Method':<12} {'N':>4} {'SR':>8} {'NoQ(all)':>10} {'NoQ(succ)':>10} "
        f"{'NoQ(med)':>10} {'PSNR':>8}"
    )
    lines = [header, "-" * len(header)]
    for s in summaries:
        psnr_txt = f"{s.mean_psnr:.2f}" if s.mean_psnr is not None else "-"
        noq_s = f"{s.mean_noq_success:.1f}" if s.mean_noq_success is not None else "-"
        lines.append(
            f"{s.method:<12} {s.n:>4} {s.sr_pct:>7.2f}% {s.mean_noq:>10.1f} {noq_s:>10} "
            f"{s.median_noq:>10.1f} {psnr_txt:>8}"
        )
    return "\n".join(lines)


def write_csv(summaries: Sequence[MethodSummary], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            [
                "method",
                "n",
                "successes",
                "success_rate_pct",
                "mean_noq_case_all",
                "mean_noq_successes",
                "median_noq",
                "mean_psnr_db",
                "mean_l0",
                "mean_l2",
                "mean_linf",
            ]
        )
        for s in summaries:
            writer.writerow(
                [
                    s.method,
                    s.n,
                    s.successes,
                    f"{s.sr_pct:.2f}",
                    f"{s.mean_noq:.2f}",
                    "" if s.mean_noq_success is None else f"{s.mean_noq_success:.2f}",
                    f"{s.median_noq:.2f}",
                    "" if s.mean_psnr is None else f"{s.mean_psnr:.2f}",
                    "" if s.mean_l0 is None else f"{s.mean_l0:.2f}",
                    "" if s.mean_l2 is None else f"{s.mean_l2:.2f}",
                    "" if s.mean_linf is None else f"{s.mean_linf:.2f}",
                ]
            )


@dataclass(frozen=True)
class CaseBothRow:
    method_a: str
    method_b: str
    mean_noq_a: Optional[float]
    mean_noq_b: Optional[float]
    both_fraction_pct: float
    n_both: int


def case_both_rows(
    records: Sequence[RunRecord], pairs: Sequence[Tuple[str, str]]
) -> List[CaseBothRow]:
    """Case-Both pairings over records keyed by example id."""
    by_method: Dict[str, Dict[str, RunRecord]] = {}
    for r in records:
        by_method.setdefault(r.method, {})[r.example_id] = r
    rows = []
    for a, b in pairs:
        if a not in by_method or b not in by_method:
            raise ValueError(f"pairing {a} vs {b}: missing records for one method")
        cb = noq_case_both(by_method[a], by_method[b])
        rows.append(
            CaseBothRow(
                method_a=a,
                method_b=b,
                mean_noq_a=cb.mean_a,
                mean_noq_b=cb.mean_b,
                both_fraction_pct=100.0 * cb.both_fraction,
                n_both=cb.n_both,
            )
        )
    return rows


def write_case_both_csv(rows: Sequence[CaseBothRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["method_a", "method_b", "mean_noq_a", "mean_noq_b", "examples_both_pct", "n_both"]
        )
        for r in rows:
            writer.writerow(
                [
                    r.method_a,
                    r.method_b,
                    "" if r.mean_noq_a is None else f"{r.mean_noq_a:.2f}",
                    "" if r.mean_noq_b is None else f"{r.mean_noq_b:.2f}",
                    f"{r.both_fraction_pct:.2f}",
                    r.n_both,
                ]
            )


def format_case_both_text(rows: Sequence[CaseBothRow]) -> str:
    header = f"{'Pairing':<26} {'NoQ A':>10} {'NoQ B':>10} {'Both':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        a = "-" if r.mean_noq_a is None else f"{r.mean_noq_a:.1f}"
        b = "-" if r.mean_noq_b is None else f"{r.mean_noq_b:.1f}"
        lines.append(
            f"{r.method_a + ' vs ' + r.method_b:<26} {a:>10} {b:>10} {r.both_fraction_pct:>7.2f}%"
        )
    return "\n".join(lines)


def _bar_chart(methods, values, ylabel, title, path):
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(methods)), 3.2))
    ax.bar(range(len(methods)), values, color="#4878a8")
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(summaries: Sequence[MethodSummary], out_dir) -> List[str]:
    """Bar charts for NoQ, SR, and PSNR; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    methods = [s.method for s in summaries]
    paths = []
    for fname, values, ylabel, title in (
        ("noq_case_all.png", [s.mean_noq for s in summaries], "mean queries", "Query cost (Case-All)"),
        ("success_rate.png", [s.sr_pct for s in summaries], "success rate (%)", "Success rate"),
        (
            "psnr.png",
            [s.mean_psnr if s.mean_psnr is not None else 0.0 for s in summaries],
            "mean PSNR (dB)",
            "Adversarial example quality",
        ),
    ):
        path = os.path.join(out_dir, fname)
        _bar_chart(methods, values, ylabel, title, path)
        paths.append(path)
    return paths


def write_report(
    records: Sequence[RunRecord],
    out_dir,
    pairs: Sequence[Tuple[str, str]] = (),
) -> str:
    """Write report.csv, figures, optional case_both.csv; returns the text table."""
    os.makedirs(out_dir, exist_ok=True)
    summaries = summarize(records)
    write_csv(summaries, os.path.join(out_dir, "report.csv"))
    render_figures(summaries, out_dir)
    text = format_text_table(summaries)
    if pairs:
        rows = case_both_rows(records, pairs)
        write_case_both_csv(rows, os.path.join(out_dir, "case_both.csv"))
        text = text + "\n\n" + format_case_both_text(rows)
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(text + "\n")
    return text
