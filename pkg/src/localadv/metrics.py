"""Evaluation criteria: PSNR, Lp distances, success rate, and query averages.

All functions are pure. Query averages come in two flavors: over every attack
(Case-All) and over the examples two compared schemes both solved (Case-Both).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Hashable, List, Optional, Sequence

import numpy as np

from .types import AttackResult, ImageTensor


def psnr(a: ImageTensor, b: ImageTensor) -> float:
    """Peak signal-to-noise ratio in decibels: 10*log10(GL^2 / MSE).

    MSE averages the squared error over all H*W*C elements. Identical images
    return +inf.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.domain != b.domain:
        raise ValueError(f"domain mismatch: {a.domain} vs {b.domain}")
    diff = a.data - b.data
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    gl = a.domain.gray_levels
    return float(10.0 * np.log10(gl * gl / mse))


@dataclass(frozen=True)
class LpDistances:
    l0: int
    l2: float
    linf: float


def lp_distances(a: ImageTensor, b: ImageTensor) -> LpDistances:
    """L0 (count of differing elements), L2, and Linf of the elementwise delta."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = (a.data - b.data).ravel()
    return LpDistances(
        l0=int(np.count_nonzero(diff)),
        l2=float(np.sqrt(np.sum(diff * diff))),
        linf=float(np.max(np.abs(diff))) if diff.size else 0.0,
    )


def success_rate(results: Sequence[AttackResult]) -> float:
    """Percentage of attacks whose final top-1 label differs from the truth."""
    if len(results) == 0:
        raise ValueError("success_rate needs at least one result")
    return 100.0 * sum(1 for r in results if r.success) / len(results)


def noq_case_all(results: Sequence[AttackResult]) -> float:
    """Mean query count over every attack, successes and failures alike."""
    if len(results) == 0:
        raise ValueError("noq_case_all needs at least one result")
    return sum(r.noq for r in results) / len(results)


@dataclass(frozen=True)
class CaseBoth:
    """Query averages restricted to the examples both schemes solved.

    Means are None when the intersection is empty (the explicit empty marker);
    ``both_fraction`` is the intersection's share of the full keyed corpus.
    """

    mean_a: Optional[float]
    mean_b: Optional[float]
    both_fraction: float
    n_both: int

    @property
    def empty(self) -> bool:
        return self.n_both == 0


def noq_case_both(
    a: Dict[Hashable, AttackResult], b: Dict[Hashable, AttackResult]
) -> CaseBoth:
    """Case-Both averages for two result sets keyed by example identifier."""
    if set(a.keys()) != set(b.keys()):
        raise ValueError("result sets must be keyed by the same example identifiers")
    if len(a) == 0:
        raise ValueError("noq_case_both needs at least one keyed result")
    both: List[Hashable] = [k for k in a if a[k].success and b[k].success]
    frac = len(both) / len(a)
    if not both:
        return CaseBoth(mean_a=None, mean_b=None, both_fraction=0.0, n_both=0)
    return CaseBoth(
        mean_a=sum(a[k].noq for k in both) / len(both),
        mean_b=sum(b[k].noq for k in both) / len(both),
        both_fraction=frac,
        n_both=len(both),
    )
