"""Per-gene differential expression testing with FDR control."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.stats

from ..errors import DataError, ParameterError


@dataclass(frozen=True)
class DeResult:
    """Per-gene two-group comparison."""
    statistic: np.ndarray     # test statistic per gene
    p_value: np.ndarray
    effect: np.ndarray        # mean(A) - mean(B) per gene
    rejected: np.ndarray      # bool, after FDR control
    method: str
    q: float


def welch_t(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Columnwise Welch t statistic and two-sided p value.

    Degenerate genes (zero variance in both groups) get statistic 0 and
    p value 1 rather than NaN.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.shape[0], b.shape[0]
    if na < 2 or nb < 2:
        raise DataError("welch_t needs at least two samples per group")
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    va, vb = a.var(axis=0, ddof=1), b.var(axis=0, ddof=1)
    se2 = va / na + vb / nb
    degenerate = se2 == 0
    se2_safe = np.where(degenerate, 1.0, se2)
    t = (ma - mb) / np.sqrt(se2_safe)
    # Welch-Satterthwaite degrees of freedom
    num = se2_safe ** 2
    den = (va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1)
    den = np.where(den == 0, 1.0, den)
    df = num / den
    p = 2.0 * scipy.stats.t.sf(np.abs(t), df)
    t = np.where(degenerate, 0.0, t)
    p = np.where(degenerate, 1.0, p)
    return t, p


def rank_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Columnwise two-sided Mann-Whitney U (normal approximation with ties)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    stats = np.empty(a.shape[1])
    ps = np.empty(a.shape[1])
    for g in range(a.shape[1]):
        col_a, col_b = a[:, g], b[:, g]
        if np.all(col_a == col_a[0]) and np.all(col_b == col_a[0]):
            stats[g], ps[g] = 0.0, 1.0
            continue
        res = scipy.stats.mannwhitneyu(col_a, col_b, alternative="two-sided",
                                       method="asymptotic")
        stats[g], ps[g] = float(res.statistic), float(res.pvalue)
    return stats, ps


def benjamini_hochberg(p_values, q: float = 0.05) -> np.ndarray:
    """Step-up FDR control: reject the largest prefix with p_(i) <= q*i/m."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if p.size == 0:
        raise DataError("no p values to correct")
    if np.any((p < 0) | (p > 1)):
        raise DataError("p values must lie in [0, 1]")
    if not 0 < q < 1:
        raise ParameterError(f"q must be in (0, 1), got {q}")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    thresholds = q * np.arange(1, m + 1) / m
    passing = np.nonzero(ranked <= thresholds)[0]
    rejected = np.zeros(m, dtype=bool)
    if passing.size:
        rejected[order[:passing[-1] + 1]] = True
    return rejected


def de_test(group_a, group_b, q: float = 0.05,
            method: str = "welch") -> DeResult:
    """Two-group differential expression over genes with BH correction."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError(
            f"expected (cells, genes) with matching genes, got {a.shape} "
            f"and {b.shape}")
    if method == "welch":
        stat, p = welch_t(a, b)
    elif method == "ranksum":
        stat, p = rank_sum(a, b)
    else:
        raise ParameterError(f"unknown method {method!r}")
    rejected = benjamini_hochberg(p, q=q)
    return DeResult(statistic=stat, p_value=p,
                    effect=a.mean(axis=0) - b.mean(axis=0),
                    rejected=rejected, method=method, q=q)
