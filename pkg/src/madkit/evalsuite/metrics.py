"""Agreement, correlation, and heterogeneity metrics.

Everything here is computed from first principles on numpy arrays so the
implementations can be cross-checked against small enumerable oracles.
NaN is used as the explicit sentinel for undefined values (degenerate
inputs), never as a silent passthrough.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ..errors import DataError, ParameterError, UsageError


@dataclass(frozen=True)
class ContingencyTable:
    """Cross-tabulation of two labelings over the same items."""
    counts: np.ndarray          # (n_row_labels, n_col_labels) int64
    row_labels: np.ndarray
    col_labels: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def contingency_table(a, b) -> ContingencyTable:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise DataError(f"label arrays differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DataError("cannot tabulate empty labelings")
    ra, ia = np.unique(a, return_inverse=True)
    rb, ib = np.unique(b, return_inverse=True)
    counts = np.zeros((ra.size, rb.size), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return ContingencyTable(counts=counts, row_labels=ra, col_labels=rb)


def _comb2(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def ari(labels_true, labels_pred) -> float:
    """Adjusted Rand index from the pair-counting contingency formula.

    1 for identical partitions up to relabeling; ~0 for independent ones.
    When both partitions are single-cluster (index == expected == max), the
    partitions are identical and the value is defined as 1.
    """
    table = contingency_table(labels_true, labels_pred)
    nij = _comb2(table.counts.astype(np.float64)).sum()
    a = _comb2(table.counts.sum(axis=1).astype(np.float64)).sum()
    b = _comb2(table.counts.sum(axis=0).astype(np.float64)).sum()
    total = _comb2(np.float64(table.n))
    if total == 0:
        raise DataError("ARI needs at least two items")
    expected = a * b / total
    max_index = 0.5 * (a + b)
    if max_index == expected:
        return 1.0
    return float((nij - expected) / (max_index - expected))


def purity(labels_true, labels_pred) -> float:
    """Fraction of items whose cluster's majority class matches their class."""
    table = contingency_table(labels_true, labels_pred)
    return float(table.counts.max(axis=0).sum() / table.n)


def pearson(x, y) -> float:
    """Pearson correlation; NaN when undefined (n < 2 or zero variance)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"pearson inputs differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        return float("nan")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = np.sqrt((xd * xd).sum())
    sy = np.sqrt((yd * yd).sum())
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    return float((xd * yd).sum() / (sx * sy))


def mae(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"mae inputs differ in length: {x.size} vs {y.size}")
    if x.size == 0:
        raise DataError("mae of empty arrays is undefined")
    return float(np.abs(x - y).mean())


def cca_first(x, y) -> float:
    """First canonical correlation between two paired feature matrices.

    Solved as the generalized symmetric eigenproblem
    C_xy C_yy^{-1} C_yx w = rho^2 C_xx w with ridge regularization
    lambda = 1e-8 * trace(C)/dim on each covariance block.  Returns the
    canonical correlation clipped to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DataError(f"cca_first expects paired 2-D matrices, "
                        f"got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise DataError("cca_first needs at least 3 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cxx = xc.T @ xc / (n - 1)
    cyy = yc.T @ yc / (n - 1)
    cxy = xc.T @ yc / (n - 1)

    def ridge(c):
        lam = 1e-8 * np.trace(c) / c.shape[0]
        if lam <= 0:
            lam = 1e-12
        return c + lam * np.eye(c.shape[0])

    cxx = ridge(cxx)
    cyy = ridge(cyy)
    rank = min(np.linalg.matrix_rank(xc), np.linalg.matrix_rank(yc))
    if rank < min(x.shape[1], y.shape[1]):
        warnings.warn("cca_first: rank-deficient input; correlation may be "
                      "dominated by the regularizer", RuntimeWarning,
                      stacklevel=2)
    m = cxy @ np.linalg.solve(cyy, cxy.T)
    vals = scipy.linalg.eigh(m, cxx, eigvals_only=True)
    rho2 = float(vals[-1])
    return float(np.clip(np.sqrt(max(rho2, 0.0)), 0.0, 1.0))


def within_patch_heterogeneity(patch_expression) -> float:
    """Sum over genes of the population variance across a patch's cells."""
    e = np.asarray(patch_expression, dtype=np.float64)
    if e.ndim != 2:
        raise UsageError(f"expected (cells, genes), got shape {e.shape}")
    if e.shape[0] < 2:
        raise UsageError("heterogeneity needs at least two cells in the patch")
    return float(e.var(axis=0).sum())


def stratify_by_values(values, n_strata: int = 4) -> np.ndarray:
    """Equal-frequency stratum index per item (0 = lowest values).

    Items are ranked with a stable sort (ties keep input order) and the
    ranking is cut into n_strata contiguous groups whose sizes differ by at
    most one; earlier strata take the extra item when the split is uneven.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if n_strata < 1:
        raise ParameterError(f"n_strata must be >= 1, got {n_strata}")
    n = values.size
    if n < n_strata:
        raise DataError(f"cannot cut {n} items into {n_strata} strata")
    order = np.argsort(values, kind="stable")
    base, extra = divmod(n, n_strata)
    sizes = [base + (1 if i < extra else 0) for i in range(n_strata)]
    out = np.empty(n, dtype=np.int64)
    start = 0
    for stratum, size in enumerate(sizes):
        out[order[start:start + size]] = stratum
        start += size
    return out


def bootstrap_ci(values, stat=np.median, n_resamples: int = 10000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """(stat, lo, hi): percentile bootstrap interval for a univariate statistic."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DataError("bootstrap of an empty sample")
    if not 0 < level < 1:
        raise ParameterError(f"level must be in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    stats = stat(values[idx], axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(stat(values)), float(lo), float(hi)
