"""Dimensionality reduction, clustering, and graph community detection.

These are deliberately self-contained implementations: the evaluation
battery must be deterministic under a seed and checkable against small
brute-force oracles, which rules out library entry points with unpinned
internals.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataError, ParameterError, StateError
from .. import numcore as nc


def pca_reduce(x, n_components: int = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows onto the top principal components.

    Returns (scores (N, k), components (k, D), explained_variance (k,)).
    k is capped at min(N, D).  Component signs are fixed by making each
    component's largest-magnitude loading positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"pca_reduce expects a 2-D matrix, got {x.shape}")
    n, d = x.shape
    k = min(n_components, n, d)
    if k < 1:
        raise ParameterError("n_components must be >= 1")
    xc = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:k]
    # canonical sign: the largest-|loading| entry of each component is positive
    flips = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    flips[flips == 0] = 1.0
    comps = comps * flips[:, None]
    scores = xc @ comps.T
    explained = (s[:k] ** 2) / max(n - 1, 1)
    return scores, comps, explained


def kmeans(x, k: int, restarts: int = 10, seed: int = 0,
           max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm, best of ``restarts`` random initializations.

    Initialization picks k distinct input rows.  Assignment ties go to the
    lower center index.  An emptied cluster is reseeded to the point
    farthest from its assigned center.  Within every run the within-cluster
    sum of squares is asserted non-increasing.  Returns (assignments,
    centers, inertia) of the lowest-inertia restart; restart ties keep the
    earliest restart.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"kmeans expects a 2-D matrix, got {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    if restarts < 1:
        raise ParameterError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    sq = (x * x).sum(axis=1)
    for _ in range(restarts):
        centers = x[rng.choice(n, size=k, replace=False)].copy()
        prev_inertia = np.inf
        assign = None
        for _ in range(max_iter):
            d2 = sq[:, None] - 2.0 * (x @ centers.T) + (centers * centers).sum(axis=1)
            new_assign = np.argmin(d2, axis=1)
            inertia = float(np.take_along_axis(
                d2, new_assign[:, None], axis=1).sum())
            if inertia > prev_inertia + 1e-9 * max(1.0, abs(prev_inertia)):
                raise StateError("kmeans inertia increased within a run")
            for c in range(k):
                mask = new_assign == c
                if np.any(mask):
                    centers[c] = x[mask].mean(axis=0)
                else:
                    worst = int(np.argmax(np.take_along_axis(
                        d2, new_assign[:, None], axis=1).ravel()))
                    centers[c] = x[worst]
                    new_assign[worst] = c
            if assign is not None and np.array_equal(new_assign, assign):
                break
            assign = new_assign
            prev_inertia = inertia
        d2 = sq[:, None] - 2.0 * (x @ centers.T) + (centers * centers).sum(axis=1)
        assign = np.argmin(d2, axis=1)
        inertia = float(np.take_along_axis(d2, assign[:, None], axis=1).sum())
        if best is None or inertia < best[2]:
            best = (assign.astype(np.int64), centers.copy(), inertia)
    return best


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarities; all-zero rows get similarity 0 everywhere."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na[na == 0] = 1.0
    nb[nb == 0] = 1.0
    return (a / na) @ (b / nb).T


def knn_graph(x, k: int, metric: str = "cosine",
              mode: str = "union") -> np.ndarray:
    """Symmetric weighted adjacency over the k nearest neighbors of each row.

    Cosine weights are similarities clipped at zero; euclidean weights use a
    Gaussian kernel whose bandwidth is the median neighbor distance.
    ``mode="union"`` keeps an edge present in either direction,
    ``mode="mutual"`` only edges present in both.  Neighbor ties break
    toward the lower row index.  The diagonal is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"k must be in [1, {n - 1}], got {k}")
    if metric not in ("cosine", "euclidean"):
        raise ParameterError(f"unknown metric {metric!r}")
    if mode not in ("union", "mutual"):
        raise ParameterError(f"unknown mode {mode!r}")
    if metric == "cosine":
        sim = _cosine_matrix(x, x)
        affinity = np.maximum(sim, 0.0)
        pref = -sim
    else:
        sq = (x * x).sum(axis=1)
        d2 = np.maximum(sq[:, None] - 2.0 * (x @ x.T) + sq[None, :], 0.0)
        pref = d2.astype(np.float64)
        affinity = None      # filled after bandwidth is known
    np.fill_diagonal(pref, np.inf)
    idx = np.arange(n)
    # neighbor order: best preference first, ties toward the lower index
    order = np.lexsort((np.broadcast_to(idx, (n, n)), pref), axis=1)
    neigh = order[:, :k]
    directed = np.zeros((n, n), dtype=bool)
    directed[np.repeat(idx, k), neigh.ravel()] = True
    if metric == "euclidean":
        nd = np.sqrt(pref[np.repeat(idx, k), neigh.ravel()])
        bandwidth = float(np.median(nd))
        if bandwidth <= 0:
            bandwidth = 1.0
        with np.errstate(over="ignore"):
            affinity = np.exp(-np.where(np.isinf(pref), np.inf, pref)
                              / (2.0 * bandwidth * bandwidth))
        affinity[np.isinf(pref)] = 0.0
    keep = directed | directed.T if mode == "union" else directed & directed.T
    w = np.where(keep, affinity, 0.0)
    np.fill_diagonal(w, 0.0)
    return w


def modularity(w: np.ndarray, communities: np.ndarray,
               resolution: float = 1.0) -> float:
    """Newman modularity of a weighted undirected graph under a partition."""
    total = w.sum()
    if total <= 0:
        raise DataError("modularity of an empty graph is undefined")
    deg = w.sum(axis=1)
    q = 0.0
    for c in np.unique(communities):
        mask = communities == c
        q += w[np.ix_(mask, mask)].sum() / total
        q -= resolution * (deg[mask].sum() / total) ** 2
    return float(q)


def louvain(w, resolution: float = 1.0, seed: int = 0,
            max_passes: int = 32) -> np.ndarray:
    """Community labels by greedy modularity optimization (two-phase).

    Phase one moves single nodes to the neighboring community with the best
    positive modularity gain, visiting nodes in a seeded random order until
    no move helps; phase two collapses communities into super-nodes and
    repeats.  Deterministic for a fixed seed.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DataError(f"adjacency must be square, got {w.shape}")
    if not np.allclose(w, w.T):
        raise DataError("adjacency must be symmetric")
    if np.any(w < 0):
        raise DataError("adjacency weights must be nonnegative")
    n = w.shape[0]
    rng = np.random.default_rng(seed)
    membership = np.arange(n)          # final labels in original node space
    cur_w = w.copy()
    total = cur_w.sum()
    if total <= 0:
        return np.zeros(n, dtype=np.int64)

    for _ in range(max_passes):
        m = cur_w.shape[0]
        comm = np.arange(m)
        deg = cur_w.sum(axis=1)
        comm_tot = deg.copy()
        improved = False
        moved = True
        while moved:
            moved = False
            for node in rng.permutation(m):
                c_old = comm[node]
                links = np.zeros(m)
                np.add.at(links, comm, cur_w[node])
                links[c_old] -= cur_w[node, node]
                comm_tot[c_old] -= deg[node]
                # modularity gain of joining community c from isolation is
                # (2/total) * (links_c - resolution * deg_i * tot_c / total);
                # the shared positive factor is dropped for the comparison
                gains = links - resolution * deg[node] * comm_tot / total
                candidates = np.unique(comm[cur_w[node] > 0])
                best_c, best_gain = c_old, gains[c_old]
                for c in candidates:
                    if gains[c] > best_gain + 1e-12:
                        best_c, best_gain = c, gains[c]
                comm[node] = best_c
                comm_tot[best_c] += deg[node]
                if best_c != c_old:
                    moved = True
                    improved = True
        # compact community ids
        uniq, comm = np.unique(comm, return_inverse=True)
        membership = comm[membership]
        if not improved or uniq.size == m:
            break
        # aggregate: communities become nodes, weights sum, self-loops kept
        k = uniq.size
        onehot = np.zeros((m, k))
        onehot[np.arange(m), comm] = 1.0
        cur_w = onehot.T @ cur_w @ onehot
    uniq, labels = np.unique(membership, return_inverse=True)
    return labels.astype(np.int64)


def knn_classify(train_x, train_y, test_x, k: int = 15,
                 metric: str = "cosine") -> np.ndarray:
    """Majority vote over the k nearest training rows.

    Neighbor ties break toward the lower training index; vote ties toward
    the smallest class label.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    n = train_x.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    if metric == "cosine":
        pref = -_cosine_matrix(test_x, train_x)
    elif metric == "euclidean":
        sq_tr = (train_x * train_x).sum(axis=1)
        sq_te = (test_x * test_x).sum(axis=1)
        pref = sq_te[:, None] - 2.0 * (test_x @ train_x.T) + sq_tr[None, :]
    else:
        raise ParameterError(f"unknown metric {metric!r}")
    idx = np.arange(n)
    order = np.lexsort((np.broadcast_to(idx, pref.shape), pref), axis=1)
    neigh = order[:, :k]
    votes = train_y[neigh]
    out = np.empty(test_x.shape[0], dtype=train_y.dtype)
    for i in range(test_x.shape[0]):
        classes, counts = np.unique(votes[i], return_counts=True)
        out[i] = classes[np.argmax(counts)]   # unique is sorted: ties -> smallest
    return out


def linear_probe(train_x, train_y, test_x, test_y, seed: int = 0,
                 lr: float = 0.05, max_epochs: int = 500,
                 tol: float = 1e-7) -> float:
    """Test accuracy of a single linear layer trained with cross-entropy.

    Full-batch AdamW-free gradient descent on standardized features, run to
    loss convergence; deterministic for a fixed seed.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    classes, y_idx = np.unique(np.asarray(train_y), return_inverse=True)
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd == 0] = 1.0
    xtr = (train_x - mu) / sd
    xte = (test_x - mu) / sd
    n, d = xtr.shape
    k = classes.size
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y_idx] = 1.0
    w = nc.parameter(np.zeros((d, k)))
    b = nc.parameter(np.zeros(k))
    xt = nc.Tensor(xtr)
    target = nc.Tensor(onehot)
    prev = np.inf
    for _ in range(max_epochs):
        logits = nc.matmul(xt, w) + b
        loss = nc.cross_entropy_rows(target, nc.softmax(logits)).mean()
        val = loss.item()
        w.zero_grad()
        b.zero_grad()
        nc.backward(loss, leaves=[w, b])
        w.data -= lr * w.grad
        b.data -= lr * b.grad
        if abs(prev - val) < tol:
            break
        prev = val
    pred = classes[np.argmax(xte @ w.data + b.data, axis=1)]
    return float(np.mean(pred == np.asarray(test_y)))
