"""Frozen-teacher cell embeddings and cross-view retrieval metrics.

After pretraining, a cell's representation is the concatenation of the
teacher class tokens from each view, taken on the native (uncropped) views
with no projection head.  Single-view embeddings are also exposed so the
two halves can be compared by retrieval: a cell's appearance embedding
should find the same cell's context embedding among all candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crops import CellViews
from .distill import TrainerState, _view_arrays
from .errors import DataError, ParameterError, UsageError
from .vit import encode


@dataclass
class EmbeddingMatrix:
    """Embeddings plus the cell identities they belong to."""
    values: np.ndarray     # (N, D)
    cell_ids: np.ndarray   # (N,)
    source: str            # "joint" or a view name

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.cell_ids = np.asarray(self.cell_ids)
        if self.values.ndim != 2 or self.values.shape[0] != self.cell_ids.size:
            raise DataError("one embedding row per cell id required")
        if np.unique(self.cell_ids).size != self.cell_ids.size:
            raise DataError("cell ids must be unique")

    @property
    def n_cells(self) -> int:
        return self.cell_ids.size


def embed_cells(state: TrainerState, cells: CellViews,
                view: str | None = None, batch_size: int = 200,
                network: str = "teacher") -> EmbeddingMatrix:
    """Class-token embeddings from the frozen encoders.

    With view=None the per-view embeddings are concatenated in the
    configured view order; naming a view returns just its half.
    """
    if network == "teacher":
        encoders = state.teachers
    elif network == "student":
        encoders = state.students
    else:
        raise ParameterError(f"unknown network {network!r}")
    wanted = state.config.views if view is None else (view,)
    for v in wanted:
        if v not in encoders:
            raise UsageError(f"state has no trained view {v!r}")
    parts = []
    for v in wanted:
        images, _ = _view_arrays(cells, v)
        rows = []
        for start in range(0, cells.n_cells, batch_size):
            z = encode(encoders[v], images[start:start + batch_size])
            rows.append(z.data)
        parts.append(np.concatenate(rows, axis=0))
    return EmbeddingMatrix(values=np.concatenate(parts, axis=1),
                           cell_ids=cells.cell_ids.copy(),
                           source="joint" if view is None else view)


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; zero rows give zero similarity."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na[na == 0] = 1.0
    nb[nb == 0] = 1.0
    return (a / na) @ (b / nb).T


def recall_at_k(queries: EmbeddingMatrix, index: EmbeddingMatrix,
                ks: tuple[int, ...] = (1, 5, 10)) -> dict[int, float]:
    """Fraction of cells whose own identity ranks in the top k matches.

    Every query embedding is scored against all index embeddings by cosine
    similarity; equal similarities rank the lower cell id first.  Both
    matrices must cover exactly the same cells.
    """
    if queries.n_cells != index.n_cells or not np.array_equal(
            np.sort(queries.cell_ids), np.sort(index.cell_ids)):
        raise DataError("queries and index must cover the same cell ids")
    if any(k < 1 or k > index.n_cells for k in ks):
        raise ParameterError(f"ks must lie in [1, {index.n_cells}]")
    sims = cosine_similarity_matrix(queries.values, index.values)
    # sort by similarity descending, ties toward the lower cell id
    id_rank = np.broadcast_to(index.cell_ids, sims.shape)
    order = np.lexsort((id_rank, -sims), axis=1)
    ranked_ids = index.cell_ids[order]
    targets = queries.cell_ids[:, None]
    out = {}
    for k in sorted(ks):
        out[k] = float((ranked_ids[:, :k] == targets).any(axis=1).mean())
    return out


def embedding_rank(values: np.ndarray, rel_tol: float = 1e-6) -> int:
    """Numerical rank of the centered embedding matrix.

    Counts singular values above rel_tol times the largest; a collapsed
    embedding concentrates variance in a few directions and scores low.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise DataError("need a (N>=2, D) embedding matrix")
    centered = values - values.mean(axis=0, keepdims=True)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] == 0:
        return 0
    return int((s > rel_tol * s[0]).sum())
