"""Evaluation battery: metrics, clustering, differential expression, reports."""

from .metrics import (
    ContingencyTable, contingency_table, ari, purity, pearson, mae,
    cca_first, within_patch_heterogeneity, stratify_by_values, bootstrap_ci,
)
from .cluster import (
    pca_reduce, kmeans, knn_graph, louvain, modularity, knn_classify,
    linear_probe,
)
from .diffexpr import DeResult, welch_t, rank_sum, benjamini_hochberg, de_test
from .report import MetricsReport, summarize_over_seeds

__all__ = [
    "ContingencyTable", "contingency_table", "ari", "purity", "pearson",
    "mae", "cca_first", "within_patch_heterogeneity", "stratify_by_values",
    "bootstrap_ci", "pca_reduce", "kmeans", "knn_graph", "louvain",
    "modularity", "knn_classify", "linear_probe", "DeResult", "welch_t",
    "rank_sum", "benjamini_hochberg", "de_test", "MetricsReport",
    "summarize_over_seeds",
]
