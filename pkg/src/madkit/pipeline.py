"""End-to-end stages: tissue synthesis, view extraction, pretraining,
embedding, probing, and the evaluation report.

Each stage is a pure function of a RunConfig plus explicit inputs, so the
command-line layer and the test battery drive identical code.  A run is
keyed by (seed, ablation); the ablation picks which views take part in
pretraining while everything downstream stays the same.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .config import RunConfig, config_hash
from .crops import CellViews, extract_views, preprocess_field, split_cells
from .distill import TrainerState, fit_views, teacher_statistics
from .embed import EmbeddingMatrix, embed_cells, embedding_rank, recall_at_k
from .errors import ConfigError, DataError
from .rng import derive_rng
from .evalsuite import (MetricsReport, ari, kmeans, purity,
                        stratify_by_values, within_patch_heterogeneity)
from .heads import (HeadConfig, _pearson_columns, train_classifier,
                    train_regressor)
from .synthgen import (SyntheticField, default_expression_model,
                       default_tissue_spec, generate_field, joint_ceiling,
                       merged_labels, morphology_archetypes, neighbor_indices,
                       niche_archetypes, single_view_ceiling)

ABLATIONS = {
    "joint": ("morphology", "environment"),
    "morph": ("morphology",),
    "micro": ("environment",),
}


def build_field(config: RunConfig, seed: int) -> SyntheticField:
    """Generate the confusable planted tissue for one seed."""
    spec = default_tissue_spec(
        cells_per_field=config.synth.cells_per_field,
        height=config.synth.height, width=config.synth.width,
        channels=config.synth.channels, k_env=config.synth.k_env)
    return generate_field(spec, default_expression_model(spec), seed)


def build_views(config: RunConfig, field: SyntheticField) -> CellViews:
    """Illumination-corrected per-cell view stacks for the whole field."""
    image = preprocess_field(field.image)
    morph, morph_mask, env, env_mask = extract_views(
        image, field.centroids, field.polygons,
        morph_side=config.crops.morph_side, env_side=config.crops.env_side,
        box_margin=config.crops.box_margin)
    return CellViews(
        morphology=morph, morphology_mask=morph_mask,
        environment=env, environment_mask=env_mask,
        cell_ids=field.cell_ids(), labels=field.labels,
        expression=field.expression, composition=field.composition)


def build_splits(config: RunConfig, views: CellViews,
                 seed: int) -> dict[str, np.ndarray]:
    """Label-stratified index split keyed pretrain/finetune/test."""
    return split_cells(views.n_cells,
                       (config.crops.pretrain, config.crops.finetune,
                        config.crops.test),
                       seed=seed, labels=views.labels)


def pretrain(config: RunConfig, views: CellViews, splits: dict,
             ablation: str, seed: int, log=None
             ) -> tuple[TrainerState, list[dict]]:
    """Self-distillation on the pretrain split for one ablation arm."""
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; "
                          f"expected one of {sorted(ABLATIONS)}")
    distill = dataclasses.replace(config.distill,
                                  views=ABLATIONS[ablation], seed=seed)
    return fit_views(distill, views.subset(splits["pretrain"]), log=log)


def cell_heterogeneity(field: SyntheticField) -> np.ndarray:
    """Per-cell neighborhood complexity: expression variance summed over
    genes within the cell's patch (itself plus its nearest neighbors)."""
    order = neighbor_indices(field.centroids, field.spec.k_env)
    patches = np.concatenate([np.arange(order.shape[0])[:, None], order],
                             axis=1)
    return np.array([within_patch_heterogeneity(field.expression[p])
                     for p in patches])


def _probe_config(config: RunConfig, seed: int, **extra) -> HeadConfig:
    return dataclasses.replace(config.heads, seed=seed, **extra)


def evaluate(config: RunConfig, field: SyntheticField, views: CellViews,
             splits: dict, state: TrainerState, ablation: str,
             seed: int) -> MetricsReport:
    """Score one trained run on held-out cells.

    Covers unsupervised clustering against the planted types (with the
    exact single-view ceilings), cross-view retrieval when both views were
    trained, supervised probes for type labels and expression, stratified
    regression error by neighborhood complexity, and collapse diagnostics.
    """
    test_idx = splits["test"]
    train_idx = splits["pretrain"]
    if test_idx.size == 0:
        raise DataError("evaluation needs a nonempty test split")
    test_views = views.subset(test_idx)
    train_views = views.subset(train_idx)

    report = MetricsReport(meta={
        "seed": int(seed), "ablation": ablation,
        "config": config_hash(config),
        "views": list(state.config.views),
        "n_train": int(train_idx.size), "n_test": int(test_idx.size)})

    emb_test = embed_cells(state, test_views)
    emb_train = embed_cells(state, train_views)
    labels_test = test_views.labels
    labels_train = train_views.labels

    # unsupervised recovery of the planted types
    k = config.eval.n_clusters or field.spec.n_types
    assign, _, inertia = kmeans(emb_test.values, k,
                                restarts=config.eval.kmeans_restarts,
                                seed=config.eval.seed)
    report.add("ari", ari(labels_test, assign))
    report.add("purity", purity(labels_test, assign))
    report.metrics["kmeans_inertia"] = float(inertia)

    # exact ceilings on the same cells the clustering saw
    m_arch = morphology_archetypes(field.spec)
    n_arch = niche_archetypes(field.spec)
    report.add("ceiling_joint", joint_ceiling(field))
    report.add("ceiling_morphology",
               ari(labels_test, merged_labels(labels_test, m_arch)))
    report.add("ceiling_microenvironment",
               ari(labels_test, merged_labels(labels_test, n_arch)))
    report.meta["field_ceiling_morphology"] = single_view_ceiling(
        field, "morphology")
    report.meta["field_ceiling_microenvironment"] = single_view_ceiling(
        field, "microenvironment")

    # cross-view retrieval, joint runs only
    if set(state.config.views) == set(ABLATIONS["joint"]):
        queries = embed_cells(state, test_views, view="morphology")
        index = embed_cells(state, test_views, view="environment")
        ks = tuple(k for k in config.eval.recall_ks if k <= test_idx.size)
        for kk, value in recall_at_k(queries, index, ks=ks).items():
            report.add(f"recall_at_{kk}", value)

    # supervised probes on frozen embeddings
    clf = train_classifier(emb_train.values, labels_train,
                           _probe_config(config, seed))
    report.add("probe_accuracy",
               float((clf.predict(emb_test.values) == labels_test).mean()))

    reg = train_regressor(emb_train.values, train_views.expression,
                          _probe_config(config, seed))
    pred = reg.predict(emb_test.values)
    truth = test_views.expression
    per_gene = _pearson_columns(pred, truth)
    roles = np.asarray(field.model.roles)
    for role in ("type", "niche", "mixed"):
        sel = roles == role
        report.metrics[f"pearson_{role}_median"] = float(
            np.median(per_gene[sel]))
    report.meta["per_gene_pearson"] = per_gene.tolist()
    report.meta["gene_roles"] = roles.tolist()

    # error stratified by neighborhood complexity
    het = cell_heterogeneity(field)[test_idx]
    strata = stratify_by_values(het, n_strata=4)
    mse_cell = ((pred - truth) ** 2).mean(axis=1)
    for q in range(4):
        report.metrics[f"mse_quartile_{q + 1}"] = float(
            mse_cell[strata == q].mean())
    report.metrics["mse_degradation"] = (
        report.metrics["mse_quartile_4"] - report.metrics["mse_quartile_1"])

    # collapse diagnostics
    stats = teacher_statistics(state, test_views)
    proto = state.config.encoder.proto_dim
    for key, value in stats.items():
        report.metrics[f"teacher_{key.replace('/', '_')}"] = float(value)
    report.meta["log_n_prototypes"] = float(np.log(proto))
    report.metrics["embedding_rank"] = float(embedding_rank(emb_test.values))
    report.meta["embedding_dim"] = int(state.embedding_dim())

    # training trace
    report.meta["loss_first_epoch"] = None
    report.meta["loss_last_epoch"] = None
    return report


def run_one(config: RunConfig, seed: int, ablation: str,
            log=None) -> tuple[MetricsReport, list[dict]]:
    """Full pipeline for one (seed, ablation) pair; returns report+history."""
    field = build_field(config, seed)
    views = build_views(config, field)
    splits = build_splits(config, views, seed)
    state, history = pretrain(config, views, splits, ablation, seed, log=log)
    report = evaluate(config, field, views, splits, state, ablation, seed)
    report.meta["loss_first_epoch"] = history[0]["loss_mean"]
    report.meta["loss_last_epoch"] = history[-1]["loss_mean"]
    return report, history


def write_json(payload, path) -> None:
    """Canonical JSON to disk, atomically."""
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -- aggregation across seeds -------------------------------------------------------

def bootstrap_ci(values, n_boot: int = 10000, alpha: float = 0.05,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the median of a small sample.

    With a single value the interval degenerates to that point.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise DataError("bootstrap needs at least one value")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha {alpha} must be inside (0, 1)")
    rng = derive_rng("bootstrap", seed)
    draws = vals[rng.integers(0, vals.size, size=(n_boot, vals.size))]
    stat = np.median(draws, axis=1)
    lo, hi = np.quantile(stat, [alpha / 2, 1.0 - alpha / 2])
    return float(lo), float(hi)


def summarize_reports(reports: list[dict], n_boot: int = 10000,
                      seed: int = 0) -> dict:
    """Per-ablation, per-metric median and 95% bootstrap interval.

    Takes parsed report payloads ({"metrics": ..., "meta": ...}); metrics
    missing from some seeds are aggregated over the seeds that have them.
    """
    if not reports:
        raise DataError("no reports to summarize")
    grouped: dict[str, dict[str, list[float]]] = {}
    seeds: dict[str, set] = {}
    for payload in reports:
        ablation = payload["meta"].get("ablation", "unknown")
        bucket = grouped.setdefault(ablation, {})
        seeds.setdefault(ablation, set()).add(payload["meta"].get("seed"))
        for name, value in payload["metrics"].items():
            if value is not None and np.isfinite(value):
                bucket.setdefault(name, []).append(float(value))
    summary = {}
    for ablation in sorted(grouped):
        rows = {}
        for name in sorted(grouped[ablation]):
            vals = grouped[ablation][name]
            lo, hi = bootstrap_ci(vals, n_boot=n_boot, seed=seed)
            rows[name] = {"median": float(np.median(vals)),
                          "ci_low": lo, "ci_high": hi, "n": len(vals)}
        summary[ablation] = {"metrics": rows,
                             "seeds": sorted(seeds[ablation])}
    return summary
