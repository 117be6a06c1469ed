"""Synthetic tissue fields with a planted two-factor structure.

Each field is a flat image of non-overlapping elliptical cells.  A cell has
a *type* that controls two independent things: how the cell looks (its
morphology parameters) and where it tends to sit (its mixing weights over a
fixed set of spatial anchors).  Gene expression is generated from the type
and from the realized neighbor composition, so some genes are predictable
from appearance, some only from spatial context, and some from both.

The default spec plants a deliberate confusion: one pair of types shares
its morphology parameters exactly (indistinguishable by appearance) and an
overlapping pair shares its anchor weights exactly (indistinguishable by
location).  No single view can separate all types, but the two views
together can.  The archetype helpers below expose the induced merged
partitions so tests can compute exact single-view ceilings.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import DataError, GenerationError, ParameterError, ValidationError
from .evalsuite.metrics import ari
from .rng import derive_rng


@dataclass(frozen=True)
class MorphologyParams:
    """Appearance of one cell type; equal params means identical appearance."""
    radius: float
    eccentricity: float
    intensity: tuple[float, ...]
    texture_std: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ParameterError("radius must be positive")
        if not 0.0 <= self.eccentricity < 1.0:
            raise ParameterError("eccentricity must be in [0, 1)")
        if any(i < 0 for i in self.intensity):
            raise ParameterError("intensities must be nonnegative")

    @property
    def axis_ratio(self) -> float:
        return (1.0 + self.eccentricity) / (1.0 - self.eccentricity)

    @property
    def semi_major(self) -> float:
        return self.radius * np.sqrt(self.axis_ratio)

    @property
    def semi_minor(self) -> float:
        return self.radius / np.sqrt(self.axis_ratio)


@dataclass(frozen=True)
class TissueSpec:
    """Generating parameters for one synthetic tissue field."""
    n_types: int
    channels: int
    height: int
    width: int
    cells_per_field: int
    morphologies: tuple[MorphologyParams, ...]
    niche_anchors: tuple[tuple[float, float], ...]   # (fy, fx) in [0, 1]
    niche_weights: tuple[tuple[float, ...], ...]     # (n_types, n_anchors)
    niche_spread: float = 100.0
    k_env: int = 25
    type_proportions: tuple[float, ...] | None = None
    background_level: float = 0.03
    background_noise: float = 0.01
    placement_gap: float = 1.0
    polygon_vertices: int = 16

    def __post_init__(self):
        if len(self.morphologies) != self.n_types:
            raise ValidationError(
                f"{len(self.morphologies)} morphologies for {self.n_types} types")
        if any(len(m.intensity) != self.channels for m in self.morphologies):
            raise ValidationError("intensity tuples must match channel count")
        w = np.asarray(self.niche_weights, dtype=np.float64)
        if w.shape != (self.n_types, len(self.niche_anchors)):
            raise ValidationError(
                f"niche_weights shape {w.shape} != "
                f"({self.n_types}, {len(self.niche_anchors)})")
        if np.any(w < 0):
            raise ValidationError("niche weights must be nonnegative")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-9:
            raise ValidationError("each type's niche weights must sum to 1")
        for fy, fx in self.niche_anchors:
            if not (0.0 <= fy <= 1.0 and 0.0 <= fx <= 1.0):
                raise ValidationError("anchors must be fractional coordinates")
        if self.type_proportions is not None:
            p = np.asarray(self.type_proportions)
            if p.size != self.n_types or np.any(p < 0) or \
                    abs(p.sum() - 1.0) > 1e-9:
                raise ValidationError("type proportions must be a distribution")
        if not 1 <= self.k_env < self.cells_per_field:
            raise ValidationError(
                f"k_env {self.k_env} must be in [1, cells_per_field)")
        if self.polygon_vertices < 3:
            raise ValidationError("polygons need at least 3 vertices")

    def proportions(self) -> np.ndarray:
        if self.type_proportions is None:
            return np.full(self.n_types, 1.0 / self.n_types)
        return np.asarray(self.type_proportions, dtype=np.float64)

    def anchor_pixels(self) -> np.ndarray:
        return np.array([[fy * self.height, fx * self.width]
                         for fy, fx in self.niche_anchors])


@dataclass(frozen=True)
class ExpressionModel:
    """Linear expression model: expr = max(0, A e_type + B nbhd + noise)."""
    type_coeff: np.ndarray      # (G, T)
    niche_coeff: np.ndarray     # (G, T)
    noise_std: np.ndarray       # (G,)
    roles: tuple[str, ...]      # per gene: "type" | "niche" | "mixed"

    def __post_init__(self):
        a = np.asarray(self.type_coeff, dtype=np.float64)
        b = np.asarray(self.niche_coeff, dtype=np.float64)
        s = np.asarray(self.noise_std, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 2:
            raise ValidationError("coefficient matrices must share shape (G, T)")
        if s.shape != (a.shape[0],) or np.any(s < 0):
            raise ValidationError("noise_std must be one nonnegative value per gene")
        if len(self.roles) != a.shape[0]:
            raise ValidationError("one role per gene required")
        for g, role in enumerate(self.roles):
            if role not in ("type", "niche", "mixed"):
                raise ValidationError(f"gene {g}: unknown role {role!r}")
            if role == "type" and np.any(b[g] != 0):
                raise ValidationError(f"gene {g} is type-driven but has "
                                      "nonzero niche coefficients")
            if role == "niche" and np.any(a[g] != 0):
                raise ValidationError(f"gene {g} is niche-driven but has "
                                      "nonzero type coefficients")
        object.__setattr__(self, "type_coeff", a)
        object.__setattr__(self, "niche_coeff", b)
        object.__setattr__(self, "noise_std", s)

    @property
    def n_genes(self) -> int:
        return self.type_coeff.shape[0]

    def genes_with_role(self, role: str) -> np.ndarray:
        return np.array([g for g, r in enumerate(self.roles) if r == role])


@dataclass
class SyntheticField:
    """One generated field plus its complete ground truth."""
    spec: TissueSpec
    model: ExpressionModel
    seed: int
    labels: np.ndarray          # (N,) int32 type per cell
    centroids: np.ndarray       # (N, 2) float64 (y, x)
    polygons: np.ndarray        # (N, V, 2) float64 vertex (y, x)
    semi_axes: np.ndarray       # (N, 2) float64 (major, minor)
    angles: np.ndarray          # (N,) float64 rotation
    image: np.ndarray           # (H, W, C) float64
    expression: np.ndarray      # (N, G) float64
    composition: np.ndarray     # (N, T) float64 realized neighbor mix

    @property
    def n_cells(self) -> int:
        return self.labels.size

    def cell_ids(self) -> np.ndarray:
        return np.arange(self.n_cells, dtype=np.int64)


# -- default benchmark spec ------------------------------------------------------

# Anchor layout: a 4x3 grid of territories.  Rows of the assignment below are
# grid rows; each symbol names the type group whose anchors live there.  Every
# group gets three anchors whose surroundings differ, so neighbor composition
# varies within a type.
_ANCHOR_GROUPS = ("A", "D", "BC",
                  "E", "A", "D",
                  "BC", "E", "A",
                  "D", "BC", "E")


def default_tissue_spec(cells_per_field: int = 2000, height: int = 1536,
                        width: int = 1536, channels: int = 3,
                        k_env: int = 25) -> TissueSpec:
    """Five types; types 0/1 share morphology, types 1/2 share niche.

    Sizes are chosen so the densest anchors (the shared ones, which collect
    two types' cells) stay well below the jamming density of sequential
    non-overlapping placement.
    """
    shared_ab = MorphologyParams(radius=5.0, eccentricity=0.15,
                                 intensity=(0.85, 0.25, 0.55),
                                 texture_std=0.05)
    morphologies = (
        shared_ab,                                           # type 0 (A)
        shared_ab,                                           # type 1 (B)
        MorphologyParams(radius=5.0, eccentricity=0.5,
                         intensity=(0.45, 0.7, 0.55), texture_std=0.05),   # C
        MorphologyParams(radius=6.5, eccentricity=0.3,
                         intensity=(0.3, 0.85, 0.3), texture_std=0.08),    # D
        MorphologyParams(radius=4.0, eccentricity=0.6,
                         intensity=(0.6, 0.45, 0.9), texture_std=0.03),    # E
    )
    anchors = tuple(((r + 0.5) / 4.0, (c + 0.5) / 3.0)
                    for r in range(4) for c in range(3))
    group_of = {"A": [], "BC": [], "D": [], "E": []}
    for idx, g in enumerate(_ANCHOR_GROUPS):
        group_of[g].append(idx)
    weights = np.zeros((5, 12))
    for t, g in enumerate(("A", "BC", "BC", "D", "E")):
        weights[t, group_of[g]] = 1.0 / len(group_of[g])
    return TissueSpec(
        n_types=5, channels=channels, height=height, width=width,
        cells_per_field=cells_per_field, morphologies=morphologies,
        niche_anchors=anchors,
        niche_weights=tuple(tuple(row) for row in weights),
        k_env=k_env)


def default_expression_model(spec: TissueSpec) -> ExpressionModel:
    """32 genes: 12 type-driven, 12 niche-driven, 8 mixed.

    Type-driven coefficients are keyed to morphology archetypes, so types
    with identical appearance also share their type-driven program; those
    genes stay predictable from appearance alone.  Niche-driven genes load
    on neighbor fractions, pooling types whose anchor weights are equal.
    """
    t = spec.n_types
    m_arch = morphology_archetypes(spec)
    n_arch = niche_archetypes(spec)
    n_m = int(m_arch.max()) + 1
    n_n = int(n_arch.max()) + 1
    rows_a, rows_b, stds, roles = [], [], [], []

    def morph_pattern(arch_id):
        return (m_arch == arch_id).astype(np.float64)

    def niche_pattern(arch_id):
        return (n_arch == arch_id).astype(np.float64)

    for g in range(12):       # type-driven
        arch = g % n_m
        strength = 1.1 + 0.15 * (g // n_m)
        rows_a.append(0.15 + strength * morph_pattern(arch))
        rows_b.append(np.zeros(t))
        stds.append(0.08)
        roles.append("type")
    for g in range(12):       # niche-driven: respond to neighbor fractions
        arch = g % n_n
        strength = 1.2 + 0.15 * (g // n_n)
        rows_a.append(np.zeros(t))
        rows_b.append(0.2 + strength * niche_pattern(arch))
        stds.append(0.08)
        roles.append("niche")
    for g in range(8):        # mixed
        rows_a.append(0.1 + 0.6 * morph_pattern(g % n_m))
        rows_b.append(0.1 + 0.6 * niche_pattern((g + 1) % n_n))
        stds.append(0.08)
        roles.append("mixed")
    return ExpressionModel(type_coeff=np.stack(rows_a),
                           niche_coeff=np.stack(rows_b),
                           noise_std=np.array(stds),
                           roles=tuple(roles))


# -- archetype oracles -----------------------------------------------------------

def _group_by_equality(items: list) -> np.ndarray:
    ids = []
    seen: list = []
    for item in items:
        for gid, ref in enumerate(seen):
            if item == ref:
                ids.append(gid)
                break
        else:
            seen.append(item)
            ids.append(len(seen) - 1)
    return np.asarray(ids)


def morphology_archetypes(spec: TissueSpec) -> np.ndarray:
    """Archetype id per type; types with exactly equal appearance share one."""
    return _group_by_equality(list(spec.morphologies))


def niche_archetypes(spec: TissueSpec) -> np.ndarray:
    """Archetype id per type; types with exactly equal anchor weights share one."""
    return _group_by_equality([tuple(row) for row in spec.niche_weights])


def merged_labels(labels: np.ndarray, archetypes: np.ndarray) -> np.ndarray:
    """Map per-cell type labels to their archetype ids."""
    return np.asarray(archetypes)[np.asarray(labels)]


def single_view_ceiling(field: SyntheticField, view: str) -> float:
    """Exact ARI of the best single-view partition against the true types.

    A view cannot separate types whose generating parameters it shares, so
    its ideal output is the archetype-merged partition.
    """
    if view == "morphology":
        arch = morphology_archetypes(field.spec)
    elif view == "microenvironment":
        arch = niche_archetypes(field.spec)
    else:
        raise ParameterError(f"unknown view {view!r}")
    return ari(field.labels, merged_labels(field.labels, arch))


def joint_ceiling(field: SyntheticField) -> float:
    """ARI ceiling when both views are available (1.0 iff pairs are distinct)."""
    m = morphology_archetypes(field.spec)
    n = niche_archetypes(field.spec)
    joint = _group_by_equality(list(zip(m.tolist(), n.tolist())))
    return ari(field.labels, merged_labels(field.labels, joint))


# -- generation --------------------------------------------------------------------

def _place_cells(spec: TissueSpec, rng: np.random.Generator
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample types, anchors, and non-overlapping centroids for every cell."""
    n = spec.cells_per_field
    props = spec.proportions()
    weights = np.asarray(spec.niche_weights)
    anchors = spec.anchor_pixels()
    majors = np.array([m.semi_major for m in spec.morphologies])
    margin = float(majors.max()) + 2.0
    labels = np.empty(n, dtype=np.int32)
    centroids = np.empty((n, 2))
    placed_major = np.empty(n)
    max_retries = 200
    for i in range(n):
        t = int(rng.choice(spec.n_types, p=props))
        labels[i] = t
        a = int(rng.choice(anchors.shape[0], p=weights[t]))
        ok = False
        for _ in range(max_retries):
            pos = anchors[a] + rng.normal(0.0, spec.niche_spread, size=2)
            if not (margin <= pos[0] <= spec.height - margin and
                    margin <= pos[1] <= spec.width - margin):
                continue
            if i:
                d = np.sqrt(((centroids[:i] - pos) ** 2).sum(axis=1))
                limit = placed_major[:i] + majors[t] + spec.placement_gap
                if np.any(d < limit):
                    continue
            ok = True
            break
        if not ok:
            raise GenerationError(
                f"could not place cell {i} after {max_retries} tries; "
                "the field is too dense for the requested cell count")
        centroids[i] = pos
        placed_major[i] = majors[t]
    return labels, centroids, placed_major


def _rasterize_cell(image: np.ndarray, center: np.ndarray,
                    morph: MorphologyParams, angle: float,
                    rng: np.random.Generator) -> None:
    """Add one anti-aliased textured ellipse to the image in place."""
    h, w, c = image.shape
    a, b = morph.semi_major, morph.semi_minor
    reach = a + 1.5
    y0 = max(int(np.floor(center[0] - reach)), 0)
    y1 = min(int(np.ceil(center[0] + reach)) + 1, h)
    x0 = max(int(np.floor(center[1] - reach)), 0)
    x1 = min(int(np.ceil(center[1] + reach)) + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    # 3x3 supersampling for smooth coverage
    offs = (np.arange(3) - 1.0) / 3.0
    cov = np.zeros(yy.shape)
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    for dy in offs:
        for dx in offs:
            py = yy + dy - center[0]
            px = xx + dx - center[1]
            u = cos_t * py + sin_t * px
            v = -sin_t * py + cos_t * px
            cov += ((u / a) ** 2 + (v / b) ** 2) <= 1.0
    cov /= 9.0
    if not np.any(cov):
        return
    texture = rng.normal(0.0, morph.texture_std, size=(y1 - y0, x1 - x0, c))
    add = (np.asarray(morph.intensity)[None, None, :] + texture) * cov[..., None]
    image[y0:y1, x0:x1] += np.maximum(add, 0.0)


def _cell_polygon(center: np.ndarray, morph: MorphologyParams, angle: float,
                  n_vertices: int) -> np.ndarray:
    theta = 2.0 * np.pi * np.arange(n_vertices) / n_vertices
    u = morph.semi_major * np.cos(theta)
    v = morph.semi_minor * np.sin(theta)
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    ys = center[0] + cos_t * u - sin_t * v
    xs = center[1] + sin_t * u + cos_t * v
    return np.stack([ys, xs], axis=1)


def neighbor_indices(centroids: np.ndarray, k_env: int) -> np.ndarray:
    """Indices of the k nearest other cells, per cell, nearest first.

    Distance ties break toward the lower cell id.  Requires k_env < N.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    n = centroids.shape[0]
    if not 1 <= k_env < n:
        raise DataError(f"k_env {k_env} must be in [1, {n - 1}]")
    sq = (centroids * centroids).sum(axis=1)
    d2 = sq[:, None] - 2.0 * (centroids @ centroids.T) + sq[None, :]
    np.fill_diagonal(d2, np.inf)
    ids = np.broadcast_to(np.arange(n), (n, n))
    return np.lexsort((ids, d2), axis=1)[:, :k_env]


def neighborhood_composition(centroids: np.ndarray, labels: np.ndarray,
                             n_types: int, k_env: int) -> np.ndarray:
    """Fraction of each type among the k nearest other cells, per cell."""
    labels = np.asarray(labels)
    order = neighbor_indices(centroids, k_env)
    n = order.shape[0]
    out = np.zeros((n, n_types))
    neigh_labels = labels[order]
    for t in range(n_types):
        out[:, t] = (neigh_labels == t).sum(axis=1) / k_env
    return out


def generate_field(spec: TissueSpec, model: ExpressionModel,
                   seed: int) -> SyntheticField:
    """Deterministically generate one field and its ground truth."""
    if model.type_coeff.shape[1] != spec.n_types:
        raise ValidationError(
            f"expression model covers {model.type_coeff.shape[1]} types, "
            f"spec has {spec.n_types}")
    place_rng = derive_rng("synthgen-place", seed)
    labels, centroids, _ = _place_cells(spec, place_rng)

    angle_rng = derive_rng("synthgen-angle", seed)
    angles = angle_rng.uniform(0.0, np.pi, size=spec.cells_per_field)

    image = np.zeros((spec.height, spec.width, spec.channels))
    noise_rng = derive_rng("synthgen-image", seed)
    image += np.maximum(
        spec.background_level +
        noise_rng.normal(0.0, spec.background_noise, size=image.shape), 0.0)
    polys = np.empty((spec.cells_per_field, spec.polygon_vertices, 2))
    semi_axes = np.empty((spec.cells_per_field, 2))
    texture_rng = derive_rng("synthgen-texture", seed)
    for i in range(spec.cells_per_field):
        morph = spec.morphologies[labels[i]]
        _rasterize_cell(image, centroids[i], morph, angles[i], texture_rng)
        polys[i] = _cell_polygon(centroids[i], morph, angles[i],
                                 spec.polygon_vertices)
        semi_axes[i] = (morph.semi_major, morph.semi_minor)

    composition = neighborhood_composition(centroids, labels, spec.n_types,
                                           spec.k_env)
    expr_rng = derive_rng("synthgen-expression", seed)
    onehot = np.zeros((spec.cells_per_field, spec.n_types))
    onehot[np.arange(spec.cells_per_field), labels] = 1.0
    noise = expr_rng.normal(0.0, 1.0, size=(spec.cells_per_field,
                                            model.n_genes)) * model.noise_std
    expression = np.maximum(
        onehot @ model.type_coeff.T + composition @ model.niche_coeff.T + noise,
        0.0)
    return SyntheticField(spec=spec, model=model, seed=seed, labels=labels,
                          centroids=centroids, polygons=polys,
                          semi_axes=semi_axes, angles=angles, image=image,
                          expression=expression, composition=composition)


# -- persistence -------------------------------------------------------------------

FIELD_SCHEMA = "field-v1"


def save_field(field: SyntheticField, path: str | os.PathLike,
               sidecar_path: str | os.PathLike | None = None,
               extra_meta: dict | None = None) -> None:
    """Write the field container and its ground-truth JSON sidecar.

    Arrays are stored at full precision and the generating parameters go
    into the container meta, so load_field reconstructs the field exactly.
    """
    blobs = {
        "image": field.image,
        "labels": field.labels.astype(np.int32),
        "centroids": field.centroids,
        "polygons": field.polygons,
        "semi_axes": field.semi_axes,
        "angles": field.angles,
        "expression": field.expression,
        "composition": field.composition,
        "cell_ids": field.cell_ids(),
    }
    meta = {"seed": field.seed, "n_cells": field.n_cells,
            "n_types": field.spec.n_types, "k_env": field.spec.k_env,
            "spec": _spec_to_dict(field.spec),
            "model": _model_to_dict(field.model)}
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, blobs, schema=FIELD_SCHEMA, meta=meta)
    if sidecar_path is not None:
        payload = {
            "seed": field.seed,
            "labels": field.labels.tolist(),
            "expression": [[round(float(v), 6) for v in row]
                           for row in field.expression],
            "generating_parameters": {
                "spec": _spec_to_dict(field.spec),
                "expression_model": _model_to_dict(field.model),
            },
        }
        tmp = os.fspath(sidecar_path) + ".tmp"
        with open(tmp, "w") as f:
            json.dump(payload, f, sort_keys=True, indent=1)
            f.write("\n")
        os.replace(tmp, sidecar_path)


def _spec_to_dict(spec: TissueSpec) -> dict:
    return {
        "n_types": spec.n_types,
        "channels": spec.channels,
        "height": spec.height,
        "width": spec.width,
        "cells_per_field": spec.cells_per_field,
        "morphologies": [
            {"radius": m.radius, "eccentricity": m.eccentricity,
             "intensity": list(m.intensity), "texture_std": m.texture_std}
            for m in spec.morphologies],
        "niche_anchors": [list(a) for a in spec.niche_anchors],
        "niche_weights": [list(r) for r in spec.niche_weights],
        "niche_spread": spec.niche_spread,
        "k_env": spec.k_env,
        "type_proportions": (None if spec.type_proportions is None
                             else list(spec.type_proportions)),
        "background_level": spec.background_level,
        "background_noise": spec.background_noise,
        "placement_gap": spec.placement_gap,
        "polygon_vertices": spec.polygon_vertices,
    }


def _spec_from_dict(d: dict) -> TissueSpec:
    return TissueSpec(
        n_types=d["n_types"],
        channels=d["channels"],
        height=d["height"],
        width=d["width"],
        cells_per_field=d["cells_per_field"],
        morphologies=tuple(
            MorphologyParams(radius=m["radius"],
                             eccentricity=m["eccentricity"],
                             intensity=tuple(m["intensity"]),
                             texture_std=m["texture_std"])
            for m in d["morphologies"]),
        niche_anchors=tuple(tuple(a) for a in d["niche_anchors"]),
        niche_weights=tuple(tuple(r) for r in d["niche_weights"]),
        niche_spread=d["niche_spread"],
        k_env=d["k_env"],
        type_proportions=(None if d["type_proportions"] is None
                          else tuple(d["type_proportions"])),
        background_level=d["background_level"],
        background_noise=d["background_noise"],
        placement_gap=d["placement_gap"],
        polygon_vertices=d["polygon_vertices"],
    )


def _model_to_dict(model: ExpressionModel) -> dict:
    return {
        "type_coeff": model.type_coeff.tolist(),
        "niche_coeff": model.niche_coeff.tolist(),
        "noise_std": model.noise_std.tolist(),
        "roles": list(model.roles),
    }


def _model_from_dict(d: dict) -> ExpressionModel:
    return ExpressionModel(
        type_coeff=np.asarray(d["type_coeff"], dtype=np.float64),
        niche_coeff=np.asarray(d["niche_coeff"], dtype=np.float64),
        noise_std=np.asarray(d["noise_std"], dtype=np.float64),
        roles=tuple(d["roles"]),
    )


def load_field(path: str | os.PathLike) -> SyntheticField:
    """Reconstruct a field exactly from its container."""
    c = read_container(path, schema=FIELD_SCHEMA)
    try:
        spec = _spec_from_dict(c.meta["spec"])
        model = _model_from_dict(c.meta["model"])
        seed = c.meta["seed"]
    except KeyError as err:
        raise DataError(f"field container is missing meta entry {err}")
    return SyntheticField(
        spec=spec,
        model=model,
        seed=seed,
        labels=c["labels"].astype(np.int32),
        centroids=c["centroids"],
        polygons=c["polygons"],
        semi_axes=c["semi_axes"],
        angles=c["angles"],
        image=c["image"],
        expression=c["expression"],
        composition=c["composition"],
    )
