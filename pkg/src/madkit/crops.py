"""Field preprocessing, per-cell view extraction, and crop augmentation.

Every cell yields two views: a small appearance crop that is masked to the
cell's own boundary (background zeroed), and a larger context crop centered
on the cell that keeps the surrounding tissue.  Views carry float coverage
masks; every resampling and augmentation step preserves the invariant that
pixels without mask support are exactly zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .container import read_container, write_container
from .errors import DataError, GeometryError, ParameterError, ValidationError
from .validation import as_f64, check_finite


# -- field preprocessing ----------------------------------------------------------

def estimate_illumination(image: np.ndarray, sigma: float | None = None
                          ) -> np.ndarray:
    """Per-channel smooth illumination profile, normalized to mean 1.

    The default smoothing scale is a sixteenth of the short side: wide
    enough to ignore individual cells, narrow enough that boundary effects
    of the smoothing do not flatten the estimate.
    """
    image = as_f64(image, "image")
    if sigma is None:
        sigma = min(image.shape[0], image.shape[1]) / 16.0
    profile = np.empty_like(image)
    for c in range(image.shape[2]):
        profile[..., c] = ndimage.gaussian_filter(image[..., c], sigma,
                                                  mode="reflect")
    means = profile.mean(axis=(0, 1), keepdims=True)
    if np.any(means <= 0):
        raise DataError("illumination estimate has a nonpositive channel mean")
    return profile / means


def flat_field_correct(image: np.ndarray,
                       profile: np.ndarray | None = None) -> np.ndarray:
    """Divide out slow illumination variation."""
    image = as_f64(image, "image")
    if image.ndim != 3:
        raise ValidationError(f"image must be (H, W, C), got {image.shape}")
    if profile is None:
        profile = estimate_illumination(image)
    profile = as_f64(profile, "profile")
    if profile.shape != image.shape:
        raise ValidationError("profile shape must match image shape")
    if np.any(profile <= 0):
        raise DataError("illumination profile must be strictly positive")
    return image / profile


def percentile_clip(image: np.ndarray, lo: float = 0.01,
                    hi: float = 99.99) -> np.ndarray:
    """Clip each channel to its own percentile range."""
    if not 0 <= lo < hi <= 100:
        raise ParameterError(f"bad percentile range ({lo}, {hi})")
    image = as_f64(image, "image")
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        lo_v, hi_v = np.percentile(image[..., c], [lo, hi])
        out[..., c] = np.clip(image[..., c], lo_v, hi_v)
    return out


def normalize01(image: np.ndarray) -> np.ndarray:
    """Rescale each channel to [0, 1]; constant channels become zeros."""
    image = as_f64(image, "image")
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        ch = image[..., c]
        span = ch.max() - ch.min()
        if span == 0:
            warnings.warn(f"channel {c} is constant; normalized to zeros",
                          RuntimeWarning, stacklevel=2)
            out[..., c] = 0.0
        else:
            out[..., c] = (ch - ch.min()) / span
    return out


def preprocess_field(image: np.ndarray,
                     profile: np.ndarray | None = None) -> np.ndarray:
    """Flat-field correct, clip outliers, and normalize to [0, 1]."""
    image = flat_field_correct(image, profile)
    image = percentile_clip(image)
    image = normalize01(image)
    check_finite(image, "preprocessed image")
    return image


# -- polygon masks ----------------------------------------------------------------

def polygon_mask(polygon: np.ndarray, height: int, width: int,
                 origin: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Even-odd rasterization of a polygon onto an integer pixel grid.

    A pixel (r, c) is inside when the ray toward +x from the point
    (origin[0] + r, origin[1] + c) crosses the boundary an odd number of
    times.
    """
    polygon = as_f64(polygon, "polygon")
    if polygon.ndim != 2 or polygon.shape[1] != 2 or polygon.shape[0] < 3:
        raise ValidationError(f"polygon must be (V>=3, 2), got {polygon.shape}")
    ys = origin[0] + np.arange(height)
    xs = origin[1] + np.arange(width)
    py = np.repeat(ys, width)
    px = np.tile(xs, height)
    y1 = polygon[:, 0]
    x1 = polygon[:, 1]
    y2 = np.roll(y1, -1)
    x2 = np.roll(x1, -1)
    crosses = np.zeros(py.size, dtype=np.int64)
    for e in range(polygon.shape[0]):
        straddles = (y1[e] > py) != (y2[e] > py)
        if not np.any(straddles):
            continue
        t = (py - y1[e]) / (y2[e] - y1[e])
        crosses += straddles & (px < x1[e] + t * (x2[e] - x1[e]))
    return (crosses % 2 == 1).reshape(height, width).astype(np.float64)


# -- masked resampling ------------------------------------------------------------

def resize_masked(image: np.ndarray, mask: np.ndarray, out_h: int,
                  out_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear resize that interpolates only over supported pixels.

    The output image at each location is the mask-weighted average of its
    four source neighbors, so unsupported source pixels never dilute the
    result; where the total support weight is zero the output is exactly
    zero.  The returned mask is the plainly interpolated coverage.  The
    area outside the source extent counts as unsupported.
    """
    image = as_f64(image, "image")
    mask = as_f64(mask, "mask")
    if image.ndim != 3 or mask.shape != image.shape[:2]:
        raise ValidationError("image must be (H, W, C) with mask (H, W)")
    if out_h < 1 or out_w < 1:
        raise ParameterError("output size must be positive")
    h, w, c = image.shape
    if (out_h, out_w) == (h, w):
        # no resampling, but unsupported pixels are still zeroed so the
        # support invariant holds for any input
        return image * (mask > 0)[..., None], mask.copy()
    # zero-pad by one pixel so out-of-range corners read zero support
    pimg = np.zeros((h + 2, w + 2, c))
    pimg[1:-1, 1:-1] = image
    pmask = np.zeros((h + 2, w + 2))
    pmask[1:-1, 1:-1] = mask
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    iy = np.clip(y0.astype(np.int64) + 1, 0, h)
    ix = np.clip(x0.astype(np.int64) + 1, 0, w)
    num = np.zeros((out_h, out_w, c))
    den = np.zeros((out_h, out_w))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            wgt = wy * wx
            m = pmask[iy + dy][:, ix + dx]
            v = pimg[iy + dy][:, ix + dx]
            den += wgt * m
            num += (wgt * m)[..., None] * v
    out = np.zeros_like(num)
    np.divide(num, den[..., None], out=out, where=den[..., None] > 0)
    return out, den


def crop_resize(image: np.ndarray, mask: np.ndarray, top: int, left: int,
                side: int, out_side: int) -> tuple[np.ndarray, np.ndarray]:
    """Extract a square region (zero-padded at borders) and resize it.

    When the region is the whole source and no resize is needed, supported
    pixels are copied through bitwise unchanged.
    """
    image = as_f64(image, "image")
    mask = as_f64(mask, "mask")
    if side < 1:
        raise ParameterError("crop side must be positive")
    h, w = mask.shape
    if (top, left, side) == (0, 0, h) and h == w and side == out_side:
        return image * (mask > 0)[..., None], mask.copy()
    region = np.zeros((side, side, image.shape[2]))
    rmask = np.zeros((side, side))
    ys0, ys1 = max(top, 0), min(top + side, h)
    xs0, xs1 = max(left, 0), min(left + side, w)
    if ys0 < ys1 and xs0 < xs1:
        region[ys0 - top:ys1 - top, xs0 - left:xs1 - left] = \
            image[ys0:ys1, xs0:xs1]
        rmask[ys0 - top:ys1 - top, xs0 - left:xs1 - left] = mask[ys0:ys1, xs0:xs1]
    if side == out_side:
        return region * (rmask > 0)[..., None], rmask
    return resize_masked(region, rmask, out_side, out_side)


# -- per-cell view extraction -----------------------------------------------------

@dataclass
class CellViews:
    """Native-resolution views for a set of cells, plus identity and truth."""
    morphology: np.ndarray        # (N, wm, wm, C)
    morphology_mask: np.ndarray   # (N, wm, wm)
    environment: np.ndarray       # (N, we, we, C)
    environment_mask: np.ndarray  # (N, we, we)
    cell_ids: np.ndarray          # (N,)
    labels: np.ndarray            # (N,)
    expression: np.ndarray        # (N, G)
    composition: np.ndarray       # (N, T)

    def __post_init__(self):
        n = self.cell_ids.shape[0]
        for name in ("morphology", "morphology_mask", "environment",
                     "environment_mask", "labels", "expression",
                     "composition"):
            if getattr(self, name).shape[0] != n:
                raise ValidationError(f"{name} disagrees on cell count")

    @property
    def n_cells(self) -> int:
        return self.cell_ids.shape[0]

    def subset(self, idx: np.ndarray) -> "CellViews":
        return CellViews(
            morphology=self.morphology[idx],
            morphology_mask=self.morphology_mask[idx],
            environment=self.environment[idx],
            environment_mask=self.environment_mask[idx],
            cell_ids=self.cell_ids[idx],
            labels=self.labels[idx],
            expression=self.expression[idx],
            composition=self.composition[idx])


def extract_views(image: np.ndarray, centroids: np.ndarray,
                  polygons: np.ndarray, morph_side: int = 24,
                  env_side: int = 64, box_margin: float = 2.0
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Cut the two views for every cell from a preprocessed field.

    The appearance view is the square around the cell polygon (plus margin),
    masked to the polygon and resized to morph_side.  The context view is an
    unmasked env_side square centered on the centroid, zero-padded where it
    pokes past the field; its mask records the valid area.
    """
    image = as_f64(image, "image")
    if image.ndim != 3:
        raise GeometryError(f"field image must be (H, W, C), got {image.shape}")
    centroids = as_f64(centroids, "centroids")
    polygons = as_f64(polygons, "polygons")
    n = centroids.shape[0]
    if polygons.shape[0] != n:
        raise ValidationError("one polygon per centroid required")
    h, w, c = image.shape
    ones = np.ones((h, w))
    morph = np.empty((n, morph_side, morph_side, c))
    morph_mask = np.empty((n, morph_side, morph_side))
    env = np.empty((n, env_side, env_side, c))
    env_mask = np.empty((n, env_side, env_side))
    for i in range(n):
        poly = polygons[i]
        cy, cx = centroids[i]
        half = max(poly[:, 0].max() - poly[:, 0].min(),
                   poly[:, 1].max() - poly[:, 1].min()) / 2.0 + box_margin
        side = int(np.ceil(2.0 * half))
        top = int(np.round(cy - side / 2.0))
        left = int(np.round(cx - side / 2.0))
        box = np.zeros((side, side, c))
        ys0, ys1 = max(top, 0), min(top + side, h)
        xs0, xs1 = max(left, 0), min(left + side, w)
        box[ys0 - top:ys1 - top, xs0 - left:xs1 - left] = image[ys0:ys1,
                                                                xs0:xs1]
        cell = polygon_mask(poly, side, side, origin=(top, left))
        morph[i], morph_mask[i] = resize_masked(box * cell[..., None], cell,
                                                morph_side, morph_side)
        etop = int(np.round(cy)) - env_side // 2
        eleft = int(np.round(cx)) - env_side // 2
        env[i], env_mask[i] = crop_resize(image, ones, etop, eleft,
                                          env_side, env_side)
    return morph, morph_mask, env, env_mask


# -- augmentation -----------------------------------------------------------------

def flip_view(image: np.ndarray, mask: np.ndarray, horizontal: bool
              ) -> tuple[np.ndarray, np.ndarray]:
    axis = 1 if horizontal else 0
    return np.flip(image, axis=axis).copy(), np.flip(mask, axis=axis).copy()


def jitter_intensity(image: np.ndarray, strength: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Scale each channel by an independent random factor, clipped to [0, 1].

    Zeros stay exactly zero, so mask support is untouched.
    """
    if not 0 <= strength < 1:
        raise ParameterError("jitter strength must be in [0, 1)")
    factors = 1.0 + rng.uniform(-strength, strength, size=image.shape[2])
    return np.clip(image * factors[None, None, :], 0.0, 1.0)


def blur_view(image: np.ndarray, mask: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur inside the view; support outside the mask stays zero."""
    if sigma <= 0:
        raise ParameterError("blur sigma must be positive")
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.gaussian_filter(image[..., c], sigma,
                                              mode="constant", cval=0.0)
    return out * (mask > 0)[..., None]


def augment_view(image: np.ndarray, mask: np.ndarray,
                 rng: np.random.Generator, jitter: float = 0.4,
                 blur_prob: float = 0.5,
                 blur_sigma: tuple[float, float] = (0.1, 1.0)
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Random flips, intensity jitter, and optional blur, in a fixed order."""
    if rng.random() < 0.5:
        image, mask = flip_view(image, mask, horizontal=True)
    if rng.random() < 0.5:
        image, mask = flip_view(image, mask, horizontal=False)
    image = jitter_intensity(image, jitter, rng)
    if rng.random() < blur_prob:
        sigma = rng.uniform(blur_sigma[0], blur_sigma[1])
        image = blur_view(image, mask, sigma)
    return image, mask


def multicrop(image: np.ndarray, mask: np.ndarray, n_global: int,
              n_local: int, rng: np.random.Generator,
              global_scale: tuple[float, float] = (0.7, 1.0),
              local_scale: tuple[float, float] = (0.3, 0.7)
              ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Sample global and local square crops, each resized back to the input.

    A scale s is the crop side as a fraction of the source side, so a crop
    at scale s covers about s*s of the source pixels.  A global crop at
    scale 1 is returned as an exact copy of the source.  Also returns the
    sampled (top, left, side) region of every crop, globals first.
    """
    for name, (lo, hi) in (("global", global_scale), ("local", local_scale)):
        if not 0.0 < lo <= hi <= 1.0:
            raise ParameterError(f"{name} scale range ({lo}, {hi}) invalid")
    if n_global < 1 or n_local < 0:
        raise ParameterError("need at least one global crop")
    h, w = mask.shape
    if h != w:
        raise GeometryError("multicrop expects square views")
    crops = []
    regions = np.empty((n_global + n_local, 3), dtype=np.int64)
    for k, (lo, hi) in enumerate([global_scale] * n_global
                                 + [local_scale] * n_local):
        s = rng.uniform(lo, hi)
        side = max(int(np.round(s * h)), 1)
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, h - side + 1))
        crops.append(crop_resize(image, mask, top, left, side, h))
        regions[k] = (top, left, side)
    return crops, regions


# -- dataset persistence and splitting -------------------------------------------

VIEWS_SCHEMA = "views-v1"


def save_views(views: CellViews, path) -> None:
    blobs = {
        "morphology": views.morphology.astype(np.float32),
        "morphology_mask": views.morphology_mask.astype(np.float32),
        "environment": views.environment.astype(np.float32),
        "environment_mask": views.environment_mask.astype(np.float32),
        "cell_ids": views.cell_ids.astype(np.int64),
        "labels": views.labels.astype(np.int32),
        "expression": views.expression.astype(np.float32),
        "composition": views.composition.astype(np.float32),
    }
    meta = {"n_cells": views.n_cells,
            "morph_side": int(views.morphology.shape[1]),
            "env_side": int(views.environment.shape[1])}
    write_container(path, blobs, schema=VIEWS_SCHEMA, meta=meta)


def load_views(path) -> CellViews:
    c = read_container(path, schema=VIEWS_SCHEMA)
    return CellViews(
        morphology=np.asarray(c["morphology"], dtype=np.float64),
        morphology_mask=np.asarray(c["morphology_mask"], dtype=np.float64),
        environment=np.asarray(c["environment"], dtype=np.float64),
        environment_mask=np.asarray(c["environment_mask"], dtype=np.float64),
        cell_ids=np.asarray(c["cell_ids"]),
        labels=np.asarray(c["labels"]),
        expression=np.asarray(c["expression"], dtype=np.float64),
        composition=np.asarray(c["composition"], dtype=np.float64))


def split_cells(n_cells: int, fractions: tuple[float, float, float],
                seed: int, labels: np.ndarray | None = None
                ) -> dict[str, np.ndarray]:
    """Disjoint pretrain/finetune/test index split by largest remainder.

    With labels given, the allocation is stratified per class so every split
    keeps the class balance.  The shuffle is deterministic in the seed.
    """
    from .rng import derive_rng
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ParameterError("fractions must be three nonnegatives summing to 1")
    if n_cells < 1:
        raise ParameterError("need at least one cell")

    def allocate(count):
        ideal = fr * count
        base = np.floor(ideal).astype(np.int64)
        rem = ideal - base
        for k in np.argsort(-rem, kind="stable")[:count - base.sum()]:
            base[k] += 1
        return base

    rng = derive_rng("split", seed)
    names = ("pretrain", "finetune", "test")
    out = {name: [] for name in names}
    if labels is None:
        groups = [np.arange(n_cells)]
    else:
        labels = np.asarray(labels)
        if labels.shape != (n_cells,):
            raise ValidationError("labels must be one per cell")
        groups = [np.flatnonzero(labels == v) for v in np.unique(labels)]
    for idx in groups:
        perm = idx[rng.permutation(idx.size)]
        sizes = allocate(idx.size)
        stops = np.cumsum(sizes)
        out["pretrain"].append(perm[:stops[0]])
        out["finetune"].append(perm[stops[0]:stops[1]])
        out["test"].append(perm[stops[1]:stops[2]])
    return {name: np.sort(np.concatenate(parts)).astype(np.int64)
            for name, parts in out.items()}


# -- persistence -------------------------------------------------------------------

VIEWS_SCHEMA = "cell-views-v1"


def save_views(views: CellViews, path, extra_meta: dict | None = None) -> None:
    """Write the view stacks as one container; round-trips exactly."""
    blobs = {
        "morphology": views.morphology,
        "morphology_mask": views.morphology_mask,
        "environment": views.environment,
        "environment_mask": views.environment_mask,
        "cell_ids": views.cell_ids,
        "labels": np.asarray(views.labels, dtype=np.int32),
        "expression": views.expression,
        "composition": views.composition,
    }
    meta = {"n_cells": int(views.n_cells)}
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, blobs, schema=VIEWS_SCHEMA, meta=meta)


def load_views(path) -> CellViews:
    c = read_container(path, schema=VIEWS_SCHEMA)
    return CellViews(
        morphology=c["morphology"],
        morphology_mask=c["morphology_mask"],
        environment=c["environment"],
        environment_mask=c["environment_mask"],
        cell_ids=c["cell_ids"],
        labels=c["labels"],
        expression=c["expression"],
        composition=c["composition"])
