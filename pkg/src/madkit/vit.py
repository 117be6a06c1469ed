"""Small vision transformer encoder with a projection head.

The encoder is a standard pre-norm ViT: non-overlapping patch embedding, a
learned class token, additive positional tables, ``depth`` blocks of
multi-head self-attention and GELU MLPs, and a final layer norm.  Only the
class token is read out.  The projection head is a plain MLP that maps the
class token to prototype logits for the distillation loss.

Positional tables are learned per image geometry.  An encoder is created
with an explicit set of admissible input sides and owns one table per side;
feeding an image whose side was never registered is a hard error rather
than an interpolation, because silently resampling positions across
geometries is a classic source of irreproducible results.

All parameters are float64.  Weight matrices are drawn from a truncated
normal (sigma 0.02, cut at two sigma), biases and the class token start at
zero, and layer-norm gains start at one.  Geometry tables are drawn after
every geometry-independent parameter, so two encoders seeded identically
but registered for different sides share every other initial value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, GeometryError, UsageError
from .numcore import Tensor

_TRUNC_BOUND = 2.0


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry-independent encoder hyperparameters."""
    patch_size: int = 8
    depth: int = 4
    token_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    head_depth: int = 5
    head_hidden: int = 128
    proto_dim: int = 128
    channels: int = 3

    def __post_init__(self):
        if self.token_dim % self.heads != 0:
            raise ConfigError(
                f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        for name in ("patch_size", "depth", "token_dim", "heads",
                     "head_depth", "head_hidden", "proto_dim", "channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.token_dim))

    def tokens_for(self, side: int) -> int:
        if side % self.patch_size != 0:
            raise GeometryError(
                f"side {side} not divisible by patch size {self.patch_size}")
        n = side // self.patch_size
        return n * n + 1


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws beyond two sigma rejected and redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > _TRUNC_BOUND
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > _TRUNC_BOUND
    return out * std


class EncoderWeights:
    """Named float64 parameter set for one encoder (backbone + head)."""

    def __init__(self, config: EncoderConfig, sides: tuple[int, ...],
                 params: dict[str, Tensor]):
        self.config = config
        self.sides = tuple(sorted(sides))
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self, requires_grad: bool = False) -> "EncoderWeights":
        params = {k: Tensor(v.data.copy(), requires_grad=requires_grad, op=k)
                  for k, v in self.params.items()}
        return EncoderWeights(self.config, self.sides, params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def init_encoder(config: EncoderConfig, sides: tuple[int, ...],
                 rng: np.random.Generator,
                 requires_grad: bool = True) -> EncoderWeights:
    """Fresh encoder weights admitting the given input sides.

    Draw order is fixed: patch projection, class token, blocks, final norm,
    head, and only then one positional table per side (ascending).
    """
    if not sides:
        raise ConfigError("an encoder needs at least one registered side")
    cfg = config
    d, hh = cfg.token_dim, cfg.mlp_hidden
    arrays: dict[str, np.ndarray] = {}
    arrays["patch/w"] = trunc_normal(
        rng, (cfg.patch_size * cfg.patch_size * cfg.channels, d))
    arrays["patch/b"] = np.zeros(d)
    arrays["cls"] = np.zeros((1, 1, d))
    for i in range(cfg.depth):
        b = f"blocks/{i}"
        arrays[f"{b}/ln1/g"] = np.ones(d)
        arrays[f"{b}/ln1/b"] = np.zeros(d)
        arrays[f"{b}/attn/wqkv"] = trunc_normal(rng, (d, 3 * d))
        arrays[f"{b}/attn/bqkv"] = np.zeros(3 * d)
        arrays[f"{b}/attn/wo"] = trunc_normal(rng, (d, d))
        arrays[f"{b}/attn/bo"] = np.zeros(d)
        arrays[f"{b}/ln2/g"] = np.ones(d)
        arrays[f"{b}/ln2/b"] = np.zeros(d)
        arrays[f"{b}/mlp/w1"] = trunc_normal(rng, (d, hh))
        arrays[f"{b}/mlp/b1"] = np.zeros(hh)
        arrays[f"{b}/mlp/w2"] = trunc_normal(rng, (hh, d))
        arrays[f"{b}/mlp/b2"] = np.zeros(d)
    arrays["final/g"] = np.ones(d)
    arrays["final/b"] = np.zeros(d)
    # head layers use fan-in-scaled init: the head has no residual stream,
    # so a flat 0.02 std would shrink the class-token signal by ~0.1x per
    # layer and leave the prototype logits (and their gradients) numerically
    # dead at head_depth 5.  The final layer needs unit-scale logits too:
    # centered teacher softmax at temperature ~0.04 is effectively uniform
    # unless across-sample logit spread is comparable to the temperature,
    # and a uniform teacher is a stable collapse of the distillation loss
    dims = [d] + [cfg.head_hidden] * (cfg.head_depth - 1) + [cfg.proto_dim]
    for j in range(cfg.head_depth):
        gain = 1.0 if j == cfg.head_depth - 1 else 2.0
        arrays[f"head/{j}/w"] = trunc_normal(
            rng, (dims[j], dims[j + 1]), std=math.sqrt(gain / dims[j]))
        arrays[f"head/{j}/b"] = np.zeros(dims[j + 1])
    for side in sorted(sides):
        arrays[f"pos/{side}"] = trunc_normal(rng, (1, cfg.tokens_for(side), d))
    params = {k: Tensor(v, requires_grad=requires_grad, op=k)
              for k, v in arrays.items()}
    return EncoderWeights(cfg, tuple(sides), params)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, W, W, C) -> (B, N, P*P*C) in row-major patch order.

    Within a patch, values are laid out row by row with channels innermost,
    matching a plain reshape of the patch block.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.ndim != 4:
        raise GeometryError(f"expected (B, H, W, C) images, got {imgs.shape}")
    b, h, w, c = imgs.shape
    if h != w:
        raise GeometryError(f"images must be square, got {h}x{w}")
    if h % patch_size != 0:
        raise GeometryError(
            f"side {h} not divisible by patch size {patch_size}")
    n = h // patch_size
    x = imgs.reshape(b, n, patch_size, n, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, n * n, patch_size * patch_size * c)


def encode(weights: EncoderWeights, images: np.ndarray) -> Tensor:
    """Class-token embeddings (B, D) for a batch of square images."""
    cfg = weights.config
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    side = imgs.shape[1]
    if side not in weights.sides:
        raise GeometryError(
            f"encoder registered for sides {weights.sides}, got {side}; "
            "positional tables are not shared across geometries")
    if imgs.shape[-1] != cfg.channels:
        raise GeometryError(
            f"expected {cfg.channels} channels, got {imgs.shape[-1]}")
    w = weights.params
    b = imgs.shape[0]
    d, heads = cfg.token_dim, cfg.heads
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    patches = patchify(imgs, cfg.patch_size)        # (B, N, P*P*C), constant
    n_tok = patches.shape[1] + 1
    flat = nc.matmul(Tensor(patches.reshape(-1, patches.shape[-1])),
                     w["patch/w"]) + w["patch/b"]
    x = nc.reshape(flat, (b, n_tok - 1, d))
    cls = nc.broadcast_to(w["cls"], (b, 1, d))
    x = nc.concat([cls, x], axis=1) + w[f"pos/{side}"]

    for i in range(cfg.depth):
        blk = f"blocks/{i}"
        h = nc.layer_norm(x, w[f"{blk}/ln1/g"], w[f"{blk}/ln1/b"])
        qkv = nc.matmul(nc.reshape(h, (b * n_tok, d)),
                        w[f"{blk}/attn/wqkv"]) + w[f"{blk}/attn/bqkv"]
        qkv = nc.reshape(qkv, (b, n_tok, 3 * d))
        parts = []
        for j in range(3):
            piece = qkv[:, :, j * d:(j + 1) * d]
            piece = nc.reshape(piece, (b, n_tok, heads, dh))
            parts.append(nc.transpose(piece, (0, 2, 1, 3)))
        q, k, v = parts
        scores = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * scale
        attn = nc.softmax(scores)
        ctx = nc.matmul(attn, v)                     # (B, H, S, dh)
        ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b * n_tok, d))
        proj = nc.matmul(ctx, w[f"{blk}/attn/wo"]) + w[f"{blk}/attn/bo"]
        x = x + nc.reshape(proj, (b, n_tok, d))

        h = nc.layer_norm(x, w[f"{blk}/ln2/g"], w[f"{blk}/ln2/b"])
        m = nc.matmul(nc.reshape(h, (b * n_tok, d)),
                      w[f"{blk}/mlp/w1"]) + w[f"{blk}/mlp/b1"]
        m = nc.matmul(nc.gelu(m), w[f"{blk}/mlp/w2"]) + w[f"{blk}/mlp/b2"]
        x = x + nc.reshape(m, (b, n_tok, d))

    x = nc.layer_norm(x, w["final/g"], w["final/b"])
    return x[:, 0, :]


def feature_head(weights: EncoderWeights, z: Tensor) -> Tensor:
    """Prototype logits (B, K) from class-token embeddings (B, D)."""
    cfg = weights.config
    if z.ndim != 2 or z.shape[1] != cfg.token_dim:
        raise UsageError(
            f"feature_head expects (B, {cfg.token_dim}), got {z.shape}")
    out = z
    for j in range(cfg.head_depth):
        out = nc.matmul(out, weights[f"head/{j}/w"]) + weights[f"head/{j}/b"]
        if j < cfg.head_depth - 1:
            out = nc.gelu(out)
    return out


# -- checkpoint helpers --------------------------------------------------------

def encoder_to_blobs(weights: EncoderWeights,
                     prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": t.data for name, t in weights.params.items()}


def encoder_from_blobs(config: EncoderConfig, sides: tuple[int, ...],
                       blobs: dict[str, np.ndarray], prefix: str,
                       requires_grad: bool = False) -> EncoderWeights:
    """Rebuild an encoder from container blobs; shapes are re-derived and checked."""
    reference = init_encoder(config, sides, np.random.default_rng(0),
                             requires_grad=False)
    params: dict[str, Tensor] = {}
    for name, ref in reference.params.items():
        key = f"{prefix}/{name}"
        if key not in blobs:
            raise UsageError(f"checkpoint is missing parameter {key!r}")
        arr = np.asarray(blobs[key], dtype=np.float64)
        if arr.shape != ref.data.shape:
            raise UsageError(
                f"parameter {key!r} has shape {arr.shape}, "
                f"expected {ref.data.shape}")
        params[name] = Tensor(arr, requires_grad=requires_grad, op=name)
    return EncoderWeights(config, sides, params)
