"""Joint two-view self-distillation trainer.

Each cell contributes one appearance view and one context view.  Every view
keeps its own student encoder, teacher encoder, and prototype center; the
views interact only through the cross-view terms of the loss, whose weight
is configurable.  At weight zero the views train as fully independent
models: a joint run then reproduces single-view runs bit for bit, which the
tests rely on.

The teacher is an exponential moving average of the student and only ever
sees global crops.  Teacher probabilities are sharpened with a low
temperature and centered with a running mean of its own logits; the student
is trained to match them with cross-entropy at a higher temperature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .container import read_container, write_container
from .crops import CellViews, augment_view, multicrop
from .errors import (ConfigError, NumericalAbort, ParameterError, UsageError,
                     ValidationError)
from .numcore import Tensor, as_tensor, backward, ops
from .rng import cell_rng, derive_rng, derive_seed
from .vit import (EncoderConfig, EncoderWeights, encode, encoder_from_blobs,
                  encoder_to_blobs, feature_head, init_encoder)

VIEW_NAMES = ("morphology", "environment")


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of one pretraining run."""
    views: tuple[str, ...] = VIEW_NAMES
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cross_weight: float = 0.5
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    teacher_temp_start: float = 0.02
    warmup_fraction: float = 0.1
    center_momentum: float = 0.9
    ema_start: float = 0.996
    epochs: int = 10
    batch_size: int = 40
    steps_per_epoch: int | None = None
    n_global: int = 2
    n_local: int = 4
    global_scale: tuple[float, float] = (0.7, 1.0)
    local_scale: tuple[float, float] = (0.3, 0.7)
    jitter: float = 0.4
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    lr: float = 5e-4
    weight_decay: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if len(self.views) == 0 or len(set(self.views)) != len(self.views):
            raise ConfigError("views must be nonempty and unique")
        for v in self.views:
            if v not in VIEW_NAMES:
                raise ConfigError(f"unknown view {v!r}; expected {VIEW_NAMES}")
        if not 0.0 <= self.cross_weight:
            raise ConfigError("cross_weight must be nonnegative")
        for name in ("student_temp", "teacher_temp", "teacher_temp_start"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ConfigError("center_momentum must be in [0, 1)")
        if not 0.0 < self.ema_start <= 1.0:
            raise ConfigError("ema_start must be in (0, 1]")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive when given")
        if self.n_global < 1 or self.n_local < 0:
            raise ConfigError("need at least one global crop per view")
        if self.n_global + self.n_local < 2:
            raise ConfigError("need at least two crops per view overall")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive, weight_decay nonnegative")


# -- schedules ---------------------------------------------------------------------

def lr_schedule(step: int, total_steps: int, base_lr: float,
                warmup_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t))

def teacher_temp_schedule(step: int, warmup_steps: int, start: float,
                          final: float) -> float:
    """Linear ramp from the soft start temperature to the final one."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return final
    return start + (final - start) * step / warmup_steps

def ema_momentum_schedule(step: int, total_steps: int, start: float) -> float:
    """Cosine ramp of the teacher momentum from its start value to 1."""
    if total_steps <= 1:
        return start
    t = step / (total_steps - 1)
    return 1.0 - (1.0 - start) * 0.5 * (1.0 + np.cos(np.pi * t))


# -- optimizer ---------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay on matrix-shaped parameters only.

    Bias and normalization parameters (vectors and scalars) are excluded
    from decay.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                raise UsageError(f"parameter {k} has no gradient")
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            if self.weight_decay > 0 and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


# -- loss --------------------------------------------------------------------------

def teacher_probs(logits: np.ndarray, center: np.ndarray,
                  temp: float) -> np.ndarray:
    """Sharpened, centered target distribution; plain data, no gradients."""
    t = ops.softmax_centered(as_tensor(logits), center=as_tensor(center),
                             temp=temp)
    return t.data

def mad_loss(student_logits: dict[str, list[Tensor]],
             teacher_logits: dict[str, list[np.ndarray]],
             centers: dict[str, np.ndarray], cross_weight: float,
             student_temp: float, teacher_temp: float) -> Tensor:
    """Distillation loss over all views.

    Within a view, every teacher global predicts every student crop except
    its own instance.  Across views, every teacher global predicts every
    student crop of the other view, scaled by cross_weight.  Each of the
    directed view-pair terms is a mean over its crop pairs, so with uniform
    distributions every term equals log K.  Cross terms are omitted
    entirely, not zero-weighted, when cross_weight is zero.
    """
    views = list(student_logits.keys())
    if set(teacher_logits.keys()) != set(views):
        raise UsageError("student and teacher views disagree")
    student_probs = {
        v: [ops.softmax_centered(z, temp=student_temp)
            for z in student_logits[v]] for v in views}
    target_probs = {
        v: [teacher_probs(z, centers[v], teacher_temp)
            for z in teacher_logits[v]] for v in views}
    total = None
    for tv in views:
        for sv in views:
            if tv != sv and cross_weight == 0.0:
                continue
            terms = []
            for g, target in enumerate(target_probs[tv]):
                for c, pred in enumerate(student_probs[sv]):
                    if tv == sv and c == g:
                        continue
                    ce = ops.cross_entropy_rows(as_tensor(target), pred)
                    terms.append(ops.reduce_mean(ce))
            if not terms:
                raise UsageError(
                    f"no crop pairs for views {tv!r}->{sv!r}; "
                    "need a second crop")
            pair_mean = terms[0]
            for t in terms[1:]:
                pair_mean = ops.add(pair_mean, t)
            pair_mean = ops.mul(pair_mean,
                                as_tensor(np.asarray(1.0 / len(terms))))
            if tv != sv:
                pair_mean = ops.mul(pair_mean,
                                    as_tensor(np.asarray(cross_weight)))
            total = pair_mean if total is None else ops.add(total, pair_mean)
    return total


# -- trainer state -----------------------------------------------------------------

@dataclass
class TrainerState:
    """Everything learned during pretraining."""
    config: DistillConfig
    sides: dict[str, int]
    students: dict[str, EncoderWeights]
    teachers: dict[str, EncoderWeights]
    centers: dict[str, np.ndarray]
    step: int = 0

    def embedding_dim(self) -> int:
        return self.config.encoder.token_dim * len(self.config.views)


def _view_arrays(views: CellViews, name: str) -> tuple[np.ndarray, np.ndarray]:
    if name == "morphology":
        return views.morphology, views.morphology_mask
    if name == "environment":
        return views.environment, views.environment_mask
    raise ConfigError(f"unknown view {name!r}")


def init_trainer(config: DistillConfig, sides: dict[str, int]) -> TrainerState:
    """Fresh per-view students, EMA teachers, and zero centers.

    Every view draws its weights from an identically seeded stream, so all
    views start from the same non-positional parameters; only the
    positional tables (drawn last) depend on the view geometry.
    """
    students, teachers, centers = {}, {}, {}
    for v in config.views:
        if v not in sides:
            raise ConfigError(f"no side registered for view {v!r}")
        rng = derive_rng("init", config.seed)
        students[v] = init_encoder(config.encoder, [sides[v]], rng)
        teachers[v] = students[v].copy()
        teachers[v].set_requires_grad(False)
        centers[v] = np.zeros(config.encoder.proto_dim)
    return TrainerState(config=config, sides=dict(sides), students=students,
                        teachers=teachers, centers=centers)


# -- training loop -----------------------------------------------------------------

def _crop_batches(config: DistillConfig, view: str, images: np.ndarray,
                  masks: np.ndarray, cell_ids: np.ndarray, batch_idx: np.ndarray,
                  global_step: int) -> list[np.ndarray]:
    """Augmented crop stacks for one view and one batch, crop-major.

    Every cell's crops come from a stream derived from the run seed, the
    view name, the global step, and the cell id, so runs sharing those
    coordinates sample identical crops regardless of what other views are
    being trained alongside.
    """
    n_crops = config.n_global + config.n_local
    stream = derive_seed("crops", config.seed, view, global_step)
    per_crop = [[] for _ in range(n_crops)]
    for i in batch_idx:
        rng = cell_rng(stream, int(cell_ids[i]))
        crops, _ = multicrop(images[i], masks[i], config.n_global,
                             config.n_local, rng,
                             global_scale=config.global_scale,
                             local_scale=config.local_scale)
        for c, (img, mask) in enumerate(crops):
            img, mask = augment_view(img, mask, rng, jitter=config.jitter,
                                     blur_prob=config.blur_prob,
                                     blur_sigma=config.blur_sigma)
            per_crop[c].append(img)
    return [np.stack(group) for group in per_crop]


def _forward_logits(weights: EncoderWeights, batch: np.ndarray) -> Tensor:
    return feature_head(weights, encode(weights, batch))


def _abort_diagnostics(state: TrainerState, per_view_logits, step, lr, temp):
    diag = {"step": int(step), "lr": float(lr), "teacher_temp": float(temp)}
    for v, logit_list in per_view_logits.items():
        stacked = np.concatenate([t.data for t in logit_list])
        diag[f"{v}/logit_absmax"] = float(np.max(np.abs(stacked)))
        diag[f"{v}/logit_nonfinite"] = int(np.size(stacked)
                                           - np.isfinite(stacked).sum())
        diag[f"{v}/center_absmax"] = float(np.max(np.abs(state.centers[v])))
    return diag


def fit_views(config: DistillConfig, views: CellViews,
              log=None) -> tuple[TrainerState, list[dict]]:
    """Run the full pretraining schedule over the given cells.

    Returns the trained state and a per-epoch history of scalar
    diagnostics.  A non-finite loss aborts with full context attached.
    """
    n = views.n_cells
    if n < config.batch_size:
        raise ConfigError(f"{n} cells cannot fill a batch of "
                          f"{config.batch_size}")
    arrays = {v: _view_arrays(views, v) for v in config.views}
    sides = {v: arrays[v][0].shape[1] for v in config.views}
    state = init_trainer(config, sides)
    optimizers = {
        v: AdamW(dict(state.students[v].named_parameters()),
                 weight_decay=config.weight_decay)
        for v in config.views}

    max_steps = n // config.batch_size
    steps_per_epoch = config.steps_per_epoch or max_steps
    if steps_per_epoch > max_steps:
        raise ConfigError(
            f"steps_per_epoch {steps_per_epoch} exceeds the {max_steps} "
            f"full batches available from {n} cells")
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = int(np.ceil(config.warmup_fraction * total_steps))

    order_rng = derive_rng("batches", config.seed)
    history = []
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        losses = []
        lr = temp = momentum = 0.0
        for step_in_epoch in range(steps_per_epoch):
            gstep = state.step
            batch_idx = perm[step_in_epoch * config.batch_size:
                             (step_in_epoch + 1) * config.batch_size]
            lr = lr_schedule(gstep, total_steps, config.lr, warmup_steps)
            temp = teacher_temp_schedule(gstep, warmup_steps,
                                         config.teacher_temp_start,
                                         config.teacher_temp)
            momentum = ema_momentum_schedule(gstep, total_steps,
                                             config.ema_start)

            student_logits, teacher_logits = {}, {}
            for v in config.views:
                images, masks = arrays[v]
                batches = _crop_batches(config, v, images, masks,
                                        views.cell_ids, batch_idx, gstep)
                student_logits[v] = [_forward_logits(state.students[v], b)
                                     for b in batches]
                teacher_logits[v] = [
                    _forward_logits(state.teachers[v], b).data
                    for b in batches[:config.n_global]]

            loss = mad_loss(student_logits, teacher_logits, state.centers,
                            config.cross_weight, config.student_temp, temp)
            if not np.isfinite(loss.data):
                raise NumericalAbort(
                    f"non-finite loss at step {gstep}",
                    _abort_diagnostics(state, student_logits, gstep, lr,
                                       temp))
            for v in config.views:
                state.students[v].zero_grad()
            backward(loss)
            for v in config.views:
                optimizers[v].step(lr)
                # EMA teacher update
                student = dict(state.students[v].named_parameters())
                for name, tparam in state.teachers[v].named_parameters():
                    tparam.data *= momentum
                    tparam.data += (1.0 - momentum) * student[name].data
                # running center over this step's teacher global logits
                batch_mean = np.concatenate(teacher_logits[v]).mean(axis=0)
                state.centers[v] = (config.center_momentum * state.centers[v]
                                    + (1.0 - config.center_momentum)
                                    * batch_mean)
            losses.append(float(loss.data))
            state.step += 1
        record = {"epoch": epoch, "loss_mean": float(np.mean(losses)),
                  "loss_last": losses[-1], "lr": lr, "teacher_temp": temp,
                  "ema_momentum": momentum}
        for v in config.views:
            p = teacher_probs(np.zeros((1, config.encoder.proto_dim)),
                              state.centers[v], config.teacher_temp)
            record[f"entropy_center_{v}"] = float(
                -(p * np.log(np.maximum(p, 1e-300))).sum())
        history.append(record)
        if log is not None:
            log(record)
    return state, history


# -- teacher diagnostics -----------------------------------------------------------

def teacher_statistics(state: TrainerState, views: CellViews,
                       batch_size: int = 200) -> dict[str, float]:
    """Collapse diagnostics from teacher distributions over full views.

    Reports, per view, the entropy of the mean teacher distribution (low
    when all cells map to few prototypes) and the mean per-cell entropy
    (high when every cell is uniform).
    """
    out = {}
    cfg = state.config
    for v in cfg.views:
        images, masks = _view_arrays(views, v)
        probs = []
        for start in range(0, views.n_cells, batch_size):
            batch = images[start:start + batch_size]
            logits = _forward_logits(state.teachers[v],
                                     np.ascontiguousarray(batch)).data
            probs.append(teacher_probs(logits, state.centers[v],
                                       cfg.teacher_temp))
        p = np.concatenate(probs)
        mean_p = p.mean(axis=0)
        out[f"{v}/mean_dist_entropy"] = float(
            -(mean_p * np.log(np.maximum(mean_p, 1e-300))).sum())
        out[f"{v}/mean_cell_entropy"] = float(
            -(p * np.log(np.maximum(p, 1e-300))).sum(axis=1).mean())
    return out


# -- persistence -------------------------------------------------------------------

CHECKPOINT_SCHEMA = "pretrain-checkpoint-v1"


def _config_to_dict(config: DistillConfig) -> dict:
    enc = config.encoder
    return {
        "views": list(config.views),
        "encoder": {
            "patch_size": enc.patch_size, "depth": enc.depth,
            "token_dim": enc.token_dim, "heads": enc.heads,
            "mlp_ratio": enc.mlp_ratio, "head_depth": enc.head_depth,
            "head_hidden": enc.head_hidden,
            "proto_dim": enc.proto_dim, "channels": enc.channels},
        "cross_weight": config.cross_weight,
        "student_temp": config.student_temp,
        "teacher_temp": config.teacher_temp,
        "teacher_temp_start": config.teacher_temp_start,
        "warmup_fraction": config.warmup_fraction,
        "center_momentum": config.center_momentum,
        "ema_start": config.ema_start,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "steps_per_epoch": config.steps_per_epoch,
        "n_global": config.n_global,
        "n_local": config.n_local,
        "global_scale": list(config.global_scale),
        "local_scale": list(config.local_scale),
        "jitter": config.jitter,
        "blur_prob": config.blur_prob,
        "blur_sigma": list(config.blur_sigma),
        "lr": config.lr,
        "weight_decay": config.weight_decay,
        "seed": config.seed,
    }


def config_from_dict(d: dict) -> DistillConfig:
    d = dict(d)
    enc = d.pop("encoder")
    known = {f.name for f in DistillConfig.__dataclass_fields__.values()}
    extra = set(d.keys()) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    for key in ("views",):
        if key in d:
            d[key] = tuple(d[key])
    for key in ("global_scale", "local_scale", "blur_sigma"):
        if key in d:
            d[key] = tuple(d[key])
    return DistillConfig(encoder=EncoderConfig(**enc), **d)


def save_checkpoint(state: TrainerState, path,
                    extra_meta: dict | None = None) -> None:
    blobs = {}
    for v in state.config.views:
        blobs.update(encoder_to_blobs(state.students[v], prefix=f"student/{v}"))
        blobs.update(encoder_to_blobs(state.teachers[v], prefix=f"teacher/{v}"))
        blobs[f"center/{v}"] = state.centers[v]
    meta = {"config": _config_to_dict(state.config),
            "sides": state.sides, "step": state.step}
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, blobs, schema=CHECKPOINT_SCHEMA, meta=meta)


def load_checkpoint(path) -> TrainerState:
    c = read_container(path, schema=CHECKPOINT_SCHEMA)
    config = config_from_dict(c.meta["config"])
    sides = {k: int(v) for k, v in c.meta["sides"].items()}
    students, teachers, centers = {}, {}, {}
    for v in config.views:
        students[v] = encoder_from_blobs(config.encoder, [sides[v]], c.blobs,
                                         prefix=f"student/{v}",
                                         requires_grad=True)
        teachers[v] = encoder_from_blobs(config.encoder, [sides[v]], c.blobs,
                                         prefix=f"teacher/{v}")
        teachers[v].set_requires_grad(False)
        centers[v] = np.asarray(c[f"center/{v}"], dtype=np.float64)
    return TrainerState(config=config, sides=sides, students=students,
                        teachers=teachers, centers=centers,
                        step=int(c.meta["step"]))
