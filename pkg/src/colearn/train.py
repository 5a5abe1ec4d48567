"""Training loop, Adam, learning-rate schedule and method variants."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import autodiff as ad
from .augment import TransformParams, channel_stats, normalize, render_views, sample_view, view_rng
from .data import ImageDataset
from .errors import NonFiniteError, ParameterError, TrainingError
from .eval import MetricsRow, memorization_from_predictions, predictions, test_accuracy
from .losses import BatchViews, LossBreakdown, LossConfig, total_loss
from .model import ModelParams, NetworkConfig, flatten, init_params

log = logging.getLogger(__name__)

Method = Literal["colearning", "standard_ce", "ce_mixup", "colearning_no_str",
                 "colearning_no_mixup", "weighted_sup"]

# method -> (mixup, intrinsic, structural)
METHOD_TERMS: dict[str, tuple[bool, bool, bool]] = {
    "colearning": (True, True, True),
    "standard_ce": (False, False, False),
    "ce_mixup": (True, False, False),
    "colearning_no_str": (True, True, False),
    "colearning_no_mixup": (False, True, True),
    "weighted_sup": (False, True, True),
}

WEAK, STRONG_A, STRONG_B = 1, 2, 3


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Method = "colearning"
    name: str | None = None
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=2)
    lr: float = Field(0.001, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    decay_start_fraction: float = Field(0.4, gt=0, le=1)
    sup_weight: float = Field(0.01, ge=0)
    tau: float = Field(0.5, gt=0)
    alpha: float = Field(1.0, gt=0)
    sigma: float = Field(0.5, gt=0)
    reduction: Literal["mean", "sum"] = "mean"
    include_positive_in_denominator: bool = False
    per_sample_lambda: bool = False
    encoder_widths: tuple[int, ...] = (256, 128)
    projection_dim: int = Field(64, ge=1)
    crop_scale: tuple[float, float] = (0.08, 1.0)
    flip_prob: float = Field(0.5, ge=0, le=1)
    jitter_strengths: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_prob: float = Field(0.8, ge=0, le=1)
    grayscale_prob: float = Field(0.2, ge=0, le=1)
    standardize: bool = True
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale must satisfy 0 < min <= max <= 1")
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ValueError("encoder_widths must be a non-empty list of positive widths")
        return self

    @property
    def label(self) -> str:
        return self.name or self.method

    def loss_config(self) -> LossConfig:
        use_mixup, intrinsic, structural = METHOD_TERMS[self.method]
        return LossConfig(
            tau=self.tau, alpha=self.alpha, sigma=self.sigma, reduction=self.reduction,
            include_positive_in_denominator=self.include_positive_in_denominator,
            per_sample_lambda=self.per_sample_lambda,
            mixup=use_mixup, intrinsic=intrinsic, structural=structural,
            sup_weight=self.sup_weight if self.method == "weighted_sup" else 1.0,
        )

    def transforms(self, strong: bool) -> TransformParams:
        return TransformParams(is_strong=strong, crop_scale_range=tuple(self.crop_scale),
                               flip_prob=self.flip_prob, jitter_strengths=tuple(self.jitter_strengths),
                               jitter_prob=self.jitter_prob, grayscale_prob=self.grayscale_prob)

    def network(self, input_dim: int, num_classes: int) -> NetworkConfig:
        return NetworkConfig(input_dim, num_classes, tuple(self.encoder_widths), self.projection_dim)


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    _scratch: list[np.ndarray] = field(default_factory=list, repr=False)

    @classmethod
    def zeros_like(cls, params: list[ad.Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[ad.Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names: list[str] | None = None) -> None:
    """Bias-corrected Adam update, in place, using each tensor's ``.grad``."""
    for k, p in enumerate(params):
        if p.grad is None or not np.isfinite(p.grad).all():
            name = names[k] if names else f"parameter {k}"
            raise TrainingError(f"non-finite or missing gradient for {name}")
    if not state._scratch:
        state._scratch = [np.empty_like(m) for m in state.m]
    state.t += 1
    step = lr / (1.0 - beta1 ** state.t)
    inv_c2 = 1.0 / (1.0 - beta2 ** state.t)
    for p, m, v, tmp in zip(params, state.m, state.v, state._scratch):
        g = p.grad
        # m <- b1 m + (1 - b1) g ; v <- b2 v + (1 - b2) g^2
        np.subtract(g, m, out=tmp)
        tmp *= 1.0 - beta1
        m += tmp
        np.square(g, out=tmp)
        tmp -= v
        tmp *= 1.0 - beta2
        v += tmp
        np.multiply(v, inv_c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p.data -= tmp


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant until ``round(decay_start_fraction * epochs)``, then linear toward 0 at ``epochs``."""
    if not 0 <= epoch < cfg.epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.epochs})")
    start = int(round(cfg.decay_start_fraction * cfg.epochs))
    if epoch < start or start >= cfg.epochs:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - start)


# -- views ------------------------------------------------------------------------

@dataclass
class ViewContext:
    """Everything needed to turn dataset indices into normalized view batches."""
    images: np.ndarray
    stats: tuple[np.ndarray, np.ndarray] | None
    weak: TransformParams
    strong: TransformParams
    data_seed: int
    train_seed: int

    def render(self, idx: np.ndarray, epoch: int, view: int) -> np.ndarray:
        params = self.weak if view == WEAK else self.strong
        _, h, w, _ = self.images.shape
        draws = [sample_view(params, h, w, view_rng(self.data_seed, self.train_seed, epoch, int(i), view))
                 for i in idx]
        return flatten(normalize(render_views(self.images[idx], draws), self.stats))

    def batch(self, ds: ImageDataset, idx: np.ndarray, epoch: int, strong_views: bool) -> BatchViews:
        x1 = self.render(idx, epoch, WEAK)
        x2 = self.render(idx, epoch, STRONG_A) if strong_views else None
        x3 = self.render(idx, epoch, STRONG_B) if strong_views else None
        return BatchViews(x1, ds.noisy_labels[idx], ds.num_classes, x2, x3)


@dataclass
class EpochStats:
    losses: LossBreakdown
    steps: int


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    n = len(items)
    sup = sum(b.l_sup for b in items) / n
    intr = sum(b.l_int for b in items) / n
    struct = sum(b.l_str for b in items) / n
    return LossBreakdown(sup, intr, struct, sup + intr + struct)


def train_epoch(ds: ImageDataset, params: ModelParams, opt_state: AdamState, cfg: TrainConfig,
                epoch: int, ctx: ViewContext) -> EpochStats:
    """One pass of shuffled mini-batches; trailing batches smaller than 2 are dropped."""
    if len(ds) == 0:
        raise ParameterError("empty training set")
    rng = np.random.default_rng([ctx.data_seed, cfg.seed, epoch])
    order = rng.permutation(len(ds))
    loss_cfg = cfg.loss_config()
    strong_views = loss_cfg.intrinsic or loss_cfg.structural
    lr = lr_at(epoch, cfg)
    tensors = params.tensors()
    names = [n for n, _ in params.named_tensors()]
    history = []
    for step, start in enumerate(range(0, len(ds), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        if idx.size < 2:
            continue
        views = ctx.batch(ds, idx, epoch, strong_views)
        params.zero_grad()
        try:
            breakdown = total_loss(views, params, loss_cfg, rng=rng)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {step}: {exc}") from exc
        if not np.isfinite(breakdown.total):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {step}")
        ad.backward(breakdown.objective)
        adam_step(tensors, opt_state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, names)
        breakdown.objective = None
        history.append(breakdown)
    if not history:
        raise ParameterError("dataset too small for a single batch of 2")
    return EpochStats(_mean_breakdown(history), len(history))


@dataclass
class TrainingRun:
    rows: list[MetricsRow]
    params: ModelParams
    stats: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)


def make_context(train_ds: ImageDataset, cfg: TrainConfig, data_seed: int) -> ViewContext:
    stats = channel_stats(train_ds.images) if cfg.standardize else None
    return ViewContext(train_ds.images, stats, cfg.transforms(False), cfg.transforms(True), data_seed, cfg.seed)


def run_training(train_ds: ImageDataset, test_ds: ImageDataset, cfg: TrainConfig, data_seed: int = 0,
                 on_epoch: Callable[[MetricsRow], None] | None = None) -> TrainingRun:
    """Train from a fresh seeded initialization and record one :class:`MetricsRow` per epoch."""
    if train_ds.num_classes != test_ds.num_classes:
        raise ParameterError("train and test sets disagree on the number of classes")
    if train_ds.image_shape != test_ds.image_shape:
        raise ParameterError("train and test images differ in shape")
    ctx = make_context(train_ds, cfg, data_seed)
    params = init_params(cfg.network(int(np.prod(train_ds.image_shape)), train_ds.num_classes), cfg.seed)
    opt = AdamState.zeros_like(params.tensors())
    rows = []
    for epoch in range(cfg.epochs):
        stats = train_epoch(train_ds, params, opt, cfg, epoch, ctx)
        row = evaluate(params, train_ds, test_ds, ctx.stats, epoch, stats.losses)
        log.info("%s seed=%d epoch=%d loss=%.4f test_acc=%.4f", cfg.label, cfg.seed, epoch,
                 row.l_total, row.test_accuracy)
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return TrainingRun(rows, params, ctx.stats)


def evaluate(params: ModelParams, train_ds: ImageDataset, test_ds: ImageDataset, stats, epoch: int,
             losses: LossBreakdown) -> MetricsRow:
    clean_acc, memorized = memorization_from_predictions(predictions(params, train_ds, stats), train_ds)
    return MetricsRow(epoch, losses.l_sup, losses.l_int, losses.l_str, losses.total,
                      test_accuracy(params, test_ds, stats), clean_acc, memorized)
