"""Supervised, intrinsic-similarity and structural-similarity losses.

All batch reductions default to the mean so that the unit-weighted sum of the
three terms does not depend on batch size; ``reduction="sum"`` restores plain
summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegeneracyError, ParameterError
from .model import ModelParams, classify, encode, logits, project

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    alpha: float = 1.0
    sigma: float = 0.5
    reduction: str = "mean"
    include_positive_in_denominator: bool = False
    per_sample_lambda: bool = False
    mixup: bool = True
    intrinsic: bool = True
    structural: bool = True
    sup_weight: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError("tau must be positive")
        if self.alpha <= 0:
            raise ParameterError("alpha must be positive")
        if self.sigma <= 0:
            raise ParameterError("sigma must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ParameterError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass
class LossBreakdown:
    l_sup: float
    l_int: float
    l_str: float
    total: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_terms(cls, sup: Tensor, intr: Tensor | None, struct: Tensor | None) -> LossBreakdown:
        objective = sup
        for term in (intr, struct):
            if term is not None:
                objective = objective + term
        l_sup = sup.item()
        l_int = intr.item() if intr is not None else 0.0
        l_str = struct.item() if struct is not None else 0.0
        return cls(l_sup, l_int, l_str, l_sup + l_int + l_str, objective)


@dataclass
class BatchViews:
    """Flattened, normalized views of one mini-batch plus its noisy labels."""
    x1: np.ndarray
    labels: np.ndarray
    num_classes: int
    x2: np.ndarray | None = None
    x3: np.ndarray | None = None

    @property
    def one_hot(self) -> np.ndarray:
        return one_hot(self.labels, self.num_classes)

    def __len__(self) -> int:
        return self.x1.shape[0]


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    return ad.mean(per_sample) if reduction == "mean" else ad.sum(per_sample)


# -- supervised ------------------------------------------------------------------

def cross_entropy(y_hat: np.ndarray, y_pred: Tensor, reduction: str = "mean") -> Tensor:
    """-sum_c y_hat * log(y_pred) per row, with probabilities floored at 1e-12."""
    log_p = ad.log(ad.clip_min(ad.as_tensor(y_pred), PROB_FLOOR))
    return _reduce(ad.scale(ad.sum(ad.mul(y_hat, log_p), axis=1), -1.0), reduction)


def cross_entropy_logits(y_hat: np.ndarray, z: Tensor, reduction: str = "mean") -> Tensor:
    """Same as :func:`cross_entropy` on ``softmax(z)`` but through ``log_softmax``."""
    log_p = ad.clip_min(ad.log_softmax(z), LOG_FLOOR)
    return _reduce(ad.scale(ad.sum(ad.mul(y_hat, log_p), axis=1), -1.0), reduction)


@dataclass(frozen=True)
class MixupDraw:
    lam: float | np.ndarray
    permutation: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.permutation)
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ParameterError("mixup permutation must be a bijection")
        lam = np.asarray(self.lam)
        if np.any(lam < 0) or np.any(lam > 1):
            raise ParameterError("mixup lambda must lie in [0, 1]")


def draw_mixup(batch_size: int, alpha: float, rng: np.random.Generator,
               per_sample: bool = False) -> MixupDraw:
    if batch_size < 2:
        raise ParameterError("mixup needs a batch of at least 2")
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    lam = rng.beta(alpha, alpha, size=batch_size) if per_sample else float(rng.beta(alpha, alpha))
    return MixupDraw(lam, rng.permutation(batch_size))


def mixup(x: np.ndarray, y_hat: np.ndarray, alpha: float = 1.0, rng: np.random.Generator | None = None,
          draw: MixupDraw | None = None) -> tuple[np.ndarray, np.ndarray, MixupDraw]:
    """Interpolate each sample (and its one-hot label) with a random partner from the batch."""
    if x.shape[0] < 2:
        raise ParameterError("mixup needs a batch of at least 2")
    if draw is None:
        if rng is None:
            raise ParameterError("mixup needs a generator or an explicit draw")
        draw = draw_mixup(x.shape[0], alpha, rng)
    lam = np.asarray(draw.lam, dtype=np.float64)
    lam = lam.reshape(lam.shape + (1,)) if lam.ndim else lam
    m = draw.permutation
    return lam * x + (1 - lam) * x[m], lam * y_hat + (1 - lam) * y_hat[m], draw


def supervised_mixup_loss(y_bar: np.ndarray, y_pred_mixed: Tensor, reduction: str = "mean") -> Tensor:
    """Cross-entropy of predictions on the mixed inputs against the mixed labels."""
    return cross_entropy(y_bar, y_pred_mixed, reduction)


# -- intrinsic similarity ---------------------------------------------------------

def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= ad.NORM_EPS or nb <= ad.NORM_EPS:
        raise DegeneracyError("cosine similarity of a near-zero vector")
    return float(a @ b / (na * nb))


def info_nce_terms(v2: Tensor, v3: Tensor, tau: float, include_positive: bool = False) -> Tensor:
    """Vector of l(v2_i, v3_i) over the batch.

    The denominator for sample ``i`` sums exp(D/tau) over both views of ``i``
    against both views of every ``j != i`` (4(N-1) terms). It is symmetric in
    the two views, so l(v3_i, v2_i) has the same value.
    """
    n = v2.shape[0]
    if n < 2:
        raise ParameterError("InfoNCE needs a batch of at least 2")
    if tau <= 0:
        raise ParameterError("tau must be positive")
    z = ad.l2_normalize(ad.concat([v2, v3]))
    # cosines are <= 1, so shifting by 1/tau keeps every exponent <= 0
    shift = 1.0 / tau
    s = ad.scale(ad.matmul(z, ad.transpose(z)), 1.0 / tau)
    sample = np.tile(np.arange(n), 2)
    cross = (sample[:, None] != sample[None, :]).astype(np.float64)
    e = ad.mul(ad.exp(ad.sub(s, shift)), cross)
    rows = ad.sum(e, axis=1)
    denom = ad.add(rows[:n], rows[n:])
    idx = np.arange(n)
    pos = ad.sub(s[idx, idx + n], shift)
    if include_positive:
        denom = ad.add(denom, ad.exp(pos))
    return ad.sub(ad.log(denom), pos)


def info_nce_pair(i: int, a: int, b: int, views: dict[int, Tensor], tau: float,
                  include_positive: bool = False) -> Tensor:
    """l(v_a^(i), v_b^(i)) for view tags ``a, b`` in {2, 3}."""
    if {a, b} != {2, 3}:
        raise ParameterError("view tags must be 2 and 3")
    return info_nce_terms(views[a], views[b], tau, include_positive)[i]


def intrinsic_loss(v2: Tensor, v3: Tensor, tau: float = 0.5, reduction: str = "mean",
                   include_positive: bool = False) -> Tensor:
    """Reduced over i of l(v2_i, v3_i) + l(v3_i, v2_i)."""
    terms = info_nce_terms(v2, v3, tau, include_positive)
    return ad.scale(_reduce(terms, reduction), 2.0)


# -- structural similarity ------------------------------------------------------------

def similarity_metric(d, sigma: float = 0.5):
    """Gaussian kernel normalized so that p(0) = 1."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ParameterError("distance must be non-negative")
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    out = np.exp(-d ** 2 / (2 * sigma ** 2))
    return float(out) if out.ndim == 0 else out


def structural_loss(v: Tensor, y_pred: Tensor, sigma: float = 0.5, reduction: str = "mean") -> Tensor:
    """KL-style mismatch between pairwise similarities of projections and of predictions.

    Projections are L2-normalized first; predictions are used as given.
    Reduced over ordered pairs ``i != j``.
    """
    n = v.shape[0]
    if n < 2:
        raise ParameterError("structural loss needs a batch of at least 2")
    k = -1.0 / (2 * sigma ** 2)
    log_p = ad.scale(ad.pairwise_sqdist(ad.l2_normalize(v)), k)
    log_q = ad.clip_min(ad.scale(ad.pairwise_sqdist(ad.as_tensor(y_pred)), k), LOG_FLOOR)
    off_diag = 1.0 - np.eye(n)
    terms = ad.mul(ad.mul(ad.exp(log_p), ad.sub(log_p, log_q)), off_diag)
    total = ad.sum(terms)
    return ad.scale(total, 1.0 / (n * (n - 1))) if reduction == "mean" else total


# -- total -----------------------------------------------------------------------

def total_loss(views: BatchViews, params: ModelParams, cfg: LossConfig,
               rng: np.random.Generator | None = None, draw: MixupDraw | None = None) -> LossBreakdown:
    """Sum of the enabled loss terms for one batch.

    All inputs that go through the encoder are stacked into one matrix so the
    encoder runs once per step.
    """
    y_hat = views.one_hot
    b = len(views)
    blocks: list[np.ndarray] = []
    need_clean_pred = not cfg.mixup or cfg.structural
    if need_clean_pred:
        blocks.append(views.x1)
    y_bar = None
    if cfg.mixup:
        if draw is None:
            draw = draw_mixup(b, cfg.alpha, rng, cfg.per_sample_lambda)
        x_bar, y_bar, _ = mixup(views.x1, y_hat, draw=draw)
        blocks.append(x_bar)
    contrastive = cfg.intrinsic or cfg.structural
    if contrastive:
        if views.x2 is None or views.x3 is None:
            raise ParameterError("this loss configuration needs both strong views")
        blocks += [views.x2, views.x3]

    u = encode(np.concatenate(blocks), params.theta1)
    pos = 0
    z_clean = z_mixed = None
    if need_clean_pred:
        z_clean = logits(u[pos:pos + b], params.theta2)
        pos += b
    if cfg.mixup:
        z_mixed = logits(u[pos:pos + b], params.theta2)
        pos += b
    v2 = v3 = None
    if contrastive:
        v = project(u[pos:pos + 2 * b], params.theta3)
        v2, v3 = v[:b], v[b:]

    if cfg.mixup:
        sup = cross_entropy_logits(y_bar, z_mixed, cfg.reduction)
    else:
        sup = cross_entropy_logits(y_hat, z_clean, cfg.reduction)
    if cfg.sup_weight != 1.0:
        sup = ad.scale(sup, cfg.sup_weight)
    intr = intrinsic_loss(v2, v3, cfg.tau, cfg.reduction, cfg.include_positive_in_denominator) \
        if cfg.intrinsic else None
    struct = structural_loss(v2, ad.softmax(z_clean), cfg.sigma, cfg.reduction) if cfg.structural else None
    return LossBreakdown.from_terms(sup, intr, struct)
