"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import BatchViews, LossConfig, MixupDraw, total_loss
from .model import ModelParams, NetworkConfig, init_params

STEP = 1e-6
RTOL = 1e-4
ATOL = 1e-7


def numeric_gradient(fn: Callable[[], float], t: ad.Tensor, step: float = STEP) -> np.ndarray:
    """d fn / d t by central differences, perturbing ``t.data`` in place."""
    flat = t.data.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(t.shape)


def mismatch(analytic: np.ndarray, numeric: np.ndarray, rtol: float = RTOL, atol: float = ATOL) -> np.ndarray:
    """Boolean mask of entries outside ``max(rtol * scale, atol)``."""
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.abs(analytic - numeric) > np.maximum(rtol * scale, atol)


def analytic_gradients(fn: Callable[[], ad.Tensor], tensors: list[ad.Tensor]) -> list[np.ndarray]:
    ad.zero_grad(tensors)
    ad.backward(fn())
    return [t.grad.copy() for t in tensors]


@dataclass
class GradReport:
    name: str
    size: int
    bad: int
    max_abs_err: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.bad == 0


def check_tensors(fn: Callable[[], ad.Tensor], named: list[tuple[str, ad.Tensor]],
                  step: float = STEP, rtol: float = RTOL, atol: float = ATOL) -> list[GradReport]:
    analytic = analytic_gradients(fn, [t for _, t in named])
    reports = []
    for (name, t), grad in zip(named, analytic):
        start = time.perf_counter()
        num = numeric_gradient(lambda: fn().item(), t, step)
        bad = mismatch(grad, num, rtol, atol)
        reports.append(GradReport(name, t.size, int(bad.sum()), float(np.abs(grad - num).max()),
                                  time.perf_counter() - start))
    return reports


# -- batched finite differences for the full loss ---------------------------------

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt((x ** 2).sum(axis=-1, keepdims=True))


def _sqdist(x: np.ndarray) -> np.ndarray:
    diff = x[..., :, None, :] - x[..., None, :, :]
    return (diff ** 2).sum(axis=-1)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class BatchedColearningLoss:
    """Plain-numpy ``colearning`` loss, vectorized over many perturbed parameter sets.

    Shares no code with the autodiff path. A perturbation of a single weight or
    bias entry only shifts one column of that layer's pre-activation, so every
    perturbed copy is produced by a column update followed by shared-weight
    matrix products for the remaining layers.
    """

    def __init__(self, params: ModelParams, views: BatchViews, draw: MixupDraw, cfg: LossConfig):
        if not (cfg.mixup and cfg.intrinsic and cfg.structural) or cfg.sup_weight != 1.0:
            raise ValueError("batched oracle covers the full colearning loss only")
        self.cfg = cfg
        self.n = len(views)
        y_hat = views.one_hot
        lam = np.asarray(draw.lam, dtype=np.float64)
        lam_col = lam.reshape(-1, 1) if lam.ndim else lam
        m = draw.permutation
        x_bar = lam_col * views.x1 + (1 - lam_col) * views.x1[m]
        self.y_bar = lam_col * y_hat + (1 - lam_col) * y_hat[m]
        self.x = np.concatenate([views.x1, x_bar, views.x2, views.x3])
        self.enc = [(w.data, b.data) for w, b in params.theta1]
        self.cls = (params.theta2[0][0].data, params.theta2[0][1].data)
        self.proj = [(w.data, b.data) for w, b in params.theta3]
        # unperturbed activations
        self.enc_in, self.enc_z = [], []
        a = self.x
        for w, b in self.enc:
            self.enc_in.append(a)
            z = a @ w + b
            self.enc_z.append(z)
            a = np.maximum(z, 0.0)
        self.u = a
        n2 = 2 * self.n
        self.c = self.u[:n2] @ self.cls[0] + self.cls[1]
        self.p1_z = self.u[n2:] @ self.proj[0][0] + self.proj[0][1]
        self.p1 = np.maximum(self.p1_z, 0.0)
        self.v = self.p1 @ self.proj[1][0] + self.proj[1][1]

    # stage functions: leading axis of every argument indexes perturbations
    def _from_encoder(self, layer: int, z: np.ndarray) -> np.ndarray:
        a = np.maximum(z, 0.0)
        for w, b in self.enc[layer + 1:]:
            a = np.maximum(a @ w + b, 0.0)
        n2 = 2 * self.n
        c = a[:, :n2] @ self.cls[0] + self.cls[1]
        p1 = np.maximum(a[:, n2:] @ self.proj[0][0] + self.proj[0][1], 0.0)
        return self.loss(c, p1 @ self.proj[1][0] + self.proj[1][1])

    def _from_proj_hidden(self, z: np.ndarray) -> np.ndarray:
        v = np.maximum(z, 0.0) @ self.proj[1][0] + self.proj[1][1]
        return self.loss(np.broadcast_to(self.c, (z.shape[0],) + self.c.shape), v)

    def _from_classifier(self, c: np.ndarray) -> np.ndarray:
        return self.loss(c, np.broadcast_to(self.v, (c.shape[0],) + self.v.shape))

    def _from_projection(self, v: np.ndarray) -> np.ndarray:
        return self.loss(np.broadcast_to(self.c, (v.shape[0],) + self.c.shape), v)

    def loss(self, c: np.ndarray, v: np.ndarray) -> np.ndarray:
        n, cfg = self.n, self.cfg
        mean = cfg.reduction == "mean"
        # supervised: mixed-label cross-entropy on the mixed inputs
        log_p = np.maximum(_log_softmax(c[:, n:]), np.log(1e-12))
        ce = -(self.y_bar * log_p).sum(axis=-1)
        sup = ce.mean(axis=-1) if mean else ce.sum(axis=-1)
        # intrinsic: InfoNCE with the 4(N-1) cross-sample denominator
        z = _normalize_rows(v)
        sim = z @ np.swapaxes(z, -1, -2) / cfg.tau
        sample = np.tile(np.arange(n), 2)
        cross = sample[:, None] != sample[None, :]
        e = np.where(cross, np.exp(sim), 0.0).sum(axis=-1)
        denom = e[:, :n] + e[:, n:]
        idx = np.arange(n)
        pos = sim[:, idx, idx + n]
        if cfg.include_positive_in_denominator:
            denom = denom + np.exp(pos)
        terms = np.log(denom) - pos
        intr = 2 * (terms.mean(axis=-1) if mean else terms.sum(axis=-1))
        # structural: Gaussian-kernel similarities, projections vs predictions
        k = 1.0 / (2 * cfg.sigma ** 2)
        p = np.exp(-k * _sqdist(_normalize_rows(v[:, :n])))
        q = np.maximum(np.exp(-k * _sqdist(np.exp(_log_softmax(c[:, :n])))), 1e-12)
        off = ~np.eye(n, dtype=bool)
        kl = np.where(off, p * np.log(p / q), 0.0).sum(axis=(-1, -2))
        struct = kl / (n * (n - 1)) if mean else kl
        return sup + intr + struct

    def base_loss(self) -> float:
        return float(self.loss(self.c[None], self.v[None])[0])

    def _targets(self):
        """(name, tensor shape, input activation, base pre-activation, continuation) per parameter tensor."""
        out = []
        for layer, ((w, b), a_in, z) in enumerate(zip(self.enc, self.enc_in, self.enc_z)):
            cont = (lambda zz, layer=layer: self._from_encoder(layer, zz))
            out.append((f"theta1.{layer}", a_in, z, cont))
        out.append(("theta2.0", self.u[:2 * self.n], self.c, self._from_classifier))
        out.append(("theta3.0", self.u[2 * self.n:], self.p1_z, self._from_proj_hidden))
        out.append(("theta3.1", self.p1, self.v, self._from_projection))
        return out

    def numeric_gradients(self, step: float = STEP, chunk: int = 512) -> dict[str, np.ndarray]:
        grads = {}
        for prefix, a_in, z, cont in self._targets():
            fan_in, fan_out = a_in.shape[1], z.shape[1]
            for kind, count in (("weight", fan_in * fan_out), ("bias", fan_out)):
                g = np.empty(count)
                for start in range(0, count, chunk):
                    ks = np.arange(start, min(start + chunk, count))
                    if kind == "weight":
                        rows, cols = ks // fan_out, ks % fan_out
                        shift = a_in[:, rows].T
                    else:
                        cols = ks
                        shift = np.ones((ks.size, a_in.shape[0]))
                    p = ks.size
                    zp = np.repeat(z[None], 2 * p, axis=0)
                    sel = np.arange(2 * p)
                    both = np.concatenate([shift, -shift]) * step
                    zp[sel, :, np.concatenate([cols, cols])] += both
                    losses = cont(zp)
                    g[start:start + p] = (losses[:p] - losses[p:]) / (2 * step)
                shape = (fan_in, fan_out) if kind == "weight" else (fan_out,)
                grads[f"{prefix}.{kind}"] = g.reshape(shape)
        return grads


@dataclass
class MasterFixture:
    params: ModelParams
    views: BatchViews
    draw: MixupDraw
    cfg: LossConfig

    def loss(self) -> ad.Tensor:
        return total_loss(self.views, self.params, self.cfg, draw=self.draw).objective


def master_fixture(seed: int = 0, loss_cfg: LossConfig | None = None) -> MasterFixture:
    """Full ``colearning`` loss on 4 samples of 8x8x1 images with 3 classes.

    Views and the MixUp draw are frozen so the loss is a deterministic function
    of the parameters.
    """
    rng = np.random.default_rng(seed)
    n, d, classes = 4, 8 * 8 * 1, 3
    views = BatchViews(rng.uniform(-1, 1, (n, d)), np.array([0, 1, 2, 1]), classes,
                       rng.uniform(-1, 1, (n, d)), rng.uniform(-1, 1, (n, d)))
    draw = MixupDraw(float(rng.beta(1.0, 1.0)), rng.permutation(n))
    params = init_params(NetworkConfig(d, classes), seed)
    return MasterFixture(params, views, draw, loss_cfg or LossConfig())


def run_master_check(seed: int = 0, step: float = STEP, rtol: float = RTOL,
                     atol: float = ATOL) -> list[GradReport]:
    """Compare backward gradients of the full loss with batched central differences, per tensor."""
    fx = master_fixture(seed)
    named = fx.params.named_tensors()
    analytic = analytic_gradients(fx.loss, [t for _, t in named])
    start = time.perf_counter()
    oracle = BatchedColearningLoss(fx.params, fx.views, fx.draw, fx.cfg)
    numeric = oracle.numeric_gradients(step)
    elapsed = time.perf_counter() - start
    reports = []
    for (name, t), grad in zip(named, analytic):
        num = numeric[name]
        bad = mismatch(grad, num, rtol, atol)
        reports.append(GradReport(name, t.size, int(bad.sum()), float(np.abs(grad - num).max()),
                                  elapsed * t.size / sum(x.size for _, x in named)))
    return reports
