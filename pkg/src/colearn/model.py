"""Shared MLP encoder with a classifier head and a projection head.

Parameters are grouped as ``theta1`` (encoder), ``theta2`` (classifier) and
``theta3`` (projection head). Each group is a list of ``(weight, bias)``
tensor pairs with weights laid out ``fan_in x fan_out``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, FormatError, ParameterError

CHECKPOINT_MAGIC = b"CLMP"
CHECKPOINT_VERSION = 1

Layer = tuple[Tensor, Tensor]


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    num_classes: int
    encoder_widths: tuple[int, ...] = (256, 128)
    projection_dim: int = 64
    projection_hidden: int | None = None  # defaults to representation_dim

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if not self.encoder_widths:
            raise ParameterError("encoder needs at least one hidden layer")
        if self.projection_hidden is None:
            object.__setattr__(self, "projection_hidden", self.encoder_widths[-1])
        sizes = (self.input_dim, self.num_classes, self.projection_dim, self.projection_hidden,
                 *self.encoder_widths)
        if min(sizes) < 1:
            raise ParameterError("all layer widths must be >= 1")

    @property
    def representation_dim(self) -> int:
        return self.encoder_widths[-1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every linear layer in declaration order."""
        dims = [self.input_dim, *self.encoder_widths]
        shapes = list(zip(dims[:-1], dims[1:]))
        shapes.append((self.representation_dim, self.num_classes))
        shapes.append((self.representation_dim, self.projection_hidden))
        shapes.append((self.projection_hidden, self.projection_dim))
        return shapes

    def parameter_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


@dataclass
class ModelParams:
    config: NetworkConfig
    theta1: list[Layer] = field(default_factory=list)
    theta2: list[Layer] = field(default_factory=list)
    theta3: list[Layer] = field(default_factory=list)

    def layers(self) -> list[Layer]:
        return [*self.theta1, *self.theta2, *self.theta3]

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers() for t in layer]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for group in ("theta1", "theta2", "theta3"):
            for i, (w, b) in enumerate(getattr(self, group)):
                out += [(f"{group}.{i}.weight", w), (f"{group}.{i}.bias", b)]
        return out

    def zero_grad(self) -> None:
        ad.zero_grad(self.tensors())

    def copy(self) -> ModelParams:
        def dup(layers):
            return [(Tensor(w.data.copy(), requires_grad=True), Tensor(b.data.copy(), requires_grad=True))
                    for w, b in layers]
        return ModelParams(self.config, dup(self.theta1), dup(self.theta2), dup(self.theta3))


def uniform_bound(fan_in: int) -> float:
    """Kaiming-uniform half-width; the weight std is ``sqrt(2 / fan_in)``."""
    return float(np.sqrt(6.0 / fan_in))


def init_params(cfg: NetworkConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in cfg.layer_shapes():
        bound = uniform_bound(fan_in)
        w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        b = Tensor(np.zeros(fan_out), requires_grad=True)
        layers.append((w, b))
    n_enc = len(cfg.encoder_widths)
    params = ModelParams(cfg, layers[:n_enc], layers[n_enc:n_enc + 1], layers[n_enc + 1:])
    assert sum(t.size for t in params.tensors()) == cfg.parameter_count()
    return params


def _linear(x: Tensor, layer: Layer) -> Tensor:
    w, b = layer
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match layer fan-in {w.shape[0]}")
    return ad.matmul(x, w) + b


def encode(x, theta1: list[Layer]) -> Tensor:
    """Representation u = f(x): relu after every encoder layer."""
    h = ad.as_tensor(x)
    if h.data.ndim != 2:
        raise DimensionError("encode expects a flattened (batch, input_dim) array")
    for layer in theta1:
        h = ad.relu(_linear(h, layer))
    return h


def logits(u: Tensor, theta2: list[Layer]) -> Tensor:
    return _linear(u, theta2[0])


def classify(u: Tensor, theta2: list[Layer]) -> Tensor:
    """Class probabilities g(u)."""
    return ad.softmax(logits(u, theta2))


def project(u: Tensor, theta3: list[Layer]) -> Tensor:
    """Projection v = h(u); not normalized."""
    return _linear(ad.relu(_linear(u, theta3[0])), theta3[1])


def flatten(images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1)


def forward_views(x1, x2, x3, params: ModelParams) -> tuple[Tensor, Tensor, Tensor]:
    """(predictions on the weak view, projections of both strong views)."""
    y = classify(encode(x1, params.theta1), params.theta2)
    v2 = project(encode(x2, params.theta1), params.theta3)
    v3 = project(encode(x3, params.theta1), params.theta3)
    return y, v2, v3


def predict(params: ModelParams, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per row of ``x``; ties go to the lowest index."""
    out = []
    for start in range(0, x.shape[0], batch_size):
        h = x[start:start + batch_size]
        for w, b in params.theta1:
            h = np.maximum(h @ w.data + b.data, 0.0)
        w, b = params.theta2[0]
        out.append(np.argmax(h @ w.data + b.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# -- checkpoints ----------------------------------------------------------------

def checkpoint_bytes(params: ModelParams) -> bytes:
    cfg = params.config
    widths = cfg.encoder_widths
    header = struct.pack(f"<4sHIIH{len(widths)}IIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                         cfg.input_dim, cfg.num_classes, len(widths), *widths,
                         cfg.projection_hidden, cfg.projection_dim, cfg.parameter_count())
    body = b"".join(t.data.astype("<f8").tobytes() for t in params.tensors())
    return header + body


def params_from_bytes(raw: bytes) -> ModelParams:
    try:
        magic, version, input_dim, num_classes, n = struct.unpack_from("<4sHIIH", raw)
    except struct.error as exc:
        raise FormatError("truncated checkpoint header") from exc
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    offset = struct.calcsize("<4sHIIH")
    fmt = f"<{n}IIII"
    try:
        *widths, hidden, proj, count = struct.unpack_from(fmt, raw, offset)
    except struct.error as exc:
        raise FormatError("truncated checkpoint header") from exc
    offset += struct.calcsize(fmt)
    cfg = NetworkConfig(input_dim, num_classes, tuple(widths), proj, hidden)
    if count != cfg.parameter_count() or len(raw) != offset + 8 * count:
        raise FormatError("checkpoint body does not match its header")
    values = np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64)
    params = init_params(cfg, 0)
    pos = 0
    for t in params.tensors():
        t.data = values[pos:pos + t.size].reshape(t.shape).copy()
        pos += t.size
    return params


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
