"""MLP classifier with a projection head.

The shared trunk maps ``x`` to a hidden representation ``h``; two linear
heads read ``h``: the classifier (logits) and the projection head (the
client-property embedding compared against virtual concepts).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from src.errors import ShapeError
from src.tensor import ParamSet, Tensor, relu, tanh

logger = logging.getLogger(__name__)

ACTIVATIONS = {"relu": relu, "tanh": tanh}


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    num_classes: int = 10
    embed_dim: int = 10
    activation: str = "relu"
    dtype: str = "float32"
    projection_gain: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = {"input_dim": self.input_dim, "embed_dim": self.embed_dim}
        dims.update({f"hidden_dims[{i}]": h for i, h in enumerate(self.hidden_dims)})
        for key, value in dims.items():
            if value <= 0:
                raise ValueError(f"ArchConfig.{key} must be positive, got {value}")
        if self.num_classes < 2:
            raise ValueError(f"ArchConfig.num_classes must be >= 2, got {self.num_classes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation {self.activation!r}; expected one of {sorted(ACTIVATIONS)}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"ArchConfig.dtype must be float32 or float64, got {self.dtype!r}")
        if self.projection_gain <= 0:
            raise ValueError(f"ArchConfig.projection_gain must be positive, got {self.projection_gain}")

    @property
    def trunk_width(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden_dims):
            shapes[f"trunk.{i}.weight"] = (fan_in, width)
            shapes[f"trunk.{i}.bias"] = (width,)
            fan_in = width
        shapes["classifier.weight"] = (fan_in, self.num_classes)
        shapes["classifier.bias"] = (self.num_classes,)
        shapes["projection.weight"] = (fan_in, self.embed_dim)
        shapes["projection.bias"] = (self.embed_dim,)
        return shapes

    def num_parameters(self) -> int:
        return int(sum(np.prod(s) for s in self.layer_shapes().values()))


@dataclass
class ModelOutput:
    logits: Tensor
    embedding: Tensor
    hidden: Tensor = field(repr=False)

    def __post_init__(self) -> None:
        if self.logits.shape[0] != self.embedding.shape[0]:
            raise ValueError("ModelOutput: logits and embedding row counts differ")
        for name, t in (("logits", self.logits), ("embedding", self.embedding)):
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"ModelOutput: {name} contain non-finite values")


def init_model(arch: ArchConfig, seed: int) -> ParamSet:
    """Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    The projection head is widened by ``projection_gain`` so that embedding
    distances are on the scale the concept sharpness expects.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(arch.dtype)
    values: dict[str, np.ndarray] = {}
    for name, shape in arch.layer_shapes().items():
        fan_in = shape[0] if len(shape) == 2 else _fan_in_of_bias(arch, name)
        bound = 1.0 / np.sqrt(fan_in)
        if name.startswith("projection."):
            bound *= arch.projection_gain
        values[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ParamSet(values, copy=False)


def _fan_in_of_bias(arch: ArchConfig, name: str) -> int:
    return arch.layer_shapes()[name.replace(".bias", ".weight")][0]


def forward(params: ParamSet, arch: ArchConfig, batch_x: np.ndarray | Tensor) -> ModelOutput:
    x = batch_x if isinstance(batch_x, Tensor) else Tensor(np.asarray(batch_x, dtype=arch.dtype))
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError("forward", x.shape, (x.shape[0] if x.ndim else 0, arch.input_dim),
                         detail="batch_x must be (B, input_dim)")
    act = ACTIVATIONS[arch.activation]
    h = x
    for i in range(len(arch.hidden_dims)):
        h = act(h @ params[f"trunk.{i}.weight"] + params[f"trunk.{i}.bias"])
    logits = h @ params["classifier.weight"] + params["classifier.bias"]
    embedding = h @ params["projection.weight"] + params["projection.bias"]
    return ModelOutput(logits=logits, embedding=embedding, hidden=h)


def predict_proba(params: ParamSet, arch: ArchConfig, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Class probabilities in float64, computed without recording a graph."""
    frozen = params.constant()
    chunks = [
        softmax(forward(frozen, arch, x[start:start + batch_size]).logits.data.astype(np.float64), axis=1)
        for start in range(0, len(x), batch_size)
    ]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, arch.num_classes))


def embed(params: ParamSet, arch: ArchConfig, x: np.ndarray, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Projection-head embeddings and trunk representations, no graph."""
    frozen = params.constant()
    zs, hs = [], []
    for start in range(0, len(x), batch_size):
        out = forward(frozen, arch, x[start:start + batch_size])
        zs.append(out.embedding.data.astype(np.float64))
        hs.append(out.hidden.data.astype(np.float64))
    if not zs:
        return np.zeros((0, arch.embed_dim)), np.zeros((0, arch.trunk_width))
    return np.concatenate(zs), np.concatenate(hs)
