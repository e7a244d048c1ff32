"""Small convolutional classifiers and score heads built on the tensor ops.

Architectures are registered layer lists keyed by a tag stored in
:class:`ModelParams`; the forward pass works both pure (ndarray params) and
taped (Node params), so the same code serves inference and training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractViolationError
from .rng import RngStream

# tag -> ((layer kind, arg), ...); "conv" arg = filters, "affine" arg = width
# or None for the output dimension.
ARCHITECTURES = {
    "selector": (("conv", 16), ("relu", None), ("pool", None),
                 ("conv", 32), ("relu", None), ("pool", None),
                 ("flatten", None), ("affine", None)),
    "approximator": (("conv", 16), ("relu", None), ("pool", None),
                     ("conv", 32), ("relu", None), ("pool", None),
                     ("flatten", None), ("affine", None)),
    "blackbox": (("conv", 32), ("relu", None), ("pool", None),
                 ("conv", 64), ("relu", None), ("pool", None),
                 ("flatten", None), ("affine", 128), ("relu", None),
                 ("affine", None)),
    "linear": (("flatten", None), ("affine", None)),
}


@dataclass
class ModelParams:
    """Named parameter tensors for one architecture tag."""

    arch: str
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(arch: str, in_shape: tuple[int, int, int], out_dim: int,
               rng: RngStream, dtype=np.float64) -> ModelParams:
    """He-initialised parameters for ``arch`` on images of shape (C, H, W)."""
    if arch not in ARCHITECTURES:
        raise ContractViolationError(f"unknown architecture {arch!r}")
    c, h, w = in_shape
    params: dict[str, np.ndarray] = {}
    li = 0
    for kind, arg in ARCHITECTURES[arch]:
        if kind == "conv":
            f = arg
            scale = np.sqrt(2.0 / (c * 9))
            params[f"conv{li}_w"] = (rng.normal((f, c, 3, 3)) * scale).astype(dtype)
            params[f"conv{li}_b"] = np.zeros(f, dtype=dtype)
            c = f
            li += 1
        elif kind == "pool":
            if h % 2 or w % 2:
                raise ContractViolationError(f"{arch}: cannot pool odd spatial dims {h}x{w}")
            h, w = h // 2, w // 2
        elif kind == "flatten":
            c, h, w = c * h * w, 1, 1
        elif kind == "affine":
            n_in = c
            n_out = out_dim if arg is None else arg
            scale = np.sqrt(2.0 / n_in)
            params[f"fc{li}_w"] = (rng.normal((n_in, n_out)) * scale).astype(dtype)
            params[f"fc{li}_b"] = np.zeros(n_out, dtype=dtype)
            c = n_out
            li += 1
    return ModelParams(arch, params)


def forward(arch: str, params, x):
    """Raw output scores; ``params`` maps names to ndarrays or tape Nodes."""
    if arch not in ARCHITECTURES:
        raise ContractViolationError(f"unknown architecture {arch!r}")
    h = x
    li = 0
    for kind, _arg in ARCHITECTURES[arch]:
        if kind == "conv":
            h = T.conv2d(h, params[f"conv{li}_w"], params[f"conv{li}_b"])
            li += 1
        elif kind == "relu":
            h = T.relu(h)
        elif kind == "pool":
            h = T.avgpool2d(h)
        elif kind == "flatten":
            b = h.shape[0]
            h = T.reshape(h, (b, int(np.prod(h.shape[1:]))))
        elif kind == "affine":
            h = T.add(T.matmul(h, params[f"fc{li}_w"]), params[f"fc{li}_b"])
            li += 1
    return h


def model_logits(model: ModelParams, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Pure inference over a (possibly large) batch of images."""
    outs = []
    for i in range(0, x.shape[0], batch_size):
        outs.append(forward(model.arch, model.params, x[i : i + batch_size]))
    return np.concatenate(outs, axis=0)


def model_probs(model: ModelParams, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    logits = model_logits(model, x, batch_size)
    return np.exp(T.log_softmax(logits))
