"""Patch selection: per-patch distributions, relaxed top-k sampling via the
generalized Gumbel-softmax trick, hard and random k-hot masks, and the
explanation map that multiplies upsampled patch weights into the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import nets
from . import tensor as T
from .errors import ContractViolationError
from .rng import RngStream

GUMBEL_EPS = 1e-10  # uniform clamp keeping -log(-log u) finite

SELECTION_MODES = ("topk", "softmax")


@dataclass(frozen=True)
class PatchGrid:
    """Tiling of an image into square patches."""

    height: int
    width: int
    channels: int
    patch_size: int

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ContractViolationError(
                f"image {self.height}x{self.width} not divisible by patch size {self.patch_size}"
            )

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    @property
    def d(self) -> int:
        return self.rows * self.cols

    @classmethod
    def for_images(cls, images_shape: tuple, patch_size: int) -> "PatchGrid":
        _, c, h, w = images_shape
        return cls(h, w, c, patch_size)


@dataclass(frozen=True)
class IBConfig:
    """Hyperparameters of the bottleneck objective and sampler."""

    k: int
    beta: float
    tau: float = 0.1
    patch_size: int = 2
    num_samples: int = 4  # relaxed-mask draws averaged in the loss
    selection_mode: str = "topk"

    def validate(self, d: int | None = None):
        problems = []
        if self.k < 1:
            problems.append(f"k must be positive, got {self.k}")
        if d is not None and self.k > d:
            problems.append(f"k={self.k} exceeds patch count d={d}")
        if self.tau <= 0:
            problems.append(f"tau must be positive, got {self.tau}")
        if self.beta < 0:
            problems.append(f"beta must be non-negative, got {self.beta}")
        if self.num_samples < 1:
            problems.append(f"num_samples must be >= 1, got {self.num_samples}")
        if self.selection_mode not in SELECTION_MODES:
            problems.append(f"selection_mode must be one of {SELECTION_MODES}")
        if problems:
            raise ContractViolationError("; ".join(problems))


@dataclass
class SelectorOutput:
    """Per-patch log probabilities, rows normalised to logsumexp 0."""

    logp: object  # ndarray [B, d] or tape Node


@dataclass
class RelaxedMask:
    """Continuous relaxation of a k-hot mask (element-wise max of k draws)."""

    zstar: object  # ndarray [B, d] or tape Node
    samples_c: np.ndarray | None = None  # [B, k, d] concrete draws, when kept


@dataclass
class HardMask:
    """Binary mask with exactly k set bits."""

    bits: np.ndarray  # uint8 [d]
    k: int


def selector_logits(params: nets.ModelParams, x, tape: T.Tape | None = None) -> SelectorOutput:
    """Per-patch log-distribution for each image in the batch."""
    if tape is not None:
        x = tape.watch(x) if not isinstance(x, T.Node) else x
        pvals = {k: tape.watch(v) for k, v in params.params.items()}
        scores = nets.forward(params.arch, pvals, x)
    else:
        scores = nets.forward(params.arch, params.params, x)
    return SelectorOutput(T.log_softmax(scores))


def sample_gumbel(shape, rng: RngStream, eps: float = GUMBEL_EPS) -> np.ndarray:
    """Standard Gumbel variates g = -log(-log u), u uniform clamped to [eps, 1-eps]."""
    u = np.clip(rng.uniform(shape), eps, 1.0 - eps)
    return -np.log(-np.log(u))


def concrete_weights(logp, g, tau: float):
    """Temperature-tau softmax of Gumbel-perturbed log probabilities.

    Accepts [d] or [B, d] inputs, ndarray or tape Node; rows sum to 1.
    """
    if tau <= 0:
        raise ContractViolationError(f"tau must be positive, got {tau}")
    if isinstance(logp, SelectorOutput):
        logp = logp.logp
    scaled = T.mul(T.add(logp, g), np.float64(1.0 / tau))
    return T.exp(T.log_softmax(scaled))


def relaxed_khot(c_samples):
    """Element-wise maximum over the leading axis of k concrete draws.

    ``c_samples`` is [k, d] (or [B, k, d]); a list of Nodes is also accepted,
    in which case the maximum is built on the tape.
    """
    if isinstance(c_samples, (list, tuple)):
        z = c_samples[0]
        for c in c_samples[1:]:
            z = T.maximum(z, c)
        return z
    c_samples = np.asarray(c_samples)
    return c_samples.max(axis=-2)


def sample_relaxed_mask(logp: np.ndarray, k: int, tau: float, rng: RngStream,
                        keep_samples: bool = False) -> RelaxedMask:
    """Draw a relaxed k-hot mask: k independent concrete vectors, element-wise max."""
    logp = np.atleast_2d(logp)
    b, d = logp.shape
    if k > d:
        raise ContractViolationError(f"k={k} exceeds d={d}")
    g = sample_gumbel((b, k, d), rng)
    cs = np.exp(T.log_softmax((logp[:, None, :] + g) / tau))
    zstar = cs.max(axis=1)
    return RelaxedMask(zstar, cs if keep_samples else None)


def hard_topk(logp: np.ndarray, k: int) -> HardMask:
    """k-hot mask at the k largest entries; ties broken by lowest index."""
    logp = np.asarray(logp)
    d = logp.shape[-1]
    if logp.ndim != 1:
        raise ContractViolationError(f"hard_topk expects a single row, got shape {logp.shape}")
    if k > d:
        raise ContractViolationError(f"k={k} exceeds d={d}")
    order = np.argsort(-logp, kind="stable")
    bits = np.zeros(d, dtype=np.uint8)
    bits[order[:k]] = 1
    return HardMask(bits, k)


def hard_topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Batched top-k bits, [B, d] -> [B, d] uint8, same tie rule as hard_topk."""
    scores = np.atleast_2d(scores)
    b, d = scores.shape
    if k > d:
        raise ContractViolationError(f"k={k} exceeds d={d}")
    order = np.argsort(-scores, axis=1, kind="stable")
    bits = np.zeros((b, d), dtype=np.uint8)
    np.put_along_axis(bits, order[:, :k], 1, axis=1)
    return bits


def random_khot(d: int, k: int, rng: RngStream) -> HardMask:
    """Uniformly random k-subset of d patches."""
    if k > d:
        raise ContractViolationError(f"k={k} exceeds d={d}")
    keys = rng.uniform(d)
    order = np.argsort(keys, kind="stable")
    bits = np.zeros(d, dtype=np.uint8)
    bits[order[:k]] = 1
    return HardMask(bits, k)


def apply_patch_weights(x, weights, grid: PatchGrid):
    """Upsample per-patch weights to pixel resolution and multiply into x.

    ``weights`` is [B, d] (ndarray or Node); the weight map broadcasts over
    channels. This is the raw explanation product, before any selection rule.
    """
    b = x.shape[0]
    if weights.shape[-1] != grid.d:
        raise ContractViolationError(
            f"weights cover {weights.shape[-1]} patches, grid has {grid.d}"
        )
    wmap = T.reshape(weights, (b, 1, grid.rows, grid.cols))
    wmap = T.upsample(wmap, grid.patch_size)
    return T.mul(wmap, x)


def _weights_from_z(z, grid: PatchGrid, mode: str) -> np.ndarray:
    if isinstance(z, HardMask):
        rows = z.bits[None, :].astype(np.float64)
    elif isinstance(z, (list, tuple)) and z and isinstance(z[0], HardMask):
        rows = np.stack([m.bits for m in z]).astype(np.float64)
    else:
        rows = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if mode == "topk":
        uniq = np.unique(rows)
        if not np.all(np.isin(uniq, (0.0, 1.0))):
            raise ContractViolationError("topk mode requires binary masks; pass HardMask bits")
        return rows
    if mode == "softmax":
        return np.exp(T.log_softmax(rows))
    raise ContractViolationError(f"unknown selection mode {mode!r}")


def build_explanation(x: np.ndarray, z, grid: PatchGrid, mode: str = "topk") -> np.ndarray:
    """Explanation map: selection weights upsampled to the image and applied.

    topk mode expects k-hot bits (a HardMask, a list of them, or a binary
    [B, d] array) and zeroes everything outside the selected patches; softmax
    mode turns scores z into per-patch softmax weights.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[2] != grid.height or x.shape[3] != grid.width:
        raise ContractViolationError(f"images {x.shape} do not match grid {grid}")
    weights = _weights_from_z(z, grid, mode)
    if weights.shape[0] == 1 and x.shape[0] != 1:
        weights = np.repeat(weights, x.shape[0], axis=0)
    if weights.shape[0] != x.shape[0]:
        raise ContractViolationError(
            f"{weights.shape[0]} masks for {x.shape[0]} images"
        )
    return apply_patch_weights(x, weights, grid)


def export_masks(path, masks, ids: Iterable | None = None) -> None:
    """One line per instance: id then d space-separated bits or weights."""
    if isinstance(masks, HardMask):
        masks = [masks]
    rows = []
    for m in masks:
        rows.append(np.asarray(m.bits if isinstance(m, HardMask) else m))
    if ids is None:
        ids = range(len(rows))
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in zip(ids, rows):
            if row.dtype.kind in "ui":
                body = " ".join(str(int(v)) for v in row)
            else:
                body = " ".join(repr(float(v)) for v in row)
            fh.write(f"{i} {body}\n")


def topk_recovery(logp_rows: np.ndarray, informative: np.ndarray, k: int) -> float:
    """Mean fraction of an instance's planted patches found in its top-k."""
    bits = hard_topk_rows(logp_rows, k)
    hits = []
    for row_bits, inf in zip(bits, informative):
        inf = np.asarray(inf, dtype=int)
        hits.append(row_bits[inf].sum() / len(inf))
    return float(np.mean(hits))
