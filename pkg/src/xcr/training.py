"""Training loops: bottleneck objective for the explainer pair, vanilla and
counterfactually-augmented classifier training, post-hoc temperature fitting,
and checkpoint serialization.

All loops are deterministic given (seed, config, dataset order): random draws
come from labelled :class:`RngStream` children, and gradient accumulation
follows tape order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import nets
from . import tensor as T
from .errors import ContractViolationError, DataFormatError, TrainingDivergedError
from .explainer import (
    IBConfig,
    PatchGrid,
    apply_patch_weights,
    build_explanation,
    hard_topk_rows,
    sample_gumbel,
    sample_relaxed_mask,
    selector_logits,
)
from .nets import ModelParams
from .rng import RngStream

CHECKPOINT_MAGIC = b"XCRCKPT1"

# keeps log(p) defined when a patch probability underflows to exactly zero
_P_FLOOR = 1e-300


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    counterfactual_weight: float = 0.5

    def validate(self):
        problems = []
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.counterfactual_weight <= 1.0:
            problems.append(
                f"counterfactual_weight must be in [0,1], got {self.counterfactual_weight}"
            )
        if problems:
            raise ContractViolationError("; ".join(problems))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float = float("nan")
    train_acc: float = float("nan")
    val_acc: float = float("nan")
    train_acc_expl: float = float("nan")
    val_acc_expl: float = float("nan")


@dataclass
class History:
    """One record per completed epoch, for plain and explanation-mapped inputs."""

    records: list[EpochRecord] = field(default_factory=list)

    FIELDS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc",
              "train_acc_expl", "val_acc_expl")

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.FIELDS) + "\n")
            for r in self.records:
                fh.write(",".join(repr(getattr(r, f)) for f in self.FIELDS) + "\n")


# ---------------------------------------------------------------------------
# losses

def kl_to_uniform(p: np.ndarray) -> float:
    """KL divergence from a categorical p to the uniform prior over its support.

    Computes sum_j p_j log(p_j * d) with 0 log 0 := 0; non-negative, zero iff
    p is uniform.
    """
    p = np.asarray(p, dtype=np.float64)
    d = p.shape[-1]
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-6:
        raise ContractViolationError("kl_to_uniform: p must be a probability vector")
    return float(np.sum(p * np.log(np.maximum(p, _P_FLOOR) * d)))


def softmax_cross_entropy(logits, labels: np.ndarray):
    """Mean cross-entropy of class logits against integer labels (dual mode)."""
    n, classes = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= classes:
        raise ContractViolationError(
            f"label out of range [0, {classes}): {labels.min()}..{labels.max()}"
        )
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), labels] = 1.0
    picked = T.reduce_sum(T.mul(T.log_softmax(logits), onehot), axis=-1)
    return T.mul(T.reduce_mean(picked), np.float64(-1.0))


def ib_loss(q_logits, y: np.ndarray, p_patch, beta: float):
    """Bottleneck training loss: cross-entropy plus beta times the mean
    per-instance KL of the patch distribution to uniform.

    Dual mode: ndarrays give a float-valued scalar, tape Nodes a scalar Node
    (patch probabilities must then be strictly positive up to the 1e-300
    floor, which the selector's softmax guarantees).
    """
    ce = softmax_cross_entropy(q_logits, y)
    d = p_patch.shape[-1]
    safe_p = T.maximum(p_patch, np.float64(_P_FLOOR))
    per_row = T.reduce_sum(T.mul(p_patch, T.add(T.log(safe_p), np.float64(np.log(d)))), axis=-1)
    kl = T.reduce_mean(per_row)
    return T.add(ce, T.mul(kl, np.float64(beta)))


def explainer_loss(selector: ModelParams, approximator: ModelParams,
                   x: np.ndarray, y: np.ndarray, ib: IBConfig, grid: PatchGrid,
                   gumbel_noise: np.ndarray, tape: T.Tape):
    """Build the full differentiable objective for one batch on a tape.

    ``gumbel_noise`` has shape [L, k, B, d]: L relaxed-mask draws, each the
    element-wise max of k concrete vectors. Returns (loss node, param nodes).
    """
    b = x.shape[0]
    sel_nodes = {k: tape.watch(v) for k, v in selector.params.items()}
    app_nodes = {k: tape.watch(v) for k, v in approximator.params.items()}
    scores = nets.forward(selector.arch, sel_nodes, tape.watch(x))
    logp = T.log_softmax(scores)

    p = T.exp(logp)
    safe_p = T.maximum(p, np.float64(_P_FLOOR))
    kl_rows = T.reduce_sum(
        T.mul(p, T.add(T.log(safe_p), np.float64(np.log(grid.d)))), axis=-1
    )
    kl = T.reduce_mean(kl_rows)

    inv_tau = np.float64(1.0 / ib.tau)
    ce_total = None
    for l in range(ib.num_samples):
        zstar = None
        for i in range(ib.k):
            perturbed = T.mul(T.add(logp, gumbel_noise[l, i]), inv_tau)
            c = T.exp(T.log_softmax(perturbed))
            zstar = c if zstar is None else T.maximum(zstar, c)
        tx = apply_patch_weights(x, zstar, grid)
        q = nets.forward(approximator.arch, app_nodes, tx)
        ce_l = softmax_cross_entropy(q, y)
        ce_total = ce_l if ce_total is None else T.add(ce_total, ce_l)
    ce = T.mul(ce_total, np.float64(1.0 / ib.num_samples))
    loss = T.add(ce, T.mul(kl, np.float64(ib.beta)))
    return loss, sel_nodes, app_nodes


# ---------------------------------------------------------------------------
# optimizer

class _Sgd:
    """SGD with momentum, weight decay, and x0.2 step decay at 50%/75% of epochs."""

    def __init__(self, params: dict[str, np.ndarray], tc: TrainConfig):
        self.params = params
        self.tc = tc
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_at(self, epoch: int) -> float:
        frac = epoch / self.tc.epochs
        factor = 1.0
        if frac >= 0.5:
            factor *= 0.2
        if frac >= 0.75:
            factor *= 0.2
        return self.tc.learning_rate * factor

    def step(self, grads: dict[str, np.ndarray], epoch: int):
        lr = self.lr_at(epoch)
        for name, w in self.params.items():
            g = grads[name]
            if self.tc.weight_decay:
                g = g + self.tc.weight_decay * w
            v = self.velocity[name]
            v *= self.tc.momentum
            v += g
            w -= lr * v


def _check_finite(loss_val: float, epoch: int, batch: int):
    if not np.isfinite(loss_val):
        raise TrainingDivergedError(
            f"loss diverged to {loss_val} at epoch {epoch}, batch {batch}"
        )


# ---------------------------------------------------------------------------
# evaluation helpers

def _accuracy(model: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    probs = nets.model_probs(model, x)
    return float(np.mean(probs.argmax(axis=1) == y))


def _explained_inputs(x: np.ndarray, selector: ModelParams, ib: IBConfig,
                      grid: PatchGrid) -> np.ndarray:
    """Deterministic explanation-mapped copies of x (no sampling; used by evals)."""
    logp = selector_logits(selector, x).logp
    if ib.selection_mode == "topk":
        bits = hard_topk_rows(logp, ib.k)
        return build_explanation(x, bits, grid, mode="topk")
    return build_explanation(x, logp, grid, mode="softmax")


def _mean_ib_loss(selector: ModelParams, approximator: ModelParams, x, y,
                  ib: IBConfig, grid: PatchGrid, rng: RngStream,
                  batch_size: int = 512) -> float:
    total, n = 0.0, 0
    for i in range(0, x.shape[0], batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        logp = selector_logits(selector, xb).logp
        p = np.exp(logp)
        mask = sample_relaxed_mask(logp, ib.k, ib.tau, rng)
        tx = apply_patch_weights(xb, mask.zstar, grid)
        q = nets.forward(approximator.arch, approximator.params, tx)
        val = float(ib_loss(q, yb, p, ib.beta))
        total += val * xb.shape[0]
        n += xb.shape[0]
    return total / max(n, 1)


def _mean_ce(model: ModelParams, x: np.ndarray, y: np.ndarray,
             batch_size: int = 512) -> float:
    total, n = 0.0, 0
    for i in range(0, x.shape[0], batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        logits = nets.forward(model.arch, model.params, xb)
        total += float(softmax_cross_entropy(logits, yb)) * xb.shape[0]
        n += xb.shape[0]
    return total / max(n, 1)


# ---------------------------------------------------------------------------
# explainer training

def train_explainer(dataset, ib: IBConfig, tc: TrainConfig, val=None,
                    d_override: int | None = None):
    """Fit selector and approximator to the original labels under the
    bottleneck objective; returns (selector, approximator, History).
    """
    tc.validate()
    x, y = dataset.images, dataset.labels
    grid = PatchGrid.for_images(x.shape, ib.patch_size)
    ib.validate(grid.d)
    d = d_override or grid.d
    in_shape = x.shape[1:]
    root = RngStream(tc.seed)
    selector = nets.init_model("selector", in_shape, d, root.split("init-selector"))
    approximator = nets.init_model(
        "approximator", in_shape, dataset.classes, root.split("init-approximator")
    )
    opt_sel = _Sgd(selector.params, tc)
    opt_app = _Sgd(approximator.params, tc)
    history = History()
    eval_rng = root.split("eval")

    n = x.shape[0]
    for epoch in range(tc.epochs):
        order = root.split("order", epoch).permutation(n)
        gumbel_rng = root.split("gumbel", epoch)
        epoch_loss, seen = 0.0, 0
        for bi, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            xb, yb = x[idx], y[idx]
            noise = sample_gumbel((ib.num_samples, ib.k, xb.shape[0], grid.d), gumbel_rng)
            tape = T.Tape()
            loss, sel_nodes, app_nodes = explainer_loss(
                selector, approximator, xb, yb, ib, grid, noise, tape
            )
            loss_val = float(loss.value)
            _check_finite(loss_val, epoch, bi)
            grads = T.backward(tape, loss)
            opt_sel.step({k: grads[v.nid] for k, v in sel_nodes.items()}, epoch)
            opt_app.step({k: grads[v.nid] for k, v in app_nodes.items()}, epoch)
            epoch_loss += loss_val * xb.shape[0]
            seen += xb.shape[0]

        rec = EpochRecord(epoch, epoch_loss / seen)
        rec.train_acc = _accuracy(approximator, x, y)
        rec.train_acc_expl = _accuracy(
            approximator, _explained_inputs(x, selector, ib, grid), y
        )
        if val is not None:
            rec.val_loss = _mean_ib_loss(
                selector, approximator, val.images, val.labels, ib, grid,
                eval_rng.split("val-loss", epoch),
            )
            rec.val_acc = _accuracy(approximator, val.images, val.labels)
            rec.val_acc_expl = _accuracy(
                approximator, _explained_inputs(val.images, selector, ib, grid), val.labels
            )
        history.append(rec)
    return selector, approximator, history


# ---------------------------------------------------------------------------
# counterfactual batches and classifier training

def make_counterfactual_batch(batch, selector: ModelParams, ib: IBConfig,
                              rng: RngStream, weight: float = 0.5):
    """Append explanation-mapped copies of the leading ``weight`` fraction of
    the batch, with labels preserved. Masks come from a fresh relaxed draw:
    its top-k bits in topk mode, its softmax weights in softmax mode.
    """
    x, y = batch
    b = x.shape[0]
    n_cf = int(round(weight * b))
    if n_cf == 0:
        return x, y
    grid = PatchGrid.for_images(x.shape, ib.patch_size)
    src_x, src_y = x[:n_cf], y[:n_cf]
    logp = selector_logits(selector, src_x).logp
    mask = sample_relaxed_mask(logp, ib.k, ib.tau, rng)
    if ib.selection_mode == "topk":
        bits = hard_topk_rows(mask.zstar, ib.k)
        tx = build_explanation(src_x, bits, grid, mode="topk")
    else:
        tx = build_explanation(src_x, mask.zstar, grid, mode="softmax")
    return np.concatenate([x, tx]), np.concatenate([y, src_y])


def _fit_classifier(model: ModelParams, dataset, tc: TrainConfig, val=None,
                    batch_hook=None, expl_fn=None):
    """Shared supervised loop; ``batch_hook(epoch, bi, xb, yb)`` may augment
    batches, ``expl_fn(x)`` supplies explanation-mapped inputs for History.
    """
    tc.validate()
    x, y = dataset.images, dataset.labels
    root = RngStream(tc.seed)
    opt = _Sgd(model.params, tc)
    history = History()
    n = x.shape[0]
    expl_train = expl_fn(x) if expl_fn is not None else None
    expl_val = expl_fn(val.images) if expl_fn is not None and val is not None else None
    for epoch in range(tc.epochs):
        order = root.split("order", epoch).permutation(n)
        epoch_loss, seen = 0.0, 0
        for bi, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            xb, yb = x[idx], y[idx]
            if batch_hook is not None:
                xb, yb = batch_hook(epoch, bi, xb, yb)
            tape = T.Tape()
            pnodes = {k: tape.watch(v) for k, v in model.params.items()}
            logits = nets.forward(model.arch, pnodes, tape.watch(xb))
            loss = softmax_cross_entropy(logits, yb)
            loss_val = float(loss.value)
            _check_finite(loss_val, epoch, bi)
            grads = T.backward(tape, loss)
            opt.step({k: grads[v.nid] for k, v in pnodes.items()}, epoch)
            epoch_loss += loss_val * xb.shape[0]
            seen += xb.shape[0]

        rec = EpochRecord(epoch, epoch_loss / seen)
        rec.train_acc = _accuracy(model, x, y)
        if expl_train is not None:
            rec.train_acc_expl = _accuracy(model, expl_train, y)
        if val is not None:
            rec.val_loss = _mean_ce(model, val.images, val.labels)
            rec.val_acc = _accuracy(model, val.images, val.labels)
            if expl_val is not None:
                rec.val_acc_expl = _accuracy(model, expl_val, val.labels)
        history.append(rec)
    return model, history


def train_vanilla(model: ModelParams, dataset, tc: TrainConfig, val=None):
    """Plain supervised training, no counterfactuals."""
    return _fit_classifier(model.copy(), dataset, tc, val=val)


def retrain_blackbox(model: ModelParams, dataset, selector: ModelParams,
                     ib: IBConfig, tc: TrainConfig, val=None):
    """Supervised training where every batch is extended with counterfactual
    explanation inputs from the frozen selector.
    """
    grid = PatchGrid.for_images(dataset.images.shape, ib.patch_size)
    cf_root = RngStream(tc.seed).split("counterfactual")

    def hook(epoch, bi, xb, yb):
        return make_counterfactual_batch(
            (xb, yb), selector, ib, cf_root.split(epoch, bi),
            weight=tc.counterfactual_weight,
        )

    def expl(ximgs):
        return _explained_inputs(ximgs, selector, ib, grid)

    return _fit_classifier(model.copy(), dataset, tc, val=val,
                           batch_hook=hook, expl_fn=expl)


# ---------------------------------------------------------------------------
# temperature scaling

def _nll_of_scaled(logits: np.ndarray, y: np.ndarray, temp: float) -> float:
    ls = T.log_softmax(logits / temp)
    return float(-np.mean(ls[np.arange(len(y)), y]))


def fit_temperature(logits_val: np.ndarray, y_val: np.ndarray,
                    bounds: tuple[float, float] = (0.05, 10.0)) -> float:
    """Scalar temperature minimising validation NLL of softmax(logits / T).

    Never returns a temperature worse than T=1 on the given set.
    """
    logits_val = np.asarray(logits_val, dtype=np.float64)
    y_val = np.asarray(y_val)
    if logits_val.shape[0] < 1:
        raise ContractViolationError("fit_temperature: empty validation set")
    res = minimize_scalar(
        lambda t: _nll_of_scaled(logits_val, y_val, t),
        bounds=bounds, method="bounded", options={"xatol": 1e-5},
    )
    t_star = float(res.x)
    if _nll_of_scaled(logits_val, y_val, t_star) <= _nll_of_scaled(logits_val, y_val, 1.0):
        return t_star
    return 1.0


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: ModelParams, path) -> None:
    """Write magic, architecture tag, then (name, shape, float64 LE data) per parameter."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        tag = model.arch.encode("utf-8")
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        for name, arr in model.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError("bad checkpoint magic", offset=0)
    pos = 8

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise DataFormatError(f"truncated checkpoint while reading {what}", offset=pos)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    (taglen,) = struct.unpack("<I", take(4, "tag length"))
    arch = take(taglen, "architecture tag").decode("utf-8")
    params: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (namelen,) = struct.unpack("<I", take(4, "name length"))
        name = take(namelen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = take(8 * count, f"data of {name}")
        params[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return ModelParams(arch, params)
