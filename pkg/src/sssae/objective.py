"""Losses and exact gradients for the joint reconstruction/classification cost.

Total cost of a mini-batch::

    e_total = e_r + alpha * e_c (+ sparsity * e_s, off by default)

``e_r`` is the squared reconstruction error of the clean input, averaged over
every example in the batch.  ``e_c`` is the cross-entropy averaged over the
labeled examples only; unlabeled rows never reach the classifier.  ``e_s`` is
an optional mean L1 activity penalty on the hidden code, an extension that
defaults to zero.

Three objective modes share this machinery:

``"sssae"``        full joint model
``"autoencoder"``  classifier path removed entirely (pure denoising autoencoder)
``"classifier"``   decoder and corruption removed; plain tanh-hidden softmax net
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ModelParams, ForwardCache, classify, decode, encode
from .tensor import DTYPE, STREAM_CORRUPT, ShapeError, make_rng

LOG_FLOOR = 1e-12
MODES = ("sssae", "autoencoder", "classifier")

Gradients = ModelParams


class ConsistencyError(ValueError):
    """Cache and batch were not produced together."""


@dataclass
class Batch:
    """Rows of stacked inputs with labels; ``-1`` marks an absent label."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ShapeError(f"batch inputs must be 2-d, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(
                f"{self.labels.shape[0] if self.labels.ndim else 0} labels for {self.inputs.shape[0]} inputs"
            )

    @property
    def labeled(self) -> np.ndarray:
        return self.labels >= 0

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class LossBreakdown:
    e_r: float
    e_c: float
    e_total: float
    labeled_count: int
    total_count: int
    e_s: float = 0.0
    clamped: int = 0  # labeled rows whose true-class posterior hit LOG_FLOOR


def corrupt(x: np.ndarray, rate: float, rng: np.random.Generator | None) -> np.ndarray:
    """Zero each coordinate independently with probability ``rate``.

    Works on a single vector or a batch of rows; rows consume the stream in
    order, so a batch is corrupted exactly as its rows would be one by one.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"corruption rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return x.copy()
    if rng is None:
        raise ValueError("a generator is required when corruption rate > 0")
    keep = rng.random(x.shape) >= rate
    return np.where(keep, x, 0.0)


def reconstruction_loss(x_clean: np.ndarray, x_hat: np.ndarray) -> float:
    if x_clean.shape != x_hat.shape:
        raise ShapeError(f"input {x_clean.shape} vs reconstruction {x_hat.shape}")
    d = x_clean - x_hat
    return float(np.dot(d.ravel(), d.ravel()))


def classification_loss(h: np.ndarray, y: int) -> float:
    if not 0 <= y < h.shape[0]:
        raise ShapeError(f"class index {y} outside 0..{h.shape[0] - 1}")
    return -math.log(max(float(h[y]), LOG_FLOOR))


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown objective mode {mode!r}; expected one of {MODES}")


def _loss_terms(params, batch, alpha, rng, corruption_rate, sparsity, mode):
    """Shared forward pass; loss terms are left as numpy scalars so that an
    extended-precision caller keeps its precision."""
    _check_mode(mode)
    p = len(batch)
    if p == 0:
        raise ValueError("empty batch")
    if batch.inputs.shape[1] != params.shape.input_dim:
        raise ShapeError(f"batch width {batch.inputs.shape[1]} != model input {params.shape.input_dim}")
    mask = batch.labeled
    n_lab = int(mask.sum())
    if n_lab and np.any(batch.labels[mask] >= params.shape.num_classes):
        raise ShapeError("label index exceeds the number of classes")

    if mode == "classifier":
        x_in = batch.inputs
    else:
        x_in = corrupt(batch.inputs, corruption_rate, rng)
    z = encode(params, x_in)

    e_r = 0.0
    x_hat = np.empty((p, 0))
    if mode != "classifier":
        x_hat = decode(params, z)
        diff = batch.inputs - x_hat
        e_r = np.sum(diff * diff) / p

    e_c = 0.0
    h = None
    clamped = 0
    if mode != "autoencoder":
        h = classify(params, z[mask])
        if n_lab:
            picked = h[np.arange(n_lab), batch.labels[mask]]
            clamped = int(np.sum(picked < LOG_FLOOR))
            e_c = -np.sum(np.log(np.maximum(picked, LOG_FLOOR))) / n_lab

    e_s = np.sum(np.abs(z)) / p if sparsity else 0.0
    cache = ForwardCache(x_corrupted=x_in, z=z, x_hat=x_hat, h=h)
    return e_r, e_c, e_s, n_lab, clamped, cache


def batch_loss(
    params: ModelParams,
    batch: Batch,
    alpha: float,
    rng: np.random.Generator | None,
    corruption_rate: float,
    sparsity: float = 0.0,
    mode: str = "sssae",
) -> tuple[LossBreakdown, ForwardCache]:
    """Forward a whole batch and return its loss breakdown and activations.

    The returned cache holds batch-shaped arrays; ``cache.h`` has one row per
    labeled example (in batch order), or is None when the classifier is off.
    """
    e_r, e_c, e_s, n_lab, clamped, cache = _loss_terms(
        params, batch, alpha, rng, corruption_rate, sparsity, mode)
    e_r, e_c, e_s = float(e_r), float(e_c), float(e_s)
    total = e_c if mode == "classifier" else e_r + alpha * e_c
    if sparsity:
        total += sparsity * e_s
    loss = LossBreakdown(e_r=e_r, e_c=e_c, e_total=total, labeled_count=n_lab,
                         total_count=len(batch), e_s=e_s, clamped=clamped)
    return loss, cache


def backward(
    params: ModelParams,
    batch: Batch,
    cache: ForwardCache,
    alpha: float,
    sparsity: float = 0.0,
    mode: str = "sssae",
) -> Gradients:
    """Exact gradient of ``e_total`` as computed by :func:`batch_loss`."""
    _check_mode(mode)
    p = len(batch)
    mask = batch.labeled
    n_lab = int(mask.sum())
    if cache.z.shape != (p, params.shape.hidden_dim) or cache.x_corrupted.shape != batch.inputs.shape:
        raise ConsistencyError("cache does not match batch/params shapes")
    if mode != "autoencoder" and (cache.h is None or cache.h.shape[0] != n_lab):
        raise ConsistencyError("classifier cache rows do not match labeled count")

    z = cache.z
    grads = ModelParams.zeros(params.shape)

    if mode == "classifier":
        d_z = np.zeros_like(z)
    else:
        # d e_r / d x_hat = -2 (x - x_hat) / p, then through tanh
        d_out = (-2.0 / p) * (batch.inputs - cache.x_hat) * (1.0 - cache.x_hat * cache.x_hat)
        grads.W_D = d_out.T @ z
        grads.b_D = d_out.sum(axis=0)
        d_z = d_out @ params.W_D

    if mode != "autoencoder" and n_lab:
        weight = 1.0 if mode == "classifier" else alpha
        d_logits = cache.h.copy()
        d_logits[np.arange(n_lab), batch.labels[mask]] -= 1.0
        d_logits *= weight / n_lab
        z_lab = z[mask]
        grads.W_C = d_logits.T @ z_lab
        grads.b_C = d_logits.sum(axis=0)
        d_z[mask] += d_logits @ params.W_C

    if sparsity:
        d_z = d_z + (sparsity / p) * np.sign(z)

    d_pre = d_z * (1.0 - z * z)
    grads.W_E = d_pre.T @ cache.x_corrupted
    grads.b_E = d_pre.sum(axis=0)
    return grads


def loss_and_gradients(
    params: ModelParams,
    batch: Batch,
    alpha: float,
    rng: np.random.Generator | None,
    corruption_rate: float,
    sparsity: float = 0.0,
    mode: str = "sssae",
) -> tuple[LossBreakdown, Gradients]:
    loss, cache = batch_loss(params, batch, alpha, rng, corruption_rate, sparsity, mode)
    return loss, backward(params, batch, cache, alpha, sparsity, mode)


def numerical_gradient(
    f: Callable[[], float], arrays: list[np.ndarray], step: float
) -> list[np.ndarray]:
    """Central differences of ``f()`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    if step <= 0:
        raise ValueError("step must be positive")
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = f()
            flat[k] = orig - step
            f_minus = f()
            flat[k] = orig
            gflat[k] = (f_plus - f_minus) / (2.0 * step)
        out.append(g)
    return out


def finite_difference_gradient(
    params: ModelParams,
    batch: Batch,
    alpha: float,
    step: float,
    corruption_seed: int,
    corruption_rate: float = 0.0,
    sparsity: float = 0.0,
    mode: str = "sssae",
) -> Gradients:
    """Central-difference gradient of ``e_total`` with the corruption draw frozen.

    Loss evaluations run in ``numpy.longdouble``: in float64 the round-off of
    a central difference at step 1e-5 is around 1e-11, too coarse to check
    small gradient entries to 1e-6 relative.  Each loss component is
    differenced separately before combining so a large ``alpha * e_c`` does
    not swamp the smaller terms.
    """
    work = ModelParams(*(a.astype(np.longdouble) for a in params.arrays()))

    def components() -> np.ndarray:
        rng = make_rng(corruption_seed, STREAM_CORRUPT)
        e_r, e_c, e_s, *_ = _loss_terms(work, batch, alpha, rng, corruption_rate, sparsity, mode)
        return np.array([e_r, e_c, e_s], dtype=np.longdouble)

    if mode == "classifier":
        weights = np.array([0.0, 1.0, sparsity], dtype=np.longdouble)
    else:
        weights = np.array([1.0, alpha, sparsity], dtype=np.longdouble)

    out = []
    for arr in work.arrays():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            plus = components()
            flat[k] = orig - step
            minus = components()
            flat[k] = orig
            gflat[k] = weights @ ((plus - minus) / (2 * np.longdouble(step)))
        out.append(g.astype(DTYPE))
    return ModelParams(*out)


def max_relative_error(analytic: Gradients, numeric: Gradients, floor: float = 1e-8) -> tuple[float, str]:
    """Worst ``|a - n| / max(|a|, |n|, floor)`` over all entries, and which array held it."""
    worst, where = 0.0, ""
    for (name, a), n in zip(analytic.items(), numeric.arrays()):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel = np.abs(a - n) / denom
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
            idx = np.unravel_index(int(rel.argmax()), rel.shape)
            where = f"{name}[{', '.join(str(int(i)) for i in idx)}]"
    return worst, where
