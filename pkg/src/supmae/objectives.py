"""Reconstruction loss, tempered cross-entropy and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

NORM_PIX_EPS = 1e-6


class DataError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TrainingAbort(RuntimeError):
    def __init__(self, msg: str, last_good_step: int | None = None):
        super().__init__(msg)
        self.last_good_step = last_good_step


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_cls: float = 0.01
    tau: float = 10.0

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_cls < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_rec == 0 and self.lambda_cls == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def norm_pix_targets(masked_pixels: np.ndarray, eps: float = NORM_PIX_EPS) -> np.ndarray:
    """Standardize each patch by its own pixel mean and variance.

    Returns a plain array: targets are constants for the backward pass.
    """
    x = np.asarray(masked_pixels)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + x.dtype.type(eps))


def reconstruction_loss(pred: Tensor, targets_normed: np.ndarray, masked_idx: np.ndarray) -> Tensor:
    """MSE over masked patches only, averaged over patches, pixels and batch.

    ``pred`` is [B, N, D] in patch order; ``targets_normed`` is [B, M, D]
    aligned with ``masked_idx`` [B, M]. Visible-position predictions receive
    exactly zero gradient.
    """
    masked_idx = np.asarray(masked_idx)
    t = np.asarray(targets_normed)
    b, n, d = pred.shape
    if masked_idx.ndim != 2 or t.shape != (b, masked_idx.shape[1], d):
        raise ContractError(f"targets {t.shape} do not align with pred {pred.shape} and masked_idx {masked_idx.shape}")
    if masked_idx.shape[1] == 0:
        raise ContractError("reconstruction loss needs at least one masked patch")
    if masked_idx.min() < 0 or masked_idx.max() >= n:
        raise ContractError("masked index out of range")
    diff = dc.gather_rows(pred, masked_idx) - t
    return dc.scale(dc.total(dc.square(diff)), 1.0 / diff.data.size)


def smoothed_targets(labels: np.ndarray, k: int, smoothing: float, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise DataError(f"label {bad} out of range [0, {k})")
    if smoothing == 0:
        t = np.zeros((len(labels), k), dtype=dtype)
    else:
        t = np.full((len(labels), k), smoothing / (k - 1), dtype=dtype)
    t[np.arange(len(labels)), labels] = 1 - smoothing
    return t


def classification_loss(logits: Tensor, labels, tau: float = 1.0, label_smoothing: float = 0.0) -> Tensor:
    """Batch-mean cross-entropy of softmax(logits / tau), optionally label-smoothed
    (1 - eps on the true class, eps / (K - 1) elsewhere)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    b, k = logits.shape
    t = smoothed_targets(labels, k, label_smoothing, logits.dtype)
    logp = dc.log_softmax(dc.scale(logits, 1.0 / tau))
    return dc.scale(dc.total(dc.mul(logp, t)), -1.0 / b)


def joint_loss(rec: Tensor | None, cls: Tensor | None, w: LossWeights, step: int | None = None):
    """Weighted sum ``lambda_rec * rec + lambda_cls * cls``.

    Returns ``(joint, parts)`` where ``parts`` holds the unweighted addends as
    floats for logging. A branch may be None only when its weight is zero.
    """
    terms, parts = [], {}
    for name, val, lam in (("rec", rec, w.lambda_rec), ("cls", cls, w.lambda_cls)):
        if val is None:
            if lam != 0:
                raise ContractError(f"{name} loss missing but its weight is {lam}")
            parts[name] = float("nan")
            continue
        v = float(val.data)
        if not np.isfinite(v):
            last = None if step is None else step - 1
            raise TrainingAbort(f"{name} loss is {v}; last good step {last}", last)
        parts[name] = v
        terms.append(dc.scale(val, lam))
    joint = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    parts["joint"] = float(joint.data)
    return joint, parts
