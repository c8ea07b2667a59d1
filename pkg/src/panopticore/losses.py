"""The three training losses, as pure functions with analytic gradients.

All reductions run in float64 regardless of input storage precision, so the
gradients have enough headroom for finite-difference verification. Gradients
are taken with respect to the raw prediction grids only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossWeights",
    "LossValue",
    "weighted_bootstrapped_ce",
    "mse_heatmap_loss",
    "l1_offset_loss",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights combining the three losses; the semantic weight is
    carried per-pixel by the weight map instead."""

    lambda_heatmap: float = 200.0
    lambda_offset: float = 0.01
    top_k_fraction: float = 0.15

    def __post_init__(self):
        if self.lambda_heatmap <= 0 or self.lambda_offset <= 0:
            raise ValueError("loss weights must be positive")
        if not 0 < self.top_k_fraction <= 1:
            raise ValueError(
                f"top_k_fraction must be in (0, 1], got {self.top_k_fraction}"
            )


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: np.ndarray | None = None


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def weighted_bootstrapped_ce(
    logits: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    ignore_label: int,
    top_k_fraction: float = 0.15,
    with_gradient: bool = True,
) -> LossValue:
    """Weighted cross-entropy averaged over the hardest top-K pixels.

    ``logits`` is (H, W, C); ``labels`` holds channel indices in [0, C) or
    ``ignore_label``. Per-pixel loss is weight * -log softmax(logits)[label];
    K = ceil(top_k_fraction * #valid), ties at the K-th largest loss resolved
    in row-major order. The gradient (w.r.t. logits) is nonzero only at
    selected pixels.
    """
    if logits.ndim != 3:
        raise ValueError(f"logits must be (H, W, C), got shape {logits.shape}")
    if labels.shape != logits.shape[:2]:
        raise ValueError(f"labels shape {labels.shape} != logits grid {logits.shape[:2]}")
    if weights.shape != labels.shape:
        raise ValueError(f"weights shape {weights.shape} != labels shape {labels.shape}")
    if not 0 < top_k_fraction <= 1:
        raise ValueError(f"top_k_fraction must be in (0, 1], got {top_k_fraction}")

    num_classes = logits.shape[2]
    flat_logits = logits.reshape(-1, num_classes).astype(np.float64)
    flat_labels = labels.reshape(-1).astype(np.int64)
    flat_weights = weights.reshape(-1).astype(np.float64)
    if (flat_weights < 0).any():
        raise ValueError("weights must be >= 0")

    valid = np.flatnonzero(flat_labels != ignore_label)
    if valid.size == 0:
        raise ValueError("all pixels carry the ignore label; loss undefined")
    valid_labels = flat_labels[valid]
    if valid_labels.min() < 0 or valid_labels.max() >= num_classes:
        raise ValueError("labels contain indices outside [0, num_classes)")

    log_probs = _log_softmax(flat_logits[valid])
    pixel_loss = -flat_weights[valid] * log_probs[np.arange(valid.size), valid_labels]

    k = max(1, int(np.ceil(top_k_fraction * valid.size)))
    # Sort by descending loss; equal losses keep row-major order.
    order = np.lexsort((valid, -pixel_loss))
    selected = order[:k]
    value = float(pixel_loss[selected].mean(dtype=np.float64))

    gradient = None
    if with_gradient:
        gradient = np.zeros_like(flat_logits)
        sel_rows = valid[selected]
        probs = np.exp(log_probs[selected])
        probs[np.arange(selected.size), valid_labels[selected]] -= 1.0
        probs *= (flat_weights[sel_rows] / k)[:, None]
        gradient[sel_rows] = probs
        gradient = gradient.reshape(logits.shape)
    return LossValue(value=value, gradient=gradient)


def mse_heatmap_loss(
    pred: np.ndarray, target: np.ndarray, with_gradient: bool = True
) -> LossValue:
    """Mean squared error over all pixels of two heatmaps."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    count = diff.size
    value = float((diff * diff).sum(dtype=np.float64) / count)
    gradient = (2.0 / count) * diff if with_gradient else None
    return LossValue(value=value, gradient=gradient)


def l1_offset_loss(
    pred: np.ndarray,
    target: np.ndarray,
    thing_mask: np.ndarray,
    with_gradient: bool = True,
) -> LossValue:
    """L1 offset loss, activated only at thing pixels.

    Value is sum over masked pixels of |d_row| + |d_col|, divided by the
    masked pixel count (0 when the mask is empty).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if thing_mask.shape != pred.shape[:2]:
        raise ValueError(
            f"mask shape {thing_mask.shape} != offset grid {pred.shape[:2]}"
        )
    diff = pred.astype(np.float64) - target.astype(np.float64)
    mask = thing_mask.astype(bool)
    count = int(mask.sum())
    total = float(np.abs(diff[mask]).sum(dtype=np.float64)) if count else 0.0
    value = total / max(1, count)
    gradient = None
    if with_gradient:
        gradient = np.zeros_like(diff)
        if count:
            gradient[mask] = np.sign(diff[mask]) / count
    return LossValue(value=value, gradient=gradient)


def total_loss(
    sem: LossValue, heat: LossValue, off: LossValue, w: LossWeights = LossWeights()
) -> float:
    """Weighted sum of the three losses; the per-pixel semantic weight is
    already inside ``sem``."""
    return sem.value + w.lambda_heatmap * heat.value + w.lambda_offset * off.value
