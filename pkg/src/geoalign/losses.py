"""Ranking and activation-contrast losses.

Two objectives live here. The soft-margin triplet loss ranks unit embeddings
by squared Euclidean distance. The activation-contrast loss reads the
geometric attention mask as a detached partitioning signal: pixels with the
highest mask values (view-stable, roof-like) and the lowest (view-dependent,
wall-like) are selected by quantile, per-pixel activation magnitudes are
averaged over each region, and a hinge pushes the stable region's mean
activation above the unstable one's by a margin. Gradients flow through the
activations only — never through the partition itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Array,
    Tensor,
    absolute,
    add,
    log1p_exp,
    masked_mean,
    mean_over_axis,
    mul,
    relu,
    sum_all,
)
from .structure_filter import GeoMask


class EmptyPartitionError(ValueError):
    """Raised when a quantile partition leaves one of the regions empty."""


@dataclass(frozen=True)
class ActivationPartition:
    """Quantile split of mask pixels into stable and unstable regions."""

    stable: Array
    unstable: Array
    tau_high: float
    tau_low: float

    def __post_init__(self):
        object.__setattr__(self, "stable", np.asarray(self.stable, dtype=bool))
        object.__setattr__(self, "unstable", np.asarray(self.unstable, dtype=bool))
        if self.stable.shape != self.unstable.shape:
            raise ValueError("partition masks must share a shape")
        if np.any(self.stable & self.unstable):
            raise ValueError("stable and unstable regions must be disjoint")

    @property
    def n_stable(self) -> int:
        return int(self.stable.sum())

    @property
    def n_unstable(self) -> int:
        return int(self.unstable.sum())


@dataclass(frozen=True)
class LossWeights:
    contrast_weight: float = 1.0
    margin: float = 0.5
    triplet_scale: float = 10.0

    def __post_init__(self):
        if self.contrast_weight < 0.0:
            raise ValueError(f"contrast weight must be >= 0, got {self.contrast_weight}")
        if self.margin < 0.0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.triplet_scale <= 0.0:
            raise ValueError(f"triplet scale must be > 0, got {self.triplet_scale}")


def partition_by_quantile(mask, q_high: float = 0.7,
                          q_low: float = 0.3) -> ActivationPartition:
    """Select strictly-above / strictly-below quantile pixels of a mask.

    With N distinct values the high region has exactly ``N - ceil(q_high*N)``
    pixels (threshold at the ``ceil(q_high*N)``-th smallest value) and the low
    region exactly ``floor(q_low*N)`` pixels (threshold at the value ranked
    just above them). Ties shrink both regions, never grow them.
    """
    if not 0.0 < q_low < q_high < 1.0:
        raise ValueError(f"need 0 < q_low < q_high < 1, got {(q_low, q_high)}")
    values = mask.values if isinstance(mask, GeoMask) else np.asarray(mask, dtype=np.float64)
    flat = np.sort(values, axis=None)
    n = flat.size
    tau_high = float(flat[math.ceil(q_high * n) - 1])
    tau_low = float(flat[min(math.floor(q_low * n), n - 1)])
    return ActivationPartition(
        stable=values > tau_high,
        unstable=values < tau_low,
        tau_high=tau_high,
        tau_low=tau_low,
    )


def activation_map(features: Tensor) -> Tensor:
    """Per-pixel mean magnitude across channels, shape (B, 1, H, W)."""
    if features.data.ndim != 4:
        raise ValueError(f"features must be 4-d, got shape {features.shape}")
    return mean_over_axis(absolute(features), axis=1)


def aggregate_activation(activation: Tensor,
                         partition: ActivationPartition) -> tuple[Tensor, Tensor]:
    """Mean activation over each region; raises on an empty region."""
    if activation.data.ndim != 4 or activation.data.shape[:2] != (1, 1):
        raise ValueError(
            f"activation must be (1, 1, H, W), got shape {activation.shape}"
        )
    if activation.data.shape[2:] != partition.stable.shape:
        raise ValueError(
            f"activation grid {activation.data.shape[2:]} does not match "
            f"partition {partition.stable.shape}"
        )
    if partition.n_stable == 0 or partition.n_unstable == 0:
        raise EmptyPartitionError(
            f"empty partition (stable={partition.n_stable}, "
            f"unstable={partition.n_unstable})"
        )
    v_stable = masked_mean(activation, partition.stable)
    v_unstable = masked_mean(activation, partition.unstable)
    return v_stable, v_unstable


def contrast_hinge(v_stable, v_unstable, margin: float = 0.5) -> Tensor:
    """max(0, margin + v_unstable - v_stable)."""
    v_stable = v_stable if isinstance(v_stable, Tensor) else Tensor(v_stable)
    v_unstable = v_unstable if isinstance(v_unstable, Tensor) else Tensor(v_unstable)
    return relu(add(add(Tensor(float(margin)), v_unstable), mul(v_stable, -1.0)))


@dataclass(frozen=True)
class ContrastReport:
    """Scalar summary of one activation-contrast evaluation."""

    v_stable: float
    v_unstable: float
    margin: float
    loss: float
    evaluable: bool


def activation_contrast_loss(features: Tensor, mask,
                             weights: LossWeights = LossWeights(),
                             q_high: float = 0.7,
                             q_low: float = 0.3) -> tuple[Tensor, ContrastReport]:
    """Full pipeline: partition the mask, contrast region activations.

    An empty region contributes zero loss rather than an error, so degenerate
    masks (e.g. constant) are safe inside a training loop.
    """
    partition = partition_by_quantile(mask, q_high=q_high, q_low=q_low)
    act = activation_map(features)
    try:
        v_stable, v_unstable = aggregate_activation(act, partition)
    except EmptyPartitionError:
        zero = Tensor(0.0)
        return zero, ContrastReport(float("nan"), float("nan"),
                                    weights.margin, 0.0, evaluable=False)
    loss = contrast_hinge(v_stable, v_unstable, weights.margin)
    return loss, ContrastReport(v_stable.item(), v_unstable.item(),
                                weights.margin, loss.item(), evaluable=True)


def _check_unit(name: str, v: Tensor) -> None:
    if v.data.ndim != 1:
        raise ValueError(f"{name} must be a 1-d embedding, got shape {v.shape}")
    norm = float(np.linalg.norm(v.data))
    if abs(norm - 1.0) > 1e-8:
        raise ValueError(f"{name} must be unit length, got norm {norm!r}")


def soft_margin_triplet(anchor: Tensor, positive: Tensor, negative: Tensor,
                        scale: float = 10.0) -> Tensor:
    """log(1 + exp(scale * (d_pos - d_neg))) on unit embeddings.

    Distances are squared Euclidean; non-normalized inputs are rejected so the
    distance scale stays comparable across batches.
    """
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    for name, v in (("anchor", anchor), ("positive", positive), ("negative", negative)):
        _check_unit(name, v)
    if not anchor.shape == positive.shape == negative.shape:
        raise ValueError("embeddings must share a shape")
    diff_pos = add(anchor, mul(positive, -1.0))
    diff_neg = add(anchor, mul(negative, -1.0))
    d_pos = sum_all(mul(diff_pos, diff_pos))
    d_neg = sum_all(mul(diff_neg, diff_neg))
    gap = add(d_pos, mul(d_neg, -1.0))
    return log1p_exp(mul(gap, float(scale)))


def total_loss(triplet: Tensor, contrast: Tensor,
               weights: LossWeights = LossWeights()) -> Tensor:
    """triplet + contrast_weight * contrast."""
    return add(triplet, mul(contrast, weights.contrast_weight))
