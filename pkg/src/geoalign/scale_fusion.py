"""Depth-guided multi-scale feature fusion.

Three parallel views of a feature map — the map itself, and two dilated
depthwise smoothings with widening receptive fields — are blended per pixel
by weights predicted from depth-derived channels. The prediction head is a
single 1x1 projection on mean-centered depth features followed by a softmax
across the three scales, and the blend keeps the original features as a
residual:

    fused = f + sum_s w_s * branch_s

With identity (centered delta) branch kernels and a zeroed head this reduces
to doubling the input (up to float round-off in the uniform weights), which
makes the whole block a safe no-op to bolt onto an existing encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Array,
    Kernel2D,
    Tensor,
    add,
    channel_project,
    conv2d,
    mean_over_axis,
    mul,
    reshape,
    select_index,
    softmax_over_axis,
)
from .structure_filter import DepthMap, align_depth, macro_gradient

MID_DILATION = 2
FAR_DILATION = 4


@dataclass
class ScaleBranches:
    """The three scale views; ``near`` is the untouched input feature map."""

    near: Tensor
    mid: Tensor
    far: Tensor

    def __post_init__(self):
        if not (self.near.shape == self.mid.shape == self.far.shape):
            raise ValueError(
                f"branch shapes differ: {self.near.shape}, {self.mid.shape}, "
                f"{self.far.shape}"
            )

    def __iter__(self):
        return iter((self.near, self.mid, self.far))


class ScaleWeights:
    """Per-pixel convex weights over the three scales, shape (B, 3, 1, H, W)."""

    def __init__(self, weights: Tensor):
        shape = weights.data.shape
        if len(shape) != 5 or shape[1] != 3 or shape[2] != 1:
            raise ValueError(f"scale weights must be (B, 3, 1, H, W), got {shape}")
        if np.min(weights.data) < 0.0 or np.max(weights.data) > 1.0:
            raise ValueError("scale weights must lie in [0, 1]")
        sums = weights.data.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ValueError("scale weights must sum to one across the scale axis")
        self.weights = weights

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weights.data.shape


@dataclass
class FusionParams:
    """Branch stencils plus the scale-prediction head.

    ``mid_kernel`` and ``far_kernel`` are depthwise 3x3 stencils at dilations
    2 and 4. ``head_weights`` (3 x depth-channels) and ``head_bias`` (3,) map
    mean-centered depth features to scale logits.
    """

    mid_kernel: Kernel2D
    far_kernel: Kernel2D
    head_weights: Tensor
    head_bias: Tensor

    def __post_init__(self):
        if self.mid_kernel.dilation != MID_DILATION:
            raise ValueError(f"mid kernel dilation must be {MID_DILATION}")
        if self.far_kernel.dilation != FAR_DILATION:
            raise ValueError(f"far kernel dilation must be {FAR_DILATION}")
        if self.head_weights.data.ndim != 2 or self.head_weights.data.shape[0] != 3:
            raise ValueError(
                f"head weights must be (3, depth_channels), got {self.head_weights.shape}"
            )
        if self.head_bias.data.shape != (3,):
            raise ValueError(f"head bias must be (3,), got {self.head_bias.shape}")

    @property
    def depth_channels(self) -> int:
        return self.head_weights.data.shape[1]

    @classmethod
    def identity(cls, channels: int, depth_channels: int = 3) -> "FusionParams":
        """Delta stencils and a zeroed head: fuse() doubles the input to
        within float round-off."""
        return cls(
            mid_kernel=Kernel2D.delta(3, channels, dilation=MID_DILATION),
            far_kernel=Kernel2D.delta(3, channels, dilation=FAR_DILATION),
            head_weights=Tensor(np.zeros((3, depth_channels))),
            head_bias=Tensor(np.zeros(3)),
        )

    SMOOTHING_MIX = 0.4

    @classmethod
    def smoothing(cls, channels: int, depth_channels: int = 3,
                  seed: int = 0) -> "FusionParams":
        """Center-weighted averaging branches with a small random head.

        Each branch kernel blends the center tap with a normalized box
        average (weights sum to one), so branches smooth without washing
        structure out; an all-identity block would cancel out of cosine
        similarity, which is why the retrieval harness uses this one.
        """
        rng = np.random.default_rng(seed)
        mix = cls.SMOOTHING_MIX
        kernel = np.full((channels, 3, 3), mix / 9.0)
        kernel[:, 1, 1] += 1.0 - mix
        return cls(
            mid_kernel=Kernel2D(kernel.copy(), dilation=MID_DILATION, per_channel=True),
            far_kernel=Kernel2D(kernel.copy(), dilation=FAR_DILATION, per_channel=True),
            head_weights=Tensor(rng.normal(0.0, 0.1, (3, depth_channels))),
            head_bias=Tensor(np.zeros(3)),
        )


def scale_branches(features: Tensor, params: FusionParams) -> ScaleBranches:
    """Near/mid/far views: identity, dilation-2 and dilation-4 smoothings."""
    if features.data.ndim != 4:
        raise ValueError(f"features must be 4-d, got shape {features.shape}")
    return ScaleBranches(
        near=features,
        mid=conv2d(features, params.mid_kernel),
        far=conv2d(features, params.far_kernel),
    )


def scale_weights(depth_features: Tensor, params: FusionParams) -> ScaleWeights:
    """Predict the per-pixel scale blend from depth-derived channels.

    The features are mean-centered per channel before the projection, so a
    constant depth offset cannot change the prediction.
    """
    if depth_features.data.ndim != 4:
        raise ValueError(f"depth features must be 4-d, got {depth_features.shape}")
    b, c, h, w = depth_features.data.shape
    if c != params.depth_channels:
        raise ValueError(
            f"head expects {params.depth_channels} depth channels, got {c}"
        )
    spatial_mean = mean_over_axis(mean_over_axis(depth_features, 3), 2)
    centered = add(depth_features, mul(spatial_mean, -1.0))
    logits = channel_project(centered, params.head_weights, params.head_bias)
    w5 = reshape(softmax_over_axis(logits, axis=1), (b, 3, 1, h, w))
    return ScaleWeights(w5)


def fuse(features: Tensor, branches: ScaleBranches, weights: ScaleWeights) -> Tensor:
    """Residual weighted blend: f + sum_s w_s * branch_s."""
    b, c, h, w = features.data.shape
    if weights.shape != (b, 3, 1, h, w):
        raise ValueError(
            f"weights {weights.shape} do not match features {features.shape}"
        )
    if branches.near.shape != features.shape:
        raise ValueError(
            f"branches {branches.near.shape} do not match features {features.shape}"
        )
    out = features
    for s, branch in enumerate(branches):
        w_s = select_index(weights.weights, axis=1, index=s)  # (B, 1, H, W)
        out = add(out, mul(w_s, branch))
    return out


def depth_feature_stack(depth: DepthMap, h: int, w: int,
                        dilation: int = 2) -> Array:
    """Fixed depth-derived channels at the feature resolution.

    Channel 0 is pooled depth, channel 1 the pooled-gradient magnitude,
    channel 2 raw depth subsampled on the pooling grid. Shape (1, 3, h, w).
    """
    pooled = align_depth(depth, h, w)
    gx, gy = macro_gradient(pooled, dilation)
    src_h, src_w = depth.shape
    rows = (np.arange(h) * src_h) // h
    cols = (np.arange(w) * src_w) // w
    strided = depth.values[rows][:, cols]
    return np.stack([pooled.values, np.hypot(gx, gy), strided])[None]
