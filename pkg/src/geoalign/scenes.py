"""Procedural box-city scenes with ground-truth surface labels.

A scene is a flat ground plane plus axis-aligned boxes. The orthographic
render looks straight down: box footprints are rooftops at ``ground - height``
and no vertical surface is visible. The oblique render adds a global linear
tilt to the depth field and, on each box's tilt-facing sides, a facade strip
that ramps from roof depth back down to ground depth — the ramp is always
strictly steeper than the tilt, so facades are the view-dependent, steep
structures a geometric mask is supposed to suppress.

Labels distinguish GROUND, ROOF, FACADE and an ambiguous EDGE class near
depth breaks. ``mask_quality`` turns a mask plus labels into a balanced
accuracy over the horizontal-vs-facade decision, excluding EDGE pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .autodiff import Array
from .structure_filter import DepthMap, GeoMask


class Label(IntEnum):
    GROUND = 0
    ROOF = 1
    FACADE = 2
    EDGE = 3


# Facade strips: width scales with height over tilt magnitude, capped so the
# ramp from roof to ground stays steep, and shrunk further until the ramp
# both beats the tilt and clears a steepness floor. The floor keeps facade
# normals decisively far from vertical: a ramp of g per pixel has normal
# z-component 1/sqrt(1+g^2), so g >= 2.2 keeps it below 0.42, well clear of
# any plausible horizontal plane.
FACADE_WIDTH_COEFF = 0.03
FACADE_WIDTH_MAX = 8
FACADE_RAMP_MIN = 2.2


@dataclass(frozen=True)
class Box:
    """Axis-aligned footprint (x = column, y = row) with a positive height."""

    x: int
    y: int
    w: int
    h: int
    height: float

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"footprint must be at least 1x1, got {self.w}x{self.h}")
        if self.height <= 0.0:
            raise ValueError(f"box height must be positive, got {self.height}")


@dataclass(frozen=True)
class SceneSpec:
    """Complete description of a synthetic scene; rendering is a pure function
    of this value."""

    ground_depth: float
    boxes: tuple[Box, ...]
    oblique_slope: tuple[float, float] = (0.0, 0.0)
    raster: tuple[int, int] = (64, 64)
    noise_sigma: float = 0.0
    rng_seed: int = 0
    edge_band: int = 2

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "oblique_slope",
                           (float(self.oblique_slope[0]), float(self.oblique_slope[1])))
        h, w = self.raster
        if h < 4 or w < 4:
            raise ValueError(f"raster too small: {self.raster}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.edge_band < 1:
            raise ValueError(f"edge band must be >= 1, got {self.edge_band}")
        for i, box in enumerate(self.boxes):
            if box.x < 0 or box.y < 0 or box.x + box.w > w or box.y + box.h > h:
                raise ValueError(f"box {i} leaves the {w}x{h} raster: {box}")
        for i in range(len(self.boxes)):
            for j in range(i + 1, len(self.boxes)):
                a, b = self.boxes[i], self.boxes[j]
                if (a.x < b.x + b.w and b.x < a.x + a.w and
                        a.y < b.y + b.h and b.y < a.y + a.h):
                    raise ValueError(f"boxes {i} and {j} overlap")


@dataclass(frozen=True)
class LabelMap:
    labels: Array

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.uint8)
        if arr.ndim != 2:
            raise ValueError(f"labels must be 2-d, got shape {arr.shape}")
        if arr.max(initial=0) > max(Label):
            raise ValueError("unknown label value")
        object.__setattr__(self, "labels", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def count(self, label: Label) -> int:
        return int((self.labels == label).sum())


class NotEvaluableError(ValueError):
    """Raised when a scene has no scoreable facade content."""


def _base_scene(spec: SceneSpec) -> tuple[Array, Array]:
    h, w = spec.raster
    depth = np.full((h, w), spec.ground_depth, dtype=np.float64)
    labels = np.full((h, w), Label.GROUND, dtype=np.uint8)
    for box in spec.boxes:
        depth[box.y:box.y + box.h, box.x:box.x + box.w] = \
            spec.ground_depth - box.height
        labels[box.y:box.y + box.h, box.x:box.x + box.w] = Label.ROOF
    return depth, labels


def _add_noise(depth: Array, spec: SceneSpec) -> Array:
    rng = np.random.default_rng(spec.rng_seed)
    return depth + rng.normal(0.0, spec.noise_sigma, depth.shape)


def render_ortho(spec: SceneSpec) -> tuple[DepthMap, LabelMap]:
    """Straight-down view: rooftops and ground only, with a one-pixel EDGE
    ring just outside each footprint marking the depth discontinuity."""
    depth, labels = _base_scene(spec)
    h, w = spec.raster
    for box in spec.boxes:
        y0, y1 = max(box.y - 1, 0), min(box.y + box.h + 1, h)
        x0, x1 = max(box.x - 1, 0), min(box.x + box.w + 1, w)
        ring = np.zeros((h, w), dtype=bool)
        ring[y0:y1, x0:x1] = True
        ring[box.y:box.y + box.h, box.x:box.x + box.w] = False
        labels[ring & (labels != Label.ROOF)] = Label.EDGE
    return DepthMap(_add_noise(depth, spec)), LabelMap(labels)


def facade_width(height: float, slope: tuple[float, float]) -> int:
    """Pixel width of a facade strip for a box of this height.

    Proportional to height over tilt magnitude, clamped to keep the strip
    narrow, then shrunk until the roof-to-ground ramp ``height / (width + 1)``
    is strictly steeper than both the tilt and the ``FACADE_RAMP_MIN``
    steepness floor.
    """
    mag = math.hypot(*slope)
    if mag == 0.0:
        raise ValueError("facade width is undefined for a zero slope")
    floor = max(mag, FACADE_RAMP_MIN)
    width = max(1, min(FACADE_WIDTH_MAX,
                       round(FACADE_WIDTH_COEFF * height / mag)))
    while width > 1 and height / (width + 1) <= floor:
        width -= 1
    return width


def _dilate(mask: Array, radius: int) -> Array:
    if radius <= 0:
        return mask.copy()
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys = slice(max(dy, 0), h + min(dy, 0))
            yd = slice(max(-dy, 0), h + min(-dy, 0))
            xs = slice(max(dx, 0), w + min(dx, 0))
            xd = slice(max(-dx, 0), w + min(-dx, 0))
            out[yd, xd] |= mask[ys, xs]
    return out


def render_oblique(spec: SceneSpec) -> tuple[DepthMap, LabelMap]:
    """Tilted view: global linear depth ramp plus facade strips.

    Each box grows a FACADE strip on the side its nonzero slope component
    points toward; the strip's depth ramps from roof depth back to ground
    depth and is strictly steeper than the tilt. Pixels within ``edge_band``
    of any label transition are relabeled EDGE — including the rims of the
    strip itself, whose gradients blend with the neighbouring surfaces and
    are genuinely ambiguous. Strip pixels within ``edge_band`` of the raster
    border are relabeled the same way: a strip running off the raster is cut
    mid-ramp, so its outermost pixels lack the context that makes a ramp
    measurable, exactly like a transition rim. Flat surfaces at the border
    keep their labels. A zero slope degenerates to the orthographic render,
    bit for bit.
    """
    sx, sy = spec.oblique_slope
    if sx == 0.0 and sy == 0.0:
        return render_ortho(spec)
    depth, labels = _base_scene(spec)
    h, w = spec.raster
    for box in spec.boxes:
        width = facade_width(box.height, spec.oblique_slope)
        roof = spec.ground_depth - box.height
        step = box.height / (width + 1)
        if sx != 0.0:
            for d in range(1, width + 1):
                col = box.x + box.w - 1 + d if sx > 0 else box.x - d
                if not 0 <= col < w:
                    continue
                rows = slice(box.y, box.y + box.h)
                writable = labels[rows, col] != Label.ROOF
                depth[rows, col] = np.where(writable, roof + step * d,
                                            depth[rows, col])
                labels[rows, col] = np.where(writable, Label.FACADE,
                                             labels[rows, col])
        if sy != 0.0:
            for d in range(1, width + 1):
                row = box.y + box.h - 1 + d if sy > 0 else box.y - d
                if not 0 <= row < h:
                    continue
                cols = slice(box.x, box.x + box.w)
                writable = labels[row, cols] != Label.ROOF
                depth[row, cols] = np.where(writable, roof + step * d,
                                            depth[row, cols])
                labels[row, cols] = np.where(writable, Label.FACADE,
                                             labels[row, cols])
    boundary = np.zeros((h, w), dtype=bool)
    boundary[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    boundary[:, :-1] |= labels[:, 1:] != labels[:, :-1]
    boundary[1:, :] |= labels[1:, :] != labels[:-1, :]
    boundary[:-1, :] |= labels[1:, :] != labels[:-1, :]
    band = _dilate(boundary, spec.edge_band - 1)
    labels[band] = Label.EDGE
    border = np.zeros((h, w), dtype=bool)
    eb = spec.edge_band
    border[:eb, :] = border[-eb:, :] = True
    border[:, :eb] = border[:, -eb:] = True
    labels[border & (labels == Label.FACADE)] = Label.EDGE
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
    depth = depth + sx * cols + sy * rows
    return DepthMap(_add_noise(depth, spec)), LabelMap(labels)


def pool_labels(labels: LabelMap, h: int, w: int) -> tuple[Array, Array]:
    """Majority-vote labels down to (h, w); returns (pooled, scoreable).

    Bins where EDGE holds at least a plurality are marked unscoreable. Among
    the other classes, ties break toward FACADE, then ROOF, then GROUND.
    """
    src_h, src_w = labels.shape
    if src_h % h or src_w % w:
        raise ValueError(
            f"label raster {labels.shape} does not pool evenly to {(h, w)}"
        )
    blocks = labels.labels.reshape(h, src_h // h, w, src_w // w)
    counts = np.stack([(blocks == lab).sum(axis=(1, 3))
                       for lab in (Label.GROUND, Label.ROOF, Label.FACADE,
                                   Label.EDGE)])
    scoreable = counts[3] < counts[:3].max(axis=0)
    priority = np.stack([counts[2], counts[1], counts[0]])  # FACADE, ROOF, GROUND
    pick = np.asarray(np.argmax(priority, axis=0))
    pooled = np.array([Label.FACADE, Label.ROOF, Label.GROUND],
                      dtype=np.uint8)[pick]
    pooled[~scoreable] = Label.EDGE
    return pooled, scoreable


def mask_quality(mask, labels: LabelMap) -> float:
    """Balanced accuracy of the horizontal-vs-facade decision ``mask > 0.5``.

    Labels are majority-pooled to the mask resolution and EDGE-dominant bins
    are excluded. Raises :class:`NotEvaluableError` when nothing facade-like
    (or nothing horizontal) survives pooling.
    """
    values = mask.values if isinstance(mask, GeoMask) else np.asarray(mask, dtype=np.float64)
    mh, mw = values.shape
    pooled, scoreable = pool_labels(labels, mh, mw)
    facade = scoreable & (pooled == Label.FACADE)
    horizontal = scoreable & ((pooled == Label.ROOF) | (pooled == Label.GROUND))
    if not facade.any():
        raise NotEvaluableError("not evaluable: no facade pixels to score")
    if not horizontal.any():
        raise NotEvaluableError("not evaluable: no horizontal pixels to score")
    predicted_horizontal = values > 0.5
    recall_h = float((predicted_horizontal & horizontal).sum() / horizontal.sum())
    recall_f = float((~predicted_horizontal & facade).sum() / facade.sum())
    return 0.5 * (recall_h + recall_f)


def class_mask_means(mask, labels: LabelMap) -> dict[str, float]:
    """Mean mask value per pooled label class (nan for absent classes)."""
    values = mask.values if isinstance(mask, GeoMask) else np.asarray(mask, dtype=np.float64)
    pooled, _ = pool_labels(labels, *values.shape)
    means = {}
    for lab in Label:
        sel = pooled == lab
        means[lab.name.lower()] = float(values[sel].mean()) if sel.any() else float("nan")
    return means


# Anchor corners for the three footprint slots. Jittering positions within
# +/-4 and side lengths within [12, 17] keeps the slots pairwise disjoint and
# inside a 64x64 raster while letting every scene differ in footprint shape.
_SLOT_ANCHORS = ((8, 10), (36, 34), (10, 38))
_SLOT_JITTER = 4
_SIDE_RANGE = (12, 17)
_HEIGHT_RANGE = (15.0, 34.0)


def facade_heavy_spec(seed: int, raster: tuple[int, int] = (64, 64),
                      noise_sigma: float = 0.02) -> SceneSpec:
    """Seeded scene with tall boxes and wide, steep facade strips.

    The tilt is kept gentle while strip widths sit at their cap, so the
    view-dependent content of an oblique render is dominated by facades —
    exactly the part a geometric mask can suppress. Every facade ramp is at
    least ~1.5 depth units per pixel, far steeper than the tilt, and strips
    are wide enough that their interiors survive the dilated gradient
    stencil. Footprint positions and side lengths are jittered per scene so
    the gallery stays distinguishable.
    """
    rng = np.random.default_rng(seed)
    mag = rng.uniform(0.025, 0.04)
    theta = rng.uniform(0.25, 1.32)
    sign_x = 1.0 if rng.integers(2) else -1.0
    sign_y = 1.0 if rng.integers(2) else -1.0
    slope = (sign_x * mag * math.cos(theta), sign_y * mag * math.sin(theta))
    boxes = []
    for ax, ay in _SLOT_ANCHORS:
        x = int(ax + rng.integers(-_SLOT_JITTER, _SLOT_JITTER + 1))
        y = int(ay + rng.integers(-_SLOT_JITTER, _SLOT_JITTER + 1))
        bw = int(rng.integers(_SIDE_RANGE[0], _SIDE_RANGE[1] + 1))
        bh = int(rng.integers(_SIDE_RANGE[0], _SIDE_RANGE[1] + 1))
        height = float(rng.uniform(*_HEIGHT_RANGE))
        boxes.append(Box(x, y, bw, bh, height))
    return SceneSpec(
        ground_depth=40.0,
        boxes=tuple(boxes),
        oblique_slope=slope,
        raster=raster,
        noise_sigma=noise_sigma,
        rng_seed=seed,
    )
