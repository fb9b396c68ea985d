"""On-disk formats: binary rasters, PGM previews and scene-spec text.

Raster files are a four-field ASCII header line followed by a raw payload:

``GEOD 1 <H> <W>\\n`` + H*W little-endian IEEE-754 doubles, row-major
    depth maps and masks.
``GEOL 1 <H> <W>\\n`` + H*W bytes (0=GROUND, 1=ROOF, 2=FACADE, 3=EDGE)
    surface labels.

The declared dimensions must match the payload length exactly; trailing
bytes are an error. Masks are additionally exported as binary PGM (P5,
maxval 255, values quantized from [0, 1] by rounding, so the round-trip
error is at most 1/510) because any image viewer can open them.

Scene specs are line-oriented text: ``ground`` is required, ``slope``,
``raster``, ``noise``, ``seed`` and ``edge-band`` are optional singletons,
and each ``box x y w h height`` line adds one box. ``#`` comments and blank
lines are ignored. Parse errors carry 1-based line numbers.

All writes go through a temp-file-then-rename so readers never observe a
partial file.
"""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from .autodiff import Array
from .scenes import Box, Label, SceneSpec

DEPTH_MAGIC = b"GEOD"
LABEL_MAGIC = b"GEOL"
FORMAT_VERSION = 1
_MAX_HEADER = 64


class RasterFormatError(ValueError):
    """A raster file does not follow the documented byte layout."""


class SpecFormatError(ValueError):
    """A scene-spec file is malformed; ``line`` is 1-based (None if global)."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _encode_header(magic: bytes, h: int, w: int) -> bytes:
    return b"%s %d %d %d\n" % (magic, FORMAT_VERSION, h, w)


def _split_raster(data: bytes, magic: bytes) -> tuple[int, int, bytes]:
    newline = data.find(b"\n", 0, _MAX_HEADER)
    if newline < 0:
        raise RasterFormatError("missing header line")
    fields = data[:newline].split()
    if len(fields) != 4 or fields[0] != magic:
        raise RasterFormatError(
            f"bad header {data[:newline]!r}; expected "
            f"{magic.decode()} {FORMAT_VERSION} <H> <W>"
        )
    try:
        version, h, w = (int(f) for f in fields[1:])
    except ValueError:
        raise RasterFormatError(f"non-integer header fields in {data[:newline]!r}") from None
    if version != FORMAT_VERSION:
        raise RasterFormatError(f"unsupported version {version}")
    if h < 1 or w < 1:
        raise RasterFormatError(f"invalid dimensions {h} x {w}")
    return h, w, data[newline + 1:]


def encode_f64_raster(values: Array) -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"raster must be 2-d, got shape {arr.shape}")
    h, w = arr.shape
    return _encode_header(DEPTH_MAGIC, h, w) + arr.astype("<f8").tobytes()


def decode_f64_raster(data: bytes) -> Array:
    h, w, payload = _split_raster(data, DEPTH_MAGIC)
    expected = h * w * 8
    if len(payload) != expected:
        raise RasterFormatError(
            f"payload holds {len(payload)} bytes but {h} x {w} doubles need {expected}"
        )
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(h, w)


def encode_u8_raster(values: Array) -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"raster must be 2-d, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > max(Label):
        raise ValueError("label values must be in 0..3")
    h, w = arr.shape
    return _encode_header(LABEL_MAGIC, h, w) + arr.astype(np.uint8).tobytes()


def decode_u8_raster(data: bytes) -> Array:
    h, w, payload = _split_raster(data, LABEL_MAGIC)
    if len(payload) != h * w:
        raise RasterFormatError(
            f"payload holds {len(payload)} bytes but {h} x {w} labels need {h * w}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).copy().reshape(h, w)
    if arr.max(initial=0) > max(Label):
        raise RasterFormatError("label payload contains values outside 0..3")
    return arr


def write_f64_raster(path, values: Array) -> None:
    atomic_write_bytes(path, encode_f64_raster(values))


def read_f64_raster(path) -> Array:
    with open(path, "rb") as handle:
        return decode_f64_raster(handle.read())


def write_u8_raster(path, values: Array) -> None:
    atomic_write_bytes(path, encode_u8_raster(values))


def read_u8_raster(path) -> Array:
    with open(path, "rb") as handle:
        return decode_u8_raster(handle.read())


def encode_mask_pgm(values: Array) -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    h, w = arr.shape
    header = b"P5\n%d %d\n255\n" % (w, h)
    return header + np.rint(arr * 255.0).astype(np.uint8).tobytes()


def write_mask_pgm(path, values: Array) -> None:
    atomic_write_bytes(path, encode_mask_pgm(values))


def _parse_floats(parts: list[str], n: int, line: int, key: str) -> list[float]:
    if len(parts) != n:
        raise SpecFormatError(f"`{key}` takes {n} value(s), got {len(parts)}", line)
    out = []
    for p in parts:
        try:
            v = float(p)
        except ValueError:
            raise SpecFormatError(f"`{key}`: {p!r} is not a number", line) from None
        if not math.isfinite(v):
            raise SpecFormatError(f"`{key}`: {p!r} is not finite", line)
        out.append(v)
    return out


def _parse_ints(parts: list[str], n: int, line: int, key: str) -> list[int]:
    if len(parts) != n:
        raise SpecFormatError(f"`{key}` takes {n} value(s), got {len(parts)}", line)
    out = []
    for p in parts:
        try:
            out.append(int(p))
        except ValueError:
            raise SpecFormatError(f"`{key}`: {p!r} is not an integer", line) from None
    return out


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse the line-oriented scene format; see the module docstring."""
    scalars: dict[str, object] = {}
    boxes: list[Box] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *parts = line.split()
        key = key.lower()
        if key == "box":
            if len(parts) != 5:
                raise SpecFormatError(
                    f"`box` takes 5 values (x y w h height), got {len(parts)}", line_no
                )
            ints = _parse_ints(parts[:4], 4, line_no, "box")
            (height,) = _parse_floats(parts[4:], 1, line_no, "box")
            try:
                boxes.append(Box(*ints, height))
            except ValueError as exc:
                raise SpecFormatError(str(exc), line_no) from None
            continue
        if key in scalars:
            raise SpecFormatError(f"duplicate `{key}` line", line_no)
        if key == "ground":
            scalars[key] = _parse_floats(parts, 1, line_no, key)[0]
        elif key == "slope":
            scalars[key] = tuple(_parse_floats(parts, 2, line_no, key))
        elif key == "noise":
            scalars[key] = _parse_floats(parts, 1, line_no, key)[0]
        elif key == "seed":
            scalars[key] = _parse_ints(parts, 1, line_no, key)[0]
        elif key == "raster":
            scalars[key] = tuple(_parse_ints(parts, 2, line_no, key))
        elif key == "edge-band":
            scalars[key] = _parse_ints(parts, 1, line_no, key)[0]
        else:
            raise SpecFormatError(f"unknown directive {key!r}", line_no)
    if "ground" not in scalars:
        raise SpecFormatError("missing required `ground` line")
    return SceneSpec(
        ground_depth=scalars["ground"],
        boxes=tuple(boxes),
        oblique_slope=scalars.get("slope", (0.0, 0.0)),
        raster=scalars.get("raster", (64, 64)),
        noise_sigma=scalars.get("noise", 0.0),
        rng_seed=scalars.get("seed", 0),
        edge_band=scalars.get("edge-band", 2),
    )


def serialize_scene_spec(spec: SceneSpec) -> str:
    """Canonical text for a scene; ``parse_scene_spec`` round-trips it."""
    lines = [
        f"ground {spec.ground_depth!r}",
        f"slope {spec.oblique_slope[0]!r} {spec.oblique_slope[1]!r}",
        f"raster {spec.raster[0]} {spec.raster[1]}",
        f"noise {spec.noise_sigma!r}",
        f"seed {spec.rng_seed}",
        f"edge-band {spec.edge_band}",
    ]
    lines.extend(
        f"box {b.x} {b.y} {b.w} {b.h} {b.height!r}" for b in spec.boxes
    )
    return "\n".join(lines) + "\n"
