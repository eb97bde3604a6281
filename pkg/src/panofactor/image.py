"""Equirectangular panoramas, gamma handling and log-domain intrinsic arithmetic.

Column ``c`` of a ``W``-wide panorama covers yaw
``[-pi + c * 2pi/W, -pi + (c + 1) * 2pi/W)``; the canonical heading 0 sits
at column ``W // 2``.  Rows run from +60 deg elevation (top) to -60 deg.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

AZIMUTH_BINS = 60
LOG_FLOOR = 1.0 / 255.0
DEFAULT_RESOLUTION = (240, 80)
PAPER_RESOLUTION = (960, 320)
VERTICAL_FOV = 2.0 * math.pi / 3.0


class Domain(str, enum.Enum):
    SRGB_UNIT = "SRGB_UNIT"
    LOG_LINEAR = "LOG_LINEAR"


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class GammaParams:
    A: float = 1.0
    gamma: float = 1.0 / 2.2

    def __post_init__(self):
        if not self.A > 0:
            raise ImageError(f"gamma scale A must be positive, got {self.A}")
        if not 0 < self.gamma <= 1:
            raise ImageError(f"gamma exponent must lie in (0, 1], got {self.gamma}")


@dataclass(frozen=True, eq=False)
class Panorama:
    """An H x W x 3 float image tagged with its value domain."""

    data: np.ndarray
    domain: Domain = Domain.SRGB_UNIT

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ImageError(f"panorama data must be H x W x 3, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ImageError("panorama contains non-finite values")
        domain = Domain(self.domain)
        if domain is Domain.SRGB_UNIT and (data.min(initial=0.0) < 0 or data.max(initial=0.0) > 1):
            raise ImageError("SRGB_UNIT panorama values must lie in [0, 1]")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "domain", domain)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Panorama):
            return NotImplemented
        return self.domain is other.domain and np.array_equal(self.data, other.data)

    __hash__ = None


def check_resolution(width: int, height: int) -> None:
    if width <= 0 or height <= 0:
        raise ImageError(f"resolution must be positive, got {width}x{height}")
    if width % AZIMUTH_BINS:
        raise ImageError(f"width {width} is not divisible by {AZIMUTH_BINS}")
    if width != 3 * height:
        raise ImageError(f"width {width} must equal 3 x height {height}")


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ImageError(f"resolution must look like WxH, got {text!r}") from None
    check_resolution(w, h)
    return w, h


def column_yaw(width: int) -> np.ndarray:
    """Yaw (radians) at the centre of every column."""
    return -math.pi + (np.arange(width) + 0.5) * (2.0 * math.pi / width)


def row_elevation(height: int) -> np.ndarray:
    """Elevation (radians) at the centre of every row."""
    return VERTICAL_FOV / 2.0 - (np.arange(height) + 0.5) * (VERTICAL_FOV / height)


def _require(p: Panorama, domain: Domain, op: str) -> None:
    if p.domain is not domain:
        raise ImageError(f"{op} expects a {domain.value} panorama, got {p.domain.value}")


def gamma_decode(p: Panorama, g: GammaParams = GammaParams()) -> Panorama:
    """Invert ``I_srgb = A * I**gamma``; output stays in [0, 1] for A = 1."""
    _require(p, Domain.SRGB_UNIT, "gamma_decode")
    lin = np.clip((p.data / g.A) ** (1.0 / g.gamma), 0.0, 1.0)
    return Panorama(lin, Domain.SRGB_UNIT)


def gamma_encode(p: Panorama, g: GammaParams = GammaParams()) -> Panorama:
    _require(p, Domain.SRGB_UNIT, "gamma_encode")
    return Panorama(np.clip(g.A * p.data**g.gamma, 0.0, 1.0), Domain.SRGB_UNIT)


def log_encode(p: Panorama, floor: float = LOG_FLOOR) -> Panorama:
    if not floor > 0:
        raise ImageError(f"log floor must be positive, got {floor}")
    _require(p, Domain.SRGB_UNIT, "log_encode")
    return Panorama(np.log(np.maximum(p.data, floor)), Domain.LOG_LINEAR)


def log_decode(p: Panorama) -> Panorama:
    _require(p, Domain.LOG_LINEAR, "log_decode")
    return Panorama(np.clip(np.exp(p.data), 0.0, 1.0), Domain.SRGB_UNIT)


def recompose(log_reflectance: Panorama, log_shading: Panorama) -> Panorama:
    """``exp(logR + logS)`` clamped to [0, 1]."""
    _require(log_reflectance, Domain.LOG_LINEAR, "recompose")
    _require(log_shading, Domain.LOG_LINEAR, "recompose")
    if log_reflectance.shape != log_shading.shape:
        raise ImageError(
            f"dimension mismatch: reflectance {log_reflectance.shape} vs shading {log_shading.shape}"
        )
    return Panorama(recompose_array(log_reflectance.data, log_shading.data), Domain.SRGB_UNIT)


def recompose_array(log_r: np.ndarray, log_s: np.ndarray) -> np.ndarray:
    return np.clip(np.exp(log_r + log_s), 0.0, 1.0)


def column_shift(angle: float, width: int) -> int:
    turns = math.remainder(angle, 2.0 * math.pi) / (2.0 * math.pi)
    return int(round(turns * width)) % width


def rotate_pano(p, angle: float):
    """Cyclically shift columns by ``round(angle / 2pi * W)``.

    Accepts a :class:`Panorama` or any array whose second axis is the
    panorama width (feature maps, masks); returns the same kind.
    """
    data = p.data if isinstance(p, Panorama) else np.asarray(p)
    shifted = np.roll(data, column_shift(angle, data.shape[1]), axis=1)
    if isinstance(p, Panorama):
        return Panorama(shifted, p.domain)
    return shifted


def luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.2126, 0.7152, 0.0722])


# --- file formats -----------------------------------------------------------


def read_png(path) -> Panorama:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Panorama(arr, Domain.SRGB_UNIT)


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, p) -> None:
    data = p.data if isinstance(p, Panorama) else np.asarray(p)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    Image.fromarray(to_uint8(data), mode="RGB").save(path, optimize=False)


def display_normalize(data: np.ndarray) -> np.ndarray:
    """Per-image min/max stretch to [0, 1]; for previews only."""
    lo, hi = float(data.min()), float(data.max())
    if hi - lo < 1e-12:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def write_float_map(path, data: np.ndarray, domain_tag: str | None = None, **extra) -> None:
    """Write ``path`` (raw f32le, planar, row-major) plus ``path.json``."""
    path = Path(path)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    planar = np.ascontiguousarray(np.moveaxis(arr, 2, 0), dtype="<f4")
    path.write_bytes(planar.tobytes())
    meta = {"width": w, "height": h, "channels": c, "dtype": "f32le", "layout": "planar"}
    if domain_tag is not None:
        meta["domain_tag"] = domain_tag
    meta.update(extra)
    sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_float_map(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(sidecar(path).read_text())
    if meta.get("dtype") != "f32le" or meta.get("layout") != "planar":
        raise ImageError(f"{path}: unsupported float map encoding {meta}")
    c, h, w = meta["channels"], meta["height"], meta["width"]
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != c * h * w:
        raise ImageError(f"{path}: expected {c * h * w} floats, found {raw.size}")
    arr = np.moveaxis(raw.reshape(c, h, w), 0, 2).astype(np.float64)
    return arr, meta


def sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")
