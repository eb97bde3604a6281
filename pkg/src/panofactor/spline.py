"""Cubic B-spline deformation fields on panoramas.

A :class:`WarpGrid` holds an 8 x 32 lattice of (dx, dy) displacements in
pixels.  The dense flow is the tensor-product uniform cubic B-spline through
that lattice; the lattice wraps horizontally and replicates its edge rows
vertically.  Both are linear maps, so the dense flow is ``By @ theta @ Bx.T``
per component and its adjoint is ``By.T @ g @ Bx``.

Warping is backward: the output at ``(y, x)`` samples the source at
``(y + dy, x + dx)``.  A constant flow of ``+k`` columns therefore equals
``rotate_pano`` by ``-k`` columns.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from ._kernels import flow_gradient, sample_bilinear

GRID_ROWS = 8
GRID_COLS = 32


@dataclass(frozen=True, eq=False)
class WarpGrid:
    control: np.ndarray

    def __post_init__(self):
        c = np.array(self.control, dtype=np.float64)
        if c.shape != (GRID_ROWS, GRID_COLS, 2):
            raise ValueError(f"warp grid must be {GRID_ROWS}x{GRID_COLS}x2, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("warp grid contains non-finite displacements")
        c.setflags(write=False)
        object.__setattr__(self, "control", c)

    @classmethod
    def identity(cls) -> "WarpGrid":
        return cls(np.zeros((GRID_ROWS, GRID_COLS, 2)))

    @classmethod
    def uniform(cls, rng: np.random.Generator, amplitude: float) -> "WarpGrid":
        return cls(rng.uniform(-amplitude, amplitude, size=(GRID_ROWS, GRID_COLS, 2)))

    def __eq__(self, other):
        if not isinstance(other, WarpGrid):
            return NotImplemented
        return np.array_equal(self.control, other.control)

    __hash__ = None

    def save(self, path) -> None:
        path = Path(path)
        planar = np.ascontiguousarray(np.moveaxis(self.control, 2, 0), dtype="<f4")
        path.write_bytes(planar.tobytes())
        meta = {"rows": GRID_ROWS, "cols": GRID_COLS, "channels": 2, "dtype": "f32le"}
        path.with_name(path.name + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "WarpGrid":
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        if (meta.get("rows"), meta.get("cols"), meta.get("channels")) != (GRID_ROWS, GRID_COLS, 2):
            raise ValueError(f"{path}: unexpected warp grid header {meta}")
        raw = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
        return cls(np.moveaxis(raw.reshape(2, GRID_ROWS, GRID_COLS), 0, 2))


def cubic_weights(t: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline weights for knots ``i-1 .. i+2`` at offset ``t``."""
    t = np.asarray(t, dtype=np.float64)
    t2, t3 = t * t, t * t * t
    return np.stack(
        [
            (1.0 - t) ** 3 / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ],
        axis=-1,
    )


@lru_cache(maxsize=32)
def _basis(n: int, m: int, periodic: bool) -> np.ndarray:
    spacing = n / m
    u = (np.arange(n) + 0.5) / spacing - 0.5
    i = np.floor(u).astype(int)
    w = cubic_weights(u - i)
    B = np.zeros((n, m))
    rows = np.arange(n)
    for k in range(4):
        idx = i - 1 + k
        idx = idx % m if periodic else np.clip(idx, 0, m - 1)
        np.add.at(B, (rows, idx), w[:, k])
    B.setflags(write=False)
    return B


def basis_matrices(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(By, Bx)`` of shapes (H, 8) and (W, 32)."""
    if height <= 0 or width <= 0:
        raise ValueError(f"flow dimensions must be positive, got {height}x{width}")
    return _basis(height, GRID_ROWS, False), _basis(width, GRID_COLS, True)


def eval_spline(theta, height: int, width: int) -> np.ndarray:
    """Dense H x W x 2 flow (dx, dy) of a warp grid or raw control array."""
    control = theta.control if isinstance(theta, WarpGrid) else np.asarray(theta, dtype=np.float64)
    By, Bx = basis_matrices(height, width)
    return np.stack([By @ control[:, :, k] @ Bx.T for k in range(2)], axis=-1)


def spline_adjoint(flow_grad: np.ndarray) -> np.ndarray:
    """Transpose of :func:`eval_spline`: pull an H x W x 2 gradient onto the grid."""
    h, w = flow_grad.shape[:2]
    By, Bx = basis_matrices(h, w)
    return np.stack([By.T @ flow_grad[:, :, k] @ Bx for k in range(2)], axis=-1)


def _sample(img: np.ndarray, flow: np.ndarray, with_grad: bool):
    img = np.ascontiguousarray(img, dtype=np.float64)
    flow = np.ascontiguousarray(flow, dtype=np.float64)
    out, ddx, ddy = sample_bilinear(img, flow, with_grad)
    return (out, ddx, ddy) if with_grad else out


def warp(p, flow: np.ndarray):
    """Backward bilinear warp with horizontal wrap and vertical clamping."""
    from .image import Panorama

    data = p.data if isinstance(p, Panorama) else np.asarray(p, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != data.shape[:2] + (2,):
        raise ValueError(f"flow shape {flow.shape} does not match image {data.shape[:2]}")
    squeeze = data.ndim == 2
    if squeeze:
        data = data[:, :, None]
    out = _sample(data, flow, False)
    if squeeze:
        out = out[:, :, 0]
    if isinstance(p, Panorama):
        return Panorama(np.clip(out, 0, 1) if p.domain.value == "SRGB_UNIT" else out, p.domain)
    return out


def warp_with_jacobian(img: np.ndarray, flow: np.ndarray):
    """Warped image plus its derivatives w.r.t. the x and y flow components."""
    return _sample(np.asarray(img, dtype=np.float64), flow, True)


def warp_grad(p, theta, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream * warp(p, eval_spline(theta)))`` w.r.t. the grid."""
    from .image import Panorama

    data = p.data if isinstance(p, Panorama) else np.asarray(p, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w = data.shape[:2]
    upstream = np.asarray(upstream, dtype=np.float64).reshape(data.shape)
    _, ddx, ddy = warp_with_jacobian(data, eval_spline(theta, h, w))
    return spline_adjoint(flow_gradient(np.ascontiguousarray(upstream), ddx, ddy))


def invert_flow(flow: np.ndarray, iterations: int = 30) -> np.ndarray:
    """Flow ``g`` with ``warp(warp(img, flow), g) ~ img``.

    Solves ``g(x) = -flow(x + g(x))`` by fixed-point iteration, sampling
    ``flow`` with the same wrap/clamp conventions as :func:`warp`.
    """
    g = -np.asarray(flow, dtype=np.float64)
    for _ in range(iterations):
        g = -_sample(flow, g, False)
    return g
