"""Procedural street scenes rendered with the bi-color shading model.

Every panorama is produced as ``exp(logR + log_intensity + c1*M + c2*(1-M))``
followed by gamma encoding, so the ground-truth factors reproduce the image
up to 8-bit quantization.  ``M`` is the unoccluded Lambert cosine towards the
sun (0 in shadow and on the sky).

World frame: x east, y north, z up.  Yaw 0 looks north (+y) and grows
clockwise towards east, matching the panorama column convention in
:mod:`panofactor.image`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .image import (
    DEFAULT_RESOLUTION,
    GammaParams,
    Panorama,
    check_resolution,
    column_yaw,
    gamma_encode,
    recompose_array,
    row_elevation,
)
from .shading import BiColorShading
from .spline import WarpGrid, eval_spline, warp

CAMERA_HEIGHT = 2.5
STREET_WIDTH = 12.0
SUN_ELEVATION = math.radians(35.0)
SUN_DISK_RADIUS = math.radians(2.5)
SUN_DISK_GAIN = 2.5
GLOW_SIGMA = math.radians(5.0)
GLOW_GAIN = 1.2
SKY_ALBEDO = np.array([0.95, 1.3, 1.75])


@dataclass(frozen=True)
class Box:
    x0: float
    x1: float
    y0: float
    y1: float
    height: float
    albedo: tuple[float, float, float]
    texture_seed: int


@dataclass(frozen=True)
class SynthScene:
    seed: int
    layout: tuple[Box, ...]
    sun_elevation: float = SUN_ELEVATION
    camera_height: float = CAMERA_HEIGHT
    street_width: float = STREET_WIDTH
    decor: bool = True

    def __post_init__(self):
        half = self.street_width / 2.0
        for i, a in enumerate(self.layout):
            if a.x0 < half < a.x1 or a.x0 < -half < a.x1 or (a.x0 < 0 < a.x1 and a.y0 < 0 < a.y1):
                raise ValueError(f"box {i} intrudes on the street")
            for b in self.layout[i + 1 :]:
                if a.x0 < b.x1 and b.x0 < a.x1 and a.y0 < b.y1 and b.y0 < a.y1:
                    raise ValueError("scene boxes overlap")

    @classmethod
    def generate(cls, seed: int, n_boxes: int | None = None) -> "SynthScene":
        """Random street flanked by 6-12 textured buildings."""
        rng = np.random.default_rng([seed, 0x5CE7E])
        if n_boxes is None:
            n_boxes = int(rng.integers(6, 13))
        half = STREET_WIDTH / 2.0
        n_left = n_boxes // 2 + int(rng.integers(0, n_boxes % 2 + 1))
        boxes = []
        for side, count in ((-1.0, n_left), (1.0, n_boxes - n_left)):
            y = -rng.uniform(25.0, 45.0)
            for _ in range(count):
                length = rng.uniform(6.0, 16.0)
                depth = rng.uniform(8.0, 15.0)
                height = rng.uniform(6.0, 20.0)
                base = rng.uniform(0.2, 0.7) * np.array([1.0, 1.0, 1.0]) + rng.uniform(-0.08, 0.08, 3)
                x0, x1 = (half, half + depth) if side > 0 else (-half - depth, -half)
                boxes.append(
                    Box(
                        float(x0),
                        float(x1),
                        float(y),
                        float(y + length),
                        float(height),
                        tuple(float(v) for v in np.clip(base, 0.1, 0.8)),
                        int(rng.integers(0, 2**31 - 1)),
                    )
                )
                y += length + rng.uniform(0.5, 5.0)
        return cls(seed=seed, layout=tuple(boxes))

    @classmethod
    def empty(cls, seed: int = 0) -> "SynthScene":
        """Ground plane only, with azimuth-symmetric ground and sky."""
        return cls(seed=seed, layout=(), decor=False)


@dataclass(frozen=True)
class Illumination:
    sun_azimuth: float
    sun_color: tuple[float, float, float]
    sky_color: tuple[float, float, float]
    sun_intensity: float
    sky_intensity: float

    def __post_init__(self):
        if not (self.sun_intensity > 0 and self.sky_intensity > 0):
            raise ValueError("illumination intensities must be positive")
        if not np.all(np.isfinite(np.r_[self.sun_color, self.sky_color, self.sun_azimuth])):
            raise ValueError("illumination parameters must be finite")

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Illumination":
        warmth = rng.uniform(0.0, 1.0)
        cool = rng.uniform(0.2, 1.0)
        return cls(
            sun_azimuth=float(rng.uniform(-math.pi, math.pi)),
            sun_color=tuple(float(v) for v in warmth * np.array([0.2, 0.05, -0.2])),
            sky_color=tuple(float(v) for v in cool * np.array([-0.15, 0.0, 0.15])),
            sun_intensity=float(rng.uniform(0.4, 0.6)),
            sky_intensity=float(rng.uniform(0.15, 0.3)),
        )

    def rotated(self, delta: float) -> "Illumination":
        az = math.remainder(self.sun_azimuth + delta, 2.0 * math.pi)
        return Illumination(az, self.sun_color, self.sky_color, self.sun_intensity, self.sky_intensity)

    @property
    def c1(self) -> np.ndarray:
        return math.log(self.sun_intensity / self.sky_intensity) + np.asarray(self.sun_color)

    @property
    def c2(self) -> np.ndarray:
        return np.asarray(self.sky_color, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "sun_azimuth": self.sun_azimuth,
            "sun_color": list(self.sun_color),
            "sky_color": list(self.sky_color),
            "sun_intensity": self.sun_intensity,
            "sky_intensity": self.sky_intensity,
        }


# --- procedural texture -----------------------------------------------------


def _hash(ix, iy, iz, seed: int) -> np.ndarray:
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        ^ np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x27D4EB2F165667C5)
    )
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(p: np.ndarray, seed: int) -> np.ndarray:
    """Smooth lattice noise in [0, 1] at points ``p`` (..., 3)."""
    with np.errstate(over="ignore"):
        f = np.floor(p)
        t = p - f
        t = t * t * (3.0 - 2.0 * t)
        i = f.astype(np.int64)
        out = np.zeros(p.shape[:-1])
        for dx in (0, 1):
            wx = t[..., 0] if dx else 1.0 - t[..., 0]
            for dy in (0, 1):
                wy = t[..., 1] if dy else 1.0 - t[..., 1]
                for dz in (0, 1):
                    wz = t[..., 2] if dz else 1.0 - t[..., 2]
                    out += wx * wy * wz * _hash(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed)
    return out


def fbm(p: np.ndarray, seed: int, octaves: int = 3) -> np.ndarray:
    total, amp, norm = np.zeros(p.shape[:-1]), 1.0, 0.0
    for o in range(octaves):
        total += amp * value_noise(p * (2.0**o), seed + 101 * o)
        norm += amp
        amp *= 0.5
    return total / norm


# --- geometry ---------------------------------------------------------------


@lru_cache(maxsize=8)
def pixel_directions(width: int, height: int) -> np.ndarray:
    yaw = column_yaw(width)[None, :]
    el = row_elevation(height)[:, None]
    d = np.stack(
        np.broadcast_arrays(np.cos(el) * np.sin(yaw), np.cos(el) * np.cos(yaw), np.sin(el)), axis=-1
    )
    d.setflags(write=False)
    return d


def sun_direction(azimuth: float, elevation: float) -> np.ndarray:
    return np.array(
        [math.cos(elevation) * math.sin(azimuth), math.cos(elevation) * math.cos(azimuth), math.sin(elevation)]
    )


def _box_arrays(layout):
    lo = np.array([[b.x0, b.y0, 0.0] for b in layout]).reshape(-1, 3)
    hi = np.array([[b.x1, b.y1, b.height] for b in layout]).reshape(-1, 3)
    return lo, hi


def _slab(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Entry/exit distances of rays (N, 3) against boxes (B, 3)."""
    d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / d
    t1 = (lo[None] - origins[:, None]) * inv[:, None]
    t2 = (hi[None] - origins[:, None]) * inv[:, None]
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    return tmin, tmin.max(axis=2), tmax.min(axis=2)


@dataclass(frozen=True, eq=False)
class SceneGeometry:
    """Per-pixel first hits of the camera rays; shared by every frame of a scene."""

    dirs: np.ndarray
    kind: np.ndarray  # -1 sky, 0 ground, k + 1 for box k
    points: np.ndarray
    normals: np.ndarray
    log_reflectance: np.ndarray = field(repr=False)

    @property
    def sky(self) -> np.ndarray:
        return self.kind < 0


_GEOMETRY_CACHE: dict = {}


def scene_geometry(scene: SynthScene, width: int, height: int) -> SceneGeometry:
    key = (scene, width, height)
    geo = _GEOMETRY_CACHE.get(key)
    if geo is None:
        if len(_GEOMETRY_CACHE) > 64:
            _GEOMETRY_CACHE.clear()
        geo = _cast_primary(scene, width, height)
        _GEOMETRY_CACHE[key] = geo
    return geo


def _cast_primary(scene: SynthScene, width: int, height: int) -> SceneGeometry:
    check_resolution(width, height)
    dirs = pixel_directions(width, height).reshape(-1, 3)
    n = dirs.shape[0]
    origin = np.array([0.0, 0.0, scene.camera_height])
    best_t = np.full(n, np.inf)
    kind = np.full(n, -1, dtype=np.int64)
    normals = np.zeros((n, 3))

    down = dirs[:, 2] < 0
    t_ground = np.where(down, scene.camera_height / np.where(down, -dirs[:, 2], 1.0), np.inf)
    best_t = np.minimum(best_t, t_ground)
    kind[np.isfinite(t_ground)] = 0
    normals[np.isfinite(t_ground)] = (0.0, 0.0, 1.0)

    if scene.layout:
        lo, hi = _box_arrays(scene.layout)
        tmin, t_near, t_far = _slab(np.broadcast_to(origin, dirs.shape), dirs, lo, hi)
        hit = (t_near <= t_far) & (t_near > 0)
        t_near = np.where(hit, t_near, np.inf)
        k = t_near.argmin(axis=1)
        tk = t_near[np.arange(n), k]
        closer = tk < best_t
        best_t = np.where(closer, tk, best_t)
        kind[closer] = k[closer] + 1
        axis = tmin[np.arange(n), k].argmax(axis=1)
        face_n = np.zeros((n, 3))
        face_n[np.arange(n), axis] = -np.sign(dirs[np.arange(n), axis])
        normals[closer] = face_n[closer]

    points = origin + dirs * np.where(np.isfinite(best_t), best_t, 0.0)[:, None]
    logr = _reflectance(scene, dirs, kind, points, normals)
    shape = (height, width)
    return SceneGeometry(
        dirs=dirs.reshape(shape + (3,)),
        kind=kind.reshape(shape),
        points=points.reshape(shape + (3,)),
        normals=normals.reshape(shape + (3,)),
        log_reflectance=logr.reshape(shape + (3,)),
    )


def _reflectance(scene, dirs, kind, points, normals) -> np.ndarray:
    n = dirs.shape[0]
    alb = np.zeros((n, 3))
    seed = scene.seed

    sky = kind < 0
    if sky.any():
        d = dirs[sky]
        horizon = 1.0 + 0.35 * (1.0 - np.clip(d[:, 2], 0.0, 1.0)) ** 4
        base = SKY_ALBEDO[None] * horizon[:, None]
        if scene.decor:
            cloud = np.clip((fbm(d * 4.0, seed + 7) - 0.4) * 3.0, 0.0, 1.0)
            base = base * (1.0 - cloud[:, None]) + 1.9 * cloud[:, None]
        alb[sky] = base

    ground = kind == 0
    if ground.any():
        p = points[ground]
        if scene.decor:
            grain = 0.55 + 0.9 * fbm(np.c_[p[:, :2] * 0.9, np.zeros(len(p))], seed + 11)
            walk = np.abs(p[:, 0]) > STREET_WIDTH / 2.0 - 1.5
            tile = (np.mod(p[:, 0], 1.5) < 0.12) | (np.mod(p[:, 1], 1.5) < 0.12)
            g = np.where(walk, np.where(tile, 0.22, 0.42), 0.17) * grain
            dash = (np.abs(p[:, 0]) < 0.15) & (np.mod(p[:, 1], 9.0) < 3.2)
            g = np.where(dash, 0.75, g)
            alb[ground] = g[:, None] * np.array([1.0, 0.98, 0.94])
        else:
            r = np.hypot(p[:, 0], p[:, 1])
            ring = 0.8 + 0.4 * fbm(np.c_[r * 0.8, np.zeros((len(r), 2))], seed + 13)
            alb[ground] = (0.22 * ring)[:, None] * np.array([1.0, 0.98, 0.94])

    for k, box in enumerate(scene.layout):
        sel = kind == k + 1
        if not sel.any():
            continue
        p, nrm = points[sel], normals[sel]
        along = np.where(np.abs(nrm[:, 0]) > 0.5, p[:, 1] - box.y0, p[:, 0] - box.x0)
        z = p[:, 2]
        base = np.asarray(box.albedo)
        grain = 0.8 + 0.4 * fbm(np.c_[along * 1.5, z * 1.5, np.full(len(z), k)], box.texture_seed)
        col = base[None] * grain[:, None]
        floor_band = (np.mod(z - 3.0, 3.2) < 0.25) & (z > 3.0)
        col = np.where(floor_band[:, None], col * 0.6, col)
        window = (z > 3.3) & (np.mod(along - 0.8, 3.0) < 1.4) & (np.mod(z - 3.5, 3.2) < 1.7)
        glass = np.array([0.09, 0.11, 0.14]) * (0.8 + 0.4 * value_noise(np.c_[along, z, z * 0], box.texture_seed + 3))[:, None]
        col = np.where(window[:, None], glass, col)
        shop = z < 2.6
        col = np.where(shop[:, None], col * 0.7, col)
        roof = nrm[:, 2] > 0.5
        col = np.where(roof[:, None], 0.3, col)
        alb[sel] = col
    alb[~sky] = np.clip(alb[~sky], 0.05, 0.95)
    return np.log(alb)


def sun_mask(scene: SynthScene, geometry: SceneGeometry, azimuth: float) -> np.ndarray:
    """Lambert cosine towards the sun times its visibility; 0 on the sky."""
    s = sun_direction(azimuth, scene.sun_elevation)
    h, w = geometry.kind.shape
    pts = geometry.points.reshape(-1, 3)
    nrm = geometry.normals.reshape(-1, 3)
    cosine = np.clip(nrm @ s, 0.0, 1.0)
    surface = geometry.kind.reshape(-1) >= 0
    lit = surface & (cosine > 0)
    if scene.layout and lit.any():
        lo, hi = _box_arrays(scene.layout)
        org = pts[lit] + nrm[lit] * 1e-6
        _, t_near, t_far = _slab(org, np.broadcast_to(s, org.shape), lo, hi)
        blocked = ((t_near <= t_far) & (t_far > 1e-9)).any(axis=1)
        vis = np.ones(pts.shape[0], dtype=bool)
        vis[np.flatnonzero(lit)[blocked]] = False
        lit &= vis
    return np.where(lit, cosine, 0.0).reshape(h, w)


def sky_glow(scene: SynthScene, geometry: SceneGeometry, azimuth: float) -> np.ndarray:
    """Additive log-intensity of the sun disk and its halo on sky pixels."""
    s = sun_direction(azimuth, scene.sun_elevation)
    ang = np.arccos(np.clip(geometry.dirs @ s, -1.0, 1.0))
    glow = GLOW_GAIN * np.exp(-0.5 * (ang / GLOW_SIGMA) ** 2) + SUN_DISK_GAIN * (ang < SUN_DISK_RADIUS)
    return np.where(geometry.sky, glow, 0.0)


def shading_for(scene: SynthScene, illum: Illumination, width: int, height: int) -> BiColorShading:
    geo = scene_geometry(scene, width, height)
    log_int = math.log(illum.sky_intensity) + sky_glow(scene, geo, illum.sun_azimuth)
    return BiColorShading(log_int, illum.c1, illum.c2, sun_mask(scene, geo, illum.sun_azimuth))


def quantize(data: np.ndarray) -> np.ndarray:
    return np.round(np.clip(data, 0.0, 1.0) * 255.0) / 255.0


def render(
    scene: SynthScene,
    illum: Illumination,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    gamma: GammaParams = GammaParams(),
    quantized: bool = True,
):
    """Render one panorama; returns ``(pano, log_reflectance, shading)``."""
    width, height = resolution
    geo = scene_geometry(scene, width, height)
    shading = shading_for(scene, illum, width, height)
    linear = recompose_array(geo.log_reflectance, shading.full())
    pano = gamma_encode(Panorama(linear), gamma)
    if quantized:
        pano = Panorama(quantize(pano.data))
    return pano, geo.log_reflectance.copy(), shading


def make_stack(
    scene: SynthScene,
    illuminations,
    warp_jitter: float = 0.0,
    seed: int = 0,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    gamma: GammaParams = GammaParams(),
    stack_id: str = "synth",
):
    """Render one frame per illumination and perturb each with a random spline warp.

    Returns ``(stack, warps, illuminations)``; ``warps[i]`` is the grid whose
    flow was applied to frame ``i`` (so aligning means undoing it).
    """
    from .ingest import Stack

    illuminations = tuple(illuminations)
    if not 1 <= len(illuminations) <= 8:
        raise ValueError(f"a stack holds 1..8 frames, got {len(illuminations)}")
    if not warp_jitter >= 0:
        raise ValueError(f"warp jitter must be non-negative, got {warp_jitter}")
    width, height = resolution
    rng = np.random.default_rng([seed, 0x57AC])
    frames, warps = [], []
    for illum in illuminations:
        pano, _, _ = render(scene, illum, resolution, gamma, quantized=False)
        grid = WarpGrid.uniform(rng, warp_jitter) if warp_jitter > 0 else WarpGrid.identity()
        data = pano.data
        if warp_jitter > 0:
            data = warp(data, eval_spline(grid.control, height, width))
        frames.append(Panorama(quantize(data)))
        warps.append(grid)
    return Stack(stack_id, tuple(frames)), tuple(warps), illuminations


def random_illuminations(rng: np.random.Generator, n: int) -> tuple[Illumination, ...]:
    return tuple(Illumination.random(rng) for _ in range(n))


@dataclass(frozen=True)
class GridCell:
    scene_index: int
    time_index: int
    pano: Panorama
    log_reflectance: np.ndarray
    shading: BiColorShading


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Rows are scenes (places), columns are shared illuminations (times)."""

    scenes: tuple[SynthScene, ...]
    illuminations: tuple[Illumination, ...]
    cells: tuple[tuple[GridCell, ...], ...]
    resolution: tuple[int, int]
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.scenes), len(self.illuminations)

    def cell(self, row: int, col: int) -> GridCell:
        return self.cells[row][col]


def spacetime_grid(
    n_scenes: int,
    n_times: int,
    seed: int = 0,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    gamma: GammaParams = GammaParams(),
) -> SpaceTimeGrid:
    if n_scenes < 2 or n_times < 2:
        raise ValueError(f"grid needs at least 2x2 cells, got {n_scenes}x{n_times}")
    check_resolution(*resolution)
    scenes, illums = grid_factors(n_scenes, n_times, seed)
    return build_grid(scenes, illums, resolution, gamma, seed)


def grid_factors(n_scenes: int, n_times: int, seed: int = 0):
    """Scenes and shared illuminations of a grid, drawn in a fixed order from ``seed``."""
    rng = np.random.default_rng([seed, 0x6121D])
    scene_seeds = rng.integers(0, 2**31 - 1, n_scenes)
    scenes = tuple(SynthScene.generate(int(s)) for s in scene_seeds)
    return scenes, random_illuminations(rng, n_times)


def build_grid(scenes, illuminations, resolution=DEFAULT_RESOLUTION, gamma: GammaParams = GammaParams(), seed: int = 0) -> SpaceTimeGrid:
    """Render every (scene, illumination) pair."""
    scenes, illums = tuple(scenes), tuple(illuminations)
    if len(scenes) < 2 or len(illums) < 2:
        raise ValueError(f"grid needs at least 2x2 cells, got {len(scenes)}x{len(illums)}")
    cells = tuple(
        tuple(GridCell(r, c, *render(scenes[r], illums[c], resolution, gamma)) for c in range(len(illums)))
        for r in range(len(scenes))
    )
    return SpaceTimeGrid(scenes, illums, cells, tuple(resolution), seed)


def sun_visible(scene: SynthScene, azimuth: float, resolution=DEFAULT_RESOLUTION) -> bool:
    """True when some pixel of the sun disk is sky in the rendered panorama."""
    geo = scene_geometry(scene, *resolution)
    s = sun_direction(azimuth, scene.sun_elevation)
    ang = np.arccos(np.clip(geo.dirs @ s, -1.0, 1.0))
    return bool((geo.sky & (ang < SUN_DISK_RADIUS)).any())
