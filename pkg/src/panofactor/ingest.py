"""Capture manifests, greedy co-location clustering and stack loading."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import Panorama, check_resolution, read_png, rotate_pano
from .spline import WarpGrid

MAX_STACK = 8
DEFAULT_RADIUS_M = 0.4
EARTH_RADIUS_M = 6_371_000.0


class StackError(ValueError):
    """Bad manifest content or an unloadable frame."""


@dataclass(frozen=True)
class CaptureRecord:
    id: str
    path: str
    lat: float
    lon: float
    heading: float  # degrees
    timestamp: float  # UTC seconds

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise StackError(f"capture id must be a non-empty string, got {self.id!r}")
        for name in ("lat", "lon", "heading", "timestamp"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise StackError(f"{self.id}: {name} must be a finite number, got {v!r}")
        if not -90.0 <= self.lat <= 90.0:
            raise StackError(f"{self.id}: latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise StackError(f"{self.id}: longitude {self.lon} outside [-180, 180]")
        if not self.timestamp > 0:
            raise StackError(f"{self.id}: timestamp must be positive, got {self.timestamp}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "lat": self.lat,
            "lon": self.lon,
            "heading_deg": self.heading,
            "timestamp_utc": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj) -> "CaptureRecord":
        if not isinstance(obj, dict):
            raise StackError(f"frame entry must be an object, got {type(obj).__name__}")
        keys = {"id", "path", "lat", "lon", "heading_deg", "timestamp_utc"}
        missing = keys - obj.keys()
        if missing:
            raise StackError(f"frame {obj.get('id', '?')}: missing fields {sorted(missing)}")
        if not isinstance(obj["path"], str):
            raise StackError(f"frame {obj['id']}: path must be a string")
        return cls(obj["id"], obj["path"], obj["lat"], obj["lon"], obj["heading_deg"], obj["timestamp_utc"])


@dataclass(frozen=True)
class StackSkeleton:
    stack_id: str
    records: tuple[CaptureRecord, ...]

    @property
    def singleton(self) -> bool:
        return len(self.records) == 1


@dataclass(frozen=True, eq=False)
class Stack:
    stack_id: str
    frames: tuple[Panorama, ...]
    records: tuple[CaptureRecord, ...] = ()
    warps: tuple[WarpGrid, ...] | None = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if not 1 <= len(frames) <= MAX_STACK:
            raise StackError(f"{self.stack_id}: a stack holds 1..{MAX_STACK} frames, got {len(frames)}")
        if len({f.shape for f in frames}) != 1:
            raise StackError(f"{self.stack_id}: frames differ in size")
        if self.records and len(self.records) != len(frames):
            raise StackError(f"{self.stack_id}: {len(self.records)} records for {len(frames)} frames")
        if self.warps is not None and len(self.warps) != len(frames):
            raise StackError(f"{self.stack_id}: {len(self.warps)} warps for {len(frames)} frames")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "records", tuple(self.records))
        if self.warps is not None:
            object.__setattr__(self, "warps", tuple(self.warps))

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape

    def array(self) -> np.ndarray:
        """Frames stacked as an (N, H, W, 3) array."""
        return np.stack([f.data for f in self.frames])

    def subset(self, indices, stack_id: str | None = None) -> "Stack":
        idx = list(indices)
        return Stack(
            stack_id or self.stack_id,
            tuple(self.frames[i] for i in idx),
            tuple(self.records[i] for i in idx) if self.records else (),
            tuple(self.warps[i] for i in idx) if self.warps is not None else None,
        )


def haversine_m(lat1, lon1, lat2, lon2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def greedy_cluster(records, radius: float = DEFAULT_RADIUS_M) -> list[StackSkeleton]:
    """Partition records into stacks of at most eight co-located captures.

    Records are visited in input order.  Each unassigned record seeds a stack
    and absorbs later unassigned records lying within ``radius`` metres of
    every member already in the stack, until the stack holds eight.
    """
    if not radius > 0:
        raise StackError(f"cluster radius must be positive, got {radius}")
    records = list(records)
    assigned = [False] * len(records)
    out = []
    for i, seed in enumerate(records):
        if assigned[i]:
            continue
        assigned[i] = True
        members = [seed]
        for j in range(i + 1, len(records)):
            if len(members) == MAX_STACK:
                break
            if assigned[j]:
                continue
            cand = records[j]
            if all(haversine_m(m.lat, m.lon, cand.lat, cand.lon) <= radius for m in members):
                members.append(cand)
                assigned[j] = True
        out.append(StackSkeleton(f"stack-{len(out):05d}", tuple(members)))
    return out


# --- manifest ----------------------------------------------------------------


def manifest_json(stacks) -> dict:
    return {
        "stacks": [
            {"stack_id": s.stack_id, "frames": [r.to_json() for r in s.records]} for s in stacks
        ]
    }


def write_manifest(stacks, path) -> None:
    Path(path).write_text(json.dumps(manifest_json(stacks), indent=2) + "\n")


def parse_manifest(obj) -> list[StackSkeleton]:
    if not isinstance(obj, dict) or not isinstance(obj.get("stacks"), list):
        raise StackError('manifest must be an object with a "stacks" list')
    out = []
    seen = set()
    for entry in obj["stacks"]:
        if not isinstance(entry, dict) or not isinstance(entry.get("stack_id"), str):
            raise StackError("every stack needs a string stack_id")
        if entry["stack_id"] in seen:
            raise StackError(f"duplicate stack_id {entry['stack_id']}")
        seen.add(entry["stack_id"])
        frames = entry.get("frames")
        if not isinstance(frames, list) or not 1 <= len(frames) <= MAX_STACK:
            raise StackError(f"{entry['stack_id']}: frames must be a list of 1..{MAX_STACK} entries")
        out.append(StackSkeleton(entry["stack_id"], tuple(CaptureRecord.from_json(f) for f in frames)))
    return out


def read_manifest(path) -> list[StackSkeleton]:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StackError(f"{path}: malformed JSON ({exc})") from None
    return parse_manifest(obj)


def find_stack(skeletons, stack_id: str) -> StackSkeleton:
    for s in skeletons:
        if s.stack_id == stack_id:
            return s
    raise StackError(f"no stack with id {stack_id!r} in manifest")


# --- loading -----------------------------------------------------------------


def _area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells over each output cell."""
    if n_out == n_in:
        return np.eye(n_in)
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    A = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = edges_out[o], edges_out[o + 1]
        for i in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            A[o, i] = min(hi, i + 1) - max(lo, i)
    return A / A.sum(axis=1, keepdims=True)


def resample_area(data: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = data.shape[:2]
    if (w, h) == (width, height):
        return data
    Ay, Ax = _area_matrix(height, h), _area_matrix(width, w)
    return np.einsum("yi,ijc,xj->yxc", Ay, data, Ax)


def load_stack(skeleton: StackSkeleton, resolution, base_dir=".") -> Stack:
    """Decode, resample and heading-normalise every frame of a skeleton."""
    width, height = resolution
    check_resolution(width, height)
    frames = []
    for rec in skeleton.records:
        path = Path(base_dir) / rec.path
        if not path.is_file():
            raise StackError(f"frame {rec.id}: missing file {path}")
        try:
            pano = read_png(path)
        except Exception as exc:  # PIL raises several unrelated types
            raise StackError(f"frame {rec.id}: cannot decode {path} ({exc})") from None
        h, w = pano.height, pano.width
        if w != 3 * h:
            raise StackError(f"frame {rec.id}: {w}x{h} is not a 3:1 panorama")
        data = np.clip(resample_area(pano.data, width, height), 0.0, 1.0)
        frames.append(rotate_pano(Panorama(data), math.radians(rec.heading)))
    return Stack(skeleton.stack_id, tuple(frames), skeleton.records)
