"""Synthetic corpora on disk: frames, manifest and ground truth.

Layout under the output directory::

    corpus.json                 generator settings, scene seeds, illuminations
    manifest.json               one stack per scene, one frame per time
    frames/<frame>.png          8-bit sRGB panoramas
    truth/<scene>.logR.f32      ground-truth log reflectance (+ .json sidecar)
    truth/<frame>.shading.f32   full log shading of the frame
    truth/<frame>.mask.f32      sun mixing mask
    truth/<frame>.warp.f32      control grid of the applied perturbation
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import partial
from pathlib import Path

from .image import DEFAULT_RESOLUTION, GammaParams, write_float_map, write_png
from .ingest import CaptureRecord, Stack, StackError, StackSkeleton, load_stack, read_manifest, write_manifest
from .parallel import pmap
from .spline import WarpGrid
from .synth import (
    GridCell,
    Illumination,
    SpaceTimeGrid,
    SynthScene,
    grid_factors,
    make_stack,
    scene_geometry,
    shading_for,
)

CORPUS_FILE = "corpus.json"
MANIFEST_FILE = "manifest.json"
BASE_TIMESTAMP = 1_500_000_000.0


def scene_id(r: int) -> str:
    return f"scene-{r:03d}"


def frame_id(r: int, t: int) -> str:
    return f"scene-{r:03d}-t{t:02d}"


def _render_scene(r, scenes, illums, jitter, seed, resolution, gamma):
    stack, warps, _ = make_stack(scenes[r], illums, jitter, seed * 1000 + r, resolution, gamma, stack_id=scene_id(r))
    return stack, warps


def write_synth_corpus(
    out_dir,
    n_scenes: int,
    n_times: int,
    jitter: float = 0.0,
    seed: int = 0,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    gamma: GammaParams = GammaParams(),
    workers: int = 1,
) -> list[Path]:
    """Render an ``n_scenes x n_times`` corpus; returns the written files."""
    if n_scenes < 1 or not 1 <= n_times <= 8:
        raise ValueError(f"need >= 1 scene and 1..8 times, got {n_scenes} and {n_times}")
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    scenes, illums = grid_factors(n_scenes, n_times, seed)
    width, height = resolution
    rendered = pmap(
        partial(_render_scene, scenes=scenes, illums=illums, jitter=jitter, seed=seed, resolution=resolution, gamma=gamma),
        range(n_scenes),
        workers,
    )
    written = []
    skeletons = []
    for r, (stack, warps) in enumerate(rendered):
        records = []
        for t, (frame, grid) in enumerate(zip(stack.frames, warps)):
            fid = frame_id(r, t)
            path = out / "frames" / f"{fid}.png"
            write_png(path, frame)
            shading = shading_for(scenes[r], illums[t], width, height)
            write_float_map(out / "truth" / f"{fid}.shading.f32", shading.full(), "log")
            write_float_map(out / "truth" / f"{fid}.mask.f32", shading.mask, "linear")
            grid.save(out / "truth" / f"{fid}.warp.f32")
            written += [path, out / "truth" / f"{fid}.shading.f32", out / "truth" / f"{fid}.mask.f32", out / "truth" / f"{fid}.warp.f32"]
            # scenes sit a kilometre apart so co-location clustering recovers the stacks
            records.append(CaptureRecord(fid, f"frames/{fid}.png", 0.01 * r, 0.0, 0.0, BASE_TIMESTAMP + 3600.0 * t))
        write_float_map(out / "truth" / f"{scene_id(r)}.logR.f32", scene_geometry(scenes[r], width, height).log_reflectance, "log")
        written.append(out / "truth" / f"{scene_id(r)}.logR.f32")
        skeletons.append(StackSkeleton(scene_id(r), tuple(records)))
    write_manifest(skeletons, out / MANIFEST_FILE)
    meta = {
        "kind": "synthetic-corpus",
        "seed": seed,
        "jitter": jitter,
        "resolution": list(resolution),
        "gamma": {"A": gamma.A, "gamma": gamma.gamma},
        "scenes": [{"stack_id": scene_id(r), "seed": s.seed} for r, s in enumerate(scenes)],
        "illuminations": [il.to_dict() for il in illums],
    }
    (out / CORPUS_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [out / MANIFEST_FILE, out / CORPUS_FILE] + written


@dataclass(frozen=True)
class SynthCorpus:
    root: Path
    scenes: tuple[SynthScene, ...]
    illuminations: tuple[Illumination, ...]
    stacks: tuple[Stack, ...]  # one per scene, frames in time order
    resolution: tuple[int, int]
    gamma: GammaParams
    seed: int
    jitter: float

    def applied_warps(self, r: int) -> tuple[WarpGrid, ...]:
        return tuple(WarpGrid.load(self.root / "truth" / f"{frame_id(r, t)}.warp.f32") for t in range(len(self.illuminations)))

    def to_grid(self) -> SpaceTimeGrid:
        """Loaded frames arranged as a space-time grid (rows are scenes)."""
        width, height = self.resolution
        cells = []
        for r, (scene, stack) in enumerate(zip(self.scenes, self.stacks)):
            logr = scene_geometry(scene, width, height).log_reflectance
            cells.append(
                tuple(
                    GridCell(r, t, stack.frames[t], logr, shading_for(scene, il, width, height))
                    for t, il in enumerate(self.illuminations)
                )
            )
        return SpaceTimeGrid(self.scenes, self.illuminations, tuple(cells), self.resolution, self.seed)


def _illumination(d: dict) -> Illumination:
    return Illumination(d["sun_azimuth"], tuple(d["sun_color"]), tuple(d["sky_color"]), d["sun_intensity"], d["sky_intensity"])


def load_synth_corpus(root) -> SynthCorpus:
    root = Path(root)
    path = root / CORPUS_FILE
    if not path.is_file():
        raise StackError(f"{root}: not a synthetic corpus (missing {CORPUS_FILE})")
    try:
        meta = json.loads(path.read_text())
        resolution = tuple(meta["resolution"])
        gamma = GammaParams(meta["gamma"]["A"], meta["gamma"]["gamma"])
        scenes = tuple(SynthScene.generate(int(s["seed"])) for s in meta["scenes"])
        illums = tuple(_illumination(d) for d in meta["illuminations"])
        ids = [s["stack_id"] for s in meta["scenes"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise StackError(f"{path}: malformed corpus description ({exc})") from None
    skeletons = {s.stack_id: s for s in read_manifest(root / MANIFEST_FILE)}
    stacks = []
    for sid in ids:
        if sid not in skeletons:
            raise StackError(f"{root / MANIFEST_FILE}: stack {sid} missing")
        stacks.append(load_stack(skeletons[sid], resolution, root))
    return SynthCorpus(root, scenes, illums, tuple(stacks), resolution, gamma, int(meta["seed"]), float(meta["jitter"]))
